//! Forward and reverse-mode passes through a [`NetworkSpec`].

use rand::Rng;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::activation::Activation;
use super::loss::{self, CrossEntropy};
use super::params::{Direction, ParamEntry, ParamVector, Role};
use super::spec::{LayerSpec, NetworkSpec};

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug, Clone)]
enum Slots {
    Dense { weight: usize, bias: Option<usize>, inputs: usize, outputs: usize },
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    Activation(Activation),
    Flatten,
}

#[derive(Debug, Clone)]
enum Cache {
    Dense { input: Tensor },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64>, stats: Option<(Vec<f64>, Vec<f64>)> },
    Activation { input: Tensor },
    Flatten,
}

/// Result of a forward pass, holding what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    caches: Vec<Cache>,
    mode: Mode,
}

/// Loss value with gradients of the mean loss.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: CrossEntropy,
    pub params: Direction,
    pub inputs: Tensor,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    classes: usize,
    slots: Vec<Slots>,
    num_entries: usize,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let classes = spec.validate()?;
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        for layer in &spec.layers {
            slots.push(match *layer {
                LayerSpec::Dense { inputs, outputs, bias } => Slots::Dense {
                    weight: take(),
                    bias: bias.then(&mut take),
                    inputs,
                    outputs,
                },
                LayerSpec::BatchNorm { .. } => {
                    Slots::BatchNorm { gamma: take(), beta: take(), mean: take(), var: take() }
                }
                LayerSpec::Activation { function } => Slots::Activation(function),
                LayerSpec::Flatten => Slots::Flatten,
            });
        }
        Ok(Self { spec, classes, slots, num_entries: next })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases,
    /// identity batch normalization.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let mut entries = Vec::with_capacity(self.num_entries);
        for (layer, (slot, spec)) in self.slots.iter().zip(&self.spec.layers).enumerate() {
            match (slot, spec) {
                (Slots::Dense { inputs, outputs, bias, .. }, _) => {
                    let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                    let data = (0..inputs * outputs).map(|_| rng.random_range(-bound..=bound)).collect();
                    entries.push(ParamEntry {
                        layer,
                        role: Role::Weight,
                        value: Tensor::new(vec![*outputs, *inputs], data).expect("sized"),
                    });
                    if bias.is_some() {
                        entries.push(ParamEntry { layer, role: Role::Bias, value: Tensor::zeros(vec![*outputs]) });
                    }
                }
                (Slots::BatchNorm { .. }, LayerSpec::BatchNorm { features }) => {
                    let f = *features;
                    entries.push(ParamEntry { layer, role: Role::BnGamma, value: Tensor::full(vec![f], 1.0) });
                    entries.push(ParamEntry { layer, role: Role::BnBeta, value: Tensor::zeros(vec![f]) });
                    entries.push(ParamEntry { layer, role: Role::BnRunningMean, value: Tensor::zeros(vec![f]) });
                    entries.push(ParamEntry { layer, role: Role::BnRunningVar, value: Tensor::full(vec![f], 1.0) });
                }
                _ => {}
            }
        }
        ParamVector::new(entries)
    }

    /// Checks that `params` has the layout this network expects.
    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        let fresh = self.init_params(&mut crate::rng::seeded(0));
        if !fresh.same_layout(params) {
            return Err(Error::Partition("parameters do not match the network spec".into()));
        }
        if params
            .entries()
            .iter()
            .filter(|e| e.role == Role::BnRunningVar)
            .any(|e| e.value.data().iter().any(|v| !(*v > 0.0)))
        {
            return Err(Error::Partition("batch-norm running variance must be positive".into()));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamVector, inputs: &Tensor, mode: Mode) -> Result<Forward> {
        if params.len() != self.num_entries {
            return Err(Error::Partition(format!(
                "expected {} parameter entries, got {}",
                self.num_entries,
                params.len()
            )));
        }
        if inputs.shape().len() != 2 || inputs.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "inputs {:?} for a network with input_dim {}",
                inputs.shape(),
                self.spec.input_dim
            )));
        }
        let e = params.entries();
        let n = inputs.rows();
        let mut x = match &self.spec.input_norm {
            Some(norm) => {
                let mut x = inputs.clone();
                for r in 0..n {
                    for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                        *v = (*v - norm.mean[j]) / norm.std[j];
                    }
                }
                x
            }
            None => inputs.clone(),
        };
        let mut caches = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            match *slot {
                Slots::Dense { weight, bias, inputs: fan_in, outputs } => {
                    let w = e[weight].value.data();
                    let b = bias.map(|i| e[i].value.data());
                    let mut out = Tensor::zeros(vec![n, outputs]);
                    for r in 0..n {
                        let xr = x.row(r);
                        let yr = out.row_mut(r);
                        for o in 0..outputs {
                            let wr = &w[o * fan_in..(o + 1) * fan_in];
                            let mut acc = b.map_or(0.0, |b| b[o]);
                            for (xi, wi) in xr.iter().zip(wr) {
                                acc += xi * wi;
                            }
                            yr[o] = acc;
                        }
                    }
                    caches.push(Cache::Dense { input: std::mem::replace(&mut x, out) });
                }
                Slots::BatchNorm { gamma, beta, mean, var } => {
                    let f = x.cols();
                    let (mu, sigma2, stats) = match mode {
                        Mode::Train => {
                            let mut mu = vec![0.0; f];
                            for r in 0..n {
                                for (m, v) in mu.iter_mut().zip(x.row(r)) {
                                    *m += v;
                                }
                            }
                            mu.iter_mut().for_each(|m| *m /= n as f64);
                            let mut var = vec![0.0; f];
                            for r in 0..n {
                                for j in 0..f {
                                    let d = x.row(r)[j] - mu[j];
                                    var[j] += d * d;
                                }
                            }
                            var.iter_mut().for_each(|v| *v /= n as f64);
                            (mu.clone(), var.clone(), Some((mu, var)))
                        }
                        Mode::Eval => (e[mean].value.data().to_vec(), e[var].value.data().to_vec(), None),
                    };
                    let inv_std: Vec<f64> = sigma2.iter().map(|v| 1.0 / (v + self.spec.bn_eps).sqrt()).collect();
                    let g = e[gamma].value.data();
                    let bta = e[beta].value.data();
                    let mut xhat = x;
                    let mut out = Tensor::zeros(xhat.shape().to_vec());
                    for r in 0..n {
                        let hr = xhat.row_mut(r);
                        for j in 0..f {
                            hr[j] = (hr[j] - mu[j]) * inv_std[j];
                        }
                        let hr = xhat.row(r);
                        let yr = out.row_mut(r);
                        for j in 0..f {
                            yr[j] = g[j] * hr[j] + bta[j];
                        }
                    }
                    caches.push(Cache::BatchNorm { xhat, inv_std, stats });
                    x = out;
                }
                Slots::Activation(act) => {
                    let out = x.map(|v| act.eval(v));
                    caches.push(Cache::Activation { input: std::mem::replace(&mut x, out) });
                }
                Slots::Flatten => caches.push(Cache::Flatten),
            }
        }
        x.check_finite("forward activations")?;
        Ok(Forward { logits: x, caches, mode })
    }

    /// Reverse pass: gradients with respect to every parameter entry and to the inputs,
    /// given the gradient of the loss with respect to the logits.
    pub fn backward(&self, params: &ParamVector, fwd: &Forward, dlogits: &Tensor) -> Result<(Direction, Tensor)> {
        if dlogits.shape() != fwd.logits.shape() {
            return Err(Error::Shape("logit gradient does not match logits".into()));
        }
        let e = params.entries();
        let mut grads = params.zeros_direction();
        let mut dy = dlogits.clone();
        for (slot, cache) in self.slots.iter().zip(&fwd.caches).rev() {
            match (slot, cache) {
                (Slots::Dense { weight, bias, inputs: fan_in, outputs }, Cache::Dense { input }) => {
                    let n = input.rows();
                    let w = e[*weight].value.data();
                    let mut dx = Tensor::zeros(input.shape().to_vec());
                    {
                        let gw = grads.parts_mut()[*weight].data_mut();
                        for r in 0..n {
                            let xr = input.row(r);
                            let dyr = dy.row(r);
                            for o in 0..*outputs {
                                let d = dyr[o];
                                if d == 0.0 {
                                    continue;
                                }
                                let gr = &mut gw[o * fan_in..(o + 1) * fan_in];
                                for (g, xi) in gr.iter_mut().zip(xr) {
                                    *g += d * xi;
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let gb = grads.parts_mut()[*b].data_mut();
                        for r in 0..n {
                            for (g, d) in gb.iter_mut().zip(dy.row(r)) {
                                *g += d;
                            }
                        }
                    }
                    for r in 0..n {
                        let dyr = dy.row(r).to_vec();
                        let dxr = dx.row_mut(r);
                        for (o, d) in dyr.iter().enumerate() {
                            if *d == 0.0 {
                                continue;
                            }
                            let wr = &w[o * fan_in..(o + 1) * fan_in];
                            for (g, wi) in dxr.iter_mut().zip(wr) {
                                *g += d * wi;
                            }
                        }
                    }
                    dy = dx;
                }
                (Slots::BatchNorm { gamma, beta, .. }, Cache::BatchNorm { xhat, inv_std, .. }) => {
                    let n = xhat.rows();
                    let f = xhat.cols();
                    let g = e[*gamma].value.data();
                    let mut dgamma = vec![0.0; f];
                    let mut dbeta = vec![0.0; f];
                    for r in 0..n {
                        for j in 0..f {
                            dgamma[j] += dy.row(r)[j] * xhat.row(r)[j];
                            dbeta[j] += dy.row(r)[j];
                        }
                    }
                    grads.parts_mut()[*gamma].data_mut().copy_from_slice(&dgamma);
                    grads.parts_mut()[*beta].data_mut().copy_from_slice(&dbeta);
                    let mut dx = Tensor::zeros(xhat.shape().to_vec());
                    match fwd.mode {
                        Mode::Eval => {
                            for r in 0..n {
                                let dyr = dy.row(r).to_vec();
                                for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                                    *v = dyr[j] * g[j] * inv_std[j];
                                }
                            }
                        }
                        Mode::Train => {
                            // dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                            let nf = n as f64;
                            let mut sum_d = vec![0.0; f];
                            let mut sum_dx = vec![0.0; f];
                            for r in 0..n {
                                for j in 0..f {
                                    let d = dy.row(r)[j] * g[j];
                                    sum_d[j] += d;
                                    sum_dx[j] += d * xhat.row(r)[j];
                                }
                            }
                            for r in 0..n {
                                let dyr = dy.row(r).to_vec();
                                let hr = xhat.row(r).to_vec();
                                for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                                    let d = dyr[j] * g[j];
                                    *v = inv_std[j] / nf * (nf * d - sum_d[j] - hr[j] * sum_dx[j]);
                                }
                            }
                        }
                    }
                    dy = dx;
                }
                (Slots::Activation(act), Cache::Activation { input }) => {
                    for (d, x) in dy.data_mut().iter_mut().zip(input.data()) {
                        *d *= act.derivative(*x);
                    }
                }
                (Slots::Flatten, Cache::Flatten) => {}
                _ => unreachable!("cache does not match layer"),
            }
        }
        if let Some(norm) = &self.spec.input_norm {
            for r in 0..dy.rows() {
                for (j, v) in dy.row_mut(r).iter_mut().enumerate() {
                    *v /= norm.std[j];
                }
            }
        }
        if !grads.is_finite() || !dy.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((grads, dy))
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    pub fn update_running_stats(&self, params: &mut ParamVector, fwd: &Forward) {
        let m = self.spec.bn_momentum;
        for (slot, cache) in self.slots.iter().zip(&fwd.caches) {
            if let (Slots::BatchNorm { mean, var, .. }, Cache::BatchNorm { xhat, stats: Some((mu, v)), .. }) =
                (slot, cache)
            {
                let n = xhat.rows() as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let entries = params.entries_mut();
                for (r, b) in entries[*mean].value.data_mut().iter_mut().zip(mu) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in entries[*var].value.data_mut().iter_mut().zip(v) {
                    *r = (1.0 - m) * *r + m * b * unbias;
                }
            }
        }
    }

    /// Train-mode forward pass that also updates the running statistics.
    pub fn forward_train(&self, params: &mut ParamVector, inputs: &Tensor) -> Result<Forward> {
        let fwd = self.forward(params, inputs, Mode::Train)?;
        self.update_running_stats(params, &fwd);
        Ok(fwd)
    }

    pub fn logits(&self, params: &ParamVector, inputs: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(params, inputs, mode)?.logits)
    }

    pub fn predict(&self, params: &ParamVector, inputs: &Tensor, mode: Mode) -> Result<Vec<usize>> {
        let logits = self.logits(params, inputs, mode)?;
        Ok((0..logits.rows()).map(|r| loss::argmax(logits.row(r))).collect())
    }

    /// Mean cross-entropy and its exact gradients.
    pub fn loss_grads(&self, params: &ParamVector, batch: &Batch, mode: Mode) -> Result<LossGrads> {
        let fwd = self.forward(params, &batch.inputs, mode)?;
        let ce = loss::cross_entropy(&fwd.logits, &batch.labels)?;
        let dl = loss::cross_entropy_grad(&fwd.logits, &batch.labels, 1.0 / batch.len() as f64)?;
        let (params, inputs) = self.backward(params, &fwd, &dl)?;
        Ok(LossGrads { loss: ce, params, inputs })
    }

    pub fn grad_params(&self, params: &ParamVector, batch: &Batch, mode: Mode) -> Result<Direction> {
        Ok(self.loss_grads(params, batch, mode)?.params)
    }

    pub fn grad_inputs(&self, params: &ParamVector, batch: &Batch, mode: Mode) -> Result<Tensor> {
        Ok(self.loss_grads(params, batch, mode)?.inputs)
    }

    pub fn cross_entropy(&self, params: &ParamVector, batch: &Batch, mode: Mode) -> Result<CrossEntropy> {
        let logits = self.logits(params, &batch.inputs, mode)?;
        loss::cross_entropy(&logits, &batch.labels)
    }
}
