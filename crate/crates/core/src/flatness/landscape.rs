use crate::attacks::{self, AttackConfig};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::hessian::GradientSource;
use crate::nn::{loss, Direction, Mode, Model, Network, ParamVector};
use crate::rng;
use crate::tensor::Tensor;

/// Loss and gradients at one `(weights, inputs)` point of a batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: Vec<f64>,
    /// Gradient of the batch-mean loss.
    pub grad_weights: Direction,
    /// Gradient of the summed loss, one row per example.
    pub grad_inputs: Tensor,
}

/// A loss surface over weights, optionally with an inner maximization over
/// inputs, split into batches.
///
/// `initial_inputs(b, seed, r)` must be the start that `inner_max(.., b, seed)`
/// uses for its restart `r` (modulo its restart count), and `step_inputs` must
/// be its ascent step. Under that contract a joint ascent with the weights held
/// fixed retraces the inner maximization exactly.
pub trait Landscape: Sync {
    fn num_batches(&self) -> usize;
    fn inner_max(&self, weights: &ParamVector, batch: usize, seed: u64) -> Result<Vec<f64>>;
    fn initial_inputs(&self, batch: usize, seed: u64, restart: usize) -> Tensor;
    fn evaluate(&self, weights: &ParamVector, batch: usize, inputs: &Tensor) -> Result<Evaluation>;
    fn step_inputs(&self, batch: usize, inputs: &mut Tensor, grad: &Tensor);
}

/// Cross-entropy of a network on fixed data, in eval mode; with an attack the
/// per-example loss is the best-of-restarts PGD loss.
#[derive(Debug, Clone)]
pub struct NetworkObjective<'a> {
    net: &'a Network,
    batches: Vec<Batch>,
    attack: Option<AttackConfig>,
}

impl<'a> NetworkObjective<'a> {
    pub fn new(net: &'a Network, batches: Vec<Batch>, attack: Option<AttackConfig>) -> Self {
        Self { net, batches, attack }
    }

    pub fn robust(net: &'a Network, batches: Vec<Batch>, attack: AttackConfig) -> Self {
        Self::new(net, batches, Some(attack))
    }

    pub fn clean(net: &'a Network, batches: Vec<Batch>) -> Self {
        Self::new(net, batches, None)
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn attack(&self) -> Option<&AttackConfig> {
        self.attack.as_ref()
    }

    fn model<'p>(&self, weights: &'p ParamVector) -> Model<'p>
    where
        'a: 'p,
    {
        Model::new(self.net, weights, Mode::Eval)
    }
}

impl Landscape for NetworkObjective<'_> {
    fn num_batches(&self) -> usize {
        self.batches.len()
    }

    fn inner_max(&self, weights: &ParamVector, batch: usize, seed: u64) -> Result<Vec<f64>> {
        let data = &self.batches[batch];
        let model = self.model(weights);
        match &self.attack {
            Some(cfg) => Ok(attacks::best_of_restarts(&model, data, cfg, &mut rng::seeded(seed))?.losses),
            None => Ok(model.clean_loss(data)?.per_example),
        }
    }

    fn initial_inputs(&self, batch: usize, seed: u64, restart: usize) -> Tensor {
        let clean = &self.batches[batch].inputs;
        match &self.attack {
            Some(cfg) => {
                let r = restart % cfg.restarts.max(1);
                attacks::restart_starts(clean, cfg, r + 1, &mut rng::seeded(seed)).pop().expect("r + 1 starts")
            }
            None => clean.clone(),
        }
    }

    fn evaluate(&self, weights: &ParamVector, batch: usize, inputs: &Tensor) -> Result<Evaluation> {
        let labels = &self.batches[batch].labels;
        let fwd = self.net.forward(weights, inputs, Mode::Eval)?;
        let ce = loss::cross_entropy(&fwd.logits, labels)?;
        let dl = loss::cross_entropy_grad(&fwd.logits, labels, 1.0)?;
        let (mut grad_weights, grad_inputs) = self.net.backward(weights, &fwd, &dl)?;
        grad_weights.scale(1.0 / labels.len() as f64);
        Ok(Evaluation { losses: ce.per_example, grad_weights, grad_inputs })
    }

    fn step_inputs(&self, batch: usize, inputs: &mut Tensor, grad: &Tensor) {
        if let Some(cfg) = &self.attack {
            attacks::ascent_step(inputs, &self.batches[batch].inputs, grad, cfg, None);
        }
    }
}

/// Gradient of the clean mean loss over all batches, weighted by batch size.
impl GradientSource for NetworkObjective<'_> {
    fn gradient(&self, weights: &ParamVector) -> Result<Direction> {
        let total: usize = self.batches.iter().map(Batch::len).sum();
        if total == 0 {
            return Err(Error::Dataset("no data for the gradient".into()));
        }
        let mut acc = weights.zeros_direction();
        for b in &self.batches {
            let g = self.net.grad_params(weights, b, Mode::Eval)?;
            acc.axpy(b.len() as f64 / total as f64, &g);
        }
        Ok(acc)
    }
}

/// `L(w) = sum_i a_i (w_i - c_i)^2` over the flattened weights, with no inputs.
/// A closed-form test surface for the flatness estimators.
#[derive(Debug, Clone)]
pub struct QuadraticBowl {
    pub center: ParamVector,
    pub curvature: Vec<f64>,
}

impl QuadraticBowl {
    pub fn new(center: ParamVector, curvature: Vec<f64>) -> Result<Self> {
        if center.num_values() != curvature.len() {
            return Err(Error::Shape(format!(
                "{} curvatures for {} weights",
                curvature.len(),
                center.num_values()
            )));
        }
        Ok(Self { center, curvature })
    }

    pub fn loss(&self, weights: &ParamVector) -> f64 {
        let w = weights.flat();
        let c = self.center.flat();
        w.iter().zip(&c).zip(&self.curvature).map(|((w, c), a)| a * (w - c) * (w - c)).sum()
    }

    fn grad(&self, weights: &ParamVector) -> Direction {
        let w = weights.flat();
        let c = self.center.flat();
        let mut out = weights.zeros_direction();
        let mut k = 0;
        for p in out.parts_mut() {
            for x in p.data_mut() {
                *x = 2.0 * self.curvature[k] * (w[k] - c[k]);
                k += 1;
            }
        }
        out
    }
}

impl Landscape for QuadraticBowl {
    fn num_batches(&self) -> usize {
        1
    }

    fn inner_max(&self, weights: &ParamVector, _batch: usize, _seed: u64) -> Result<Vec<f64>> {
        Ok(vec![self.loss(weights)])
    }

    fn initial_inputs(&self, _batch: usize, _seed: u64, _restart: usize) -> Tensor {
        Tensor::zeros(vec![1, 0])
    }

    fn evaluate(&self, weights: &ParamVector, _batch: usize, _inputs: &Tensor) -> Result<Evaluation> {
        Ok(Evaluation { losses: vec![self.loss(weights)], grad_weights: self.grad(weights), grad_inputs: Tensor::zeros(vec![1, 0]) })
    }

    fn step_inputs(&self, _batch: usize, _inputs: &mut Tensor, _grad: &Tensor) {}
}

impl GradientSource for QuadraticBowl {
    fn gradient(&self, weights: &ParamVector) -> Result<Direction> {
        Ok(self.grad(weights))
    }
}
