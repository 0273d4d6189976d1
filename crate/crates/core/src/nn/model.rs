use crate::batch::Batch;
use crate::error::Result;
use crate::tensor::Tensor;

use super::loss::{self, CrossEntropy};
use super::network::{Mode, Network};
use super::params::ParamVector;

/// A network evaluated at fixed parameters in a fixed batch-norm mode.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub net: &'a Network,
    pub params: &'a ParamVector,
    pub mode: Mode,
}

/// Per-example cross-entropy at some inputs, with the gradient of the summed
/// loss with respect to those inputs.
#[derive(Debug, Clone)]
pub struct InputGrad {
    pub losses: Vec<f64>,
    pub predictions: Vec<usize>,
    pub grad: Tensor,
}

impl<'a> Model<'a> {
    pub fn new(net: &'a Network, params: &'a ParamVector, mode: Mode) -> Self {
        Self { net, params, mode }
    }

    pub fn eval(net: &'a Network, params: &'a ParamVector) -> Self {
        Self::new(net, params, Mode::Eval)
    }

    pub fn with_params<'b>(&self, params: &'b ParamVector) -> Model<'b>
    where
        'a: 'b,
    {
        Model { net: self.net, params, mode: self.mode }
    }

    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.net.logits(self.params, inputs, self.mode)
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        self.net.predict(self.params, inputs, self.mode)
    }

    pub fn cross_entropy(&self, inputs: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
        loss::cross_entropy(&self.logits(inputs)?, labels)
    }

    pub fn clean_loss(&self, batch: &Batch) -> Result<CrossEntropy> {
        self.cross_entropy(&batch.inputs, &batch.labels)
    }

    pub fn input_grad(&self, inputs: &Tensor, labels: &[usize]) -> Result<InputGrad> {
        let fwd = self.net.forward(self.params, inputs, self.mode)?;
        let ce = loss::cross_entropy(&fwd.logits, labels)?;
        let dl = loss::cross_entropy_grad(&fwd.logits, labels, 1.0)?;
        let predictions = (0..fwd.logits.rows()).map(|r| loss::argmax(fwd.logits.row(r))).collect();
        let (_, grad) = self.net.backward(self.params, &fwd, &dl)?;
        Ok(InputGrad { losses: ce.per_example, predictions, grad })
    }
}
