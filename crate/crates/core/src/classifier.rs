//! The interface attacks and analyses use to query a model or an ensemble.

use crate::error::Result;
use crate::nn::{self, Model, PROB_FLOOR};
use crate::tensor::Tensor;

/// Anything that maps a batch in `[0,1]^d` to class probabilities and can
/// differentiate its cross-entropy with respect to the inputs.
pub trait Classifier: Sync {
    fn input_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn predict(&self, batch: &Tensor) -> Result<Tensor>;

    /// Per-row cross-entropy against `labels`, and the gradient of each row's
    /// loss with respect to that row of the batch.
    fn loss_and_input_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)>;

    fn predict_labels(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(nn::predictions(&self.predict(batch)?))
    }
}

impl Classifier for Model {
    fn input_dim(&self) -> usize {
        Model::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }

    fn loss_and_input_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let trace = self.forward_trace(batch)?;
        let losses = nn::cross_entropy_rows(trace.probs(), labels)?;
        let m = Model::num_classes(self);
        let mut dlogits = vec![0.0; batch.rows() * m];
        for (b, (p, &y)) in trace.probs().iter_rows().zip(labels).enumerate() {
            if p[y] < PROB_FLOOR {
                continue;
            }
            for j in 0..m {
                dlogits[b * m + j] = p[j] - if j == y { 1.0 } else { 0.0 };
            }
        }
        let grads = self.backward_logits(&trace, &dlogits)?;
        Ok((losses, grads.input))
    }
}
