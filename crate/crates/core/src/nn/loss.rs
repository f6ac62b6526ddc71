//! Cross-entropy and entropy losses, and weighted compositions of them.
//!
//! All logarithms are natural. Probabilities are floored at [`PROB_FLOOR`]
//! before taking a log, so a zero true-class probability costs
//! `-ln(1e-12)` instead of infinity; below the floor the gradient is zero.

use crate::error::{Error, Result};
use crate::nn::model::{Gradients, Model};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-4;

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    let m = probs.cols();
    if let Some(bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Domain(format!("label {bad} outside [0, {m})")));
    }
    Ok(())
}

/// `-ln max(p_y, 1e-12)` for every row.
pub fn cross_entropy_rows(probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(probs, labels)?;
    Ok(probs
        .iter_rows()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(PROB_FLOOR).ln())
        .collect())
}

/// Mean cross-entropy of a probability batch against labels.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let rows = cross_entropy_rows(probs, labels)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Shannon entropy of one normalized row, with `0 ln 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Per-row entropy; rows whose sum deviates from 1 by more than 1e-4 are rejected.
pub fn entropy(probs: &Tensor) -> Result<Vec<f64>> {
    probs
        .iter_rows()
        .enumerate()
        .map(|(i, p)| {
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&v| v < 0.0) {
                Err(Error::Domain(format!("row {i} is not a distribution (sum {s})")))
            } else {
                Ok(row_entropy(p))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    CrossEntropy { labels: Vec<usize> },
    Entropy,
}

/// `coefficient * mean_b(weight_b * loss_b)` over one batch.
///
/// `weights` are plain values; they never receive gradient, which is how
/// stop-gradient gates are expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub kind: LossKind,
    pub coefficient: f64,
    pub weights: Option<Vec<f64>>,
}

impl LossTerm {
    pub fn cross_entropy(labels: Vec<usize>, coefficient: f64) -> Self {
        Self {
            kind: LossKind::CrossEntropy { labels },
            coefficient,
            weights: None,
        }
    }

    pub fn entropy(coefficient: f64) -> Self {
        Self {
            kind: LossKind::Entropy,
            coefficient,
            weights: None,
        }
    }

    pub fn weighted(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    fn weight(&self, b: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[b])
    }

    fn validate(&self, rows: usize) -> Result<()> {
        if !self.coefficient.is_finite() {
            return Err(Error::UnsupportedSpec("non-finite coefficient".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != rows {
                return Err(Error::UnsupportedSpec(format!(
                    "{} weights for {rows} rows",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::UnsupportedSpec("non-finite weight".into()));
            }
        }
        Ok(())
    }
}

/// A scalar loss on one batch built from cross-entropy and entropy terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
}

impl LossSpec {
    pub fn new(terms: Vec<LossTerm>) -> Self {
        Self { terms }
    }

    pub fn with(mut self, term: LossTerm) -> Self {
        self.terms.push(term);
        self
    }

    /// Value of each term (coefficient included) on the given probabilities.
    pub fn term_values(&self, probs: &Tensor) -> Result<Vec<f64>> {
        let rows = probs.rows();
        self.terms
            .iter()
            .map(|t| {
                t.validate(rows)?;
                let per_row = match &t.kind {
                    LossKind::CrossEntropy { labels } => cross_entropy_rows(probs, labels)?,
                    LossKind::Entropy => entropy(probs)?,
                };
                let mean = per_row
                    .iter()
                    .enumerate()
                    .map(|(b, l)| t.weight(b) * l)
                    .sum::<f64>()
                    / rows as f64;
                Ok(t.coefficient * mean)
            })
            .collect()
    }

    pub fn value(&self, probs: &Tensor) -> Result<f64> {
        Ok(self.term_values(probs)?.iter().sum())
    }

    /// Gradient of the loss with respect to the logits that produced `probs`.
    pub fn logit_grad(&self, probs: &Tensor) -> Result<Vec<f64>> {
        let (rows, m) = (probs.rows(), probs.cols());
        let mut g = vec![0.0; rows * m];
        for t in &self.terms {
            t.validate(rows)?;
            match &t.kind {
                LossKind::CrossEntropy { labels } => check_labels(probs, labels)?,
                LossKind::Entropy => {
                    entropy(probs)?;
                }
            }
            for (b, p) in probs.iter_rows().enumerate() {
                let scale = t.coefficient * t.weight(b) / rows as f64;
                if scale == 0.0 {
                    continue;
                }
                let gr = &mut g[b * m..(b + 1) * m];
                match &t.kind {
                    LossKind::CrossEntropy { labels } => {
                        let y = labels[b];
                        if p[y] < PROB_FLOOR {
                            continue;
                        }
                        // d(-ln p_y)/dz = p - e_y
                        for (j, gj) in gr.iter_mut().enumerate() {
                            let target = if j == y { 1.0 } else { 0.0 };
                            *gj += scale * (p[j] - target);
                        }
                    }
                    LossKind::Entropy => {
                        // dH/dz_j = -p_j (ln p_j + H)
                        let h = row_entropy(p);
                        for (j, gj) in gr.iter_mut().enumerate() {
                            if p[j] > 0.0 {
                                *gj += scale * (-p[j] * (p[j].ln() + h));
                            }
                        }
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Exact gradients of `spec` evaluated on `model(batch)`, with respect to the
/// parameters and to the batch itself.
pub fn backward(model: &Model, batch: &Tensor, spec: &LossSpec) -> Result<Gradients> {
    let trace = model.forward_trace(batch)?;
    let dlogits = spec.logit_grad(trace.probs())?;
    model.backward_logits(&trace, &dlogits)
}

/// Loss value and gradients from a single forward pass.
pub fn value_and_backward(
    model: &Model,
    batch: &Tensor,
    spec: &LossSpec,
) -> Result<(f64, Gradients)> {
    let trace = model.forward_trace(batch)?;
    let value = spec.value(trace.probs())?;
    let dlogits = spec.logit_grad(trace.probs())?;
    Ok((value, model.backward_logits(&trace, &dlogits)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &[f64]) -> Tensor {
        Tensor::from_rows(&[p]).unwrap()
    }

    #[test]
    fn cross_entropy_reference_values() {
        assert_eq!(cross_entropy(&row(&[0.0, 1.0]), &[1]).unwrap(), 0.0);
        let uniform = row(&[0.1; 10]);
        assert!((cross_entropy(&uniform, &[3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let q = row(&[0.25, 0.75]);
        assert!((cross_entropy(&q, &[0]).unwrap() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let v = cross_entropy(&row(&[1.0, 0.0]), &[1]).unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_label_out_of_range() {
        assert!(matches!(
            cross_entropy(&row(&[0.5, 0.5]), &[2]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(&row(&[0.1; 10])).unwrap()[0] - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&row(&[0.0, 1.0, 0.0])).unwrap()[0], 0.0);
        let h = entropy(&row(&[0.5, 0.5, 0.0, 0.0])).unwrap()[0];
        assert!((h - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_unnormalized_rows() {
        assert!(matches!(entropy(&row(&[0.5, 0.6])), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_coefficient_yields_zero_gradients() {
        let m = Model::init(&[3, 4, 2], 1).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.9, 0.1, 0.4]]).unwrap();
        let spec = LossSpec::default()
            .with(LossTerm::cross_entropy(vec![0, 1], 0.0))
            .with(LossTerm::entropy(0.0));
        let g = backward(&m, &x, &spec).unwrap();
        assert_eq!(g.params.max_abs(), 0.0);
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_length_mismatch_is_unsupported() {
        let m = Model::init(&[2, 2], 1).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2]]).unwrap();
        let spec = LossSpec::new(vec![LossTerm::entropy(1.0).weighted(vec![1.0, 2.0])]);
        assert!(matches!(
            backward(&m, &x, &spec),
            Err(Error::UnsupportedSpec(_))
        ));
    }
}
