//! Diversity-promoting regularizer: `alpha * H(mean p) + beta * log ED`.
//!
//! `ED` is the determinant of the Gram matrix of the members' non-maximal
//! prediction vectors: each member's probability row with the true-label entry
//! dropped, scaled to unit L2 norm. The determinant is the squared volume
//! spanned by those vectors, so it is 1 for orthogonal vectors and 0 for
//! collinear ones. Below [`ED_FLOOR`] the log is clamped and the row
//! contributes no gradient through the diversity term.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::nn::{self, ParamGrads};
use crate::tensor::Tensor;

pub const ED_FLOOR: f64 = 1e-30;

/// Batch-mean regularizer value plus the number of rows whose determinant hit the floor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AdpValue {
    pub value: f64,
    pub floored: usize,
}

struct RowOutput {
    value: f64,
    floored: bool,
    /// `d value / d p_n`, one vector per member.
    grads: Vec<Vec<f64>>,
}

fn adp_row(rows: &[&[f64]], y: usize, alpha: f64, beta: f64) -> RowOutput {
    let n = rows.len();
    let m = rows[0].len();
    let mut mean = vec![0.0; m];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b / n as f64);
    }
    let h = nn::row_entropy(&mean);
    let mut grads: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            mean.iter()
                .map(|&q| if q > 0.0 { -alpha * (q.ln() + 1.0) / n as f64 } else { 0.0 })
                .collect()
        })
        .collect();

    let reduced: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v).collect())
        .collect();
    let norms: Vec<f64> = reduced.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    let k = m - 1;
    let floored_out = |grads| RowOutput {
        value: alpha * h + beta * ED_FLOOR.ln(),
        floored: true,
        grads,
    };
    if k == 0 || norms.contains(&0.0) {
        return floored_out(grads);
    }
    let u = DMatrix::from_fn(n, k, |i, j| reduced[i][j] / norms[i]);
    let gram = &u * u.transpose();
    let det = gram.determinant();
    if det.is_nan() || det < ED_FLOOR {
        return floored_out(grads);
    }
    let Some(inv) = gram.try_inverse() else {
        return floored_out(grads);
    };
    // d log det(U U^T) / dU = 2 G^-1 U
    let du = inv * &u * 2.0;
    for i in 0..n {
        let dot: f64 = (0..k).map(|j| u[(i, j)] * du[(i, j)]).sum();
        let mut col = 0;
        for (j, g) in grads[i].iter_mut().enumerate() {
            if j == y {
                continue;
            }
            *g += beta * (du[(i, col)] - u[(i, col)] * dot) / norms[i];
            col += 1;
        }
    }
    RowOutput {
        value: alpha * h + beta * det.ln(),
        floored: false,
        grads,
    }
}

fn check(member_probs: &[Tensor], y: &[usize]) -> Result<()> {
    if member_probs.len() < 2 {
        return Err(Error::Config(format!(
            "diversity regularizer needs at least 2 members, got {}",
            member_probs.len()
        )));
    }
    let first = &member_probs[0];
    if member_probs.iter().any(|p| !p.same_shape(first)) {
        return Err(Error::Shape("member probability shapes differ".into()));
    }
    if y.len() != first.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", y.len(), first.rows())));
    }
    if let Some(bad) = y.iter().find(|&&t| t >= first.cols()) {
        return Err(Error::Domain(format!("class {bad} outside [0, {})", first.cols())));
    }
    for p in member_probs {
        nn::entropy(p)?;
    }
    Ok(())
}

/// Value and `d value / d probs` per member (row-major `B x M`), both averaged over the batch.
pub(crate) fn adp_with_prob_grads(
    member_probs: &[Tensor],
    y: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<(AdpValue, Vec<Vec<f64>>)> {
    check(member_probs, y)?;
    let (rows, m) = (member_probs[0].rows(), member_probs[0].cols());
    let mut out = AdpValue::default();
    let mut grads = vec![vec![0.0; rows * m]; member_probs.len()];
    for (b, &t) in y.iter().enumerate() {
        let row: Vec<&[f64]> = member_probs.iter().map(|p| p.row(b)).collect();
        let r = adp_row(&row, t, alpha, beta);
        out.value += r.value / rows as f64;
        out.floored += r.floored as usize;
        for (g, rg) in grads.iter_mut().zip(&r.grads) {
            g[b * m..(b + 1) * m]
                .iter_mut()
                .zip(rg)
                .for_each(|(a, v)| *a = v / rows as f64);
        }
    }
    Ok((out, grads))
}

/// Batch mean of the regularizer for `member_probs[n]` = member `n`'s `B x M` probabilities.
pub fn adp_regularizer(member_probs: &[Tensor], y: &[usize], alpha: f64, beta: f64) -> Result<AdpValue> {
    Ok(adp_with_prob_grads(member_probs, y, alpha, beta)?.0)
}

/// Terms of the regularized adversarial-training loss
/// `sum_n [C(f^n(x), y) + C(f^n(x_a), y)] - ADP(x) - ADP(x_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AdpBreakdown {
    pub clean_ce: f64,
    pub adv_ce: f64,
    pub reg_clean: AdpValue,
    pub reg_adv: AdpValue,
}

impl AdpBreakdown {
    pub fn total(&self) -> f64 {
        self.clean_ce + self.adv_ce - self.reg_clean.value - self.reg_adv.value
    }
}

fn batch_part(
    ens: &Ensemble,
    batch: &Tensor,
    y: &[usize],
    alpha: f64,
    beta: f64,
    grads: &mut [ParamGrads],
) -> Result<(f64, AdpValue)> {
    let (traces, _) = ens.forward_traces(batch)?;
    let probs: Vec<Tensor> = traces.iter().map(|t| t.probs().clone()).collect();
    let (reg, reg_grads) = adp_with_prob_grads(&probs, y, alpha, beta)?;
    let rows = batch.rows() as f64;
    let m = probs[0].cols();
    let mut ce = 0.0;
    for (n, (member, trace)) in ens.members().iter().zip(&traces).enumerate() {
        ce += nn::cross_entropy(trace.probs(), y)?;
        // minus the regularizer, plus this member's cross-entropy
        let mut dprobs: Vec<f64> = reg_grads[n].iter().map(|g| -g).collect();
        for (b, (p, &t)) in trace.probs().iter_rows().zip(y).enumerate() {
            if p[t] >= nn::PROB_FLOOR {
                dprobs[b * m + t] -= 1.0 / (p[t] * rows);
            }
        }
        grads[n].add_assign(&member.backward_probs(trace, &dprobs)?.params)?;
    }
    Ok((ce, reg))
}

/// Loss terms and per-member parameter gradients of the regularized loss.
pub fn adp_loss_gradients(
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    x_a: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<(AdpBreakdown, Vec<ParamGrads>)> {
    let mut grads: Vec<ParamGrads> = ens.members().iter().map(ParamGrads::zeros_like).collect();
    let (clean_ce, reg_clean) = batch_part(ens, x, y, alpha, beta, &mut grads)?;
    let (adv_ce, reg_adv) = batch_part(ens, x_a, y, alpha, beta, &mut grads)?;
    Ok((
        AdpBreakdown {
            clean_ce,
            adv_ce,
            reg_clean,
            reg_adv,
        },
        grads,
    ))
}
