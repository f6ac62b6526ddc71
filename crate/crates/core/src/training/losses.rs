//! Promote/demote building blocks and the per-member collaborative loss.

use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::nn::{self, LossSpec, LossTerm, Model, ParamGrads};
use crate::tensor::Tensor;

/// Promote: cross-entropy of `f` on `x_a` against the true labels.
pub fn po_loss(f: &Model, x_a: &Tensor, y: &[usize]) -> Result<f64> {
    nn::cross_entropy(&f.forward(x_a)?, y)
}

/// Demote: mean prediction entropy of `f` on `x_a`. Objectives subtract it.
pub fn do_loss(f: &Model, x_a: &Tensor) -> Result<f64> {
    let h = nn::entropy(&f.forward(x_a)?)?;
    Ok(h.iter().sum::<f64>() / h.len() as f64)
}

/// `p(y | x_a, f)` per row, returned as plain values so it never carries gradient.
pub fn soft_indicator(f: &Model, x_a: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let probs = f.forward(x_a)?;
    if y.len() != probs.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", y.len(), probs.rows())));
    }
    let m = probs.cols();
    probs
        .iter_rows()
        .zip(y)
        .map(|(p, &t)| {
            if t >= m {
                Err(Error::Domain(format!("class {t} outside [0, {m})")))
            } else {
                Ok(p[t])
            }
        })
        .collect()
}

/// Which part of a member objective a loss term belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermTag {
    /// `C(f^n(x), y)`.
    Clean,
    /// `C(f^n(x_a^n), y)`.
    DirectPromote,
    /// Gated `C(f^n(x_a^i), y)` for another member `i`.
    CrossPromote { source: usize },
    /// Gated `-H(f^n(x_a^i))` for another member `i`.
    Demote { source: usize },
}

/// A member loss as a sum of batch-level terms whose gates are frozen values.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberObjective {
    groups: Vec<(Tensor, Vec<(TermTag, LossTerm)>)>,
}

/// Signed contributions of each term family to a member's loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub clean_ce: f64,
    pub dpo_ce: f64,
    pub cpo_ce: f64,
    /// Already carries the minus sign of the demote term.
    pub do_h: f64,
    pub total: f64,
}

impl TermBreakdown {
    pub(crate) fn add_scaled(&mut self, other: &TermBreakdown, w: f64) {
        self.clean_ce += w * other.clean_ce;
        self.dpo_ce += w * other.dpo_ce;
        self.cpo_ce += w * other.cpo_ce;
        self.do_h += w * other.do_h;
        self.total += w * other.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.clean_ce, self.dpo_ce, self.cpo_ce, self.do_h, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl MemberObjective {
    pub fn new() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn push(&mut self, batch: Tensor, terms: Vec<(TermTag, LossTerm)>) {
        self.groups.push((batch, terms));
    }

    pub fn terms(&self) -> impl Iterator<Item = &(TermTag, LossTerm)> {
        self.groups.iter().flat_map(|(_, t)| t.iter())
    }

    /// Terms with a non-zero effective coefficient on row `b`.
    pub fn active_terms(&self, b: usize) -> Vec<TermTag> {
        self.terms()
            .filter(|(_, t)| t.coefficient * t.weights.as_ref().map_or(1.0, |w| w[b]) != 0.0)
            .map(|(tag, _)| *tag)
            .collect()
    }

    pub fn breakdown(&self, model: &Model) -> Result<TermBreakdown> {
        let mut out = TermBreakdown::default();
        for (batch, terms) in &self.groups {
            let probs = model.forward(batch)?;
            let spec = LossSpec::new(terms.iter().map(|(_, t)| t.clone()).collect());
            for ((tag, _), v) in terms.iter().zip(spec.term_values(&probs)?) {
                match tag {
                    TermTag::Clean => out.clean_ce += v,
                    TermTag::DirectPromote => out.dpo_ce += v,
                    TermTag::CrossPromote { .. } => out.cpo_ce += v,
                    TermTag::Demote { .. } => out.do_h += v,
                }
                out.total += v;
            }
        }
        Ok(out)
    }

    pub fn value(&self, model: &Model) -> Result<f64> {
        Ok(self.breakdown(model)?.total)
    }

    /// Parameter gradient with every gate held at its stored value.
    pub fn gradient(&self, model: &Model) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_like(model);
        for (batch, terms) in &self.groups {
            let spec = LossSpec::new(terms.iter().map(|(_, t)| t.clone()).collect());
            grads.add_assign(&nn::backward(model, batch, &spec)?.params)?;
        }
        Ok(grads)
    }
}

impl Default for MemberObjective {
    fn default() -> Self {
        Self::new()
    }
}

fn check_adv_set(ens: &Ensemble, n: usize, x: &Tensor, adv_set: &[Tensor]) -> Result<()> {
    if ens.len() < 2 {
        return Err(Error::Config(format!(
            "collaborative loss needs at least 2 members, got {}",
            ens.len()
        )));
    }
    if n >= ens.len() {
        return Err(Error::Config(format!("member {n} of {}", ens.len())));
    }
    if adv_set.len() != ens.len() {
        return Err(Error::Config(format!(
            "{} adversarial batches for {} members",
            adv_set.len(),
            ens.len()
        )));
    }
    if let Some(bad) = adv_set.iter().find(|a| !a.same_shape(x)) {
        return Err(Error::Shape(format!(
            "adversarial batch {:?} does not match clean batch {:?}",
            bad.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// Member objective with caller-provided gates: `gates[i]` holds, per row, the
/// indicator that member `n` predicts `x_a^i` correctly (`gates[n]` is unused).
pub fn cce_objective_with_gates(
    n: usize,
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    adv_set: &[Tensor],
    gates: &[Vec<f64>],
    lambda_pm: f64,
    lambda_dm: f64,
) -> Result<MemberObjective> {
    check_adv_set(ens, n, x, adv_set)?;
    let scale = 1.0 / (ens.len() - 1) as f64;
    let mut obj = MemberObjective::new();
    obj.push(
        x.clone(),
        vec![(TermTag::Clean, LossTerm::cross_entropy(y.to_vec(), 1.0))],
    );
    obj.push(
        adv_set[n].clone(),
        vec![(TermTag::DirectPromote, LossTerm::cross_entropy(y.to_vec(), 1.0))],
    );
    for (i, x_a) in adv_set.iter().enumerate() {
        if i == n {
            continue;
        }
        let w = &gates[i];
        let promote = LossTerm::cross_entropy(y.to_vec(), scale * lambda_pm).weighted(w.clone());
        let demote = LossTerm::entropy(-scale * lambda_dm).weighted(w.iter().map(|g| 1.0 - g).collect());
        obj.push(
            x_a.clone(),
            vec![
                (TermTag::CrossPromote { source: i }, promote),
                (TermTag::Demote { source: i }, demote),
            ],
        );
    }
    Ok(obj)
}

/// Loss of member `n` given one adversarial batch per member (`adv_set[i]`
/// attacks member `i` alone); gates are the member's soft indicators.
pub fn cce_objective(
    n: usize,
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    adv_set: &[Tensor],
    lambda_pm: f64,
    lambda_dm: f64,
) -> Result<MemberObjective> {
    check_adv_set(ens, n, x, adv_set)?;
    let member = ens.member(n);
    let gates = adv_set
        .iter()
        .map(|a| soft_indicator(member, a, y))
        .collect::<Result<Vec<_>>>()?;
    cce_objective_with_gates(n, ens, x, y, adv_set, &gates, lambda_pm, lambda_dm)
}

/// Scalar value of [`cce_objective`] at the current parameters.
pub fn cce_member_loss(
    n: usize,
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    adv_set: &[Tensor],
    lambda_pm: f64,
    lambda_dm: f64,
) -> Result<f64> {
    cce_objective(n, ens, x, y, adv_set, lambda_pm, lambda_dm)?.value(ens.member(n))
}

/// `C(f^en(x), y) + C(f^en(x_a_en), y)` on the averaged probability.
pub fn adv_en_loss(ens: &Ensemble, x: &Tensor, y: &[usize], x_a_en: &Tensor) -> Result<f64> {
    Ok(adv_en_parts(ens, x, y, x_a_en)?.iter().sum())
}

pub(crate) fn adv_en_parts(ens: &Ensemble, x: &Tensor, y: &[usize], x_a_en: &Tensor) -> Result<[f64; 2]> {
    let clean = nn::cross_entropy(&crate::ensemble::ensemble_predict(ens, x)?, y)?;
    let adv = nn::cross_entropy(&crate::ensemble::ensemble_predict(ens, x_a_en)?, y)?;
    Ok([clean, adv])
}

/// Per-member parameter gradients of the cross-entropy of the averaged
/// probability on one batch, scaled by `coefficient`.
pub(crate) fn ensemble_ce_gradients(
    ens: &Ensemble,
    batch: &Tensor,
    y: &[usize],
    coefficient: f64,
) -> Result<Vec<ParamGrads>> {
    let (traces, mean) = ens.forward_traces(batch)?;
    let m = mean.cols();
    let rows = batch.rows() as f64;
    let n = ens.len() as f64;
    let mut dprobs = vec![0.0; batch.rows() * m];
    for (b, (p, &t)) in mean.iter_rows().zip(y).enumerate() {
        if p[t] >= nn::PROB_FLOOR {
            dprobs[b * m + t] = -coefficient / (p[t] * n * rows);
        }
    }
    ens.members()
        .iter()
        .zip(&traces)
        .map(|(member, trace)| Ok(member.backward_probs(trace, &dprobs)?.params))
        .collect()
}

/// Per-member gradients of [`adv_en_loss`].
pub fn adv_en_gradients(ens: &Ensemble, x: &Tensor, y: &[usize], x_a_en: &Tensor) -> Result<Vec<ParamGrads>> {
    let mut grads = ensemble_ce_gradients(ens, x, y, 1.0)?;
    for (g, h) in grads.iter_mut().zip(ensemble_ce_gradients(ens, x_a_en, y, 1.0)?) {
        g.add_assign(&h)?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};

    /// Single linear layer with zero weights: the output is softmax(bias) for any input.
    fn constant(bias: &[f64], dim: usize) -> Model {
        let m = bias.len();
        let layer = Layer::new(
            Tensor::zeros(vec![m, dim]),
            Tensor::vector(bias.to_vec()).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        Model::new(vec![layer], m, 0).unwrap()
    }

    fn xs() -> Tensor {
        Tensor::from_rows(&[[0.3, 0.7]]).unwrap()
    }

    #[test]
    fn po_and_do_reference_values() {
        let uniform = constant(&[0.0; 10], 2);
        assert!((po_loss(&uniform, &xs(), &[3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((do_loss(&uniform, &xs()).unwrap() - 10f64.ln()).abs() < 1e-12);
        let sharp = constant(&[800.0, 0.0], 2);
        assert_eq!(po_loss(&sharp, &xs(), &[0]).unwrap(), 0.0);
        assert_eq!(do_loss(&sharp, &xs()).unwrap(), 0.0);
        let probs = sharp.forward(&xs()).unwrap();
        assert_eq!(po_loss(&sharp, &xs(), &[1]).unwrap(), nn::cross_entropy(&probs, &[1]).unwrap());
    }

    #[test]
    fn soft_indicator_on_one_hot() {
        let sharp = constant(&[800.0, 0.0], 2);
        assert_eq!(soft_indicator(&sharp, &xs(), &[0]).unwrap(), vec![1.0]);
        assert_eq!(soft_indicator(&sharp, &xs(), &[1]).unwrap(), vec![0.0]);
        assert!(soft_indicator(&sharp, &xs(), &[2]).is_err());
    }

    #[test]
    fn demote_step_raises_entropy() {
        let f = Model::init(&[2, 3], 4).unwrap();
        let x = xs();
        let spec = LossSpec::new(vec![LossTerm::entropy(-1.0)]);
        let g = nn::backward(&f, &x, &spec).unwrap();
        let state = nn::OptimState::new(&f, 0.01).unwrap();
        let (next, _) = nn::optimize_step(&f, &g.params, &state).unwrap();
        assert!(do_loss(&next, &x).unwrap() > do_loss(&f, &x).unwrap());
    }

    #[test]
    fn needs_two_members() {
        let ens = Ensemble::new(vec![constant(&[0.0, 0.0], 2)]).unwrap();
        let x = xs();
        let err = cce_member_loss(0, &ens, &x, &[0], std::slice::from_ref(&x), 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_member_adv_en_is_adversarial_training() {
        let f = Model::init(&[2, 4, 3], 1).unwrap();
        let ens = Ensemble::new(vec![f.clone()]).unwrap();
        let x = xs();
        let xa = Tensor::from_rows(&[[0.35, 0.65]]).unwrap();
        let want = po_loss(&f, &x, &[2]).unwrap() + po_loss(&f, &xa, &[2]).unwrap();
        assert!((adv_en_loss(&ens, &x, &[2], &xa).unwrap() - want).abs() < 1e-12);
        let g = adv_en_gradients(&ens, &x, &[2], &xa).unwrap();
        let spec = LossSpec::new(vec![LossTerm::cross_entropy(vec![2], 1.0)]);
        let mut direct = nn::backward(&f, &x, &spec).unwrap().params;
        direct.add_assign(&nn::backward(&f, &xa, &spec).unwrap().params).unwrap();
        for (a, b) in g[0].iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_members_get_identical_gradients() {
        let f = Model::init(&[2, 4, 3], 1).unwrap();
        let ens = Ensemble::new(vec![f.clone(), f]).unwrap();
        let x = xs();
        let xa = Tensor::from_rows(&[[0.35, 0.65]]).unwrap();
        let g = adv_en_gradients(&ens, &x, &[0], &xa).unwrap();
        assert_eq!(g[0], g[1]);
    }
}
