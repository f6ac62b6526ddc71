//! Perturbation search inside the l-infinity ball intersected with `[0,1]^d`.
//!
//! Every attack works on a [`Classifier`], so passing an [`Ensemble`](crate::ensemble::Ensemble)
//! gives the adaptive attack: gradients (or SPSA probes) go through the
//! averaged probability.

mod gradient;
mod spsa;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::nn;
use crate::seed;
use crate::tensor::Tensor;

pub use gradient::{bim, mim, pgd, targeted};
pub use spsa::{spsa, spsa_gradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Pgd,
    Bim,
    Mim,
    Spsa,
}

fn default_momentum() -> f64 {
    1.0
}

fn default_spsa_samples() -> usize {
    32
}

fn default_spsa_delta() -> f64 {
    0.01
}

/// Attack family plus hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// Number of iterations `k`.
    pub steps: usize,
    /// l-infinity budget.
    pub epsilon: f64,
    /// Per-step size.
    pub step_size: f64,
    /// Momentum decay (MIM only).
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Rademacher probes averaged per SPSA step.
    #[serde(default = "default_spsa_samples")]
    pub spsa_samples: usize,
    /// SPSA probe radius.
    #[serde(default = "default_spsa_delta")]
    pub spsa_delta: f64,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
    /// Run one targeted attack per wrong label and count any success.
    #[serde(default)]
    pub multi_targeted: bool,
}

impl AttackSpec {
    fn base(family: AttackFamily, steps: usize, epsilon: f64, step_size: f64) -> Self {
        Self {
            family,
            steps,
            epsilon,
            step_size,
            momentum: default_momentum(),
            spsa_samples: default_spsa_samples(),
            spsa_delta: default_spsa_delta(),
            random_start: false,
            seed: 0,
            multi_targeted: false,
        }
    }

    /// PGD with a uniform random start.
    pub fn pgd(steps: usize, epsilon: f64, step_size: f64) -> Self {
        Self {
            random_start: true,
            ..Self::base(AttackFamily::Pgd, steps, epsilon, step_size)
        }
    }

    pub fn bim(steps: usize, epsilon: f64, step_size: f64) -> Self {
        Self::base(AttackFamily::Bim, steps, epsilon, step_size)
    }

    pub fn mim(steps: usize, epsilon: f64, step_size: f64, momentum: f64) -> Self {
        Self {
            momentum,
            ..Self::base(AttackFamily::Mim, steps, epsilon, step_size)
        }
    }

    pub fn spsa(steps: usize, epsilon: f64, step_size: f64, samples: usize, delta: f64) -> Self {
        Self {
            spsa_samples: samples,
            spsa_delta: delta,
            ..Self::base(AttackFamily::Spsa, steps, epsilon, step_size)
        }
    }

    /// The common image-scale adversary: PGD with `k = 10`, `eps = 8/255`, `eta = 2/255`.
    pub fn standard_pgd() -> Self {
        Self::pgd(10, 8.0 / 255.0, 2.0 / 255.0)
    }

    /// Gradient-free evaluation setting: SPSA with 50 steps at `eps = 8/255`.
    pub fn standard_spsa() -> Self {
        Self::spsa(50, 8.0 / 255.0, 1.0 / 255.0, 32, 0.01)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn multi(mut self) -> Self {
        self.multi_targeted = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [self.epsilon, self.step_size, self.momentum, self.spsa_delta];
        if reals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("attack parameters must be finite".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon {} is negative", self.epsilon)));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config(format!(
                "step size {} must be positive",
                self.step_size
            )));
        }
        if self.momentum < 0.0 {
            return Err(Error::Config(format!("momentum {} is negative", self.momentum)));
        }
        if self.family == AttackFamily::Spsa && (self.spsa_samples == 0 || self.spsa_delta <= 0.0) {
            return Err(Error::Config(
                "spsa needs at least one sample and a positive delta".into(),
            ));
        }
        if self.epsilon > 0.0 && self.step_size > self.epsilon {
            log::warn!(
                "step size {} exceeds epsilon {}; every step saturates the ball",
                self.step_size,
                self.epsilon
            );
        }
        Ok(())
    }
}

/// Outcome of an attack on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Tensor,
    /// Untargeted: prediction differs from the true label. Targeted: prediction equals the target.
    pub success_mask: Vec<bool>,
    /// Model evaluations (forward or gradient) spent per example.
    pub queries: u64,
    /// Target probabilities at the returned points.
    pub probs: Tensor,
    /// Mean attack objective at each iterate, starting point first.
    pub loss_trace: Vec<f64>,
    /// The spec the attack ran with, verbatim.
    pub spec: AttackSpec,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        100.0 * self.success_mask.iter().filter(|&&s| s).count() as f64
            / self.success_mask.len() as f64
    }

    pub fn predictions(&self) -> Vec<usize> {
        nn::predictions(&self.probs)
    }

    /// `example_id,success,linf_norm,queries` relative to the clean batch.
    pub fn to_csv(&self, original: &Tensor) -> String {
        let mut out = String::from("example_id,success,linf_norm,queries\n");
        for (i, s) in self.success_mask.iter().enumerate() {
            let d = self.adversarial.row_linf_distance(original, i);
            out.push_str(&format!("{i},{},{d},{}\n", *s as u8, self.queries));
        }
        out
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip_[0,1](clip_ball(x + eta * sign(grad)))`, with `sign(0) = 0`.
pub fn fgsm_step(
    x: &Tensor,
    input_grad: &Tensor,
    step_size: f64,
    x_origin: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    if !x.same_shape(input_grad) || !x.same_shape(x_origin) {
        return Err(Error::Shape(format!(
            "fgsm step on shapes {:?}, {:?}, {:?}",
            x.shape(),
            input_grad.shape(),
            x_origin.shape()
        )));
    }
    let mut next = x.clone();
    for ((v, &g), &o) in next
        .data_mut()
        .iter_mut()
        .zip(input_grad.data())
        .zip(x_origin.data())
    {
        let moved = *v + step_size * sign(g);
        *v = moved.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
    }
    Ok(next)
}

/// Uniform draw from the l-infinity ball, then clipped to the box.
pub(crate) fn random_start(x: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = seed::rng(seed);
    let mut out = x.clone();
    if epsilon > 0.0 {
        for v in out.data_mut() {
            let offset: f64 = rng.random_range(-epsilon..=epsilon);
            *v = (*v + offset).clamp(0.0, 1.0);
        }
    }
    out
}

pub(crate) fn check_inputs(target: &dyn Classifier, x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != target.input_dim() {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match input width {}",
            x.shape(),
            target.input_dim()
        )));
    }
    if labels.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let m = target.num_classes();
    if let Some(bad) = labels.iter().find(|&&t| t >= m) {
        return Err(Error::Domain(format!("class {bad} outside [0, {m})")));
    }
    Ok(())
}

/// Runs whatever `spec` describes: the untargeted family attack, or the
/// multi-targeted protocol when `spec.multi_targeted` is set.
pub fn run_attack(
    target: &dyn Classifier,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    if spec.multi_targeted {
        return multi_targeted(target, x, y, spec);
    }
    match spec.family {
        AttackFamily::Pgd => pgd(target, x, y, spec),
        AttackFamily::Bim => bim(target, x, y, spec),
        AttackFamily::Mim => mim(target, x, y, spec),
        AttackFamily::Spsa => spsa(target, x, y, spec),
    }
}

/// One targeted run per wrong label. An example counts as broken if any
/// run succeeds; the returned point is the successful run with the lowest
/// target class, or else the run with the largest loss on the true label.
pub fn multi_targeted(
    target: &dyn Classifier,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    check_inputs(target, x, y)?;
    let m = target.num_classes();
    if m < 2 {
        return Err(Error::Domain("multi-targeted attack needs at least 2 classes".into()));
    }
    let single = AttackSpec {
        multi_targeted: false,
        ..spec.clone()
    };
    // run o attacks every example towards (y + o) mod m
    let mut runs = Vec::with_capacity(m - 1);
    for offset in 1..m {
        let goal: Vec<usize> = y.iter().map(|&t| (t + offset) % m).collect();
        let run_spec = single.clone().with_seed(seed::derive_seed(spec.seed, &[offset as u64]));
        let res = targeted_dispatch(target, x, &goal, &run_spec)?;
        let true_loss = nn::cross_entropy_rows(&res.probs, y)?;
        runs.push((goal, res, true_loss));
    }

    let rows = x.rows();
    let mut adversarial = x.clone();
    let mut probs = Tensor::zeros(vec![rows, m]);
    let mut success = vec![false; rows];
    for b in 0..rows {
        let pick = runs
            .iter()
            .filter(|(goal, res, _)| res.success_mask[b] && goal[b] != y[b])
            .min_by_key(|(goal, _, _)| goal[b])
            .or_else(|| {
                runs.iter().reduce(|best, r| if r.2[b] > best.2[b] { r } else { best })
            })
            .expect("at least one targeted run");
        success[b] = pick.1.success_mask[b];
        adversarial.row_mut(b).copy_from_slice(pick.1.adversarial.row(b));
        probs.row_mut(b).copy_from_slice(pick.1.probs.row(b));
    }
    let queries = runs.iter().map(|r| r.1.queries).sum();
    let final_loss = nn::cross_entropy(&probs, y)?;
    Ok(AttackResult {
        adversarial,
        success_mask: success,
        queries,
        probs,
        loss_trace: vec![final_loss],
        spec: spec.clone(),
    })
}

fn targeted_dispatch(
    target: &dyn Classifier,
    x: &Tensor,
    goal: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    match spec.family {
        AttackFamily::Spsa => spsa::spsa_targeted(target, x, goal, spec),
        _ => targeted(target, x, goal, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f64; 3]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_step_is_identity() {
        let x = t(&[[0.2, 0.5, 0.9]]);
        let g = t(&[[1.0, -1.0, 3.0]]);
        assert_eq!(fgsm_step(&x, &g, 0.0, &x, 0.1).unwrap(), x);
    }

    #[test]
    fn interior_step_moves_by_exactly_eta() {
        let x = t(&[[0.2, 0.5, 0.7]]);
        let g = t(&[[1.0, 2.0, 0.5]]);
        let next = fgsm_step(&x, &g, 0.01, &x, 0.05).unwrap();
        for (a, b) in next.data().iter().zip(x.data()) {
            assert_eq!(*a, b + 0.01);
        }
    }

    #[test]
    fn box_and_ball_clip() {
        let x = t(&[[1.0, 0.0, 0.5]]);
        let g = t(&[[1.0, -1.0, 1.0]]);
        let next = fgsm_step(&x, &g, 0.3, &x, 0.1).unwrap();
        assert_eq!(next.data(), &[1.0, 0.0, 0.6]);
        let zero = t(&[[0.0, 0.0, 0.0]]);
        assert_eq!(fgsm_step(&x, &zero, 0.3, &x, 0.1).unwrap(), x);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::pgd(0, 0.1, 0.01).validate().is_err());
        assert!(AttackSpec::pgd(1, -0.1, 0.01).validate().is_err());
        assert!(AttackSpec::pgd(1, 0.1, 0.0).validate().is_err());
        assert!(AttackSpec::spsa(1, 0.1, 0.01, 0, 0.01).validate().is_err());
        assert!(AttackSpec::standard_pgd().validate().is_ok());
    }

    #[test]
    fn spec_json_defaults() {
        let s: AttackSpec =
            serde_json::from_str(r#"{"family":"mim","steps":5,"epsilon":0.1,"step_size":0.02}"#)
                .unwrap();
        assert_eq!(s.momentum, 1.0);
        assert!(!s.random_start);
        let back: AttackSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
