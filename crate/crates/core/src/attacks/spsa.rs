//! Gradient-free attack: simultaneous-perturbation estimates of the
//! cross-entropy gradient from forward evaluations only.

use rand::Rng;

use crate::attacks::{check_inputs, fgsm_step, AttackResult, AttackSpec};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::nn;
use crate::seed;
use crate::tensor::Tensor;

/// Averages `samples` two-point Rademacher estimates
/// `(L(x + d D) - L(x - d D)) / (2d) * D` per example (`D^-1 = D` for `+-1` entries).
pub fn spsa_gradient(
    target: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    samples: usize,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut est = Tensor::zeros(x.shape().to_vec());
    let cols = x.cols();
    for _ in 0..samples {
        let dirs: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut plus = x.clone();
        let mut minus = x.clone();
        for ((p, m), d) in plus
            .data_mut()
            .iter_mut()
            .zip(minus.data_mut())
            .zip(&dirs)
        {
            *p += delta * d;
            *m -= delta * d;
        }
        let lp = nn::cross_entropy_rows(&target.predict(&plus)?, labels)?;
        let lm = nn::cross_entropy_rows(&target.predict(&minus)?, labels)?;
        for (b, row) in est.data_mut().chunks_mut(cols).enumerate() {
            let scale = (lp[b] - lm[b]) / (2.0 * delta);
            for (e, d) in row.iter_mut().zip(&dirs[b * cols..(b + 1) * cols]) {
                *e += scale * d;
            }
        }
    }
    let inv = samples as f64;
    est.data_mut().iter_mut().for_each(|v| *v /= inv);
    Ok(est)
}

fn run(
    target: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    toward: bool,
) -> Result<AttackResult> {
    spec.validate()?;
    check_inputs(target, x, labels)?;
    let mut rng = seed::rng(spec.seed);
    let mut cur = x.clone();
    let mut loss_trace = vec![nn::cross_entropy(&target.predict(x)?, labels)?];
    for step in 0..spec.steps {
        let mut est = spsa_gradient(target, &cur, labels, spec.spsa_samples, spec.spsa_delta, &mut rng)?;
        if !est.is_finite() {
            return Err(Error::NonFiniteGradient { step });
        }
        if toward {
            est.data_mut().iter_mut().for_each(|g| *g = -*g);
        }
        cur = fgsm_step(&cur, &est, spec.step_size, x, spec.epsilon)?;
    }
    let probs = target.predict(&cur)?;
    loss_trace.push(nn::cross_entropy(&probs, labels)?);
    let success_mask = nn::predictions(&probs)
        .iter()
        .zip(labels)
        .map(|(p, t)| if toward { p == t } else { p != t })
        .collect();
    Ok(AttackResult {
        adversarial: cur,
        success_mask,
        queries: (spec.steps * 2 * spec.spsa_samples) as u64 + 1,
        probs,
        loss_trace,
        spec: spec.clone(),
    })
}

/// Untargeted SPSA: sign ascent on the estimated gradient, clipped to ball and box.
pub fn spsa(target: &dyn Classifier, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AttackResult> {
    run(target, x, y, spec, false)
}

pub(crate) fn spsa_targeted(
    target: &dyn Classifier,
    x: &Tensor,
    goal: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    run(target, x, goal, spec, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Model;

    #[test]
    fn zero_budget_returns_input() {
        let m = Model::init(&[3, 4, 2], 2).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.4, 0.6]]).unwrap();
        let r = spsa(&m, &x, &[0], &AttackSpec::spsa(4, 0.0, 0.01, 3, 0.01)).unwrap();
        assert_eq!(r.adversarial, x);
        assert_eq!(r.queries, 4 * 2 * 3 + 1);
    }

    #[test]
    fn seeded_runs_repeat() {
        let m = Model::init(&[3, 4, 2], 2).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.4, 0.6], [0.7, 0.1, 0.3]]).unwrap();
        let spec = AttackSpec::spsa(5, 0.1, 0.02, 4, 0.01).with_seed(9);
        let a = spsa(&m, &x, &[0, 1], &spec).unwrap();
        let b = spsa(&m, &x, &[0, 1], &spec).unwrap();
        assert_eq!(a, b);
    }
}
