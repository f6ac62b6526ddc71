use crate::attacks::{check_inputs, fgsm_step, random_start, AttackFamily, AttackResult, AttackSpec};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq)]
enum Goal {
    /// Ascend the loss on the true label.
    Away,
    /// Descend the loss on a target label.
    Toward,
}

#[derive(Clone, Copy)]
enum Rule {
    Sign,
    Momentum(f64),
}

fn iterate(
    target: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    start: Tensor,
    goal: Goal,
    rule: Rule,
) -> Result<AttackResult> {
    spec.validate()?;
    check_inputs(target, x, labels)?;
    let cols = x.cols();
    let mut cur = start;
    let mut accum = Tensor::zeros(x.shape().to_vec());
    let mut loss_trace = Vec::with_capacity(spec.steps + 1);
    for step in 0..spec.steps {
        let (losses, mut grad) = target.loss_and_input_grad(&cur, labels)?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { step });
        }
        loss_trace.push(losses.iter().sum::<f64>() / losses.len() as f64);
        if goal == Goal::Toward {
            grad.data_mut().iter_mut().for_each(|g| *g = -*g);
        }
        let direction = match rule {
            Rule::Sign => grad,
            Rule::Momentum(mu) => {
                for (acc, g) in accum
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(grad.data().chunks(cols))
                {
                    let l1: f64 = g.iter().map(|v| v.abs()).sum();
                    if l1 == 0.0 {
                        continue;
                    }
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a = mu * *a + gv / l1;
                    }
                }
                accum.clone()
            }
        };
        cur = fgsm_step(&cur, &direction, spec.step_size, x, spec.epsilon)?;
    }
    let probs = target.predict(&cur)?;
    let final_losses = nn::cross_entropy_rows(&probs, labels)?;
    loss_trace.push(final_losses.iter().sum::<f64>() / final_losses.len() as f64);
    let success_mask = nn::predictions(&probs)
        .iter()
        .zip(labels)
        .map(|(p, t)| match goal {
            Goal::Away => p != t,
            Goal::Toward => p == t,
        })
        .collect();
    Ok(AttackResult {
        adversarial: cur,
        success_mask,
        queries: spec.steps as u64 + 1,
        probs,
        loss_trace,
        spec: spec.clone(),
    })
}

fn start_point(x: &Tensor, spec: &AttackSpec) -> Tensor {
    if spec.random_start {
        random_start(x, spec.epsilon, spec.seed)
    } else {
        x.clone()
    }
}

/// Projected gradient ascent on the cross-entropy of the true label, from a
/// uniform random start in the ball when `spec.random_start` is set.
pub fn pgd(target: &dyn Classifier, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AttackResult> {
    iterate(target, x, y, spec, start_point(x, spec), Goal::Away, Rule::Sign)
}

#[cfg(test)]
fn pgd_from(
    target: &dyn Classifier,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    start: Tensor,
) -> Result<AttackResult> {
    iterate(target, x, y, spec, start, Goal::Away, Rule::Sign)
}

/// PGD without the random start.
pub fn bim(target: &dyn Classifier, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AttackResult> {
    iterate(target, x, y, spec, x.clone(), Goal::Away, Rule::Sign)
}

/// Momentum iterative method: the step direction is the sign of
/// `g <- mu g + grad / |grad|_1`, normalised per example.
pub fn mim(target: &dyn Classifier, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AttackResult> {
    iterate(
        target,
        x,
        y,
        spec,
        start_point(x, spec),
        Goal::Away,
        Rule::Momentum(spec.momentum),
    )
}

/// Descends the cross-entropy toward per-example target classes; success
/// means the prediction lands on the target.
pub fn targeted(
    target: &dyn Classifier,
    x: &Tensor,
    goal: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    let rule = match spec.family {
        AttackFamily::Mim => Rule::Momentum(spec.momentum),
        _ => Rule::Sign,
    };
    let start = if spec.family == AttackFamily::Bim {
        x.clone()
    } else {
        start_point(x, spec)
    };
    iterate(target, x, goal, spec, start, Goal::Toward, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer, Model};

    fn linear_1d(w: f64) -> Model {
        // two logits (0, w x): class 1 grows with x when w > 0
        let layer = Layer::new(
            Tensor::matrix(2, 1, vec![0.0, w]).unwrap(),
            Tensor::vector(vec![0.0, -0.5 * w]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        Model::new(vec![layer], 2, 0).unwrap()
    }

    #[test]
    fn zero_budget_returns_input() {
        let m = Model::init(&[3, 4, 2], 2).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.4, 0.6], [0.9, 0.1, 0.3]]).unwrap();
        let y = vec![0, 1];
        let r = pgd(&m, &x, &y, &AttackSpec::pgd(5, 0.0, 0.01)).unwrap();
        assert_eq!(r.adversarial, x);
        let pred = m.predict_labels(&x).unwrap();
        for b in 0..2 {
            assert_eq!(r.success_mask[b], pred[b] != y[b]);
        }
    }

    #[test]
    fn bim_single_step_is_fgsm() {
        let m = Model::init(&[3, 4, 2], 2).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.4, 0.6]]).unwrap();
        let spec = AttackSpec::bim(1, 0.1, 0.03);
        let r = bim(&m, &x, &[1], &spec).unwrap();
        let (_, g) = m.loss_and_input_grad(&x, &[1]).unwrap();
        let want = fgsm_step(&x, &g, 0.03, &x, 0.1).unwrap();
        assert_eq!(r.adversarial, want);
        assert_eq!(r.queries, 2);
    }

    #[test]
    fn pgd_from_clean_start_equals_bim() {
        let m = Model::init(&[3, 6, 3], 8).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.4, 0.6], [0.5, 0.5, 0.5]]).unwrap();
        let y = [2, 0];
        let spec = AttackSpec::pgd(7, 0.1, 0.02).with_seed(3);
        let a = pgd_from(&m, &x, &y, &spec, x.clone()).unwrap();
        let b = bim(&m, &x, &y, &spec).unwrap();
        assert_eq!(a.adversarial, b.adversarial);
        let c = pgd(&m, &x, &y, &spec.clone().with_random_start(false)).unwrap();
        assert_eq!(c.adversarial, b.adversarial);
    }

    #[test]
    fn mim_without_momentum_tracks_bim() {
        let m = Model::init(&[3, 6, 3], 8).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.4, 0.6], [0.5, 0.5, 0.5]]).unwrap();
        let y = [2, 0];
        let a = mim(&m, &x, &y, &AttackSpec::mim(6, 0.1, 0.02, 0.0)).unwrap();
        let b = bim(&m, &x, &y, &AttackSpec::bim(6, 0.1, 0.02)).unwrap();
        assert_eq!(a.adversarial, b.adversarial);
    }

    #[test]
    fn targeted_toward_current_prediction_succeeds_immediately() {
        let m = Model::init(&[3, 6, 3], 8).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.4, 0.6]]).unwrap();
        let pred = m.predict_labels(&x).unwrap();
        let r = targeted(&m, &x, &pred, &AttackSpec::pgd(3, 0.0, 0.01)).unwrap();
        assert_eq!(r.success_mask, vec![true]);
        assert_eq!(r.adversarial, x);
    }

    #[test]
    fn one_dimensional_pgd_saturates_the_ball() {
        let m = linear_1d(4.0);
        let x = Tensor::from_rows(&[[0.3]]).unwrap();
        // true label 0: the loss increases with x, so the optimum is x + eps
        let r = bim(&m, &x, &[0], &AttackSpec::bim(5, 0.1, 0.03)).unwrap();
        assert!((r.adversarial.data()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let layer = Layer::new(
            Tensor::matrix(2, 1, vec![0.0, 1e308]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        let amplify = Layer::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 10.0]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        // logits overflow to +inf, so softmax and its gradient are NaN
        let m = Model::new(vec![layer, amplify], 2, 0).unwrap();
        let x = Tensor::from_rows(&[[0.5]]).unwrap();
        let err = pgd(&m, &x, &[0], &AttackSpec::bim(2, 0.1, 0.01)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 0 }), "{err}");
    }
}
