//! Loss and predicted label on a 2-D grid through an input: one axis along
//! the loss gradient, the other a seeded random orthogonal direction.

use rand_distr::{Distribution, StandardNormal};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::nn;
use crate::seed::{self, derive_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub center: Vec<f64>,
    pub label: usize,
    /// Unit gradient direction (or the random fallback, see `fallback_u`).
    pub u: Vec<f64>,
    /// Unit direction orthogonal to `u`.
    pub v: Vec<f64>,
    pub radius: usize,
    pub step: f64,
    /// `(2r+1)^2` losses, `i` major, both indices running from `-r` to `r`.
    pub losses: Vec<f64>,
    pub labels: Vec<usize>,
    /// Set when the gradient at the center was zero and `u` was drawn at random.
    pub fallback_u: bool,
}

impl SurfaceGrid {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Loss at offsets `(i, j)` in `[-r, r]^2`.
    pub fn loss_at(&self, i: i64, j: i64) -> f64 {
        self.losses[self.cell(i, j)]
    }

    pub fn label_at(&self, i: i64, j: i64) -> usize {
        self.labels[self.cell(i, j)]
    }

    fn cell(&self, i: i64, j: i64) -> usize {
        let r = self.radius as i64;
        ((i + r) * (2 * r + 1) + (j + r)) as usize
    }

    /// Long format `i,j,loss,label`.
    pub fn to_csv(&self) -> String {
        let r = self.radius as i64;
        let mut out = String::from("i,j,loss,label\n");
        for i in -r..=r {
            for j in -r..=r {
                out.push_str(&format!("{i},{j},{},{}\n", self.loss_at(i, j), self.label_at(i, j)));
            }
        }
        out
    }
}

fn unit(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
    n
}

fn gaussian(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Grid of `C(f(clip(x_a + i step u + j step v)), y)` for `i, j` in `[-r, r]`.
pub fn surface_grid(
    target: &dyn Classifier,
    x_a: &[f64],
    y: usize,
    radius: usize,
    step: f64,
    seed: u64,
) -> Result<SurfaceGrid> {
    let d = x_a.len();
    if radius < 1 || !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("surface needs r >= 1 and step > 0, got r = {radius}, step = {step}")));
    }
    if d < 2 {
        return Err(Error::Domain("surface needs at least 2 input dimensions".into()));
    }
    let center = Tensor::from_rows(&[x_a])?;
    let (_, grad) = target.loss_and_input_grad(&center, &[y])?;
    let mut u = grad.into_data();
    let mut fallback_u = false;
    if u.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: 0 });
    }
    if unit(&mut u) == 0.0 {
        log::warn!("zero input gradient at the surface center; using a random direction");
        fallback_u = true;
        u = gaussian(d, derive_seed(seed, &[0]));
        unit(&mut u);
    }
    let mut v = gaussian(d, derive_seed(seed, &[1]));
    let along: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(a, b)| *a -= along * b);
    if unit(&mut v) == 0.0 {
        return Err(Error::Domain("random direction collapsed onto the gradient".into()));
    }

    let r = radius as i64;
    let side = 2 * radius + 1;
    let mut points = Vec::with_capacity(side * side * d);
    for i in -r..=r {
        for j in -r..=r {
            let (a, b) = (i as f64 * step, j as f64 * step);
            points.extend((0..d).map(|k| (x_a[k] + a * u[k] + b * v[k]).clamp(0.0, 1.0)));
        }
    }
    let batch = Tensor::matrix(side * side, d, points)?;
    let probs = target.predict(&batch)?;
    let losses = nn::cross_entropy_rows(&probs, &vec![y; side * side])?;
    Ok(SurfaceGrid {
        center: x_a.to_vec(),
        label: y,
        u,
        v,
        radius,
        step,
        losses,
        labels: nn::predictions(&probs),
        fallback_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Model;

    #[test]
    fn center_and_orthogonality() {
        let m = Model::init(&[4, 8, 3], 3).unwrap();
        let x = [0.3, 0.6, 0.2, 0.5];
        let g = surface_grid(&m, &x, 1, 2, 0.01, 7).unwrap();
        assert_eq!(g.losses.len(), 25);
        let want = nn::cross_entropy(&m.forward(&Tensor::from_rows(&[x]).unwrap()).unwrap(), &[1]).unwrap();
        assert_eq!(g.loss_at(0, 0), want);
        let dot: f64 = g.u.iter().zip(&g.v).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9);
        assert!((g.u.iter().map(|a| a * a).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((g.v.iter().map(|a| a * a).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g.to_csv().lines().count(), 26);
        assert!(!g.fallback_u);
    }

    #[test]
    fn zero_gradient_falls_back() {
        let m = Model::zeros(&[3, 2]).unwrap();
        let g = surface_grid(&m, &[0.5, 0.5, 0.5], 0, 1, 0.1, 1).unwrap();
        assert!(g.fallback_u);
        assert!(g.losses.iter().all(|&l| (l - 2f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn first_step_along_gradient_does_not_lower_loss() {
        let m = Model::init(&[4, 8, 3], 5).unwrap();
        let x = [0.3, 0.6, 0.2, 0.5];
        let g = surface_grid(&m, &x, 0, 1, 1e-3, 2).unwrap();
        assert!(g.loss_at(1, 0) >= g.loss_at(0, 0));
    }
}
