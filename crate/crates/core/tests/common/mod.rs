#![allow(dead_code)]

use cce_lab::nn::{Activation, Layer, Model};
use cce_lab::Tensor;

/// Single identity layer with `weights[o]` as the row of output `o`.
pub fn linear(weights: &[&[f64]], bias: &[f64]) -> Model {
    let (out, inp) = (weights.len(), weights[0].len());
    let w = Tensor::matrix(out, inp, weights.concat()).unwrap();
    let layer = Layer::new(w, Tensor::vector(bias.to_vec()).unwrap(), Activation::Identity).unwrap();
    Model::new(vec![layer], out, 0).unwrap()
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over the entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn uniform_batch(rng: &mut impl rand::Rng, rows: usize, d: usize) -> Tensor {
    Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.random::<f64>()).collect()).unwrap()
}
