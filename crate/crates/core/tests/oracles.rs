mod common;

use cce_lab::analysis;
use cce_lab::attacks::AttackSpec;
use cce_lab::datasets::{self, Dataset};
use cce_lab::ensemble::{self, Ensemble, Subset};
use cce_lab::nn::{self, LossSpec, LossTerm, Model, OptimState};
use cce_lab::training::{self, adv_en_loss, cce_objective, Method, TrainConfig};
use cce_lab::{seed, Classifier, Tensor};
use rand::Rng;

use common::linear;

fn fit(data: &Dataset, widths: &[usize], seed: u64, steps: usize, lr: f64) -> Model {
    let mut m = Model::init(widths, seed).unwrap();
    let mut opt = OptimState::new(&m, lr).unwrap();
    let spec = LossSpec::new(vec![LossTerm::cross_entropy(data.labels().to_vec(), 1.0)]);
    for _ in 0..steps {
        let (_, g) = nn::value_and_backward(&m, data.inputs(), &spec).unwrap();
        (m, opt) = nn::optimize_step(&m, &g.params, &opt).unwrap();
    }
    m
}

#[test]
fn one_dimensional_input_gradient_sign_is_closed_form() {
    let mut rng = seed::rng(3);
    for _ in 0..200 {
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rows: Vec<[f64; 1]> = w.iter().map(|&v| [v]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let f = linear(&refs, &[0.0; 3]);
        let x = rng.random_range(0.0..1.0);
        let y = rng.random_range(0..3);
        let batch = Tensor::from_rows(&[[x]]).unwrap();
        let p = f.forward(&batch).unwrap();
        let expected: f64 = w.iter().zip(p.row(0)).map(|(a, b)| a * b).sum::<f64>() - w[y];
        let (_, g) = f.loss_and_input_grad(&batch, &[y]).unwrap();
        if expected.abs() > 1e-9 {
            assert_eq!(g.data()[0].signum(), expected.signum());
        }
    }
}

#[test]
fn well_separated_blobs_are_linearly_separable() {
    // separation 0.3 is six cluster standard deviations
    let data = datasets::gen_blobs(9, 100, 3, 4, 0.3).unwrap();
    let m = fit(&data, &[4, 3], 1, 800, 0.05);
    assert!(analysis::accuracy(&m, &data).unwrap() >= 99.0);
}

#[test]
fn idx_round_trip_rebuilds_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("images"), dir.path().join("labels"));
    let pixels: Vec<u8> = (0..4 * 6).map(|i| (i * 11) as u8).collect();
    let labels = [2u8, 0, 1, 2];
    datasets::write_idx(&ip, &lp, 2, 3, &pixels, &labels).unwrap();
    let got = datasets::load_idx(&ip, &lp).unwrap();
    let inputs = Tensor::matrix(4, 6, pixels.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
    let want = Dataset::new(inputs, vec![2, 0, 1, 2], 3, "idx", 0).unwrap();
    assert_eq!(got, want);
}

#[test]
fn is_secure_matches_direct_argmax() {
    let data = datasets::gen_blobs(1, 30, 3, 2, 0.3).unwrap();
    let m = fit(&data, &[2, 6, 3], 4, 200, 0.02);
    let mut rng = seed::rng(12);
    let eps = 0.05;
    for _ in 0..10_000 {
        let i = rng.random_range(0..data.len());
        let x = data.inputs().row(i);
        let probe: Vec<f64> = x.iter().map(|v| (v + rng.random_range(-eps..eps)).clamp(0.0, 1.0)).collect();
        let y = data.labels()[i];
        // recompute the forward pass by hand
        let mut h = probe.clone();
        for (k, layer) in m.layers().iter().enumerate() {
            let (w, b) = (layer.weights(), layer.bias().data());
            h = (0..w.rows())
                .map(|o| {
                    let z = b[o] + w.row(o).iter().zip(&h).map(|(a, c)| a * c).sum::<f64>();
                    if k + 1 < m.layers().len() { z.max(0.0) } else { z }
                })
                .collect();
        }
        let direct = nn::argmax(&h) == y;
        assert_eq!(ensemble::is_secure(&m, &probe, x, y, eps).unwrap(), direct);
    }
}

#[test]
fn rounded_table_cardinalities_sum_near_100() {
    let row = [39.9, 5.2, 5.5, 49.5];
    let total: f64 = row.iter().sum();
    assert!((total - 100.0).abs() <= 4.0 * 0.05 + 1e-9);
    // unrounded partition percentages must add to exactly 100
    let part = ensemble::SubsetPartition::from_assignments(
        [Subset::S11, Subset::S01, Subset::S10, Subset::S00, Subset::S00, Subset::S11, Subset::S00].to_vec(),
    )
    .unwrap();
    assert_eq!(part.cardinalities.total(), 100.0);
}

/// Input-independent model with the given class probabilities.
fn constant(probs: &[f64]) -> Model {
    let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let zero = vec![0.0; 2];
    let rows: Vec<&[f64]> = (0..probs.len()).map(|_| zero.as_slice()).collect();
    linear(&rows, &logits)
}

#[test]
fn tiny_two_member_loss_by_hand() {
    let ens = Ensemble::new(vec![constant(&[0.25, 0.75]), constant(&[0.5, 0.5])]).unwrap();
    let x = Tensor::from_rows(&[[0.1, 0.2]]).unwrap();
    let adv = vec![Tensor::from_rows(&[[0.3, 0.4]]).unwrap(), Tensor::from_rows(&[[0.5, 0.6]]).unwrap()];
    let y = [0];
    let obj = cce_objective(0, &ens, &x, &y, &adv, 1.0, 1.0).unwrap();
    let b = obj.breakdown(ens.member(0)).unwrap();
    // ln 4, ln 4, 0.25 ln 4, -0.75 H(0.25, 0.75)
    let close = |a: f64, e: f64| (a - e).abs() <= 1e-12;
    assert!(close(b.clean_ce, 1.3862943611198906));
    assert!(close(b.dpo_ce, 1.3862943611198906));
    assert!(close(b.cpo_ce, 0.34657359027997264));
    assert!(close(b.do_h, -0.4217513584641062));
    assert!(close(b.total, 2.6974109540556475));
    // the uniform member: cross-promote and demote cancel
    let other = cce_objective(1, &ens, &x, &y, &adv, 1.0, 1.0).unwrap();
    assert!(close(other.value(ens.member(1)).unwrap(), 1.3862943611198906));
}

#[test]
fn ensemble_adversarial_loss_uses_the_averaged_probability() {
    let ens = Ensemble::new(vec![constant(&[0.25, 0.75]), constant(&[0.5, 0.5])]).unwrap();
    let x = Tensor::from_rows(&[[0.1, 0.2], [0.7, 0.9]]).unwrap();
    let x_a = Tensor::from_rows(&[[0.2, 0.2], [0.6, 0.9]]).unwrap();
    // -2 ln 0.375
    let v = adv_en_loss(&ens, &x, &[0, 0], &x_a).unwrap();
    assert!((v - 1.9616585060234524).abs() <= 1e-12);
}

fn adv_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 32,
        seed,
        learning_rate: 0.01,
        attack: AttackSpec::pgd(10, 0.05, 0.0125),
    }
}

#[test]
fn examples_from_an_undefended_source_transfer_poorly_to_a_defended_model() {
    let data = datasets::gen_blobs_with_sigma(3, 200, 3, 8, 0.2, 0.03).unwrap();
    let (train_set, test) = data.split(0.3, 3).unwrap();
    let natural = fit(&train_set, &[8, 16, 3], 5, 300, 0.01);
    let config = adv_config(7);
    let init = training::init_ensemble(&[8, 16, 3], 1, &config).unwrap();
    let defended = training::train(&init, &train_set, &config, &Method::Adv).unwrap().ensemble;
    let spec = AttackSpec::pgd(20, 0.05, 0.00625).with_seed(1);
    let models: Vec<(String, &dyn Classifier)> = vec![("nat".into(), &natural), ("def".into(), defended.member(0))];
    let m = analysis::cross_matrix(&models, &test, &spec).unwrap();
    assert!(m.get(0, 1) > m.get(1, 1), "{m:?}");
}
