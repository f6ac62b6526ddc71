//! Post-training evaluation: robust accuracy, cross-attack matrices, the
//! transferability summary metrics, entropy-based detection and loss surfaces.
//!
//! Percentages are kept at full precision; [`round1`] is for report emission.

mod detection;
mod surface;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackSpec};
use crate::classifier::Classifier;
use crate::datasets::Dataset;
use crate::ensemble::{self, Cardinalities, Ensemble, Subset};
use crate::error::{Error, Result};

pub use detection::{auc, detect, roc_curve, DetectionReport, DetectionSummary, RocPoint};
pub use surface::{surface_grid, SurfaceGrid};

/// Slack allowed for percentages that should lie in `[0, 100]` after rounding.
pub const ROUNDING_SLACK: f64 = 0.5;

/// One decimal place, as reported in tables.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn percent_correct(preds: &[usize], y: &[usize]) -> f64 {
    let hits = preds.iter().zip(y).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / y.len() as f64
}

/// Clean accuracy in percent.
pub fn accuracy(target: &dyn Classifier, data: &Dataset) -> Result<f64> {
    Ok(percent_correct(&target.predict_labels(data.inputs())?, data.labels()))
}

/// Percentage of examples still predicted correctly after attacking `target` itself.
pub fn robust_accuracy(target: &dyn Classifier, data: &Dataset, spec: &AttackSpec) -> Result<f64> {
    let res = attacks::run_attack(target, data.inputs(), data.labels(), spec)?;
    Ok(percent_correct(&res.predictions(), data.labels()))
}

/// Robust accuracies `a[i][j]`: model `j` evaluated on examples crafted against model `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub labels: Vec<String>,
    pub a: Vec<Vec<f64>>,
}

impl CrossMatrix {
    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.a[source][target]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Rows are attack sources, columns evaluated models.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.a) {
            out.push_str(l);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Attacks every model once with `spec` and scores every model on each adversarial set.
pub fn cross_matrix(models: &[(String, &dyn Classifier)], data: &Dataset, spec: &AttackSpec) -> Result<CrossMatrix> {
    if models.len() < 2 {
        return Err(Error::Config("cross matrix needs at least 2 models".into()));
    }
    let mut a = Vec::with_capacity(models.len());
    for (_, source) in models {
        let adv = attacks::run_attack(*source, data.inputs(), data.labels(), spec)?.adversarial;
        let row = models
            .iter()
            .map(|(_, target)| Ok(percent_correct(&target.predict_labels(&adv)?, data.labels())))
            .collect::<Result<Vec<_>>>()?;
        a.push(row);
    }
    Ok(CrossMatrix {
        labels: models.iter().map(|(l, _)| l.clone()).collect(),
        a,
    })
}

/// `a(i,j) - a(i,i) + a(j,i) - a(j,j)` for models `i` and `j` of the matrix.
pub fn pairwise_t(m: &CrossMatrix, i: usize, j: usize) -> Result<f64> {
    let k = m.a.len();
    if m.labels.len() != k || m.a.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("cross matrix must be square".into()));
    }
    if i >= k || j >= k || i == j {
        return Err(Error::Shape(format!("pair ({i}, {j}) is not within a {k}x{k} matrix")));
    }
    Ok(m.a[i][j] - m.a[i][i] + m.a[j][i] - m.a[j][j])
}

/// Transferability between the first two models of the matrix.
pub fn transferability_t(m: &CrossMatrix) -> Result<f64> {
    pairwise_t(m, 0, 1)
}

fn warn_range(name: &str, v: f64, warnings: &mut Vec<String>) {
    if !(-ROUNDING_SLACK..=100.0).contains(&v) {
        let msg = format!("{name} = {v} lies outside [-{ROUNDING_SLACK}, 100]");
        log::warn!("{msg}");
        warnings.push(msg);
    }
}

/// Successful but non-transferable share: `100 - a_en_en - s00`.
pub fn non_transferable_nt(a_en_en: f64, s00_pct: f64) -> f64 {
    let v = 100.0 - a_en_en - s00_pct;
    warn_range("nT", v, &mut Vec::new());
    v
}

/// Ensemble-correct examples that only one member gets right: `a_en_en - s11`.
pub fn single_correct_a_single(a_en_en: f64, s11_pct: f64) -> f64 {
    let v = a_en_en - s11_pct;
    warn_range("a_single", v, &mut Vec::new());
    v
}

/// Transferability summary of a two-member ensemble under one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    /// Ensemble accuracy on examples crafted against the ensemble.
    pub a_en_en: f64,
    /// Members plus ensemble, labelled `f1, f2, ..., en`.
    pub cross: CrossMatrix,
    /// `T` for every member pair `(i, j)`, `i < j`.
    pub t_pairs: Vec<(usize, usize, f64)>,
    /// Subset percentages of the ensemble's adversarial examples under members 1 and 2.
    pub subsets: Cardinalities,
    pub nt: f64,
    pub a_single: f64,
    pub warnings: Vec<String>,
}

impl TransferMetrics {
    /// The two-member `T`.
    pub fn t(&self) -> f64 {
        self.t_pairs[0].2
    }

    /// Table-style JSON with every percentage rounded to one decimal.
    pub fn summary_json(&self) -> Result<String> {
        let c = &self.subsets;
        let pairs: Vec<_> = self
            .t_pairs
            .iter()
            .map(|&(i, j, t)| serde_json::json!({"i": i + 1, "j": j + 1, "T": round1(t)}))
            .collect();
        let v = serde_json::json!({
            "a_en_en": round1(self.a_en_en),
            "T": round1(self.t()),
            "T_pairs": pairs,
            "S11": round1(c.s11),
            "S01": round1(c.s01),
            "S10": round1(c.s10),
            "S00": round1(c.s00),
            "nT": round1(self.nt),
            "a_single": round1(self.a_single),
            "warnings": self.warnings,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Attacks the ensemble and every member with `spec`, partitions the
/// ensemble's adversarial examples by the first two members, and derives `T`,
/// `nT` and `a_single` from that single evaluation.
pub fn transfer_metrics(ens: &Ensemble, data: &Dataset, spec: &AttackSpec) -> Result<TransferMetrics> {
    if ens.len() < 2 {
        return Err(Error::Config("transfer metrics need at least 2 members".into()));
    }
    let (x, y) = (data.inputs(), data.labels());
    let mut models: Vec<(String, &dyn Classifier)> = ens
        .members()
        .iter()
        .enumerate()
        .map(|(i, m)| (format!("f{}", i + 1), m as &dyn Classifier))
        .collect();
    models.push(("en".into(), ens as &dyn Classifier));
    let cross = cross_matrix(&models, data, spec)?;
    let en = cross.a.len() - 1;
    let a_en_en = cross.a[en][en];

    let x_a_en = attacks::run_attack(ens, x, y, spec)?.adversarial;
    let part = ensemble::partition(ens.member(0), ens.member(1), &x_a_en, x, y, spec.epsilon)?;
    let subsets = part.cardinalities;
    let mut warnings = Vec::new();
    let nt = 100.0 - a_en_en - subsets.get(Subset::S00);
    let a_single = a_en_en - subsets.get(Subset::S11);
    warn_range("nT", nt, &mut warnings);
    warn_range("a_single", a_single, &mut warnings);
    let mut t_pairs = Vec::new();
    for i in 0..ens.len() {
        for j in i + 1..ens.len() {
            t_pairs.push((i, j, pairwise_t(&cross, i, j)?));
        }
    }
    Ok(TransferMetrics {
        a_en_en,
        cross,
        t_pairs,
        subsets,
        nt,
        a_single,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;
    use crate::nn::Model;

    #[test]
    fn t_arithmetic() {
        let m = CrossMatrix {
            labels: vec!["f1".into(), "f2".into()],
            a: vec![vec![40.0, 60.0], vec![58.0, 42.0]],
        };
        assert_eq!(transferability_t(&m).unwrap(), 36.0);
        assert!(pairwise_t(&m, 0, 0).is_err());
    }

    #[test]
    fn table_values() {
        assert_eq!(round1(non_transferable_nt(45.5, 49.5)), 5.0);
        assert_eq!(round1(non_transferable_nt(40.7, 46.0)), 13.3);
        assert_eq!(round1(single_correct_a_single(45.5, 39.9)), 5.6);
        assert_eq!(round1(single_correct_a_single(42.9, 25.7)), 17.2);
        assert_eq!(non_transferable_nt(100.0, 0.0), 0.0);
        assert_eq!(single_correct_a_single(37.5, 37.5), 0.0);
    }

    #[test]
    fn zero_budget_robust_accuracy_is_clean_accuracy() {
        let data = datasets::gen_blobs(1, 20, 3, 4, 0.4).unwrap();
        let m = Model::init(&[4, 8, 3], 2).unwrap();
        let spec = AttackSpec::pgd(5, 0.0, 0.01);
        assert_eq!(robust_accuracy(&m, &data, &spec).unwrap(), accuracy(&m, &data).unwrap());
    }

    #[test]
    fn identical_members_have_zero_t_and_matching_diagonal() {
        let data = datasets::gen_blobs(1, 20, 3, 4, 0.4).unwrap();
        let m = Model::init(&[4, 8, 3], 2).unwrap();
        let ens = Ensemble::new(vec![m.clone(), m.clone()]).unwrap();
        let spec = AttackSpec::pgd(5, 0.05, 0.01).with_seed(4);
        let tm = transfer_metrics(&ens, &data, &spec).unwrap();
        assert_eq!(tm.t(), 0.0);
        assert_eq!(tm.cross.get(0, 0), robust_accuracy(&m, &data, &spec).unwrap());
        assert_eq!(tm.subsets.s01 + tm.subsets.s10, 0.0);
        assert!((tm.nt + tm.a_single - (100.0 - tm.subsets.s00 - tm.subsets.s11)).abs() < 1e-9);
    }

    #[test]
    fn cross_csv_layout() {
        let m = CrossMatrix {
            labels: vec!["f1".into(), "en".into()],
            a: vec![vec![40.0, 60.5], vec![58.0, 42.0]],
        };
        assert_eq!(m.to_csv(), "source,f1,en\nf1,40,60.5\nen,58,42\n");
    }
}
