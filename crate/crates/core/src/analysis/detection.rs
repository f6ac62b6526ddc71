//! Entropy of the averaged prediction as an adversarial-example detector.

use std::cmp::Ordering;

use serde::Serialize;

use crate::ensemble::{ensemble_predict, Ensemble};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::Tensor;

/// One ROC point: predict "adversarial" when the score exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionSummary {
    pub auc: f64,
    pub n_benign: usize,
    pub n_adv: usize,
    pub mean_benign_entropy: f64,
    pub mean_adv_entropy: f64,
    /// The same detector scored with the mean of the members' own entropies.
    pub member_entropy_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub benign_scores: Vec<f64>,
    pub adv_scores: Vec<f64>,
    pub benign_member_entropy: Vec<f64>,
    pub adv_member_entropy: Vec<f64>,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
}

fn fmt_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else if t == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        t.to_string()
    }
}

impl DetectionReport {
    pub fn summary(&self) -> Result<DetectionSummary> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(DetectionSummary {
            auc: self.auc,
            n_benign: self.benign_scores.len(),
            n_adv: self.adv_scores.len(),
            mean_benign_entropy: mean(&self.benign_scores),
            mean_adv_entropy: mean(&self.adv_scores),
            member_entropy_auc: auc(&self.benign_member_entropy, &self.adv_member_entropy)?,
        })
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary()?)?)
    }

    /// `fpr,tpr` pairs from the strictest threshold to the loosest.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.roc {
            out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
        }
        out
    }

    /// The full threshold sweep, `threshold,fpr,tpr`.
    pub fn threshold_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.roc {
            out.push_str(&format!("{},{},{}\n", fmt_threshold(p.threshold), p.fpr, p.tpr));
        }
        out
    }

    /// `kind,ensemble_entropy,member_entropy` per example.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("kind,ensemble_entropy,member_entropy\n");
        for (kind, s, m) in [
            ("benign", &self.benign_scores, &self.benign_member_entropy),
            ("adversarial", &self.adv_scores, &self.adv_member_entropy),
        ] {
            for (a, b) in s.iter().zip(m.iter()) {
                out.push_str(&format!("{kind},{a},{b}\n"));
            }
        }
        out
    }
}

fn check_scores(benign: &[f64], adv: &[f64]) -> Result<()> {
    if benign.is_empty() || adv.is_empty() {
        return Err(Error::Domain("detection needs benign and adversarial scores".into()));
    }
    if benign.iter().chain(adv).any(|s| s.is_nan()) {
        return Err(Error::Domain("scores contain NaN".into()));
    }
    Ok(())
}

/// Probability that a random adversarial score exceeds a random benign one,
/// ties counting one half. Counted exactly in integers.
pub fn auc(benign: &[f64], adv: &[f64]) -> Result<f64> {
    check_scores(benign, adv)?;
    let mut sorted = benign.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    // twice the number of favourable pairs
    let mut doubled: u128 = 0;
    for &s in adv {
        let below = sorted.partition_point(|&b| b < s);
        let not_above = sorted.partition_point(|&b| b <= s);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(doubled as f64 / (2 * benign.len() as u128 * adv.len() as u128) as f64)
}

/// ROC over thresholds `+inf`, the midpoints between adjacent distinct scores
/// (descending), and `-inf`.
pub fn roc_curve(benign: &[f64], adv: &[f64]) -> Result<Vec<RocPoint>> {
    check_scores(benign, adv)?;
    let mut distinct: Vec<f64> = benign.iter().chain(adv).copied().collect();
    distinct.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    distinct.dedup();
    let mut thresholds = vec![f64::INFINITY];
    thresholds.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(f64::NEG_INFINITY);
    let rate = |scores: &[f64], t: f64| scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64;
    Ok(thresholds
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            fpr: rate(benign, t),
            tpr: rate(adv, t),
        })
        .collect())
}

fn member_mean_entropy(ens: &Ensemble, batch: &Tensor) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; batch.rows()];
    for m in ens.members() {
        for (a, h) in acc.iter_mut().zip(nn::entropy(&m.forward(batch)?)?) {
            *a += h / ens.len() as f64;
        }
    }
    Ok(acc)
}

/// Scores both batches by `H(f^en(x))` and sweeps the threshold.
pub fn detect(ens: &Ensemble, benign: &Tensor, adv: &Tensor) -> Result<DetectionReport> {
    let benign_scores = nn::entropy(&ensemble_predict(ens, benign)?)?;
    let adv_scores = nn::entropy(&ensemble_predict(ens, adv)?)?;
    let roc = roc_curve(&benign_scores, &adv_scores)?;
    let auc = auc(&benign_scores, &adv_scores)?;
    Ok(DetectionReport {
        benign_member_entropy: member_mean_entropy(ens, benign)?,
        adv_member_entropy: member_mean_entropy(ens, adv)?,
        benign_scores,
        adv_scores,
        roc,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_and_identical_sets() {
        assert_eq!(auc(&[0.1, 0.2], &[0.5, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.9], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.5);
    }

    #[test]
    fn small_pair_count() {
        assert_eq!(auc(&[0.1, 0.2], &[0.15, 0.3]).unwrap(), 0.75);
    }

    #[test]
    fn roc_runs_from_origin_to_corner() {
        let roc = roc_curve(&[0.1, 0.2, 0.2], &[0.15, 0.3]).unwrap();
        let first = roc.first().unwrap();
        let last = roc.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        // 4 distinct scores: 3 midpoints plus the two sentinels
        assert_eq!(roc.len(), 5);
        assert!(roc.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }

    #[test]
    fn trapezoid_area_equals_pair_count() {
        let benign = [0.1, 0.4, 0.4, 0.35, 0.8];
        let adv = [0.4, 0.9, 0.05, 0.6];
        let roc = roc_curve(&benign, &adv).unwrap();
        let area: f64 = roc
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum();
        assert!((area - auc(&benign, &adv).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn threshold_csv_marks_sentinels() {
        let rep = DetectionReport {
            benign_scores: vec![0.1],
            adv_scores: vec![0.3],
            benign_member_entropy: vec![0.1],
            adv_member_entropy: vec![0.3],
            roc: roc_curve(&[0.1], &[0.3]).unwrap(),
            auc: 1.0,
        };
        let csv = rep.threshold_csv();
        assert!(csv.starts_with("threshold,fpr,tpr\ninf,0,0\n0.2,0,1\n-inf,1,1\n"), "{csv}");
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(auc(&[], &[0.1]).is_err());
    }
}
