//! Probability-averaging ensembles, secure-set membership and the four-way
//! subset partition of adversarial examples under two members.
//!
//! Orientation of the subset tags: the first digit is the status of the first
//! model, the second digit that of the second model (`1` = correct). So
//! `S01` holds points the first model gets wrong and the second gets right.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::nn::{self, Model, Trace, PROB_FLOOR};
use crate::tensor::Tensor;

/// Slack on the l-infinity ball test.
pub const BALL_TOL: f64 = 1e-9;

/// Uniform average of member probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Model>", into = "Vec<Model>")]
pub struct Ensemble {
    members: Vec<Model>,
}

impl Ensemble {
    /// At least one member; all members must agree on input width and class count.
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Config("ensemble needs at least one member".into()));
        };
        let (d, m) = (first.input_dim(), first.num_classes());
        for (i, member) in members.iter().enumerate().skip(1) {
            if member.num_classes() != m {
                return Err(Error::Config(format!(
                    "member {i} emits {} classes, member 0 emits {m}",
                    member.num_classes()
                )));
            }
            if member.input_dim() != d {
                return Err(Error::Config(format!(
                    "member {i} takes {} inputs, member 0 takes {d}",
                    member.input_dim()
                )));
            }
        }
        Ok(Self { members })
    }

    /// `n` members with identical architecture, member `i` seeded `seed + i`.
    pub fn init(widths: &[usize], n: usize, seed: u64) -> Result<Self> {
        let members = (0..n as u64)
            .map(|i| Model::init(widths, seed.wrapping_add(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn member(&self, i: usize) -> &Model {
        &self.members[i]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn into_members(self) -> Vec<Model> {
        self.members
    }

    /// Member traces plus the averaged probabilities.
    pub fn forward_traces(&self, batch: &Tensor) -> Result<(Vec<Trace>, Tensor)> {
        let traces = self
            .members
            .iter()
            .map(|m| m.forward_trace(batch))
            .collect::<Result<Vec<_>>>()?;
        let mean = average_probs(traces.iter().map(|t| t.probs()))?;
        Ok((traces, mean))
    }
}

impl TryFrom<Vec<Model>> for Ensemble {
    type Error = Error;

    fn try_from(members: Vec<Model>) -> Result<Self> {
        Ensemble::new(members)
    }
}

impl From<Ensemble> for Vec<Model> {
    fn from(e: Ensemble) -> Self {
        e.members
    }
}

/// Element-wise mean of equally shaped probability matrices.
pub fn average_probs<'a>(probs: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut iter = probs.into_iter();
    let Some(first) = iter.next() else {
        return Err(Error::Config("nothing to average".into()));
    };
    let mut acc = first.clone();
    let mut n = 1usize;
    for p in iter {
        if !p.same_shape(&acc) {
            return Err(Error::Config(format!(
                "probability shapes {:?} and {:?} differ",
                acc.shape(),
                p.shape()
            )));
        }
        acc.data_mut()
            .iter_mut()
            .zip(p.data())
            .for_each(|(a, b)| *a += b);
        n += 1;
    }
    let inv = n as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= inv);
    Ok(acc)
}

/// Averaged member probabilities for `batch`.
pub fn ensemble_predict(ens: &Ensemble, batch: &Tensor) -> Result<Tensor> {
    let probs = ens
        .members
        .iter()
        .map(|m| m.forward(batch))
        .collect::<Result<Vec<_>>>()?;
    average_probs(&probs)
}

impl Classifier for Ensemble {
    fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        ensemble_predict(self, batch)
    }

    /// Cross-entropy of the averaged probability; gradients flow through the
    /// average into every member.
    fn loss_and_input_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let (traces, mean) = self.forward_traces(batch)?;
        let losses = nn::cross_entropy_rows(&mean, labels)?;
        let m = Classifier::num_classes(self);
        let n = self.members.len() as f64;
        let mut dprobs = vec![0.0; batch.rows() * m];
        for (b, (p, &y)) in mean.iter_rows().zip(labels).enumerate() {
            if p[y] >= PROB_FLOOR {
                dprobs[b * m + y] = -1.0 / (p[y] * n);
            }
        }
        let mut input = Tensor::zeros(batch.shape().to_vec());
        for (member, trace) in self.members.iter().zip(&traces) {
            let g = member.backward_probs(trace, &dprobs)?;
            input
                .data_mut()
                .iter_mut()
                .zip(g.input.data())
                .for_each(|(a, b)| *a += b);
        }
        Ok((losses, input))
    }
}

/// Which of the four subsets a point falls into under two models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    S11,
    S01,
    S10,
    S00,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::S11, Subset::S01, Subset::S10, Subset::S00];

    pub fn from_status(first_correct: bool, second_correct: bool) -> Self {
        match (first_correct, second_correct) {
            (true, true) => Subset::S11,
            (false, true) => Subset::S01,
            (true, false) => Subset::S10,
            (false, false) => Subset::S00,
        }
    }

    fn index(self) -> usize {
        match self {
            Subset::S11 => 0,
            Subset::S01 => 1,
            Subset::S10 => 2,
            Subset::S00 => 3,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Subset::S11 => "S11",
            Subset::S01 => "S01",
            Subset::S10 => "S10",
            Subset::S00 => "S00",
        };
        f.write_str(s)
    }
}

/// Percentages of probes in each subset, at full precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cardinalities {
    pub s11: f64,
    pub s01: f64,
    pub s10: f64,
    pub s00: f64,
}

impl Cardinalities {
    pub fn get(&self, s: Subset) -> f64 {
        match s {
            Subset::S11 => self.s11,
            Subset::S01 => self.s01,
            Subset::S10 => self.s10,
            Subset::S00 => self.s00,
        }
    }

    pub fn total(&self) -> f64 {
        self.s11 + self.s01 + self.s10 + self.s00
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPartition {
    pub assignments: Vec<Subset>,
    pub cardinalities: Cardinalities,
}

impl SubsetPartition {
    pub fn from_assignments(assignments: Vec<Subset>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::Contract("partition of zero probes".into()));
        }
        let mut counts = [0usize; 4];
        for s in &assignments {
            counts[s.index()] += 1;
        }
        let n = assignments.len() as f64;
        let pct = |c: usize| 100.0 * c as f64 / n;
        Ok(Self {
            cardinalities: Cardinalities {
                s11: pct(counts[0]),
                s01: pct(counts[1]),
                s10: pct(counts[2]),
                s00: pct(counts[3]),
            },
            assignments,
        })
    }

    pub fn count(&self, s: Subset) -> usize {
        self.assignments.iter().filter(|&&a| a == s).count()
    }

    /// `example_id,tag` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("example_id,tag\n");
        for (i, s) in self.assignments.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }

    /// JSON summary of the cardinalities.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            n: usize,
            cardinalities: &'a Cardinalities,
        }
        Ok(serde_json::to_string_pretty(&Summary {
            n: self.assignments.len(),
            cardinalities: &self.cardinalities,
        })?)
    }
}

fn check_probes(probes: &Tensor, x: &Tensor, y: &[usize], eps: f64) -> Result<()> {
    if !probes.same_shape(x) {
        return Err(Error::Shape(format!(
            "probe shape {:?} differs from input shape {:?}",
            probes.shape(),
            x.shape()
        )));
    }
    if y.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", y.len(), x.rows())));
    }
    for i in 0..x.rows() {
        let d = probes.row_linf_distance(x, i);
        if d > eps + BALL_TOL {
            return Err(Error::Contract(format!(
                "probe {i} lies {d} from its origin, outside the ball of radius {eps}"
            )));
        }
    }
    Ok(())
}

/// Per-row secure-set membership: `argmax f(probe) == y` for probes that lie
/// in the l-infinity ball of radius `eps` around their origin row of `x`.
pub fn secure_mask(
    f: &dyn Classifier,
    probes: &Tensor,
    x: &Tensor,
    y: &[usize],
    eps: f64,
) -> Result<Vec<bool>> {
    check_probes(probes, x, y, eps)?;
    let pred = f.predict_labels(probes)?;
    Ok(pred.iter().zip(y).map(|(p, t)| p == t).collect())
}

/// Whether a single probe lies in the secure set of `f` around `(x, y)`.
pub fn is_secure(f: &dyn Classifier, probe: &[f64], x: &[f64], y: usize, eps: f64) -> Result<bool> {
    let p = Tensor::from_rows(&[probe])?;
    let o = Tensor::from_rows(&[x])?;
    Ok(secure_mask(f, &p, &o, &[y], eps)?[0])
}

/// Tags every probe by (secure under `f1`, secure under `f2`).
pub fn partition(
    f1: &dyn Classifier,
    f2: &dyn Classifier,
    probes: &Tensor,
    x: &Tensor,
    y: &[usize],
    eps: f64,
) -> Result<SubsetPartition> {
    let a = secure_mask(f1, probes, x, y, eps)?;
    let b = secure_mask(f2, probes, x, y, eps)?;
    SubsetPartition::from_assignments(
        a.iter()
            .zip(&b)
            .map(|(&s1, &s2)| Subset::from_status(s1, s2))
            .collect(),
    )
}

/// Counts probes secure under both models but not under their 50/50 average.
/// Any nonzero count is a bug.
pub fn lemma_check(
    f1: &Model,
    f2: &Model,
    probes: &Tensor,
    x: &Tensor,
    y: &[usize],
    eps: f64,
) -> Result<usize> {
    check_probes(probes, x, y, eps)?;
    let p1 = f1.forward(probes)?;
    let p2 = f2.forward(probes)?;
    if p1.cols() != p2.cols() {
        return Err(Error::Config("models emit different class counts".into()));
    }
    let en = average_probs([&p1, &p2])?;
    let mut violations = 0;
    for (i, &t) in y.iter().enumerate() {
        let both = nn::argmax(p1.row(i)) == t && nn::argmax(p2.row(i)) == t;
        if both && nn::argmax(en.row(i)) != t {
            violations += 1;
        }
    }
    Ok(violations)
}
