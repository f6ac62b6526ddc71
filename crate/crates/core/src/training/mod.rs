//! Ensemble adversarial training: per-member adversarial training, the
//! ensemble-level baselines, and the collaborative promote/demote loss.
//!
//! Every batch runs three phases: generate adversarial examples against the
//! current snapshot, compute every member's gradient against that same
//! snapshot, then apply all optimizer steps. Updates are therefore
//! independent of member order.

mod adp;
mod losses;

use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::attacks::{self, AttackSpec};
use crate::datasets::Dataset;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::nn::{self, OptimState, ParamGrads};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub use adp::{adp_loss_gradients, adp_regularizer, AdpBreakdown, AdpValue, ED_FLOOR};
pub use losses::{
    adv_en_gradients, adv_en_loss, cce_member_loss, cce_objective, cce_objective_with_gates,
    do_loss, po_loss, soft_indicator, MemberObjective, TermBreakdown, TermTag,
};

// seed lineage tags
const TAG_SHUFFLE: u64 = 0;
const TAG_ATTACK: u64 = 1;
const TAG_EVAL: u64 = 2;

/// Named weightings of the promote and demote terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Robustness: `(lambda_pm, lambda_dm) = (1, 1)`.
    #[serde(rename = "RM")]
    Rm,
    /// Detection: `(0, 5)`.
    #[serde(rename = "DM")]
    Dm,
    /// Ablation without cross terms: `(0, 0)`.
    Base,
    #[serde(rename = "custom")]
    Custom,
}

impl Mode {
    pub fn weights(self) -> Option<(f64, f64)> {
        match self {
            Mode::Rm => Some((1.0, 1.0)),
            Mode::Dm => Some((0.0, 5.0)),
            Mode::Base => Some((0.0, 0.0)),
            Mode::Custom => None,
        }
    }

    pub fn parse(name: &str) -> Option<Mode> {
        match name {
            "RM" => Some(Mode::Rm),
            "DM" => Some(Mode::Dm),
            "Base" => Some(Mode::Base),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CceConfig {
    /// Weight of the gated cross-promote term.
    pub lambda_pm: f64,
    /// Weight of the gated demote term.
    pub lambda_dm: f64,
    pub mode: Mode,
}

impl CceConfig {
    pub fn from_mode(mode: Mode) -> Result<Self> {
        let (lambda_pm, lambda_dm) = mode
            .weights()
            .ok_or_else(|| Error::Config("custom mode needs explicit weights".into()))?;
        Ok(Self {
            lambda_pm,
            lambda_dm,
            mode,
        })
    }

    pub fn rm() -> Self {
        Self::from_mode(Mode::Rm).expect("named mode")
    }

    pub fn dm() -> Self {
        Self::from_mode(Mode::Dm).expect("named mode")
    }

    pub fn base() -> Self {
        Self::from_mode(Mode::Base).expect("named mode")
    }

    pub fn custom(lambda_pm: f64, lambda_dm: f64) -> Result<Self> {
        let c = Self {
            lambda_pm,
            lambda_dm,
            mode: Mode::Custom,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_pm", self.lambda_pm), ("lambda_dm", self.lambda_dm)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if let Some(pair) = self.mode.weights() {
            if pair != (self.lambda_pm, self.lambda_dm) {
                return Err(Error::Config(format!(
                    "mode {:?} requires (lambda_pm, lambda_dm) = {pair:?}, got ({}, {})",
                    self.mode, self.lambda_pm, self.lambda_dm
                )));
            }
        }
        Ok(())
    }
}

/// Training method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Method {
    /// Every member trained on its own adversarial examples, independently.
    #[serde(rename = "ADV")]
    Adv,
    /// The averaged model trained on adversarial examples of the ensemble.
    #[serde(rename = "ADV_EN")]
    AdvEn,
    /// Summed member adversarial training minus the diversity regularizer.
    #[serde(rename = "ADP")]
    Adp { alpha: f64, beta: f64 },
    #[serde(rename = "CCE")]
    Cce(CceConfig),
}

impl Method {
    pub fn validate(&self, members: usize) -> Result<()> {
        match self {
            Method::Adv => Ok(()),
            Method::AdvEn => Ok(()),
            Method::Adp { alpha, beta } => {
                if !(alpha.is_finite() && beta.is_finite()) {
                    return Err(Error::Config("ADP weights must be finite".into()));
                }
                if members < 2 {
                    return Err(Error::Config("ADP needs at least 2 members".into()));
                }
                Ok(())
            }
            Method::Cce(c) => {
                c.validate()?;
                if members < 2 {
                    return Err(Error::Config("CCE needs at least 2 members".into()));
                }
                Ok(())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Method::Adv => "ADV".into(),
            Method::AdvEn => "ADV-EN".into(),
            Method::Adp { alpha, beta } => format!("ADP({alpha},{beta})"),
            Method::Cce(c) => match c.mode {
                Mode::Rm => "CCE-RM".into(),
                Mode::Dm => "CCE-DM".into(),
                Mode::Base => "CCE-Base".into(),
                Mode::Custom => format!("CCE({},{})", c.lambda_pm, c.lambda_dm),
            },
        }
    }

    fn attacks_members(&self) -> bool {
        matches!(self, Method::Adv | Method::Cce(_))
    }
}

fn default_learning_rate() -> f64 {
    nn::DEFAULT_LEARNING_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Adversary used to build the training examples. Its seed is replaced per batch.
    pub attack: AttackSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        self.attack.validate()
    }
}

/// One row of the loss decomposition. `member` is `None` for ensemble-level losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberTerms {
    pub member: Option<usize>,
    #[serde(flatten)]
    pub terms: TermBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nat_acc: f64,
    pub rob_acc: f64,
    /// Batch-size weighted means over the epoch.
    pub terms: Vec<MemberTerms>,
    /// Rows whose diversity determinant hit the floor (ADP only).
    pub adp_floor_hits: usize,
}

/// How every random stream in a run was seeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub master: u64,
    pub member_init: Vec<u64>,
    /// Batch order of epoch `e`: `derive_seed(master, [0, e])`.
    pub shuffle: Vec<u64>,
    /// Epoch-end robust-accuracy attack: `derive_seed(master, [2, e])`.
    pub eval_attack: Vec<u64>,
    /// Training attacks use `derive_seed(master, [1, epoch, batch, target])`,
    /// where `target` is the member index or `N` for the whole ensemble.
    pub train_attack_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub label: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub seeds: SeedLineage,
    pub ensemble: Ensemble,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `epoch,member,clean_ce,dpo_ce,cpo_ce,do_h,nat_acc,rob_acc`; ensemble-level rows use member `en`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,member,clean_ce,dpo_ce,cpo_ce,do_h,nat_acc,rob_acc\n");
        for e in &self.epochs {
            for t in &e.terms {
                let who = t.member.map_or_else(|| "en".to_string(), |m| m.to_string());
                out.push_str(&format!(
                    "{},{who},{},{},{},{},{},{}\n",
                    e.epoch, t.terms.clean_ce, t.terms.dpo_ce, t.terms.cpo_ce, t.terms.do_h, e.nat_acc, e.rob_acc
                ));
            }
        }
        out
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// `n` identically shaped members, member `i` seeded `config.seed + i`.
pub fn init_ensemble(widths: &[usize], n: usize, config: &TrainConfig) -> Result<Ensemble> {
    Ensemble::init(widths, n, config.seed)
}

struct BatchOutcome {
    grads: Vec<ParamGrads>,
    terms: Vec<MemberTerms>,
    floor_hits: usize,
}

fn attack_batch(target: &dyn crate::Classifier, x: &Tensor, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<Tensor> {
    let spec = spec.clone().with_seed(seed);
    Ok(attacks::run_attack(target, x, y, &spec)?.adversarial)
}

fn batch_step(
    ens: &Ensemble,
    x: &Tensor,
    y: &[usize],
    config: &TrainConfig,
    method: &Method,
    seed_of: impl Fn(usize) -> u64,
) -> Result<BatchOutcome> {
    let n = ens.len();
    if method.attacks_members() {
        let adv: Vec<Tensor> = ens
            .members()
            .iter()
            .enumerate()
            .map(|(i, m)| attack_batch(m, x, y, &config.attack, seed_of(i)))
            .collect::<Result<_>>()?;
        let mut grads = Vec::with_capacity(n);
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let obj = match method {
                Method::Cce(c) => cce_objective(i, ens, x, y, &adv, c.lambda_pm, c.lambda_dm)?,
                _ => {
                    let mut o = MemberObjective::new();
                    o.push(x.clone(), vec![(TermTag::Clean, nn::LossTerm::cross_entropy(y.to_vec(), 1.0))]);
                    o.push(
                        adv[i].clone(),
                        vec![(TermTag::DirectPromote, nn::LossTerm::cross_entropy(y.to_vec(), 1.0))],
                    );
                    o
                }
            };
            let member = ens.member(i);
            terms.push(MemberTerms {
                member: Some(i),
                terms: obj.breakdown(member)?,
            });
            grads.push(obj.gradient(member)?);
        }
        return Ok(BatchOutcome {
            grads,
            terms,
            floor_hits: 0,
        });
    }
    let x_a = attack_batch(ens, x, y, &config.attack, seed_of(n))?;
    match method {
        Method::AdvEn => {
            let [clean, adv] = losses::adv_en_parts(ens, x, y, &x_a)?;
            let grads = adv_en_gradients(ens, x, y, &x_a)?;
            Ok(BatchOutcome {
                grads,
                terms: vec![MemberTerms {
                    member: None,
                    terms: TermBreakdown {
                        clean_ce: clean,
                        dpo_ce: adv,
                        cpo_ce: 0.0,
                        do_h: 0.0,
                        total: clean + adv,
                    },
                }],
                floor_hits: 0,
            })
        }
        Method::Adp { alpha, beta } => {
            let (b, grads) = adp_loss_gradients(ens, x, y, &x_a, *alpha, *beta)?;
            let do_h = -b.reg_clean.value - b.reg_adv.value;
            Ok(BatchOutcome {
                grads,
                terms: vec![MemberTerms {
                    member: None,
                    terms: TermBreakdown {
                        clean_ce: b.clean_ce,
                        dpo_ce: b.adv_ce,
                        cpo_ce: 0.0,
                        do_h,
                        total: b.clean_ce + b.adv_ce + do_h,
                    },
                }],
                floor_hits: b.reg_clean.floored + b.reg_adv.floored,
            })
        }
        Method::Adv | Method::Cce(_) => unreachable!("member-attack methods return above"),
    }
}

/// Trains `ens_init` on `data` and reports every epoch. Deterministic given
/// the inputs; non-finite losses or gradients abort with their coordinates.
pub fn train(ens_init: &Ensemble, data: &Dataset, config: &TrainConfig, method: &Method) -> Result<TrainReport> {
    config.validate()?;
    method.validate(ens_init.len())?;
    let n = ens_init.len();
    for (i, m) in ens_init.members().iter().enumerate() {
        if m.seed() != config.seed.wrapping_add(i as u64) {
            log::warn!(
                "member {i} was initialised with seed {}, not master seed + index",
                m.seed()
            );
        }
    }
    if ens_init.member(0).input_dim() != data.dim() || ens_init.member(0).num_classes() < data.num_classes() {
        return Err(Error::Config(format!(
            "ensemble maps {} inputs to {} classes but the data has {} inputs and {} classes",
            ens_init.member(0).input_dim(),
            ens_init.member(0).num_classes(),
            data.dim(),
            data.num_classes()
        )));
    }

    let mut ens = ens_init.clone();
    let mut states = ens
        .members()
        .iter()
        .map(|m| OptimState::new(m, config.learning_rate))
        .collect::<Result<Vec<_>>>()?;
    let master = config.seed;
    let mut seeds = SeedLineage {
        master,
        member_init: ens.members().iter().map(|m| m.seed()).collect(),
        shuffle: Vec::new(),
        eval_attack: Vec::new(),
        train_attack_rule: "derive_seed(master, [1, epoch, batch, target])".into(),
    };
    let mut epochs = Vec::with_capacity(config.epochs);
    let total = data.len() as f64;

    for epoch in 0..config.epochs {
        let shuffle = derive_seed(master, &[TAG_SHUFFLE, epoch as u64]);
        seeds.shuffle.push(shuffle);
        let mut sums: Option<Vec<MemberTerms>> = None;
        let mut floor_hits = 0;
        for (batch, (x, y)) in data.batches(config.batch_size, shuffle).enumerate() {
            let out = batch_step(&ens, &x, &y, config, method, |target| {
                derive_seed(master, &[TAG_ATTACK, epoch as u64, batch as u64, target as u64])
            })?;
            let diverged = |detail: String| Error::Divergence { epoch, batch, detail };
            if let Some(t) = out.terms.iter().find(|t| !t.terms.is_finite()) {
                return Err(diverged(format!("non-finite loss {:?}", t.terms)));
            }
            if let Some(i) = out.grads.iter().position(|g| !g.is_finite()) {
                return Err(diverged(format!("non-finite gradient for member {i}")));
            }
            let w = y.len() as f64 / total;
            let acc = sums.get_or_insert_with(|| {
                out.terms
                    .iter()
                    .map(|t| MemberTerms {
                        member: t.member,
                        terms: TermBreakdown::default(),
                    })
                    .collect()
            });
            for (a, t) in acc.iter_mut().zip(&out.terms) {
                a.terms.add_scaled(&t.terms, w);
            }
            floor_hits += out.floor_hits;

            let mut next = Vec::with_capacity(n);
            for ((member, state), g) in ens.members().iter().zip(&states).zip(&out.grads) {
                next.push(nn::optimize_step(member, g, state)?);
            }
            let (members, new_states): (Vec<_>, Vec<_>) = next.into_iter().unzip();
            ens = Ensemble::new(members)?;
            states = new_states;
        }

        let eval_seed = derive_seed(master, &[TAG_EVAL, epoch as u64]);
        seeds.eval_attack.push(eval_seed);
        let nat_acc = analysis::accuracy(&ens, data)?;
        let rob_acc = analysis::robust_accuracy(&ens, data, &config.attack.clone().with_seed(eval_seed))?;
        let record = EpochRecord {
            epoch,
            nat_acc,
            rob_acc,
            terms: sums.unwrap_or_default(),
            adp_floor_hits: floor_hits,
        };
        log::info!(
            "{} epoch {epoch}: nat {:.1} rob {:.1}",
            method.label(),
            record.nat_acc,
            record.rob_acc
        );
        epochs.push(record);
    }

    Ok(TrainReport {
        method: method.clone(),
        label: method.label(),
        config: config.clone(),
        epochs,
        seeds,
        ensemble: ens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;

    #[test]
    fn named_modes_expand_to_their_weights() {
        assert_eq!((CceConfig::rm().lambda_pm, CceConfig::rm().lambda_dm), (1.0, 1.0));
        assert_eq!((CceConfig::dm().lambda_pm, CceConfig::dm().lambda_dm), (0.0, 5.0));
        assert_eq!((CceConfig::base().lambda_pm, CceConfig::base().lambda_dm), (0.0, 0.0));
        assert!(CceConfig::from_mode(Mode::Custom).is_err());
        let lying = CceConfig {
            lambda_pm: 2.0,
            lambda_dm: 1.0,
            mode: Mode::Rm,
        };
        assert!(lying.validate().is_err());
        assert!(CceConfig::custom(-1.0, 0.0).is_err());
    }

    #[test]
    fn method_serde_round_trip() {
        for m in [
            Method::Adv,
            Method::AdvEn,
            Method::Adp { alpha: 2.0, beta: 0.5 },
            Method::Cce(CceConfig::dm()),
        ] {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&s).unwrap(), m, "{s}");
        }
    }

    fn tiny() -> (Ensemble, Dataset, TrainConfig) {
        let data = datasets::gen_blobs(3, 8, 3, 4, 0.4).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 11,
            learning_rate: 0.01,
            attack: AttackSpec::pgd(3, 0.05, 0.02),
        };
        let ens = init_ensemble(&[4, 6, 3], 2, &config).unwrap();
        (ens, data, config)
    }

    #[test]
    fn training_is_deterministic_and_consistent() {
        let (ens, data, config) = tiny();
        for method in [
            Method::Adv,
            Method::AdvEn,
            Method::Adp { alpha: 2.0, beta: 0.5 },
            Method::Cce(CceConfig::rm()),
        ] {
            let a = train(&ens, &data, &config, &method).unwrap();
            let b = train(&ens, &data, &config, &method).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.epochs.len(), 2);
            for e in &a.epochs {
                assert!((0.0..=100.0).contains(&e.nat_acc) && (0.0..=100.0).contains(&e.rob_acc));
                for t in &e.terms {
                    let t = t.terms;
                    assert!((t.clean_ce + t.dpo_ce + t.cpo_ce + t.do_h - t.total).abs() < 1e-9);
                }
            }
            assert_ne!(a.ensemble, ens);
        }
    }

    #[test]
    fn base_mode_matches_independent_adversarial_training() {
        let (ens, data, config) = tiny();
        let base = train(&ens, &data, &config, &Method::Cce(CceConfig::base())).unwrap();
        let adv = train(&ens, &data, &config, &Method::Adv).unwrap();
        assert_eq!(base.ensemble, adv.ensemble);
    }

    #[test]
    fn csv_has_one_row_per_member_and_epoch() {
        let (ens, data, config) = tiny();
        let r = train(&ens, &data, &config, &Method::Cce(CceConfig::dm())).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,member,clean_ce,dpo_ce,cpo_ce,do_h,nat_acc,rob_acc");
        assert_eq!(lines.len(), 1 + 2 * 2);
    }

    #[test]
    fn collaborative_methods_need_two_members() {
        let (_, data, config) = tiny();
        let one = Ensemble::init(&[4, 6, 3], 1, 11).unwrap();
        let err = train(&one, &data, &config, &Method::Cce(CceConfig::rm())).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(train(&one, &data, &config, &Method::AdvEn).is_ok());
    }
}
