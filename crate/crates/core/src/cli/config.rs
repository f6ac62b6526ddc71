//! The experiment file: one JSON document describing data, model, method,
//! attacks and outputs. Named CCE modes are expanded while parsing, so the
//! serialized form always carries explicit weights.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackSpec;
use crate::datasets::{self, Dataset, BLOB_SIGMA};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::training::{CceConfig, Method, Mode, TrainConfig};

fn default_sigma() -> f64 {
    BLOB_SIGMA
}

fn default_test_fraction() -> f64 {
    0.3
}

/// Where the examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        n_per_class: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Rings {
        n_per_class: usize,
        classes: usize,
        noise: f64,
    },
    /// Paths are relative to the config file.
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Share of the examples held out for evaluation.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    pub attack: AttackSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    /// Name of an eval attack; the training attack when absent.
    #[serde(default)]
    pub attack: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    /// Index into the evaluation split.
    pub example: usize,
    pub radius: usize,
    pub step: f64,
    /// Name of an eval attack whose output becomes the grid centre; the clean
    /// example when absent.
    #[serde(default)]
    pub attack: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(deserialize_with = "method_block")]
    pub method: Method,
    pub train: TrainParams,
    pub train_attack: AttackSpec,
    #[serde(default)]
    pub eval_attacks: Vec<NamedAttack>,
    #[serde(default)]
    pub detect: Option<DetectConfig>,
    #[serde(default)]
    pub surface: Option<SurfaceConfig>,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// The method block as written: CCE weights may be replaced by a mode name,
/// and `{"kind": "RM"}` is shorthand for `{"kind": "CCE", "mode": "RM"}`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMethod {
    kind: String,
    alpha: Option<f64>,
    beta: Option<f64>,
    lambda_pm: Option<f64>,
    lambda_dm: Option<f64>,
    mode: Option<String>,
}

fn expand(raw: RawMethod) -> std::result::Result<Method, String> {
    let no_extra = |ok: &[&str]| {
        let given = [
            ("alpha", raw.alpha.is_some()),
            ("beta", raw.beta.is_some()),
            ("lambda_pm", raw.lambda_pm.is_some()),
            ("lambda_dm", raw.lambda_dm.is_some()),
            ("mode", raw.mode.is_some()),
        ];
        match given.iter().find(|(k, set)| *set && !ok.contains(k)) {
            Some((k, _)) => Err(format!("method {} does not take `{k}`", raw.kind)),
            None => Ok(()),
        }
    };
    match raw.kind.as_str() {
        "ADV" => no_extra(&[]).map(|_| Method::Adv),
        "ADV_EN" => no_extra(&[]).map(|_| Method::AdvEn),
        "ADP" => {
            no_extra(&["alpha", "beta"])?;
            match (raw.alpha, raw.beta) {
                (Some(alpha), Some(beta)) => Ok(Method::Adp { alpha, beta }),
                _ => Err("ADP needs `alpha` and `beta`".into()),
            }
        }
        "RM" | "DM" | "Base" => {
            no_extra(&[])?;
            let mode = Mode::parse(&raw.kind).expect("named mode");
            CceConfig::from_mode(mode).map(Method::Cce).map_err(bare)
        }
        "CCE" => {
            no_extra(&["lambda_pm", "lambda_dm", "mode"])?;
            let mode = match raw.mode.as_deref() {
                None | Some("custom") => None,
                Some(name) => Some(Mode::parse(name).ok_or_else(|| format!("unknown mode `{name}`"))?),
            };
            let cfg = match (mode, raw.lambda_pm, raw.lambda_dm) {
                (Some(m), None, None) => CceConfig::from_mode(m),
                (Some(m), Some(lambda_pm), Some(lambda_dm)) => {
                    let c = CceConfig { lambda_pm, lambda_dm, mode: m };
                    c.validate().map(|_| c)
                }
                (None, Some(pm), Some(dm)) => CceConfig::custom(pm, dm),
                _ => return Err("CCE needs a mode or both `lambda_pm` and `lambda_dm`".into()),
            };
            cfg.map(Method::Cce).map_err(bare)
        }
        other => Err(format!("unknown method `{other}`")),
    }
}

fn method_block<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Method, D::Error> {
    expand(RawMethod::deserialize(d)?).map_err(serde::de::Error::custom)
}

/// Message of a nested configuration error without its prefix.
fn bare(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// `origin:line:col: message` for the first occurrence of `"key"` in `text`.
fn anchored(origin: &str, text: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    let needle = format!("\"{key}\"");
    let at = text.lines().enumerate().find_map(|(i, l)| l.find(&needle).map(|c| (i + 1, c + 1)));
    match at {
        Some((line, col)) => Error::Config(format!("{origin}:{line}:{col}: {msg}")),
        None => Error::Config(format!("{origin}: {msg}")),
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &base)
    }

    /// Parses and validates; `origin` names the source in error messages and
    /// `base_dir` anchors relative data paths.
    pub fn parse(text: &str, origin: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| {
            let full = e.to_string();
            let suffix = format!(" at line {} column {}", e.line(), e.column());
            let msg = full.strip_suffix(&suffix).unwrap_or(&full);
            Error::Config(format!("{origin}:{}:{}: {msg}", e.line(), e.column()))
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate().map_err(|(key, msg)| anchored(origin, text, key, msg))?;
        Ok(cfg)
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let classes = match &self.dataset.source {
            DataSource::Blobs { classes, .. } | DataSource::Rings { classes, .. } => Some(*classes),
            DataSource::Idx { images, labels } => {
                for p in [images, labels] {
                    let full = self.base_dir.join(p);
                    if !full.is_file() {
                        return Err(("source", format!("data file {} does not exist", full.display())));
                    }
                }
                None
            }
        };
        if let Some(c) = classes {
            if c != self.model.classes {
                return Err(("classes", format!("model has {} classes, dataset has {c}", self.model.classes)));
            }
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return Err(("test_fraction", format!("{} must lie in (0, 1)", self.dataset.test_fraction)));
        }
        if self.model.members == 0 || self.model.hidden.contains(&0) {
            return Err(("model", "members and hidden widths must be positive".into()));
        }
        self.method.validate(self.model.members).map_err(|e| ("method", bare(e)))?;
        self.train_config().validate().map_err(|e| ("train", bare(e)))?;
        let mut names = BTreeSet::new();
        for a in &self.eval_attacks {
            a.attack.validate().map_err(|e| ("eval_attacks", format!("{}: {}", a.name, bare(e))))?;
            if !names.insert(a.name.as_str()) {
                return Err(("eval_attacks", format!("duplicate attack name `{}`", a.name)));
            }
        }
        let refers = |name: &Option<String>, key| match name {
            Some(n) if !names.contains(n.as_str()) => Err((key, format!("no eval attack named `{n}`"))),
            _ => Ok(()),
        };
        if let Some(d) = &self.detect {
            refers(&d.attack, "detect")?;
        }
        if let Some(s) = &self.surface {
            refers(&s.attack, "surface")?;
            if s.radius == 0 || !(s.step > 0.0 && s.step.is_finite()) {
                return Err(("surface", "radius must be >= 1 and step > 0".into()));
            }
        }
        Ok(())
    }

    /// Canonical pretty JSON; parsing it back yields an equal config.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact canonical JSON without `output_dir`, so moving
    /// a run elsewhere keeps its digest.
    pub fn digest(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_string(&v)?.as_bytes())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            learning_rate: self.train.learning_rate,
            attack: self.train_attack.clone(),
        }
    }

    /// Full layer widths given the data's input dimension.
    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.model.hidden);
        w.push(self.model.classes);
        w
    }

    /// Generated or loaded data split into `(train, eval)`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let data = match &self.dataset.source {
            DataSource::Blobs {
                n_per_class,
                classes,
                dim,
                separation,
                sigma,
            } => datasets::gen_blobs_with_sigma(self.seed, *n_per_class, *classes, *dim, *separation, *sigma)?,
            DataSource::Rings {
                n_per_class,
                classes,
                noise,
            } => datasets::gen_rings(self.seed, *n_per_class, *classes, *noise)?,
            DataSource::Idx { images, labels } => {
                let d = datasets::load_idx(self.base_dir.join(images), self.base_dir.join(labels))?;
                if d.num_classes() > self.model.classes {
                    return Err(Error::Config(format!(
                        "IDX labels reach class {}, model has {} classes",
                        d.num_classes() - 1,
                        self.model.classes
                    )));
                }
                d
            }
        };
        data.split(self.dataset.test_fraction, derive_seed(self.seed, &[3]))
    }

    pub fn eval_attack(&self, name: &str) -> Option<&AttackSpec> {
        self.eval_attacks.iter().find(|a| a.name == name).map(|a| &a.attack)
    }
}
