//! The `cce` experiment runner: `train`, `eval`, `transfer`, `detect` and
//! `surface` over a single JSON experiment file.
//!
//! Every JSON output carries `seed` and `config_digest` fields; every CSV
//! starts with a `# seed=...,config_digest=...` line ahead of its header.
//! Each command also writes `manifest-<command>.json` with SHA-256 hashes of
//! what it wrote.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::attacks::{self, AttackSpec};
use crate::classifier::Classifier;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::training;

pub use config::{
    DataSource, DatasetConfig, DetectConfig, ExperimentConfig, ModelConfig, NamedAttack, SurfaceConfig, TrainParams,
};

#[derive(Debug, Parser)]
#[command(name = "cce", version, about = "Collaborative ensemble adversarial training experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an ensemble and write the checkpoint and report.
    Train(RunArgs),
    /// Natural and robust accuracy of every member and the ensemble.
    Eval(RunArgs),
    /// Cross-attack matrix and transferability metrics.
    Transfer(RunArgs),
    /// Entropy detector ROC against the detection attack.
    Detect(RunArgs),
    /// Loss surface grids around one evaluation example.
    Surface(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to load (repeatable); defaults to `<out>/ensemble.json`.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
}

/// Process exit status for an error: 3 for numeric divergence, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } | Error::NonFiniteGradient { .. } => 3,
        _ => 2,
    }
}

/// Saved ensemble as written by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_digest: String,
    pub seed: u64,
    pub members: Ensemble,
}

/// Reads a `train` checkpoint or a bare model file.
pub fn load_checkpoint(path: &Path) -> Result<Ensemble> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(c) = serde_json::from_str::<Checkpoint>(&text) {
        return Ok(c.members);
    }
    let model = Model::from_json(&text).map_err(|e| Error::Config(format!("{}: not a checkpoint: {e}", path.display())))?;
    Ensemble::new(vec![model])
}

struct Run {
    config: ExperimentConfig,
    digest: String,
    out: PathBuf,
    checkpoints: Vec<PathBuf>,
    written: Vec<(String, String)>,
}

impl Run {
    fn new(args: &RunArgs) -> Result<Self> {
        let mut config = ExperimentConfig::load(&args.config)?;
        if let Some(s) = args.seed {
            config.seed = s;
        }
        if let Some(o) = &args.out {
            config.output_dir = o.clone();
        }
        let out = config.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            digest: config.digest()?,
            config,
            out,
            checkpoints: args.checkpoints.clone(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: String) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, &body).map_err(|e| Error::io(&path, e))?;
        log::info!("wrote {}", path.display());
        self.written.push((name.to_string(), hex::encode(Sha256::digest(body.as_bytes()))));
        Ok(())
    }

    fn write_json(&mut self, name: &str, body: impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(body)?;
        let Value::Object(map) = &mut v else {
            return Err(Error::Consistency(format!("{name} must serialize to an object")));
        };
        map.insert("seed".into(), json!(self.config.seed));
        map.insert("config_digest".into(), json!(self.digest));
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        self.write(name, s)
    }

    fn write_csv(&mut self, name: &str, body: &str) -> Result<()> {
        let stamped = format!("# seed={},config_digest={}\n{body}", self.config.seed, self.digest);
        self.write(name, stamped)
    }

    fn finish(mut self, command: &str) -> Result<Vec<PathBuf>> {
        let files: Vec<Value> = self.written.iter().map(|(f, h)| json!({"file": f, "sha256": h})).collect();
        let manifest = json!({"command": command, "files": files});
        let name = format!("manifest-{command}.json");
        let list: Vec<PathBuf> = self.written.iter().map(|(f, _)| self.out.join(f)).collect();
        self.write_json(&name, manifest)?;
        Ok(list.into_iter().chain([self.out.join(name)]).collect())
    }

    /// The checkpoints given on the command line, members concatenated.
    fn ensemble(&self) -> Result<Ensemble> {
        let paths = if self.checkpoints.is_empty() {
            vec![self.out.join("ensemble.json")]
        } else {
            self.checkpoints.clone()
        };
        let mut members = Vec::new();
        for p in &paths {
            members.extend(load_checkpoint(p)?.into_members());
        }
        let ens = Ensemble::new(members)?;
        if ens.num_classes() != self.config.model.classes {
            return Err(Error::Config(format!(
                "checkpoint emits {} classes, config declares {}",
                ens.num_classes(),
                self.config.model.classes
            )));
        }
        Ok(ens)
    }

    fn named_attack(&self, name: &Option<String>) -> AttackSpec {
        name.as_deref()
            .and_then(|n| self.config.eval_attack(n))
            .cloned()
            .unwrap_or_else(|| self.config.train_attack.clone())
    }
}

fn check_dim(ens: &Ensemble, d: usize) -> Result<()> {
    if ens.input_dim() != d {
        return Err(Error::Config(format!("checkpoint takes {} inputs, data has {d}", ens.input_dim())));
    }
    Ok(())
}

fn member_labels(ens: &Ensemble) -> impl Iterator<Item = (String, &dyn Classifier)> {
    ens.members()
        .iter()
        .enumerate()
        .map(|(i, m)| (format!("f{}", i + 1), m as &dyn Classifier))
        .chain([("en".to_string(), ens as &dyn Classifier)])
}

pub fn run_train(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let mut run = Run::new(args)?;
    let (train_set, _) = run.config.load_data()?;
    let tc = run.config.train_config();
    let ens = training::init_ensemble(&run.config.widths(train_set.dim()), run.config.model.members, &tc)?;
    log::info!("training {} on {} examples", run.config.method.label(), train_set.len());
    let report = training::train(&ens, &train_set, &tc, &run.config.method)?;
    let ckpt = json!({"members": &report.ensemble});
    run.write_json("ensemble.json", ckpt)?;
    run.write_json("report.json", &report)?;
    run.write_csv("epochs.csv", &report.to_csv())?;
    run.finish("train")
}

pub fn run_eval(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let mut run = Run::new(args)?;
    let ens = run.ensemble()?;
    let (_, test) = run.config.load_data()?;
    check_dim(&ens, test.dim())?;
    let mut csv = String::from("attack,model,natural_acc,robust_acc\n");
    for a in &run.config.eval_attacks {
        for (label, model) in member_labels(&ens) {
            let nat = analysis::accuracy(model, &test)?;
            let rob = analysis::robust_accuracy(model, &test, &a.attack)?;
            csv.push_str(&format!("{},{label},{nat},{rob}\n", a.name));
        }
    }
    run.write_csv("eval.csv", &csv)?;
    run.finish("eval")
}

pub fn run_transfer(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let mut run = Run::new(args)?;
    let ens = run.ensemble()?;
    let (_, test) = run.config.load_data()?;
    check_dim(&ens, test.dim())?;
    for a in run.config.eval_attacks.clone() {
        let tm = analysis::transfer_metrics(&ens, &test, &a.attack)?;
        run.write_csv(&format!("transfer-{}.csv", a.name), &tm.cross.to_csv())?;
        let summary: Value = serde_json::from_str(&tm.summary_json()?)?;
        run.write_json(&format!("transfer-{}.json", a.name), json!({"attack": a.name, "metrics": summary}))?;
    }
    run.finish("transfer")
}

pub fn run_detect(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let mut run = Run::new(args)?;
    let ens = run.ensemble()?;
    let (_, test) = run.config.load_data()?;
    check_dim(&ens, test.dim())?;
    let name = run.config.detect.as_ref().and_then(|d| d.attack.clone());
    let spec = run.named_attack(&name);
    let adv = attacks::run_attack(&ens, test.inputs(), test.labels(), &spec)?.adversarial;
    let rep = analysis::detect(&ens, test.inputs(), &adv)?;
    run.write_csv("roc.csv", &rep.roc_csv())?;
    run.write_csv("thresholds.csv", &rep.threshold_csv())?;
    run.write_csv("scores.csv", &rep.scores_csv())?;
    let attack = name.unwrap_or_else(|| "train_attack".into());
    run.write_json("detect.json", json!({"attack": attack, "summary": rep.summary()?}))?;
    run.finish("detect")
}

pub fn run_surface(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let mut run = Run::new(args)?;
    let ens = run.ensemble()?;
    let (_, test) = run.config.load_data()?;
    check_dim(&ens, test.dim())?;
    let sc = run.config.surface.clone().ok_or_else(|| Error::Config("config has no `surface` block".into()))?;
    if sc.example >= test.len() {
        return Err(Error::Config(format!(
            "surface example {} outside the {}-example evaluation split",
            sc.example,
            test.len()
        )));
    }
    let x = test.subset(&[sc.example])?;
    let y = x.labels()[0];
    let center = match &sc.attack {
        Some(_) => {
            let spec = run.named_attack(&sc.attack);
            attacks::run_attack(&ens, x.inputs(), x.labels(), &spec)?.adversarial
        }
        None => x.inputs().clone(),
    };
    let mut meta = Vec::new();
    for (label, model) in member_labels(&ens) {
        let g = analysis::surface_grid(model, center.row(0), y, sc.radius, sc.step, sc.seed)?;
        run.write_csv(&format!("surface-{label}.csv"), &g.to_csv())?;
        meta.push(json!({"model": label, "fallback_u": g.fallback_u, "u": g.u, "v": g.v}));
    }
    run.write_json(
        "surface.json",
        json!({"example": sc.example, "label": y, "center": center.row(0), "grids": meta}),
    )?;
    run.finish("surface")
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Transfer(a) => run_transfer(a),
        Command::Detect(a) => run_detect(a),
        Command::Surface(a) => run_surface(a),
    }
}
