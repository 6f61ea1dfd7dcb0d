//! `fccl` command line: synth-data, train, finetune, evaluate, diagnose.
//!
//! A run directory holds fixed file names:
//!
//! | file           | contents                                              |
//! |----------------|-------------------------------------------------------|
//! | `config.toml`  | effective configuration (flags applied, paths absolute) |
//! | `model.ckpt`   | model checkpoint                                      |
//! | `bank.ckpt`    | centroid bank checkpoint                              |
//! | `report.json`  | run report                                            |
//! | `history.csv`  | per-epoch losses and validation metrics               |
//! | `metrics.csv`  | final per-domain metrics                              |
//!
//! # Run config (`train --config`)
//!
//! ```toml
//! [train]              # any TrainConfig key; missing keys take source defaults
//! alpha = 1.0
//! epochs = 50
//!
//! [data]               # either table paths ...
//! source = "source.csv"
//! target = "target.csv"   # optional
//! num_classes = 4
//!
//! [data.synth]         # ... or an inline SynthConfig
//! num_classes = 4
//! ...
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::centroid_bank::CentroidBank;
use crate::data::{generate_blobs, Dataset, Domain, SynthConfig};
use crate::diagnostics::{class_centroid_heatmap, feature_spread, PcaFit, PcaProjection};
use crate::error::{FcclError, Result};
use crate::model::ModelParams;
use crate::trainer::{self, derive_seed, DomainMetrics, SeedStream, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.ckpt";
pub const BANK_FILE: &str = "bank.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "fccl", version, about = "Feature-centroid contrastive training under domain shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source.csv and target.csv from a synthetic-data config.
    SynthData(SynthArgs),
    /// Train on the source domain and write a run directory.
    Train(TrainArgs),
    /// Pseudo-label a target table and fine-tune a trained run.
    Finetune(FinetuneArgs),
    /// Compute accuracy, kappa and AUC of a run on data tables.
    Evaluate(EvalArgs),
    /// Write heatmap, PCA and spread diagnostics of a run on data tables.
    Diagnose(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SynthConfig TOML; the built-in benchmark when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Source table, replacing the config's data section.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Trained run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Target table; its labels are ignored for training.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TrainConfig TOML; missing keys take fine-tune defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Data tables; repeat the flag for several. The first one fits the PCA basis.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Output file (evaluate) or directory (diagnose).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| FcclError::Format(format!("config: {e}")))?;
        for key in table.keys() {
            if key != "train" && key != "data" {
                return Err(FcclError::Format(format!("config: unknown section '{key}'")));
            }
        }
        let train_text = match table.remove("train") {
            Some(toml::Value::Table(t)) => toml::to_string(&t).expect("table serializes"),
            Some(_) => return Err(FcclError::Format("config: [train] must be a table".into())),
            None => String::new(),
        };
        let train = TrainConfig::from_toml_with_defaults(&train_text, &TrainConfig::source())?;
        let data: DataSpec = match table.remove("data") {
            Some(v) => v
                .try_into()
                .map_err(|e| FcclError::Format(format!("config [data]: {e}")))?,
            None => return Err(FcclError::Format("config: missing [data] section".into())),
        };
        let mut cfg = RunConfig { train, data };
        cfg.data.source = cfg.data.source.map(|p| absolute(base_dir, &p));
        cfg.data.target = cfg.data.target.map(|p| absolute(base_dir, &p));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Source and optional target datasets.
    fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.data;
        match (&d.synth, &d.source) {
            (Some(synth), None) => {
                if d.target.is_some() {
                    return Err(FcclError::invalid("[data] mixes synth with a target table"));
                }
                Ok((
                    generate_blobs(synth, Domain::Source)?,
                    Some(generate_blobs(synth, Domain::Target)?),
                ))
            }
            (None, Some(source)) => {
                let k = d.num_classes.ok_or_else(|| {
                    FcclError::invalid("[data] needs num_classes when reading tables")
                })?;
                let src = Dataset::load_table(source, k)?;
                let tgt = d.target.as_ref().map(|t| Dataset::load_table(t, k)).transpose()?;
                Ok((src, tgt))
            }
            (Some(_), Some(_)) => Err(FcclError::invalid("[data] has both synth and source")),
            (None, None) => Err(FcclError::invalid("[data] needs either synth or source")),
        }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| FcclError::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| FcclError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| FcclError::io(path, e))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Header `data,domain,samples,accuracy,kappa,auc_macro`.
pub fn metrics_csv(rows: &[(String, DomainMetrics)]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("data,domain,samples,accuracy,kappa,auc_macro\n");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{}",
            m.domain,
            m.samples,
            m.accuracy,
            opt(m.kappa),
            opt(m.auc_macro)
        );
    }
    s
}

fn load_run(run: &Path) -> Result<(ModelParams, CentroidBank)> {
    Ok((
        ModelParams::load(&run.join(MODEL_FILE))?,
        CentroidBank::load(&run.join(BANK_FILE))?,
    ))
}

fn load_for_model(path: &Path, model: &ModelParams) -> Result<Dataset> {
    let ds = Dataset::load_table(path, model.dims().classes)?;
    if ds.input_dim() != model.dims().input {
        return Err(FcclError::invalid(format!(
            "dimension mismatch: {} has {} features, model expects {}",
            path.display(),
            ds.input_dim(),
            model.dims().input
        )));
    }
    Ok(ds)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

pub fn synth_data(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => toml::from_str::<SynthConfig>(&read(path)?)
            .map_err(|e| FcclError::Format(format!("{}: {e}", path.display())))?,
        None => SynthConfig::benchmark(args.seed.unwrap_or(0)),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    create_dir(&args.out)?;
    generate_blobs(&cfg, Domain::Source)?.write_table(&args.out.join("source.csv"))?;
    generate_blobs(&cfg, Domain::Target)?.write_table(&args.out.join("target.csv"))?;
    write(
        &args.out.join("synth.toml"),
        &toml::to_string(&cfg).expect("config serializes"),
    )
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let text = read(&args.config)?;
    let mut cfg = RunConfig::from_toml(&text, &config_dir(&args.config))?;
    if let Some(data) = &args.data {
        cfg.data.source = Some(absolute(Path::new("."), data));
        cfg.data.synth = None;
        cfg.data.target = None;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(alpha) = args.alpha {
        cfg.train.alpha = alpha;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.train.validate()?;

    let (source, target) = cfg.load_data()?;
    let (tr, va, te) = source.split(derive_seed(cfg.train.seed, SeedStream::Split, 0))?;
    let mut out = trainer::train(&tr, &va, &cfg.train)?;

    let mut rows = vec![("source_test".to_string(), trainer::evaluate(&out.model, &te)?)];
    if let Some(t) = &target {
        rows.push(("target".to_string(), trainer::evaluate(&out.model, t)?));
    }
    out.report.evaluations = rows.iter().map(|r| r.1.clone()).collect();
    out.report.artifacts = artifact_map(true);

    create_dir(&args.out)?;
    write(&args.out.join(CONFIG_FILE), &cfg.to_toml())?;
    out.model.save(&args.out.join(MODEL_FILE))?;
    out.bank.save(&args.out.join(BANK_FILE))?;
    write(&args.out.join(HISTORY_FILE), &out.report.history_csv())?;
    write(&args.out.join(METRICS_FILE), &metrics_csv(&rows))?;
    write(&args.out.join(REPORT_FILE), &out.report.to_json())
}

fn artifact_map(with_history: bool) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("config".into(), CONFIG_FILE.into());
    m.insert("model".into(), MODEL_FILE.into());
    m.insert("bank".into(), BANK_FILE.into());
    m.insert("metrics".into(), METRICS_FILE.into());
    if with_history {
        m.insert("history".into(), HISTORY_FILE.into());
    }
    m
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let (model, bank) = load_run(&args.run)?;
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_toml_with_defaults(&read(path)?, &TrainConfig::finetune())?,
        None => TrainConfig::finetune(),
    };
    cfg.hidden = model.dims().hidden.clone();
    cfg.feature_dim = model.dims().feature;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate()?;
    let target = load_for_model(&args.data, &model)?;
    let (tuned, mut report) = trainer::finetune(&model, &bank, &target, &cfg)?;
    let rows = vec![(stem(&args.data), trainer::evaluate(&tuned, &target)?)];
    report.evaluations = rows.iter().map(|r| r.1.clone()).collect();
    report.artifacts = artifact_map(true);

    create_dir(&args.out)?;
    write(&args.out.join(CONFIG_FILE), &cfg.to_toml())?;
    tuned.save(&args.out.join(MODEL_FILE))?;
    bank.save(&args.out.join(BANK_FILE))?;
    write(&args.out.join(HISTORY_FILE), &report.history_csv())?;
    write(&args.out.join(METRICS_FILE), &metrics_csv(&rows))?;
    write(&args.out.join(REPORT_FILE), &report.to_json())
}

pub fn evaluate(args: &EvalArgs) -> Result<String> {
    let (model, _) = load_run(&args.run)?;
    let mut rows = Vec::new();
    for path in &args.data {
        let ds = load_for_model(path, &model)?;
        rows.push((stem(path), trainer::evaluate(&model, &ds)?));
    }
    let csv = metrics_csv(&rows);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join("evaluation.csv"));
    write(&out, &csv)?;
    Ok(csv)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub fit_data: String,
    pub pca_fit: PcaFit,
    pub datasets: Vec<DatasetDiagnostics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDiagnostics {
    pub data: String,
    pub domain: Domain,
    pub spread: f64,
    pub heatmap_mean_diagonal: Option<f64>,
    pub heatmap_mean_off_diagonal: Option<f64>,
    pub heatmap_file: String,
}

/// Heatmap per table, one PCA projection (basis fitted on the first table)
/// and a JSON summary with spreads and explained variance.
pub fn diagnose(args: &EvalArgs) -> Result<DiagnosticsSummary> {
    let (model, bank) = load_run(&args.run)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.join("diagnostics"));
    let mut sets = Vec::new();
    for path in &args.data {
        let ds = load_for_model(path, &model)?;
        let features = model.forward(&ds.features)?.features;
        sets.push((stem(path), ds, features));
    }
    let fit = PcaFit::fit(&sets[0].2)?;
    let mut projection = PcaProjection {
        coords: crate::linalg::Matrix::zeros(0, 2),
        explained: fit.explained,
        labels: Vec::new(),
        domains: Vec::new(),
    };
    let mut coords = Vec::new();
    let mut summaries = Vec::new();
    create_dir(&out)?;
    for (name, ds, features) in &sets {
        let heatmap = class_centroid_heatmap(features, &ds.labels, &bank, ds.domain.clone())?;
        let file = format!("heatmap_{name}.csv");
        write(&out.join(&file), &heatmap.to_csv())?;
        let p = fit.project(features)?;
        coords.extend(p.iter_rows().map(<[f64]>::to_vec));
        projection.labels.extend(&ds.labels);
        projection
            .domains
            .extend(std::iter::repeat_n(ds.domain.clone(), ds.len()));
        summaries.push(DatasetDiagnostics {
            data: name.clone(),
            domain: ds.domain.clone(),
            spread: feature_spread(features)?,
            heatmap_mean_diagonal: heatmap.mean_diagonal(),
            heatmap_mean_off_diagonal: heatmap.mean_off_diagonal(),
            heatmap_file: file,
        });
    }
    projection.coords = crate::linalg::Matrix::from_rows(&coords)?;
    write(&out.join("pca.csv"), &projection.to_csv())?;
    let summary = DiagnosticsSummary {
        fit_data: sets[0].0.clone(),
        pca_fit: fit,
        datasets: summaries,
    };
    write(
        &out.join("diagnostics.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    Ok(summary)
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate(a) => {
            print!("{}", evaluate(a)?);
            Ok(())
        }
        Command::Diagnose(a) => {
            let s = diagnose(a)?;
            for d in &s.datasets {
                println!(
                    "{}: spread {:.6}, heatmap diagonal {}",
                    d.data,
                    d.spread,
                    d.heatmap_mean_diagonal.map_or("-".into(), |v| format!("{v:.6}"))
                );
            }
            Ok(())
        }
    }
}
