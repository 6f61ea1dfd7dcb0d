//! Source-domain FCCL training and target-domain pseudo-label fine-tuning.
//!
//! Training, per epoch `e` of `A`:
//! 1. `m <- m0 + (1 - m0) e / A`
//! 2. for each shuffled batch: forward, combined loss, backward, SGD at the
//!    scheduled learning rate, then EMA of the batch's class means into the
//!    bank. The EMA uses the features from this batch's forward pass.
//!
//! Fine-tuning assigns argmax pseudo-labels once, then trains on them with
//! a constant learning rate. The centroid bank is never written.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centroid_bank::{batch_class_means, CentroidBank};
use crate::data::{make_batches, Dataset, Domain};
use crate::error::{FcclError, Result};
use crate::linalg::{argmax, softmax, Matrix};
use crate::losses::{combined_objective, cross_entropy_objective, LossBreakdown, ObjectiveGrads};
use crate::metrics::{accuracy, auc_macro_ovr, quadratic_weighted_kappa};
use crate::model::{ModelDims, ModelParams, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// Temperature of the contrastive softmax.
    pub tau: f64,
    /// Initial EMA smoothing coefficient.
    pub m0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::source()
    }
}

impl TrainConfig {
    /// Source-domain training defaults.
    pub fn source() -> Self {
        TrainConfig {
            alpha: 1.0,
            tau: 1.0,
            m0: 0.999,
            epochs: 200,
            batch_size: 32,
            base_lr: 0.001,
            warmup_epochs: 1,
            seed: 0,
            hidden: vec![64, 64],
            feature_dim: 32,
        }
    }

    /// Target fine-tuning defaults: no contrastive term, lr 1e-6, one epoch.
    pub fn finetune() -> Self {
        TrainConfig {
            alpha: 0.0,
            base_lr: 1e-6,
            epochs: 1,
            warmup_epochs: 0,
            ..TrainConfig::source()
        }
    }

    /// Training settings of the synthetic benchmark: 50 epochs, 8-d features
    /// and a learning rate scaled up for the short step budget.
    pub fn benchmark(seed: u64) -> Self {
        TrainConfig {
            epochs: 50,
            feature_dim: 8,
            base_lr: 0.05,
            seed,
            ..TrainConfig::source()
        }
    }

    /// Parses TOML, filling keys absent from `text` from `defaults`.
    pub fn from_toml_with_defaults(text: &str, defaults: &TrainConfig) -> Result<Self> {
        let overlay: toml::Table =
            toml::from_str(text).map_err(|e| FcclError::Format(format!("config: {e}")))?;
        let mut table = toml::Table::try_from(defaults)
            .map_err(|e| FcclError::Format(format!("config: {e}")))?;
        table.extend(overlay);
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e| FcclError::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FcclError::invalid(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.m0) {
            return bad(format!("m0 must lie in [0, 1), got {}", self.m0));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr must be >= 0, got {}", self.base_lr));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn model_dims(&self, input: usize, classes: usize) -> ModelDims {
        ModelDims {
            input,
            hidden: self.hidden.clone(),
            feature: self.feature_dim,
            classes,
        }
    }
}

/// Independent sub-seeds per component, all derived from one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Init = 1,
    Shuffle = 2,
    Split = 3,
    FinetuneShuffle = 4,
}

pub fn derive_seed(seed: u64, stream: SeedStream, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(index as u128 * 16);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: Domain,
    pub samples: usize,
    pub accuracy: f64,
    /// `None` when kappa is undefined (degenerate marginals).
    pub kappa: Option<f64>,
    pub auc_macro: Option<f64>,
    pub auc_per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// EMA smoothing coefficient used during the epoch.
    pub smoothing: Option<f64>,
    pub last_lr: f64,
    /// Sample-weighted means over the epoch's batches.
    pub loss: LossBreakdown,
    /// Samples whose features entered an EMA update.
    pub ema_samples: usize,
    /// Samples that carried a contrastive term.
    pub contrast_samples: usize,
    pub val: Option<DomainMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    #[serde(default)]
    pub evaluations: Vec<DomainMetrics>,
    /// Per-class counts of the pseudo-labels used for fine-tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label_counts: Option<Vec<usize>>,
    /// Artifact role -> file name, relative to the run directory.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl RunReport {
    fn new(kind: &str, config: &TrainConfig) -> Self {
        RunReport {
            kind: kind.into(),
            seed: config.seed,
            config: config.clone(),
            epochs: Vec::new(),
            evaluations: Vec::new(),
            pseudo_label_counts: None,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes") + "\n"
    }

    /// Per-epoch table, header
    /// `epoch,smoothing,last_lr,ce,cont,total,ema_samples,contrast_samples,val_accuracy,val_kappa,val_auc`.
    pub fn history_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from(
            "epoch,smoothing,last_lr,ce,cont,total,ema_samples,contrast_samples,val_accuracy,val_kappa,val_auc\n",
        );
        for r in &self.epochs {
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                opt(r.smoothing),
                r.last_lr,
                r.loss.ce,
                r.loss.cont,
                r.loss.total,
                r.ema_samples,
                r.contrast_samples,
                opt(r.val.as_ref().map(|v| v.accuracy)),
                opt(r.val.as_ref().and_then(|v| v.kappa)),
                opt(r.val.as_ref().and_then(|v| v.auc_macro)),
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelParams,
    pub bank: CentroidBank,
    pub report: RunReport,
}

/// Whether the centroid bank takes part in a run at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidMode {
    Enabled,
    /// Reference build: no bank reads, no EMA, no smoothing schedule.
    Disabled,
}

/// Class probabilities and argmax predictions.
pub fn predict(model: &ModelParams, features: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let logits = model.logits(features)?;
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut preds = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let p = softmax(logits.row(r));
        preds.push(argmax(&p));
        probs.row_mut(r).copy_from_slice(&p);
    }
    Ok((probs, preds))
}

/// Most confident class per sample; ties go to the lowest class index.
pub fn pseudo_label(model: &ModelParams, features: &Matrix) -> Result<Vec<usize>> {
    Ok(predict(model, features)?.1)
}

pub fn evaluate(model: &ModelParams, ds: &Dataset) -> Result<DomainMetrics> {
    if ds.num_classes != model.dims().classes {
        return Err(FcclError::invalid(format!(
            "dataset has {} classes, model has {}",
            ds.num_classes,
            model.dims().classes
        )));
    }
    let (probs, preds) = predict(model, &ds.features)?;
    let kappa = match quadratic_weighted_kappa(&ds.labels, &preds, ds.num_classes) {
        Ok(k) => Some(k),
        Err(FcclError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let (auc_macro, auc_per_class) = match auc_macro_ovr(&probs, &ds.labels) {
        Ok(a) => (Some(a.macro_auc), a.per_class),
        Err(FcclError::UndefinedMetric(_)) => (None, vec![None; ds.num_classes]),
        Err(e) => return Err(e),
    };
    Ok(DomainMetrics {
        domain: ds.domain.clone(),
        samples: ds.len(),
        accuracy: accuracy(&ds.labels, &preds)?,
        kappa,
        auc_macro,
        auc_per_class,
    })
}

fn check_dataset(ds: &Dataset, model: &ModelParams) -> Result<()> {
    let d = model.dims();
    if ds.input_dim() != d.input {
        return Err(FcclError::invalid(format!(
            "dimension mismatch: data has {} features, model expects {}",
            ds.input_dim(),
            d.input
        )));
    }
    if ds.num_classes != d.classes {
        return Err(FcclError::invalid(format!(
            "dataset has {} classes, model has {}",
            ds.num_classes, d.classes
        )));
    }
    Ok(())
}

#[derive(Default)]
struct EpochTotals {
    ce: f64,
    cont: f64,
    total: f64,
    samples: usize,
    ema_samples: usize,
    contrast_samples: usize,
    last_lr: f64,
}

impl EpochTotals {
    fn add(&mut self, obj: &ObjectiveGrads, n: usize) {
        let w = n as f64;
        self.ce += obj.loss.ce * w;
        self.cont += obj.loss.cont * w;
        self.total += obj.loss.total * w;
        self.samples += n;
        self.contrast_samples += obj.contrast_samples;
    }

    fn loss(&self, alpha: f64, tau: f64) -> LossBreakdown {
        let n = self.samples.max(1) as f64;
        LossBreakdown {
            ce: self.ce / n,
            cont: self.cont / n,
            total: self.total / n,
            alpha,
            tau,
        }
    }
}

/// One forward/backward/SGD step on a batch. Returns the objective.
#[allow(clippy::too_many_arguments)]
fn sgd_batch(
    model: &mut ModelParams,
    x: &Matrix,
    labels: &[usize],
    bank: Option<&CentroidBank>,
    config: &TrainConfig,
    lr: f64,
    step: usize,
    epoch: usize,
) -> Result<(ObjectiveGrads, Matrix)> {
    let out = model
        .forward(x)
        .map_err(|e| match e {
            FcclError::DegenerateVector { .. } => FcclError::DegenerateFeature {
                step,
                epoch,
                source: Box::new(e),
            },
            other => other,
        })?;
    let obj = match bank {
        Some(bank) => combined_objective(&out.features, &out.logits, labels, bank, config.alpha, config.tau)?,
        None => cross_entropy_objective(&out.logits, labels)?,
    };
    if !obj.loss.total.is_finite() {
        return Err(FcclError::NonFiniteLoss { step, epoch });
    }
    let grads = model.backward(&out.cache, &obj.d_features, &obj.d_logits)?;
    model.sgd_step(&grads, lr)?;
    Ok((obj, out.features))
}

/// Trains on the source domain with the combined objective.
pub fn train(train_ds: &Dataset, val_ds: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    train_with(train_ds, val_ds, config, CentroidMode::Enabled)
}

pub fn train_with(
    train_ds: &Dataset,
    val_ds: &Dataset,
    config: &TrainConfig,
    mode: CentroidMode,
) -> Result<TrainOutput> {
    train_observed(train_ds, val_ds, config, mode, &mut |_, _, _| {})
}

/// [`train_with`], calling `observer` with the model and bank at the end of every epoch.
pub fn train_observed(
    train_ds: &Dataset,
    val_ds: &Dataset,
    config: &TrainConfig,
    mode: CentroidMode,
    observer: &mut dyn FnMut(&EpochRecord, &ModelParams, &CentroidBank),
) -> Result<TrainOutput> {
    config.validate()?;
    let k = train_ds.num_classes;
    let dims = config.model_dims(train_ds.input_dim(), k);
    let mut model = ModelParams::init(dims, derive_seed(config.seed, SeedStream::Init, 0))?;
    check_dataset(train_ds, &model)?;
    check_dataset(val_ds, &model)?;
    let mut bank = CentroidBank::new(k, config.feature_dim, config.m0)?;
    let n = train_ds.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut opt = OptimState::new(config.base_lr, config.warmup_epochs, config.epochs, steps_per_epoch)?;
    let mut report = RunReport::new("train", config);

    for epoch in 0..config.epochs {
        let smoothing = match mode {
            CentroidMode::Enabled => Some(bank.update_smoothing(epoch, config.epochs)?),
            CentroidMode::Disabled => None,
        };
        let shuffle_seed = derive_seed(config.seed, SeedStream::Shuffle, epoch as u64);
        let mut totals = EpochTotals::default();
        for batch in make_batches(n, config.batch_size, shuffle_seed, true)? {
            let x = train_ds.features.select_rows(&batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train_ds.labels[i]).collect();
            let step = opt.step;
            let lr = opt.next_lr()?;
            let bank_ref = (mode == CentroidMode::Enabled).then_some(&bank);
            let (obj, features) = sgd_batch(&mut model, &x, &labels, bank_ref, config, lr, step, epoch)?;
            totals.add(&obj, batch.len());
            totals.last_lr = lr;
            if mode == CentroidMode::Enabled {
                let (means, mask) = batch_class_means(&features, &labels, k)?;
                bank.ema_update(&means, &mask)?;
                totals.ema_samples += batch.len();
            }
        }
        report.epochs.push(EpochRecord {
            epoch,
            smoothing,
            last_lr: totals.last_lr,
            loss: totals.loss(config.alpha, config.tau),
            ema_samples: totals.ema_samples,
            contrast_samples: totals.contrast_samples,
            val: Some(evaluate(&model, val_ds)?),
        });
        observer(report.epochs.last().expect("just pushed"), &model, &bank);
    }
    Ok(TrainOutput {
        model,
        bank,
        report,
    })
}

/// Pseudo-labels `target` once, then trains on those labels for
/// `config.epochs` epochs at the constant rate `config.base_lr`.
/// With `alpha > 0` the contrastive term reads the bank, which stays frozen.
pub fn finetune(
    model: &ModelParams,
    bank: &CentroidBank,
    target: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelParams, RunReport)> {
    config.validate()?;
    check_dataset(target, model)?;
    let labels = pseudo_label(model, &target.features)?;
    let pseudo = Dataset::new(
        target.features.clone(),
        labels,
        target.domain.clone(),
        target.num_classes,
    )?;
    let mut report = RunReport::new("finetune", config);
    report.pseudo_label_counts = Some(pseudo.class_counts());

    let mut model = model.clone();
    let n = pseudo.len();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let shuffle_seed = derive_seed(config.seed, SeedStream::FinetuneShuffle, epoch as u64);
        let mut totals = EpochTotals::default();
        for batch in make_batches(n, config.batch_size, shuffle_seed, true)? {
            let x = pseudo.features.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| pseudo.labels[i]).collect();
            let bank_ref = (config.alpha > 0.0).then_some(bank);
            let (obj, _) = sgd_batch(&mut model, &x, &y, bank_ref, config, config.base_lr, step, epoch)?;
            totals.add(&obj, batch.len());
            totals.last_lr = config.base_lr;
            step += 1;
        }
        report.epochs.push(EpochRecord {
            epoch,
            smoothing: None,
            last_lr: totals.last_lr,
            loss: totals.loss(config.alpha, config.tau),
            ema_samples: 0,
            contrast_samples: totals.contrast_samples,
            val: None,
        });
    }
    Ok((model, report))
}
