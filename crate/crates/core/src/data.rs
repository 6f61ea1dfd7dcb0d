//! Datasets: seeded synthetic domain-shifted blobs, CSV tables and batching.
//!
//! # Table format
//!
//! Comma separated UTF-8 with a header row `f0,f1,...,f{D-1},label,domain`.
//! Features are decimal reals, `label` an integer class index and `domain`
//! one of `source`, `target` or any other name. All rows of one file share
//! a single domain. Written values use the shortest representation that
//! parses back to the same `f64`, so a write/read cycle is exact.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FcclError, Result};
use crate::linalg::{norm, Matrix};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Domain {
    Source,
    Target,
    Named(String),
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => f.write_str("source"),
            Domain::Target => f.write_str("target"),
            Domain::Named(name) => f.write_str(name),
        }
    }
}

impl FromStr for Domain {
    type Err = FcclError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            "" => Err(FcclError::invalid("empty domain name")),
            name if name.contains(',') => Err(FcclError::invalid("domain name contains ','")),
            name => Ok(Domain::Named(name.to_string())),
        }
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for Domain {
    type Error = FcclError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, domain: Domain, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(FcclError::invalid("dataset has no samples"));
        }
        if features.rows() != labels.len() {
            return Err(FcclError::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(FcclError::invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if !features.is_finite() {
            return Err(FcclError::invalid("dataset contains non-finite features"));
        }
        Ok(Dataset {
            features,
            labels,
            domain,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.domain.clone(),
            self.num_classes,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Seeded 70/10/20 train/validation/test split.
    pub fn split(&self, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let n = self.len();
        let n_train = n * 7 / 10;
        let n_val = n / 10;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(FcclError::invalid(format!(
                "{n} samples are too few for a 70/10/20 split"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((
            self.subset(&idx[..n_train])?,
            self.subset(&idx[n_train..n_train + n_val])?,
            self.subset(&idx[n_train + n_val..])?,
        ))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.input_dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("domain".into());
        w.write_record(&header).map_err(csv_format)?;
        let domain = self.domain.to_string();
        for (row, label) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            rec.push(domain.clone());
            w.write_record(&rec).map_err(csv_format)?;
        }
        let bytes = w.into_inner().map_err(|e| FcclError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| FcclError::Format(e.to_string()))
    }

    pub fn write_table(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| FcclError::io(path, e))
    }

    /// Parses a table; every label must lie in `[0, num_classes)`.
    pub fn from_csv(text: &str, num_classes: usize) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| csv_parse(1, e))?.clone();
        let cols = header.len();
        let bad_header = |msg: String| FcclError::Parse { line: 1, message: msg };
        if cols < 3 || &header[cols - 2] != "label" || &header[cols - 1] != "domain" {
            return Err(bad_header("header must be f0,...,f{D-1},label,domain".into()));
        }
        let dim = cols - 2;
        for (j, name) in header.iter().take(dim).enumerate() {
            if name != format!("f{j}") {
                return Err(bad_header(format!("column {j} is '{name}', expected 'f{j}'")));
            }
        }

        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut domain: Option<Domain> = None;
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                csv_parse(line, e)
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let err = |message: String| FcclError::Parse { line, message };
            if rec.len() != cols {
                return Err(err(format!("expected {cols} fields, found {}", rec.len())));
            }
            for (j, field) in rec.iter().take(dim).enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("feature f{j} is not a number: '{field}'")))?;
                if !v.is_finite() {
                    return Err(err(format!("feature f{j} is not finite")));
                }
                values.push(v);
            }
            let label_field = &rec[dim];
            let label: usize = label_field
                .trim()
                .parse()
                .map_err(|_| err(format!("label is not a class index: '{label_field}'")))?;
            if label >= num_classes {
                return Err(err(format!("label {label} outside [0, {num_classes})")));
            }
            labels.push(label);
            let d: Domain = rec[dim + 1].parse().map_err(|e: FcclError| err(e.to_string()))?;
            match &domain {
                None => domain = Some(d),
                Some(first) if *first != d => {
                    return Err(err(format!("domain '{d}' differs from earlier rows ('{first}')")))
                }
                Some(_) => {}
            }
        }
        let Some(domain) = domain else {
            return Err(FcclError::Parse {
                line: 1,
                message: "no samples".into(),
            });
        };
        let features = Matrix::from_vec(labels.len(), dim, values)?;
        Dataset::new(features, labels, domain, num_classes)
    }

    pub fn load_table(path: &Path, num_classes: usize) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| FcclError::io(path, e))?;
        Dataset::from_csv(&text, num_classes)
    }
}

fn csv_format(e: csv::Error) -> FcclError {
    FcclError::Format(e.to_string())
}

fn csv_parse(line: u64, e: csv::Error) -> FcclError {
    FcclError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Target-domain map `x <- scale * R x + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineShift {
    /// Angle (radians) of every Givens rotation composing `R`.
    pub rotation_angle: f64,
    /// Number of seeded Givens rotations; 0 means `R = I`.
    pub rotation_planes: usize,
    /// Translation `t`; empty means zero.
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl Default for AffineShift {
    fn default() -> Self {
        AffineShift {
            rotation_angle: 0.0,
            rotation_planes: 0,
            translation: Vec::new(),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Samples per class; length `num_classes`.
    pub class_counts: Vec<usize>,
    /// Class means lie on a sphere of this radius.
    pub spread_radius: f64,
    pub within_std: f64,
    #[serde(default)]
    pub shift: AffineShift,
    #[serde(default)]
    pub source_noise_std: f64,
    #[serde(default)]
    pub target_noise_std: f64,
    pub seed: u64,
}

// rng streams
const STREAM_SAMPLES: u64 = 0;
const STREAM_ROTATION: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TRANSLATION: u64 = 3;

impl SynthConfig {
    /// Default desk-scale benchmark: 4 classes in 16 dimensions, 200 samples
    /// per class. The target domain is rotated, translated by a unit vector,
    /// scaled by 1.4 and carries extra Gaussian noise (std 0.8).
    pub fn benchmark(seed: u64) -> SynthConfig {
        let (k, d) = (4, 16);
        let mut rng = rng_for(seed, STREAM_TRANSLATION);
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&dir);
        SynthConfig {
            num_classes: k,
            input_dim: d,
            class_counts: vec![200; k],
            spread_radius: 3.0,
            within_std: 1.0,
            shift: AffineShift {
                rotation_angle: 0.5,
                rotation_planes: d,
                translation: dir.iter().map(|v| v / n).collect(),
                scale: 1.4,
            },
            source_noise_std: 0.0,
            target_noise_std: 0.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FcclError::invalid(m));
        if self.num_classes < 2 {
            return bad("synthetic data needs at least 2 classes".into());
        }
        if self.input_dim < 1 {
            return bad("input_dim must be positive".into());
        }
        if self.class_counts.len() != self.num_classes || self.class_counts.contains(&0) {
            return bad(format!(
                "class_counts must hold {} positive counts",
                self.num_classes
            ));
        }
        for (name, v) in [
            ("spread_radius", self.spread_radius),
            ("within_std", self.within_std),
            ("source_noise_std", self.source_noise_std),
            ("target_noise_std", self.target_noise_std),
            ("rotation_angle", self.shift.rotation_angle),
        ] {
            if !v.is_finite() || (name != "rotation_angle" && v < 0.0) {
                return bad(format!("{name} = {v} is invalid"));
            }
        }
        if !(self.shift.scale > 0.0) || !self.shift.scale.is_finite() {
            return bad(format!("scale must be positive, got {}", self.shift.scale));
        }
        if !self.shift.translation.is_empty() && self.shift.translation.len() != self.input_dim {
            return bad(format!(
                "translation has {} entries, input_dim is {}",
                self.shift.translation.len(),
                self.input_dim
            ));
        }
        if self.shift.rotation_planes > 0 && self.input_dim < 2 {
            return bad("rotations need input_dim >= 2".into());
        }
        Ok(())
    }

    /// Composition of seeded Givens rotations as a dense `D x D` matrix.
    pub fn rotation(&self) -> Matrix {
        let d = self.input_dim;
        let mut r = Matrix::identity(d);
        if self.shift.rotation_planes == 0 || self.shift.rotation_angle == 0.0 {
            return r;
        }
        let mut rng = rng_for(self.seed, STREAM_ROTATION);
        let (s, c) = self.shift.rotation_angle.sin_cos();
        for _ in 0..self.shift.rotation_planes {
            let p = rng.random_range(0..d);
            let q = (p + rng.random_range(1..d)) % d;
            // R <- G(p, q) R
            for col in 0..d {
                let (a, b) = (r.get(p, col), r.get(q, col));
                r.set(p, col, c * a - s * b);
                r.set(q, col, s * a + c * b);
            }
        }
        r
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian blobs around seeded class means. Both domains draw the same clean
/// samples and the same noise stream; the target additionally goes through
/// the affine shift. Rows are grouped by class.
pub fn generate_blobs(config: &SynthConfig, domain: Domain) -> Result<Dataset> {
    config.validate()?;
    let (k, d) = (config.num_classes, config.input_dim);
    let mut rng = rng_for(config.seed, STREAM_SAMPLES);
    let mut means = Matrix::zeros(k, d);
    for class in 0..k {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&dir).max(f64::MIN_POSITIVE);
        for (m, v) in means.row_mut(class).iter_mut().zip(&dir) {
            *m = config.spread_radius * v / n;
        }
    }
    let total: usize = config.class_counts.iter().sum();
    let mut clean = Matrix::zeros(total, d);
    let mut labels = Vec::with_capacity(total);
    let mut r = 0;
    for (class, &count) in config.class_counts.iter().enumerate() {
        for _ in 0..count {
            for (x, m) in clean.row_mut(r).iter_mut().zip(means.row(class)) {
                let z: f64 = rng.sample(StandardNormal);
                *x = m + config.within_std * z;
            }
            labels.push(class);
            r += 1;
        }
    }

    let (mut out, noise_std) = match domain {
        Domain::Target => {
            let shift = &config.shift;
            let rotated = if shift.rotation_planes == 0 || shift.rotation_angle == 0.0 {
                clean
            } else {
                clean.matmul(&config.rotation().transpose())?
            };
            let mut shifted = rotated;
            for row in 0..total {
                let out_row = shifted.row_mut(row);
                for (j, x) in out_row.iter_mut().enumerate() {
                    *x *= shift.scale;
                    if let Some(t) = shift.translation.get(j) {
                        *x += t;
                    }
                }
            }
            (shifted, config.target_noise_std)
        }
        _ => (clean, config.source_noise_std),
    };

    let mut noise = rng_for(config.seed, STREAM_NOISE);
    for x in out.as_mut_slice() {
        let z: f64 = noise.sample(StandardNormal);
        *x += noise_std * z;
    }
    Dataset::new(out, labels, domain, k)
}

/// Partitions `[0, len)` into consecutive chunks of `batch_size` (the last may
/// be shorter), after a seeded shuffle when `shuffle` is set.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(FcclError::invalid("batch size must be positive"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    if shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
