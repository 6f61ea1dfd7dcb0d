//! MLP backbone, linear classifier head, exact backprop and plain SGD.
//!
//! ```text
//! x -> [affine -> relu]* -> affine -> raw feature f -+-> head (affine) -> logits
//!                                                    +-> f / ||f||      -> contrastive branch
//! ```
//!
//! The head reads the raw feature; only the contrastive branch sees the
//! normalized one.

use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centroid_bank::{parse_tokens, MIN_NORM};
use crate::error::{FcclError, Result};
use crate::linalg::{dot, norm, Matrix};

const MODEL_MAGIC: &str = "fccl-model 1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub feature: usize,
    pub classes: usize,
}

impl ModelDims {
    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.feature == 0 || self.hidden.contains(&0) {
            return Err(FcclError::invalid(format!("zero-width layer in {self:?}")));
        }
        if self.classes < 2 {
            return Err(FcclError::invalid("classifier needs at least 2 classes"));
        }
        Ok(())
    }

    /// `(in, out)` for every backbone layer.
    fn backbone_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input];
        widths.extend(&self.hidden);
        widths.push(self.feature);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Affine map `y = W x + b`; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut layer = Dense::zeros(input, output);
        for w in layer.weight.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for (r, xr) in x.iter_rows().enumerate() {
            for (o, y) in out.row_mut(r).iter_mut().enumerate() {
                *y = dot(self.weight.row(o), xr) + self.bias[o];
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns d/d input.
    fn backward(&self, x: &Matrix, d_out: &Matrix, grad: &mut Dense) -> Matrix {
        let mut d_in = Matrix::zeros(x.rows(), self.input_dim());
        for r in 0..x.rows() {
            let xr = x.row(r);
            for (o, &g) in d_out.row(r).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                for (gw, xi) in grad.weight.row_mut(o).iter_mut().zip(xr) {
                    *gw += g * xi;
                }
                for (di, w) in d_in.row_mut(r).iter_mut().zip(self.weight.row(o)) {
                    *di += g * w;
                }
            }
        }
        d_in
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.as_slice().iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }
}

/// Backbone and head parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    pub backbone: Vec<Dense>,
    pub head: Dense,
}

/// Intermediates of one forward pass, consumed by [`ModelParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    /// Inputs to each backbone layer; the last entry is the raw feature.
    activations: Vec<Matrix>,
    /// Pre-activations of the backbone layers.
    pre_activations: Vec<Matrix>,
    norms: Vec<f64>,
    normalized: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub raw_features: Matrix,
    pub features: Matrix,
    pub logits: Matrix,
    pub cache: ForwardCache,
}

impl ModelParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = dims
            .backbone_shapes()
            .into_iter()
            .map(|(i, o)| Dense::init(i, o, &mut rng))
            .collect();
        let head = Dense::init(dims.feature, dims.classes, &mut rng);
        Ok(ModelParams {
            dims,
            backbone,
            head,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let backbone = dims
            .backbone_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        let head = Dense::zeros(dims.feature, dims.classes);
        Ok(ModelParams {
            dims,
            backbone,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.dims.clone()).expect("dims already validated")
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn num_params(&self) -> usize {
        self.values().count()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.backbone
            .iter()
            .flat_map(Dense::values)
            .chain(self.head.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.backbone
            .iter_mut()
            .flat_map(Dense::values_mut)
            .chain(self.head.values_mut())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dims.hash(&mut h);
        for v in self.values() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dims.input {
            return Err(FcclError::invalid(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.dims.input
            )));
        }
        if !x.is_finite() {
            return Err(FcclError::invalid("input contains non-finite values"));
        }
        Ok(())
    }

    fn backbone_forward(&self, x: &Matrix) -> (Vec<Matrix>, Vec<Matrix>) {
        let mut activations = vec![x.clone()];
        let mut pre_activations = Vec::with_capacity(self.backbone.len());
        let last = self.backbone.len() - 1;
        for (l, layer) in self.backbone.iter().enumerate() {
            let z = layer.forward(activations.last().expect("non-empty"));
            let mut a = z.clone();
            if l < last {
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            pre_activations.push(z);
            activations.push(a);
        }
        (activations, pre_activations)
    }

    /// Raw features (`B x F`), without normalization.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let (mut acts, _) = self.backbone_forward(x);
        Ok(acts.pop().expect("non-empty"))
    }

    /// Head logits only. Tolerates zero-norm features.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.head.forward(&self.features(x)?))
    }

    /// Full forward pass: raw features, unit-row features, logits and the backprop cache.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let (activations, pre_activations) = self.backbone_forward(x);
        let raw = activations.last().expect("non-empty").clone();
        let logits = self.head.forward(&raw);
        let mut normalized = raw.clone();
        let mut norms = Vec::with_capacity(raw.rows());
        for r in 0..raw.rows() {
            let n = norm(raw.row(r));
            if !(n >= MIN_NORM) {
                return Err(FcclError::DegenerateVector { norm: n });
            }
            normalized.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(ForwardOutput {
            raw_features: raw,
            features: normalized.clone(),
            logits,
            cache: ForwardCache {
                fingerprint: self.fingerprint(),
                activations,
                pre_activations,
                norms,
                normalized,
            },
        })
    }

    /// Exact parameter gradients given upstream gradients on the normalized
    /// features (`B x F`) and on the logits (`B x K`).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_features: &Matrix,
        d_logits: &Matrix,
    ) -> Result<ModelParams> {
        if cache.fingerprint != self.fingerprint() {
            return Err(FcclError::State(
                "forward cache was produced by different parameters".into(),
            ));
        }
        let b = cache.norms.len();
        let f = self.dims.feature;
        if d_logits.rows() != b || d_logits.cols() != self.dims.classes {
            return Err(FcclError::invalid(format!(
                "logit gradient is {}x{}, expected {b}x{}",
                d_logits.rows(),
                d_logits.cols(),
                self.dims.classes
            )));
        }
        let feature_grad = d_features.rows() == b && d_features.cols() == f;
        if !feature_grad && !(d_features.rows() == b && d_features.cols() == 0) {
            return Err(FcclError::invalid(format!(
                "feature gradient is {}x{}, expected {b}x{f}",
                d_features.rows(),
                d_features.cols()
            )));
        }

        let mut grads = self.zeros_like();
        let raw = cache.activations.last().expect("non-empty");
        let mut d_raw = self.head.backward(raw, d_logits, &mut grads.head);

        if feature_grad {
            // d (f/|f|) applied to g: (g - (u.g) u) / |f|
            for r in 0..b {
                let g = d_features.row(r);
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let u = cache.normalized.row(r);
                let proj = dot(u, g);
                let n = cache.norms[r];
                for ((d, gi), ui) in d_raw.row_mut(r).iter_mut().zip(g).zip(u) {
                    *d += (gi - proj * ui) / n;
                }
            }
        }

        let mut upstream = d_raw;
        for l in (0..self.backbone.len()).rev() {
            if l + 1 < self.backbone.len() {
                let z = &cache.pre_activations[l];
                for (d, zv) in upstream.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if *zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            upstream =
                self.backbone[l].backward(&cache.activations[l], &upstream, &mut grads.backbone[l]);
        }
        Ok(grads)
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &ModelParams, lr: f64) -> Result<()> {
        if grads.dims != self.dims {
            return Err(FcclError::invalid("gradient shape does not match parameters"));
        }
        if !(lr >= 0.0) {
            return Err(FcclError::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        for (p, g) in self.values_mut().zip(grads.values()) {
            *p -= lr * g;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_MAGIC}");
        let hidden: Vec<String> = d.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            d.input,
            d.feature,
            d.classes,
            d.hidden.len(),
            hidden.join(" ")
        );
        for layer in self.backbone.iter().chain(std::iter::once(&self.head)) {
            for row in layer.weight.iter_rows() {
                write_row(&mut s, row);
            }
            write_row(&mut s, &layer.bias);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let mut next = || {
            lines.next().ok_or_else(|| FcclError::Parse {
                line: 0,
                message: "model file is truncated".into(),
            })
        };
        let (ln, magic) = next()?;
        if magic.trim() != MODEL_MAGIC {
            return Err(FcclError::Parse {
                line: ln,
                message: format!("expected '{MODEL_MAGIC}'"),
            });
        }
        let (ln, header) = next()?;
        let header: Vec<usize> = parse_tokens(ln, header)?;
        let bad_header = || FcclError::Parse {
            line: ln,
            message: "expected '<D> <F> <K> <n_hidden> <hidden...>'".into(),
        };
        if header.len() < 4 || header.len() != 4 + header[3] {
            return Err(bad_header());
        }
        let dims = ModelDims {
            input: header[0],
            feature: header[1],
            classes: header[2],
            hidden: header[4..].to_vec(),
        };
        let mut model = ModelParams::zeros(dims).map_err(|e| FcclError::Parse {
            line: ln,
            message: e.to_string(),
        })?;
        let layers = model
            .backbone
            .iter_mut()
            .chain(std::iter::once(&mut model.head));
        for layer in layers {
            for r in 0..layer.output_dim() {
                let (ln, row) = next()?;
                read_row(ln, row, layer.weight.row_mut(r))?;
            }
            let (ln, row) = next()?;
            read_row(ln, row, &mut layer.bias)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| FcclError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FcclError::io(path, e))?;
        Self::from_text(&text)
    }
}

fn write_row(s: &mut String, row: &[f64]) {
    let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(s, "{}", vals.join(" "));
}

fn read_row(line: u64, text: &str, out: &mut [f64]) -> Result<()> {
    let vals: Vec<f64> = parse_tokens(line, text)?;
    if vals.len() != out.len() {
        return Err(FcclError::Parse {
            line,
            message: format!("expected {} values, found {}", out.len(), vals.len()),
        });
    }
    out.copy_from_slice(&vals);
    Ok(())
}

/// Linear warmup over the first `warmup_epochs`, then a half-cycle cosine
/// from `base_lr` down to 0 at the final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub step: usize,
}

impl OptimState {
    pub fn new(
        base_lr: f64,
        warmup_epochs: usize,
        total_epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(FcclError::invalid(format!("invalid base learning rate {base_lr}")));
        }
        if warmup_epochs > total_epochs {
            return Err(FcclError::invalid(format!(
                "warmup ({warmup_epochs} epochs) longer than training ({total_epochs})"
            )));
        }
        Ok(OptimState {
            base_lr,
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
            step: 0,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(FcclError::invalid(format!(
                "step {step} beyond schedule of {total} steps"
            )));
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.base_lr * step as f64 / warmup as f64);
        }
        if total == warmup {
            return Ok(self.base_lr);
        }
        let progress = (step - warmup) as f64 / (total - warmup) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    /// Learning rate for the current step, then advances the counter.
    pub fn next_lr(&mut self) -> Result<f64> {
        let lr = self.lr_at(self.step)?;
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(input: usize, hidden: &[usize], feature: usize, classes: usize) -> ModelDims {
        ModelDims {
            input,
            hidden: hidden.to_vec(),
            feature,
            classes,
        }
    }

    #[test]
    fn zero_model_hits_degenerate_path() {
        let m = ModelParams::zeros(dims(3, &[4], 2, 2)).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(m.forward(&x), Err(FcclError::DegenerateVector { .. })));
        assert!(m.logits(&x).is_ok());
    }

    #[test]
    fn identity_backbone_passes_through() {
        let mut m = ModelParams::zeros(dims(2, &[], 2, 2)).unwrap();
        m.backbone[0].weight = Matrix::identity(2);
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let out = m.forward(&x).unwrap();
        assert!((out.features.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.features.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let m = ModelParams::init(dims(3, &[16, 12], 3, 3), 11).unwrap();
        let x = Matrix::from_rows(&[[0.1, -0.4, 2.0], [0.1, -0.4, 2.0]]).unwrap();
        let out = m.forward(&x).unwrap();
        assert_eq!(out.logits.row(0), out.logits.row(1));
        assert_eq!(out.features.row(0), out.features.row(1));
        let again = m.forward(&x).unwrap();
        assert_eq!(out.logits, again.logits);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = ModelParams::init(dims(3, &[4], 2, 2), 0).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(m.forward(&x), Err(FcclError::InvalidArgument(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = ModelParams::init(dims(3, &[16], 2, 2), 3).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, -1.0], [0.5, 0.0, 0.2]]).unwrap();
        let out = m.forward(&x).unwrap();
        let g = m
            .backward(&out.cache, &Matrix::zeros(2, 2), &Matrix::zeros(2, 2))
            .unwrap();
        assert!(g.values().all(|v| *v == 0.0));
    }

    #[test]
    fn normalization_jacobian_hand_value() {
        // identity backbone, zero head: the input gradient of W is d_raw x^T.
        let mut m = ModelParams::zeros(dims(2, &[], 2, 2)).unwrap();
        m.backbone[0].weight = Matrix::identity(2);
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let out = m.forward(&x).unwrap();
        let g = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let grads = m.backward(&out.cache, &g, &Matrix::zeros(1, 2)).unwrap();
        // d bias == d raw feature
        let db = &grads.backbone[0].bias;
        assert!((db[0] - 0.128).abs() < 1e-15);
        assert!((db[1] + 0.096).abs() < 1e-15);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = ModelParams::init(dims(2, &[3], 2, 2), 5).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let out = m.forward(&x).unwrap();
        let zero = m.zeros_like();
        m.sgd_step(&zero, 0.1).unwrap();
        assert!(m.backward(&out.cache, &Matrix::zeros(1, 2), &Matrix::zeros(1, 2)).is_ok());
        m.head.bias[0] += 1.0;
        assert!(matches!(
            m.backward(&out.cache, &Matrix::zeros(1, 2), &Matrix::zeros(1, 2)),
            Err(FcclError::State(_))
        ));
    }

    #[test]
    fn sgd_cases() {
        let mut m = ModelParams::zeros(dims(1, &[], 1, 2)).unwrap();
        m.backbone[0].weight.set(0, 0, 1.0);
        let mut g = m.zeros_like();
        g.backbone[0].weight.set(0, 0, 2.0);
        let before = m.clone();
        m.sgd_step(&g, 0.0).unwrap();
        assert_eq!(m, before);
        m.sgd_step(&g, 0.1).unwrap();
        assert!((m.backbone[0].weight.get(0, 0) - 0.8).abs() < 1e-15);

        let mut twice = before.clone();
        twice.sgd_step(&g, 0.1).unwrap();
        twice.sgd_step(&g, 0.1).unwrap();
        let mut once = before.clone();
        once.sgd_step(&g, 0.2).unwrap();
        assert!((twice.backbone[0].weight.get(0, 0) - once.backbone[0].weight.get(0, 0)).abs() < 1e-15);

        let other = ModelParams::zeros(dims(2, &[], 1, 2)).unwrap();
        assert!(m.sgd_step(&other, 0.1).is_err());
    }

    #[test]
    fn schedule_cases() {
        let opt = OptimState::new(0.001, 1, 5, 10).unwrap();
        assert_eq!(opt.lr_at(0).unwrap(), 0.0);
        assert_eq!(opt.lr_at(10).unwrap(), 0.001);
        assert!(opt.lr_at(50).unwrap().abs() < 1e-9);
        assert!((opt.lr_at(30).unwrap() - 0.0005).abs() < 1e-15);
        assert!(opt.lr_at(51).is_err());
        assert!((opt.lr_at(9).unwrap() - 0.0009).abs() < 1e-15);
        assert!(OptimState::new(0.001, 6, 5, 10).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = ModelParams::init(dims(4, &[6, 5], 3, 3), 99).unwrap();
        let back = ModelParams::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), m.to_text());
        let truncated: String = m.to_text().lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(ModelParams::from_text(&truncated).is_err());
    }
}
