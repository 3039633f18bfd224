//! Test-time auxiliary objectives: rotation prediction, prediction-entropy
//! minimization over normalization affine parameters, and contrastive
//! agreement with feature-moment alignment.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::format::{self, NamedTensor};
use crate::mixup::MixupRatioSpec;
use crate::network::{
    ForwardOutputs, Mode, Objective, ObjectiveValue, ParamSelector, ParamSubset, SplitNetworkState,
};
use crate::tensor::{softmax_row, Tensor};

/// Added inside every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const CROP_PAD: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Rotation,
    EntropyMin,
    ContrastiveAlign,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(TaskKind::Rotation),
            "entropy_min" => Ok(TaskKind::EntropyMin),
            "contrastive_align" => Ok(TaskKind::ContrastiveAlign),
            other => Err(Error::config(format!("unknown auxiliary task {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Rotation => "rotation",
            TaskKind::EntropyMin => "entropy_min",
            TaskKind::ContrastiveAlign => "contrastive_align",
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuxTaskSpec {
    pub kind: TaskKind,
    pub param_subset: ParamSubset,
    pub ratio_spec: MixupRatioSpec,
    /// Sub-loss weights; `contrastive` and `alignment` are read by
    /// [`TaskKind::ContrastiveAlign`].
    pub weights: BTreeMap<String, f64>,
    pub temperature: f64,
}

impl AuxTaskSpec {
    /// Rotation prediction on the whole encoder, ratios `U[0.7, 1]`.
    pub fn rotation() -> Self {
        AuxTaskSpec {
            kind: TaskKind::Rotation,
            param_subset: ParamSubset::EncoderFull,
            ratio_spec: MixupRatioSpec::new(0.7, 1.0).expect("valid bounds"),
            weights: BTreeMap::new(),
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    /// Entropy minimization on normalization affine parameters, ratios `U[0.95, 1]`.
    pub fn entropy_min() -> Self {
        AuxTaskSpec {
            kind: TaskKind::EntropyMin,
            param_subset: ParamSubset::NormAffineOnly,
            ratio_spec: MixupRatioSpec::new(0.95, 1.0).expect("valid bounds"),
            weights: BTreeMap::new(),
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    /// Contrastive agreement plus moment alignment, ratios `U[0.9, 1]`.
    pub fn contrastive_align() -> Self {
        AuxTaskSpec {
            kind: TaskKind::ContrastiveAlign,
            param_subset: ParamSubset::EncoderFull,
            ratio_spec: MixupRatioSpec::new(0.9, 1.0).expect("valid bounds"),
            weights: BTreeMap::from([("contrastive".into(), 1.0), ("alignment".into(), 1.0)]),
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Rotation => Self::rotation(),
            TaskKind::EntropyMin => Self::entropy_min(),
            TaskKind::ContrastiveAlign => Self::contrastive_align(),
        }
    }

    pub fn weight(&self, name: &str) -> f64 {
        self.weights.get(name).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.param_subset) {
            (TaskKind::EntropyMin, ParamSubset::NormAffineOnly) => {}
            (TaskKind::EntropyMin, other) => {
                return Err(Error::config(format!(
                    "entropy_min adapts normalization affine parameters only, not {other:?}"
                )))
            }
            (TaskKind::Rotation, ParamSubset::EncoderFull) => {}
            (TaskKind::Rotation, other) => {
                return Err(Error::config(format!(
                    "rotation adapts the full encoder, not {other:?}"
                )))
            }
            (
                TaskKind::ContrastiveAlign,
                ParamSubset::EncoderFull | ParamSubset::NormAffineOnly,
            ) => {}
            (TaskKind::ContrastiveAlign, other) => {
                return Err(Error::config(format!(
                    "contrastive_align cannot adapt {other:?}"
                )))
            }
        }
        if self.weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(
                "sub-loss weights must be finite and non-negative",
            ));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }

    /// Normalization mode used while adapting and predicting.
    pub fn norm_mode(&self) -> Mode {
        match self.kind {
            TaskKind::EntropyMin => Mode::Train,
            _ => Mode::Eval,
        }
    }
}

/// Images rotated by `k·90°` counter-clockwise, four copies per source.
#[derive(Clone, Debug)]
pub struct RotatedBatch {
    pub images: Tensor,
    /// `labels[4i + k] == k`
    pub labels: Vec<usize>,
}

/// Rotates one `[C, H, H]` image by `k·90°` counter-clockwise.
pub fn rotate_image(img: &[f64], c: usize, h: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let n = h;
    for ch in 0..c {
        let src = &img[ch * n * n..(ch + 1) * n * n];
        let dst = &mut out[ch * n * n..(ch + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = match k % 4 {
                    0 => src[i * n + j],
                    1 => src[j * n + (n - 1 - i)],
                    2 => src[(n - 1 - i) * n + (n - 1 - j)],
                    _ => src[(n - 1 - j) * n + i],
                };
            }
        }
    }
    out
}

pub fn rotation_expand(batch: &Tensor) -> Result<RotatedBatch> {
    let s = batch.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::input(format!(
            "rotation needs square [N, C, H, H] images, got {s:?}"
        )));
    }
    let (n, c, h) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(batch.len() * 4);
    let mut labels = Vec::with_capacity(n * 4);
    for i in 0..n {
        for k in 0..4 {
            data.extend(rotate_image(batch.row(i), c, h, k));
            labels.push(k);
        }
    }
    Ok(RotatedBatch {
        images: Tensor::new(vec![4 * n, c, h, h], data)?,
        labels,
    })
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::input(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.row_len();
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean of `−log(softmax(z)[y] + ε)` over rows, with its logit gradient.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    check_labels(logits, labels)?;
    let n = logits.rows();
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax_row(logits.row(i));
        let py = p[y] + LOG_EPS;
        total -= py.ln();
        // exact derivative of the stabilized log
        let q = p[y] / py;
        let g = grad.row_mut(i);
        for (j, pj) in p.iter().enumerate() {
            g[j] = q * (pj - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(logits, labels).map(|(l, _)| l)
}

/// Mean Shannon entropy of the softmax rows, with its logit gradient.
pub fn entropy_with_grad(logits: &Tensor) -> (f64, Tensor) {
    let n = logits.rows();
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut total = 0.0;
    for i in 0..n {
        let p = softmax_row(logits.row(i));
        let mut h = 0.0;
        // a_k = ∂H/∂p_k
        let a: Vec<f64> = p
            .iter()
            .map(|&pk| {
                let l = (pk + LOG_EPS).ln();
                h -= pk * l;
                -l - pk / (pk + LOG_EPS)
            })
            .collect();
        total += h;
        let mean_a: f64 = p.iter().zip(&a).map(|(pk, ak)| pk * ak).sum();
        for (g, (pj, aj)) in grad.row_mut(i).iter_mut().zip(p.iter().zip(&a)) {
            *g = pj * (aj - mean_a) / n as f64;
        }
    }
    (total / n as f64, grad)
}

pub fn entropy_loss(logits: &Tensor) -> f64 {
    entropy_with_grad(logits).0
}

/// Selector over the scale and shift of every normalization layer.
pub fn collect_affine_params(state: &SplitNetworkState) -> Result<ParamSelector> {
    state.selector(ParamSubset::NormAffineOnly)
}

/// Mean and variance of encoder features over a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainFeatureStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl TrainFeatureStats {
    pub fn from_features(features: &Tensor) -> Self {
        let (mean, var) = moments(features);
        TrainFeatureStats { mean, var }
    }

    /// Eval-mode statistics over `images`, processed in chunks.
    pub fn compute(state: &SplitNetworkState, images: &Tensor, chunk: usize) -> Result<Self> {
        let mut parts = Vec::new();
        let idx: Vec<usize> = (0..images.rows()).collect();
        for c in idx.chunks(chunk.max(1)) {
            parts.push(
                state
                    .forward_features(&images.select_rows(c), Mode::Eval)?
                    .features,
            );
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Self::from_features(&Tensor::concat_rows(&refs)?))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor::new("feature_mean", vec![self.mean.len()], self.mean.clone()),
            NamedTensor::new("feature_var", vec![self.var.len()], self.var.clone()),
        ]
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let mean = format::find(tensors, "feature_mean")?.values.clone();
        let var = format::find(tensors, "feature_var")?.values.clone();
        if mean.len() != var.len() {
            return Err(Error::format("feature_mean and feature_var lengths differ"));
        }
        if var.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::format("feature_var has negative entries"));
        }
        Ok(TrainFeatureStats { mean, var })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        format::write_file(path, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_tensors(&format::read_file(path)?)
    }
}

/// Column means and biased variances of a `[N, D]` matrix.
fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let d = x.row_len();
    let mut mean = vec![0.0; d];
    for i in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for i in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// `‖mean(F) − μ‖² + ‖var(F) − σ²‖²` and its gradient with respect to `F`.
pub fn alignment_with_grad(features: &Tensor, stats: &TrainFeatureStats) -> Result<(f64, Tensor)> {
    let d = features.row_len();
    if stats.mean.len() != d {
        return Err(Error::input(format!(
            "feature stats have dimension {}, features {}",
            stats.mean.len(),
            d
        )));
    }
    let n = features.rows() as f64;
    let (mean, var) = moments(features);
    let dm: Vec<f64> = mean.iter().zip(&stats.mean).map(|(a, b)| a - b).collect();
    let dv: Vec<f64> = var.iter().zip(&stats.var).map(|(a, b)| a - b).collect();
    let loss = dm.iter().map(|v| v * v).sum::<f64>() + dv.iter().map(|v| v * v).sum::<f64>();
    let mut grad = Tensor::zeros(features.shape().to_vec());
    for i in 0..features.rows() {
        let row = features.row(i).to_vec();
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = 2.0 * dm[j] / n + 2.0 * dv[j] * 2.0 * (row[j] - mean[j]) / n;
        }
    }
    Ok((loss, grad))
}

/// Normalized-temperature agreement loss where row `i` of `view_a` and row
/// `i` of `view_b` are positives and every other row is a negative.
/// Returns the loss and gradients for both views.
pub fn nt_xent_with_grad(
    view_a: &Tensor,
    view_b: &Tensor,
    temperature: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let b = view_a.rows();
    if view_b.shape() != view_a.shape() {
        return Err(Error::input("contrastive views differ in shape"));
    }
    if b < 2 {
        return Err(Error::input(
            "contrastive agreement needs a batch of at least 2",
        ));
    }
    let d = view_a.row_len();
    let m = 2 * b;
    let rows: Vec<&[f64]> = (0..b)
        .map(|i| view_a.row(i))
        .chain((0..b).map(|i| view_b.row(i)))
        .collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .zip(&norms)
        .map(|(r, n)| r.iter().map(|v| v / n).collect())
        .collect();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut sim = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            sim[i * m + j] = dot(&unit[i], &unit[j]) / temperature;
        }
    }
    let positive = |k: usize| if k < b { k + b } else { k - b };
    // dL/dS
    let mut gs = vec![0.0; m * m];
    let mut loss = 0.0;
    for k in 0..m {
        let row = &sim[k * m..(k + 1) * m];
        let mx = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, v)| (v - mx).exp())
            .sum();
        let p = positive(k);
        loss += -row[p] + mx + z.ln();
        for j in 0..m {
            if j == k {
                continue;
            }
            let soft = (row[j] - mx).exp() / z;
            gs[k * m + j] = (soft - if j == p { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    loss /= m as f64;
    let mut grad_rows = vec![vec![0.0; d]; m];
    for i in 0..m {
        // ∂L/∂u_i = Σ_j (G_ij + G_ji) u_j / τ
        let mut du = vec![0.0; d];
        for j in 0..m {
            let w = (gs[i * m + j] + gs[j * m + i]) / temperature;
            if w != 0.0 {
                for (a, u) in du.iter_mut().zip(&unit[j]) {
                    *a += w * u;
                }
            }
        }
        let proj = dot(&du, &unit[i]);
        for ((g, a), u) in grad_rows[i].iter_mut().zip(&du).zip(&unit[i]) {
            *g = (a - u * proj) / norms[i];
        }
    }
    let ga: Vec<f64> = grad_rows[..b].concat();
    let gb: Vec<f64> = grad_rows[b..].concat();
    Ok((
        loss,
        Tensor::new(view_a.shape().to_vec(), ga)?,
        Tensor::new(view_b.shape().to_vec(), gb)?,
    ))
}

/// Weights of the contrastive and alignment sub-losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveWeights {
    pub contrastive: f64,
    pub alignment: f64,
}

impl ContrastiveWeights {
    pub fn of(spec: &AuxTaskSpec) -> Self {
        ContrastiveWeights {
            contrastive: spec.weight("contrastive"),
            alignment: spec.weight("alignment"),
        }
    }
}

/// Weighted agreement + alignment loss over feature rows laid out as
/// `[augmented test view (B) ; mixed counterparts (B)]`. Alignment is taken
/// over the augmented test view.
pub fn contrastive_alignment_features(
    features: &Tensor,
    stats: &TrainFeatureStats,
    weights: ContrastiveWeights,
    temperature: f64,
) -> Result<(f64, Tensor)> {
    let m = features.rows();
    if !m.is_multiple_of(2) {
        return Err(Error::input(
            "contrastive batch must hold two views of equal size",
        ));
    }
    let b = m / 2;
    let a_idx: Vec<usize> = (0..b).collect();
    let b_idx: Vec<usize> = (b..m).collect();
    let va = features.select_rows(&a_idx);
    let vb = features.select_rows(&b_idx);
    let mut grad = Tensor::zeros(features.shape().to_vec());
    let mut loss = 0.0;
    if weights.contrastive > 0.0 {
        let (l, ga, gb) = nt_xent_with_grad(&va, &vb, temperature)?;
        loss += weights.contrastive * l;
        for i in 0..b {
            for (g, v) in grad.row_mut(i).iter_mut().zip(ga.row(i)) {
                *g += weights.contrastive * v;
            }
            for (g, v) in grad.row_mut(b + i).iter_mut().zip(gb.row(i)) {
                *g += weights.contrastive * v;
            }
        }
    }
    if weights.alignment > 0.0 {
        let (l, ga) = alignment_with_grad(&va, stats)?;
        loss += weights.alignment * l;
        for i in 0..b {
            for (g, v) in grad.row_mut(i).iter_mut().zip(ga.row(i)) {
                *g += weights.alignment * v;
            }
        }
    }
    Ok((loss, grad))
}

/// The contrastive + alignment loss evaluated through the network.
pub fn contrastive_alignment_loss(
    state: &SplitNetworkState,
    test_batch: &Tensor,
    mixed_batch: &Tensor,
    stats: &TrainFeatureStats,
    weights: ContrastiveWeights,
    temperature: f64,
    mode: Mode,
) -> Result<f64> {
    let both = Tensor::concat_rows(&[test_batch, mixed_batch])?;
    let feats = state.forward_features(&both, mode)?.features;
    Ok(contrastive_alignment_features(&feats, stats, weights, temperature)?.0)
}

/// Random crop from a zero-padded copy plus a random horizontal flip.
pub fn augment(batch: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::input("augmentation needs [N, C, H, W] images"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = CROP_PAD as i64;
    let mut out = Tensor::zeros(s.to_vec());
    for i in 0..n {
        let dy = rng.random_range(-pad..=pad) as isize;
        let dx = rng.random_range(-pad..=pad) as isize;
        let flip = rng.random_bool(0.5);
        let src = batch.row(i).to_vec();
        let dst = out.row_mut(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cross-entropy on the auxiliary head against fixed labels.
pub struct AuxCrossEntropy<'a> {
    pub labels: &'a [usize],
}

impl Objective for AuxCrossEntropy<'_> {
    fn evaluate(&self, out: &ForwardOutputs) -> Result<ObjectiveValue> {
        let (loss, g) = cross_entropy_with_grad(&out.aux_logits, self.labels)?;
        Ok(ObjectiveValue {
            loss,
            d_aux: Some(g),
            ..Default::default()
        })
    }
}

/// Cross-entropy on the main head against fixed labels.
pub struct MainCrossEntropy<'a> {
    pub labels: &'a [usize],
}

impl Objective for MainCrossEntropy<'_> {
    fn evaluate(&self, out: &ForwardOutputs) -> Result<ObjectiveValue> {
        let (loss, g) = cross_entropy_with_grad(&out.main_logits, self.labels)?;
        Ok(ObjectiveValue {
            loss,
            d_main: Some(g),
            ..Default::default()
        })
    }
}

/// Mean prediction entropy of the main head.
pub struct MainEntropy;

impl Objective for MainEntropy {
    fn evaluate(&self, out: &ForwardOutputs) -> Result<ObjectiveValue> {
        let (loss, g) = entropy_with_grad(&out.main_logits);
        Ok(ObjectiveValue {
            loss,
            d_main: Some(g),
            ..Default::default()
        })
    }
}

pub struct ContrastiveAlignObjective<'a> {
    pub stats: &'a TrainFeatureStats,
    pub weights: ContrastiveWeights,
    pub temperature: f64,
}

impl Objective for ContrastiveAlignObjective<'_> {
    fn evaluate(&self, out: &ForwardOutputs) -> Result<ObjectiveValue> {
        let (loss, g) = contrastive_alignment_features(
            &out.features,
            self.stats,
            self.weights,
            self.temperature,
        )?;
        Ok(ObjectiveValue {
            loss,
            d_features: Some(g),
            ..Default::default()
        })
    }
}
