//! Split network: a shared feature extractor feeding a main-task head and an
//! auxiliary-task head.
//!
//! All trainable parameters live in one flat vector ordered
//! `[encoder | main head | aux head]`; [`ParamSelector`]s index into it.
//! Normalization running statistics are stored separately and are never
//! touched by gradient steps.

mod image;
mod ops;

use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image::ParameterImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `tanh`: odd and C∞, required wherever Taylor remainders are measured.
    Smooth,
    Relu,
    Identity,
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" | "tanh" => Ok(Activation::Smooth),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalization uses the batch's own statistics.
    Train,
    /// Normalization uses the stored running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        norm: bool,
        bias: bool,
    },
    Linear {
        out_features: usize,
        norm: bool,
        bias: bool,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    /// Conv block with normalization (no bias; the norm shift subsumes it).
    pub fn conv_block(out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            norm: true,
            bias: false,
        }
    }

    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Linear {
            out_features,
            norm: false,
            bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    /// `(channels, height, width)`
    pub input_shape: (usize, usize, usize),
    pub encoder_layers: Vec<LayerSpec>,
    pub main_classes: usize,
    pub aux_classes: usize,
    pub activation: Activation,
}

impl NetworkSpec {
    /// Three normalized conv blocks (16/32/64, stride 2) and a global pool.
    pub fn desk_default(input_shape: (usize, usize, usize), activation: Activation) -> Self {
        NetworkSpec {
            input_shape,
            encoder_layers: vec![
                LayerSpec::conv_block(16, 1),
                LayerSpec::conv_block(32, 2),
                LayerSpec::conv_block(64, 2),
                LayerSpec::GlobalAvgPool,
            ],
            main_classes: 10,
            aux_classes: 4,
            activation,
        }
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(Plan::compile(self)?.feature_dim)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(Plan::compile(self)?.n_params())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    MainHead,
    AuxHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

/// A named tensor inside the parameter vector or the statistics vector.
#[derive(Clone, Debug)]
pub struct Slot {
    pub name: String,
    pub dims: Vec<usize>,
    pub group: Group,
    pub kind: SlotKind,
    pub offset: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_stat(&self) -> bool {
        matches!(self.kind, SlotKind::RunningMean | SlotKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Conv {
        geom: ops::ConvGeom,
        weight: usize,
        bias: Option<usize>,
    },
    Linear {
        fin: usize,
        fout: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Norm {
        c: usize,
        spatial: usize,
        gamma: usize,
        beta: usize,
        stat: usize,
    },
    Act(Activation),
    Pool {
        c: usize,
        hw: usize,
    },
}

#[derive(Clone, Copy, Debug)]
struct Head {
    weight: usize,
    bias: usize,
    classes: usize,
}

#[derive(Debug)]
struct Plan {
    ops: Vec<Op>,
    feature_dim: usize,
    main: Head,
    aux: Head,
    n_theta: usize,
    n_phi1: usize,
    n_phi2: usize,
    n_stats: usize,
    slots: Vec<Slot>,
    /// Encoder-layer index of each norm op, in op order.
    norm_layers: usize,
}

impl Plan {
    fn n_params(&self) -> usize {
        self.n_theta + self.n_phi1 + self.n_phi2
    }

    fn compile(spec: &NetworkSpec) -> Result<Plan> {
        let (c0, h0, w0) = spec.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::config("input shape has a zero dimension"));
        }
        if spec.main_classes == 0 || spec.aux_classes == 0 {
            return Err(Error::config("head class counts must be positive"));
        }
        let mut ops = Vec::new();
        let mut slots = Vec::new();
        let mut n_theta = 0usize;
        let mut n_stats = 0usize;
        // Current activation shape: spatial (c, h, w) or flat (f).
        let mut spatial = Some((c0, h0, w0));
        let mut flat = c0 * h0 * w0;
        let mut norm_layers = 0;

        let mut push = |slots: &mut Vec<Slot>,
                        counter: &mut usize,
                        name: String,
                        dims: Vec<usize>,
                        kind: SlotKind| {
            let offset = *counter;
            *counter += dims.iter().product::<usize>();
            slots.push(Slot {
                name,
                dims,
                group: Group::Encoder,
                kind,
                offset,
            });
            offset
        };

        for (i, layer) in spec.encoder_layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    norm,
                    bias,
                } => {
                    let (c, h, w) = spatial.ok_or_else(|| {
                        Error::config(format!("layer {i}: convolution after a flattening layer"))
                    })?;
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: zero width, kernel or stride"
                        )));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(Error::config(format!(
                            "layer {i}: kernel {kernel} larger than padded input {h}x{w}"
                        )));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    let weight = push(
                        &mut slots,
                        &mut n_theta,
                        format!("encoder.{i}.weight"),
                        vec![out_channels, c, kernel, kernel],
                        SlotKind::Weight,
                    );
                    let bias = bias.then(|| {
                        push(
                            &mut slots,
                            &mut n_theta,
                            format!("encoder.{i}.bias"),
                            vec![out_channels],
                            SlotKind::Bias,
                        )
                    });
                    ops.push(Op::Conv {
                        geom: ops::ConvGeom {
                            cin: c,
                            cout: out_channels,
                            k: kernel,
                            stride,
                            pad: padding,
                            h,
                            w,
                            oh,
                            ow,
                        },
                        weight,
                        bias,
                    });
                    if norm {
                        let (gamma, beta, stat) = push_norm(
                            &mut push,
                            &mut slots,
                            &mut n_theta,
                            &mut n_stats,
                            i,
                            out_channels,
                        );
                        ops.push(Op::Norm {
                            c: out_channels,
                            spatial: oh * ow,
                            gamma,
                            beta,
                            stat,
                        });
                        norm_layers += 1;
                    }
                    ops.push(Op::Act(spec.activation));
                    spatial = Some((out_channels, oh, ow));
                    flat = out_channels * oh * ow;
                }
                LayerSpec::Linear {
                    out_features,
                    norm,
                    bias,
                } => {
                    if out_features == 0 {
                        return Err(Error::config(format!("layer {i}: zero width")));
                    }
                    let weight = push(
                        &mut slots,
                        &mut n_theta,
                        format!("encoder.{i}.weight"),
                        vec![out_features, flat],
                        SlotKind::Weight,
                    );
                    let bias = bias.then(|| {
                        push(
                            &mut slots,
                            &mut n_theta,
                            format!("encoder.{i}.bias"),
                            vec![out_features],
                            SlotKind::Bias,
                        )
                    });
                    ops.push(Op::Linear {
                        fin: flat,
                        fout: out_features,
                        weight,
                        bias,
                    });
                    if norm {
                        let (gamma, beta, stat) = push_norm(
                            &mut push,
                            &mut slots,
                            &mut n_theta,
                            &mut n_stats,
                            i,
                            out_features,
                        );
                        ops.push(Op::Norm {
                            c: out_features,
                            spatial: 1,
                            gamma,
                            beta,
                            stat,
                        });
                        norm_layers += 1;
                    }
                    ops.push(Op::Act(spec.activation));
                    spatial = None;
                    flat = out_features;
                }
                LayerSpec::GlobalAvgPool => {
                    let (c, h, w) = spatial.ok_or_else(|| {
                        Error::config(format!("layer {i}: pooling after a flattening layer"))
                    })?;
                    ops.push(Op::Pool { c, hw: h * w });
                    spatial = None;
                    flat = c;
                }
            }
        }

        let feature_dim = flat;
        let mut head = |group: Group, prefix: &str, classes: usize, counter: &mut usize| {
            let weight = *counter;
            *counter += classes * feature_dim;
            slots.push(Slot {
                name: format!("{prefix}.weight"),
                dims: vec![classes, feature_dim],
                group,
                kind: SlotKind::Weight,
                offset: weight,
            });
            let bias = *counter;
            *counter += classes;
            slots.push(Slot {
                name: format!("{prefix}.bias"),
                dims: vec![classes],
                group,
                kind: SlotKind::Bias,
                offset: bias,
            });
            Head {
                weight,
                bias,
                classes,
            }
        };
        let mut counter = n_theta;
        let main = head(
            Group::MainHead,
            "main_head",
            spec.main_classes,
            &mut counter,
        );
        let n_phi1 = counter - n_theta;
        let aux = head(Group::AuxHead, "aux_head", spec.aux_classes, &mut counter);
        let n_phi2 = counter - n_theta - n_phi1;

        Ok(Plan {
            ops,
            feature_dim,
            main,
            aux,
            n_theta,
            n_phi1,
            n_phi2,
            n_stats,
            slots,
            norm_layers,
        })
    }
}

fn push_norm(
    push: &mut impl FnMut(&mut Vec<Slot>, &mut usize, String, Vec<usize>, SlotKind) -> usize,
    slots: &mut Vec<Slot>,
    n_theta: &mut usize,
    n_stats: &mut usize,
    layer: usize,
    channels: usize,
) -> (usize, usize, usize) {
    let gamma = push(
        slots,
        n_theta,
        format!("encoder.{layer}.norm.scale"),
        vec![channels],
        SlotKind::NormScale,
    );
    let beta = push(
        slots,
        n_theta,
        format!("encoder.{layer}.norm.shift"),
        vec![channels],
        SlotKind::NormShift,
    );
    let stat = push(
        slots,
        n_stats,
        format!("encoder.{layer}.norm.running_mean"),
        vec![channels],
        SlotKind::RunningMean,
    );
    push(
        slots,
        n_stats,
        format!("encoder.{layer}.norm.running_var"),
        vec![channels],
        SlotKind::RunningVar,
    );
    (gamma, beta, stat)
}

/// Which parameters an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    EncoderFull,
    NormAffineOnly,
    MainHead,
    AuxHead,
    All,
}

/// Sorted, disjoint index ranges into the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSelector {
    ranges: Vec<Range<usize>>,
}

impl ParamSelector {
    pub fn new(mut ranges: Vec<Range<usize>>) -> Self {
        ranges.retain(|r| !r.is_empty());
        ranges.sort_by_key(|r| r.start);
        let mut merged: Vec<Range<usize>> = Vec::new();
        for r in ranges {
            match merged.last_mut() {
                Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
                _ => merged.push(r),
            }
        }
        ParamSelector { ranges: merged }
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&idx))
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }

    /// Gathers the selected entries of a full-length vector.
    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.ranges
            .iter()
            .flat_map(|r| full[r.clone()].iter().copied())
            .collect()
    }

    pub fn is_disjoint(&self, other: &ParamSelector) -> bool {
        !self.indices().any(|i| other.contains(i))
    }
}

/// Outputs of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// `[N, feature_dim]`
    pub features: Tensor,
    /// `[N, main_classes]`
    pub main_logits: Tensor,
    /// `[N, aux_classes]`
    pub aux_logits: Tensor,
}

/// Encoder output for a batch, `[N, feature_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: Tensor,
}

impl FeatureBatch {
    pub fn dim(&self) -> usize {
        self.features.row_len()
    }
}

/// A scalar loss together with its gradient with respect to the network outputs.
#[derive(Clone, Debug, Default)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub d_features: Option<Tensor>,
    pub d_main: Option<Tensor>,
    pub d_aux: Option<Tensor>,
}

/// A differentiable loss over [`ForwardOutputs`].
pub trait Objective {
    fn evaluate(&self, out: &ForwardOutputs) -> Result<ObjectiveValue>;
}

impl<F> Objective for F
where
    F: Fn(&ForwardOutputs) -> Result<ObjectiveValue>,
{
    fn evaluate(&self, out: &ForwardOutputs) -> Result<ObjectiveValue> {
        self(out)
    }
}

/// Exact gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// Full-length parameter gradient.
    pub params: Vec<f64>,
    pub input: Tensor,
    /// Total gradient at the feature cut, `∂L/∂feat`.
    pub features: Tensor,
}

/// Per-norm-layer batch statistics `(mean, biased variance)` from a train-mode pass.
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

enum Cache {
    Conv(Vec<f64>),
    Linear(Vec<f64>),
    Norm(ops::NormCache),
    Act { pre: Vec<f64>, post: Vec<f64> },
    Pool,
}

struct Trace {
    caches: Vec<Cache>,
    outputs: ForwardOutputs,
    batch_stats: BatchStats,
}

/// All parameters and statistics of a split network.
#[derive(Clone, Debug)]
pub struct SplitNetworkState {
    spec: NetworkSpec,
    plan: Arc<Plan>,
    params: Vec<f64>,
    norm_stats: Vec<f64>,
}

/// Builds a network with deterministic initialization for `seed`.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<SplitNetworkState> {
    let plan = Plan::compile(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; plan.n_params()];
    let mut norm_stats = vec![0.0; plan.n_stats];
    for slot in &plan.slots {
        match slot.kind {
            SlotKind::Weight => {
                let fan_in: usize = slot.dims[1..].iter().product();
                let gain = if spec.activation == Activation::Relu {
                    2.0
                } else {
                    1.0
                };
                let std = (gain / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for v in &mut params[slot.range()] {
                    *v = normal.sample(&mut rng);
                }
            }
            SlotKind::Bias | SlotKind::NormShift => {}
            SlotKind::NormScale => params[slot.range()].fill(1.0),
            SlotKind::RunningMean => {}
            SlotKind::RunningVar => norm_stats[slot.range()].fill(1.0),
        }
    }
    Ok(SplitNetworkState {
        spec: spec.clone(),
        plan: Arc::new(plan),
        params,
        norm_stats,
    })
}

impl SplitNetworkState {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.plan.feature_dim
    }

    pub fn slots(&self) -> &[Slot] {
        &self.plan.slots
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Encoder parameters `θ`.
    pub fn theta(&self) -> &[f64] {
        &self.params[..self.plan.n_theta]
    }

    /// Main-head parameters.
    pub fn phi1(&self) -> &[f64] {
        &self.params[self.plan.n_theta..self.plan.n_theta + self.plan.n_phi1]
    }

    /// Auxiliary-head parameters.
    pub fn phi2(&self) -> &[f64] {
        &self.params[self.plan.n_theta + self.plan.n_phi1..]
    }

    pub fn norm_stats(&self) -> &[f64] {
        &self.norm_stats
    }

    pub fn has_norm(&self) -> bool {
        self.plan.norm_layers > 0
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn selector(&self, subset: ParamSubset) -> Result<ParamSelector> {
        let p = &self.plan;
        let theta = 0..p.n_theta;
        let phi1 = p.n_theta..p.n_theta + p.n_phi1;
        let phi2 = p.n_theta + p.n_phi1..p.n_params();
        Ok(match subset {
            ParamSubset::EncoderFull => ParamSelector::new(vec![theta]),
            ParamSubset::MainHead => ParamSelector::new(vec![phi1]),
            ParamSubset::AuxHead => ParamSelector::new(vec![phi2]),
            ParamSubset::All => {
                let all = 0..p.n_params();
                ParamSelector::new(vec![all])
            }
            ParamSubset::NormAffineOnly => {
                if p.norm_layers == 0 {
                    return Err(Error::config(
                        "network has no normalization layers to adapt",
                    ));
                }
                ParamSelector::new(
                    p.slots
                        .iter()
                        .filter(|s| matches!(s.kind, SlotKind::NormScale | SlotKind::NormShift))
                        .map(Slot::range)
                        .collect(),
                )
            }
        })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let (c, h, w) = self.spec.input_shape;
        let s = batch.shape();
        let ok = match s.len() {
            4 => s[1] == c && s[2] == h && s[3] == w,
            2 => s[1] == c * h * w,
            _ => false,
        };
        if !ok || s[0] == 0 {
            return Err(Error::input(format!(
                "batch shape {:?} does not match input shape {:?}",
                s, self.spec.input_shape
            )));
        }
        Ok(s[0])
    }

    fn run(&self, batch: &Tensor, mode: Mode, keep_cache: bool) -> Result<Trace> {
        let n = self.check_batch(batch)?;
        let p = &self.params;
        let mut x = batch.data().to_vec();
        let mut caches = Vec::new();
        let mut batch_stats = Vec::new();
        for op in &self.plan.ops {
            match op {
                Op::Conv { geom, weight, bias } => {
                    let wlen = geom.cout * geom.col_rows();
                    let (out, cols) = ops::conv_forward(
                        geom,
                        &x,
                        n,
                        &p[*weight..*weight + wlen],
                        bias.map(|b| &p[b..b + geom.cout]),
                    );
                    if keep_cache {
                        caches.push(Cache::Conv(cols));
                    }
                    x = out;
                }
                Op::Linear {
                    fin,
                    fout,
                    weight,
                    bias,
                } => {
                    let out = ops::linear_forward(
                        &x,
                        n,
                        *fin,
                        *fout,
                        &p[*weight..*weight + fin * fout],
                        bias.map(|b| &p[b..b + fout]),
                    );
                    if keep_cache {
                        caches.push(Cache::Linear(std::mem::replace(&mut x, out)));
                    } else {
                        x = out;
                    }
                }
                Op::Norm {
                    c,
                    spatial,
                    gamma,
                    beta,
                    stat,
                } => {
                    let s = &self.norm_stats;
                    let (out, cache, stats) = ops::norm_forward(
                        &x,
                        n,
                        *c,
                        *spatial,
                        &p[*gamma..*gamma + c],
                        &p[*beta..*beta + c],
                        &s[*stat..*stat + c],
                        &s[*stat + c..*stat + 2 * c],
                        mode,
                    );
                    if let Some(st) = stats {
                        batch_stats.push(st);
                    }
                    if keep_cache {
                        caches.push(Cache::Norm(cache));
                    }
                    x = out;
                }
                Op::Act(act) => {
                    let out = ops::activation_forward(*act, &x);
                    if keep_cache {
                        let pre = std::mem::replace(&mut x, out);
                        caches.push(Cache::Act {
                            pre,
                            post: x.clone(),
                        });
                    } else {
                        x = out;
                    }
                }
                Op::Pool { c, hw } => {
                    x = ops::pool_forward(&x, n, *c, *hw);
                    if keep_cache {
                        caches.push(Cache::Pool);
                    }
                }
            }
        }
        let fd = self.plan.feature_dim;
        let head = |h: &Head| {
            ops::linear_forward(
                &x,
                n,
                fd,
                h.classes,
                &p[h.weight..h.weight + h.classes * fd],
                Some(&p[h.bias..h.bias + h.classes]),
            )
        };
        let main = head(&self.plan.main);
        let aux = head(&self.plan.aux);
        Ok(Trace {
            caches,
            outputs: ForwardOutputs {
                main_logits: Tensor::new(vec![n, self.plan.main.classes], main)?,
                aux_logits: Tensor::new(vec![n, self.plan.aux.classes], aux)?,
                features: Tensor::new(vec![n, fd], x)?,
            },
            batch_stats,
        })
    }

    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<ForwardOutputs> {
        Ok(self.run(batch, mode, false)?.outputs)
    }

    pub fn forward_features(&self, batch: &Tensor, mode: Mode) -> Result<FeatureBatch> {
        Ok(FeatureBatch {
            features: self.forward(batch, mode)?.features,
        })
    }

    /// Logits of `hs ∘ f`.
    pub fn forward_aux(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(batch, mode)?.aux_logits)
    }

    /// Logits of `hm ∘ f`.
    pub fn forward_main(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(batch, mode)?.main_logits)
    }

    /// Train-mode forward that also returns every norm layer's batch statistics.
    pub fn forward_with_stats(&self, batch: &Tensor) -> Result<(ForwardOutputs, BatchStats)> {
        let t = self.run(batch, Mode::Train, false)?;
        Ok((t.outputs, t.batch_stats))
    }

    /// Forward + backward for `objective`.
    pub fn gradients(
        &self,
        objective: &dyn Objective,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<Gradients> {
        self.gradients_with_stats(objective, batch, mode)
            .map(|(g, _)| g)
    }

    pub fn gradients_with_stats(
        &self,
        objective: &dyn Objective,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<(Gradients, BatchStats)> {
        let trace = self.run(batch, mode, true)?;
        let value = objective.evaluate(&trace.outputs)?;
        if !value.loss.is_finite() {
            return Err(Error::numerical(
                "loss evaluation",
                format!("non-finite loss {}", value.loss),
            ));
        }
        let n = batch.rows();
        let fd = self.plan.feature_dim;
        let mut grad = vec![0.0; self.params.len()];
        let mut d_feat = match &value.d_features {
            Some(d) => d.data().to_vec(),
            None => vec![0.0; n * fd],
        };
        let feats = trace.outputs.features.data();
        for (h, d) in [
            (&self.plan.main, &value.d_main),
            (&self.plan.aux, &value.d_aux),
        ] {
            if let Some(d) = d {
                let (gw, rest) = grad[h.weight..].split_at_mut(h.classes * fd);
                let gb = &mut rest[h.bias - h.weight - h.classes * fd..][..h.classes];
                let gi = ops::linear_backward(
                    feats,
                    d.data(),
                    n,
                    fd,
                    h.classes,
                    &self.params[h.weight..h.weight + h.classes * fd],
                    gw,
                    Some(gb),
                );
                for (a, b) in d_feat.iter_mut().zip(gi) {
                    *a += b;
                }
            }
        }
        let features = Tensor::new(vec![n, fd], d_feat.clone())?;
        let input = self.backward_encoder(&trace.caches, d_feat, n, &mut grad)?;
        let input = Tensor::new(batch.shape().to_vec(), input)?;
        Ok((
            Gradients {
                loss: value.loss,
                params: grad,
                input,
                features,
            },
            trace.batch_stats,
        ))
    }

    fn backward_encoder(
        &self,
        caches: &[Cache],
        mut g: Vec<f64>,
        n: usize,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let p = &self.params;
        for (op, cache) in self.plan.ops.iter().zip(caches).rev() {
            g = match (op, cache) {
                (Op::Conv { geom, weight, bias }, Cache::Conv(cols)) => {
                    let wlen = geom.cout * geom.col_rows();
                    let (gw, gb) = split_weight_bias(grad, *weight, wlen, *bias, geom.cout);
                    ops::conv_backward(geom, cols, &g, n, &p[*weight..*weight + wlen], gw, gb)
                }
                (
                    Op::Linear {
                        fin,
                        fout,
                        weight,
                        bias,
                    },
                    Cache::Linear(input),
                ) => {
                    let wlen = fin * fout;
                    let (gw, gb) = split_weight_bias(grad, *weight, wlen, *bias, *fout);
                    ops::linear_backward(
                        input,
                        &g,
                        n,
                        *fin,
                        *fout,
                        &p[*weight..*weight + wlen],
                        gw,
                        gb,
                    )
                }
                (
                    Op::Norm {
                        c,
                        spatial,
                        gamma,
                        beta,
                        ..
                    },
                    Cache::Norm(nc),
                ) => {
                    // scale and shift are adjacent slots
                    debug_assert_eq!(*beta, *gamma + c);
                    let (gg, gbeta) = grad[*gamma..*gamma + 2 * c].split_at_mut(*c);
                    ops::norm_backward(nc, &g, n, *c, *spatial, &p[*gamma..*gamma + c], gg, gbeta)
                }
                (Op::Act(act), Cache::Act { pre, post }) => {
                    ops::activation_backward(*act, pre, post, &g)
                }
                (Op::Pool { hw, .. }, Cache::Pool) => ops::pool_backward(&g, *hw),
                _ => unreachable!("cache does not match op"),
            };
        }
        Ok(g)
    }

    /// Gradient of `objective` restricted to `selector`, plus the loss.
    pub fn grad_params(
        &self,
        objective: &dyn Objective,
        batch: &Tensor,
        mode: Mode,
        selector: &ParamSelector,
    ) -> Result<(f64, Vec<f64>)> {
        let g = self.gradients(objective, batch, mode)?;
        Ok((g.loss, selector.gather(&g.params)))
    }

    /// Gradient of `objective` with respect to the input batch, plus the loss.
    pub fn grad_input(
        &self,
        objective: &dyn Objective,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<(f64, Tensor)> {
        let g = self.gradients(objective, batch, mode)?;
        Ok((g.loss, g.input))
    }

    /// Input gradient of `⟨f(x), d_features⟩`, i.e. `Jᵀ·d` for the encoder Jacobian `J`.
    pub fn encoder_vjp(&self, batch: &Tensor, mode: Mode, d_features: &Tensor) -> Result<Tensor> {
        let d = d_features.clone();
        let obj = move |_: &ForwardOutputs| -> Result<ObjectiveValue> {
            Ok(ObjectiveValue {
                loss: 0.0,
                d_features: Some(d.clone()),
                ..Default::default()
            })
        };
        Ok(self.gradients(&obj, batch, mode)?.input)
    }

    /// `params[sel] -= alpha * grad`, where `grad` is in selector order.
    pub fn apply_update(&mut self, selector: &ParamSelector, grad: &[f64], alpha: f64) {
        debug_assert_eq!(selector.len(), grad.len());
        for (i, g) in selector.indices().zip(grad) {
            self.params[i] -= alpha * g;
        }
    }

    /// Exponential moving average of the running statistics.
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        for ((mean, var), (m_slot, v_slot)) in stats.iter().zip(self.stat_slot_pairs()) {
            for (r, b) in self.norm_stats[m_slot].iter_mut().zip(mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.norm_stats[v_slot].iter_mut().zip(var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    /// Replaces running statistics with those of `batch` (train-mode pass).
    pub fn refresh_norm_stats(&mut self, batch: &Tensor) -> Result<()> {
        let (_, stats) = self.forward_with_stats(batch)?;
        self.update_running_stats(&stats, 1.0);
        Ok(())
    }

    fn stat_slot_pairs(&self) -> Vec<(Range<usize>, Range<usize>)> {
        let s: Vec<&Slot> = self.plan.slots.iter().filter(|s| s.is_stat()).collect();
        s.chunks_exact(2)
            .map(|p| (p[0].range(), p[1].range()))
            .collect()
    }

    pub fn snapshot(&self) -> ParameterImage {
        ParameterImage::capture(self)
    }

    pub fn restore(&mut self, image: &ParameterImage) -> Result<()> {
        image.apply(self)
    }
}

fn split_weight_bias(
    grad: &mut [f64],
    weight: usize,
    wlen: usize,
    bias: Option<usize>,
    blen: usize,
) -> (&mut [f64], Option<&mut [f64]>) {
    let (_, from_w) = grad.split_at_mut(weight);
    let (gw, rest) = from_w.split_at_mut(wlen);
    let gb = bias.map(|b| &mut rest[b - weight - wlen..b - weight - wlen + blen]);
    (gw, gb)
}

#[cfg(test)]
mod tests;
