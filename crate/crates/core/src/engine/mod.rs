//! Phase orchestration: multi-task pretraining, test-time adaptation
//! episodes (plain or mixed), and main-task inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aux_tasks::{
    augment, cross_entropy_with_grad, rotation_expand, AuxCrossEntropy, AuxTaskSpec,
    ContrastiveAlignObjective, ContrastiveWeights, MainEntropy, TaskKind, TrainFeatureStats,
};
use crate::data::{CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::mixup::{build_mixed_batch, replicate_test_batch, TrainPartnerPool};
use crate::network::{
    ForwardOutputs, Mode, Objective, ObjectiveValue, ParamSubset, SplitNetworkState,
};
use crate::tensor::{argmax, l2_norm, Tensor};

const MIX_STREAM: u64 = 1;
const AUG_STREAM: u64 = 2;

/// SplitMix64 finalizer, used to derive per-sample seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight `β` of the auxiliary rotation loss.
    pub aux_weight: f64,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 64,
            aux_weight: 1.0,
            lr: 0.05,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "pretraining needs epochs >= 1 and batch_size >= 1",
            ));
        }
        if !self.aux_weight.is_finite() || self.aux_weight < 0.0 {
            return Err(Error::config("aux_weight must be finite and >= 0"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("lr must be > 0 and momentum in [0, 1)"));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                0.5 * self.lr
                    * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct PretrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Eval-mode main-task accuracy on the training set after the last epoch.
    pub clean_accuracy: f64,
}

/// `L_main` on the first `split` rows plus `β·L_aux` on the rest.
struct JointObjective<'a> {
    split: usize,
    main_labels: &'a [usize],
    aux_labels: &'a [usize],
    beta: f64,
    // reporting side channel: (main loss, correct main predictions)
    seen: std::cell::Cell<(f64, usize)>,
}

impl Objective for JointObjective<'_> {
    fn evaluate(&self, out: &ForwardOutputs) -> Result<ObjectiveValue> {
        let n = out.main_logits.rows();
        let head: Vec<usize> = (0..self.split).collect();
        let (l_main, g_main) =
            cross_entropy_with_grad(&out.main_logits.select_rows(&head), self.main_labels)?;
        let correct = (0..self.split)
            .filter(|&i| argmax(out.main_logits.row(i)) == self.main_labels[i])
            .count();
        self.seen.set((l_main, correct));
        let mut d_main = Tensor::zeros(out.main_logits.shape().to_vec());
        d_main.data_mut()[..g_main.len()].copy_from_slice(g_main.data());
        let mut loss = l_main;
        let mut d_aux = None;
        if self.split < n {
            let tail: Vec<usize> = (self.split..n).collect();
            let (l_aux, g_aux) =
                cross_entropy_with_grad(&out.aux_logits.select_rows(&tail), self.aux_labels)?;
            loss += self.beta * l_aux;
            let mut d = Tensor::zeros(out.aux_logits.shape().to_vec());
            let off = self.split * out.aux_logits.row_len();
            for (dst, src) in d.data_mut()[off..].iter_mut().zip(g_aux.data()) {
                *dst = self.beta * src;
            }
            d_aux = Some(d);
        }
        Ok(ObjectiveValue {
            loss,
            d_main: Some(d_main),
            d_aux,
            d_features: None,
        })
    }
}

/// Minibatch SGD with momentum on `L_main + β·L_aux`, where the auxiliary
/// term is rotation prediction on a randomly rotated copy of each image.
pub fn pretrain(
    state: &mut SplitNetworkState,
    train: &Dataset,
    cfg: &PretrainConfig,
) -> Result<PretrainMetrics> {
    cfg.validate()?;
    train.check_classes(state.spec().main_classes)?;
    if train.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all = state.selector(ParamSubset::All)?;
    let mut velocity = vec![0.0; state.parameter_count()];
    let (c, h, w) = train.image_shape();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let labels = train.labels_usize();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut sum_main, mut sum_aux, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let upright = train.images.select_rows(chunk);
            let main_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (input, aux_labels) = if cfg.aux_weight > 0.0 && h == w {
                let mut rot = Vec::with_capacity(upright.len());
                let mut rot_labels = Vec::with_capacity(chunk.len());
                for i in 0..chunk.len() {
                    let k = rng.random_range(0..4);
                    rot.extend(crate::aux_tasks::rotate_image(upright.row(i), c, h, k));
                    rot_labels.push(k);
                }
                let rot = Tensor::new(upright.shape().to_vec(), rot)?;
                (Tensor::concat_rows(&[&upright, &rot])?, rot_labels)
            } else {
                (upright, Vec::new())
            };
            let objective = JointObjective {
                split: chunk.len(),
                main_labels: &main_labels,
                aux_labels: &aux_labels,
                beta: cfg.aux_weight,
                seen: Default::default(),
            };
            let (grads, stats) = state
                .gradients_with_stats(&objective, &input, Mode::Train)
                .map_err(|e| match e {
                    Error::Numerical { detail, .. } => {
                        Error::numerical(format!("pretraining epoch {epoch}"), detail)
                    }
                    other => other,
                })?;
            let (l_main, batch_correct) = objective.seen.get();
            sum_main += l_main * chunk.len() as f64;
            if !aux_labels.is_empty() {
                sum_aux += (grads.loss - l_main) / cfg.aux_weight * chunk.len() as f64;
            }
            correct += batch_correct;
            seen += chunk.len();

            for (v, g) in velocity.iter_mut().zip(&grads.params) {
                *v = cfg.momentum * *v + g;
            }
            state.apply_update(&all, &velocity, lr);
            state.update_running_stats(&stats, 0.1);
        }
        let m = EpochMetrics {
            epoch,
            lr,
            loss_main: sum_main / seen as f64,
            loss_aux: sum_aux / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
        };
        if !m.loss_main.is_finite() || !m.loss_aux.is_finite() {
            return Err(Error::numerical(
                format!("pretraining epoch {epoch}"),
                "loss diverged",
            ));
        }
        log::debug!(
            "epoch {epoch}: main {:.4} aux {:.4} acc {:.3}",
            m.loss_main,
            m.loss_aux,
            m.train_accuracy
        );
        metrics.push(m);
    }
    let preds = infer_dataset(state, &train.images, 256)?;
    let clean_accuracy =
        preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
    Ok(PretrainMetrics {
        epochs: metrics,
        clean_accuracy,
    })
}

/// Main-task class for every row of `test_input` (eval mode; ties → lowest index).
pub fn infer(state: &SplitNetworkState, test_input: &Tensor) -> Result<Vec<usize>> {
    let logits = state.forward_main(test_input, Mode::Eval)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// [`infer`] over a large tensor in chunks.
pub fn infer_dataset(
    state: &SplitNetworkState,
    images: &Tensor,
    chunk: usize,
) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..images.rows()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for c in idx.chunks(chunk.max(1)) {
        out.extend(infer(state, &images.select_rows(c))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    /// Each test sample gets its own episode; parameters are restored afterwards.
    SingleReset,
    /// Test batches are adapted on sequentially without restoring, except
    /// every `reset_every` batches when set.
    BatchOnline {
        batch_size: usize,
        reset_every: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeConfig {
    pub alpha: f64,
    pub steps: usize,
    pub task: AuxTaskSpec,
    pub mode: EpisodeMode,
    pub mix_enabled: bool,
    pub seed: u64,
    /// Rows per adaptation step (raised to the number of test samples if smaller).
    pub partner_batch: usize,
    /// Steps (0..=steps) after which the test inputs' features are recorded.
    pub checkpoints: Vec<usize>,
}

impl EpisodeConfig {
    /// Learning rate 1e-3, 10 steps, 32 partners, per-sample reset.
    pub fn new(task: AuxTaskSpec, mix_enabled: bool) -> Self {
        EpisodeConfig {
            alpha: 1e-3,
            steps: 10,
            task,
            mode: EpisodeMode::SingleReset,
            mix_enabled,
            seed: 0,
            partner_batch: 32,
            checkpoints: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("an episode needs at least one step"));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::config("alpha must be finite and >= 0"));
        }
        if self.partner_batch == 0 {
            return Err(Error::config("partner_batch must be >= 1"));
        }
        if let EpisodeMode::BatchOnline {
            batch_size,
            reset_every,
        } = self.mode
        {
            if batch_size == 0 || reset_every == Some(0) {
                return Err(Error::config("batch_size and reset_every must be >= 1"));
            }
        }
        if let Some(c) = self.checkpoints.iter().find(|&&c| c > self.steps) {
            return Err(Error::config(format!(
                "checkpoint {c} beyond {} steps",
                self.steps
            )));
        }
        self.task.validate()?;
        self.task.ratio_spec.validate()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub aux_loss: f64,
    pub grad_norm_theta: f64,
    /// Index into [`EpisodeResult::feature_snapshots`] when features were
    /// recorded before this step's update.
    pub feature_snapshot: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub predictions: Vec<usize>,
    pub trace: Vec<StepRecord>,
    /// `(updates applied, features of the test inputs)`
    pub feature_snapshots: Vec<(usize, Tensor)>,
}

/// Training data and statistics an episode may need.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpisodeResources<'a> {
    pub pool: Option<&'a TrainPartnerPool>,
    pub feature_stats: Option<&'a TrainFeatureStats>,
}

/// Prediction path without adaptation. Tasks that adapt with batch
/// statistics predict with statistics re-estimated on the test batch.
pub fn predict_without_adaptation(
    state: &SplitNetworkState,
    test: &Tensor,
    task: &AuxTaskSpec,
) -> Result<Vec<usize>> {
    match task.norm_mode() {
        Mode::Eval => infer(state, test),
        Mode::Train => {
            let mut s = state.clone();
            s.refresh_norm_stats(test)?;
            infer(&s, test)
        }
    }
}

fn task_batch(
    cfg: &EpisodeConfig,
    test: &Tensor,
    base: Tensor,
    aug_rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    Ok(match cfg.task.kind {
        TaskKind::Rotation => {
            let r = rotation_expand(&base)?;
            (r.images, r.labels)
        }
        TaskKind::EntropyMin => (base, Vec::new()),
        TaskKind::ContrastiveAlign => {
            let view = augment(&replicate_test_batch(test, base.rows()), aug_rng)?;
            (Tensor::concat_rows(&[&view, &base])?, Vec::new())
        }
    })
}

/// One adaptation episode on `test` (one sample or one batch).
pub fn ttt_episode(
    state: &mut SplitNetworkState,
    test: &Tensor,
    cfg: &EpisodeConfig,
    res: EpisodeResources<'_>,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    if cfg.mix_enabled && res.pool.is_none() {
        return Err(Error::config("mixing requires a training partner pool"));
    }
    let stats = match cfg.task.kind {
        TaskKind::ContrastiveAlign => Some(res.feature_stats.ok_or_else(|| {
            Error::config("contrastive_align requires training feature statistics")
        })?),
        _ => None,
    };
    let restore = matches!(cfg.mode, EpisodeMode::SingleReset).then(|| state.snapshot());
    let selector = state.selector(cfg.task.param_subset)?;
    let mode = cfg.task.norm_mode();
    let rows = cfg.partner_batch.max(test.rows());
    let mut mix_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mix_rng.set_stream(MIX_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(AUG_STREAM);

    let mut trace: Vec<StepRecord> = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    let weights = ContrastiveWeights::of(&cfg.task);

    let outcome = (|| -> Result<()> {
        for step in 0..cfg.steps {
            let snap = if cfg.checkpoints.contains(&step) {
                snapshots.push((step, state.forward_features(test, mode)?.features));
                Some(snapshots.len() - 1)
            } else {
                None
            };
            let base = match (cfg.mix_enabled, res.pool) {
                (true, Some(pool)) => {
                    build_mixed_batch(test, pool, &cfg.task.ratio_spec, rows, &mut mix_rng)?.inputs
                }
                _ => replicate_test_batch(test, rows),
            };
            let (input, labels) = task_batch(cfg, test, base, &mut aug_rng)?;
            let fail = |detail: String, trace: &[StepRecord]| Error::Episode {
                step,
                detail,
                trace: trace.to_vec(),
            };
            let result = match cfg.task.kind {
                TaskKind::Rotation => state.grad_params(
                    &AuxCrossEntropy { labels: &labels },
                    &input,
                    mode,
                    &selector,
                ),
                TaskKind::EntropyMin => state.grad_params(&MainEntropy, &input, mode, &selector),
                TaskKind::ContrastiveAlign => state.grad_params(
                    &ContrastiveAlignObjective {
                        stats: stats.expect("checked above"),
                        weights,
                        temperature: cfg.task.temperature,
                    },
                    &input,
                    mode,
                    &selector,
                ),
            };
            let (loss, grad) = result.map_err(|e| match e {
                Error::Numerical { detail, .. } => fail(detail, &trace),
                other => other,
            })?;
            let norm = l2_norm(&grad);
            if !norm.is_finite() {
                return Err(fail(format!("non-finite gradient norm {norm}"), &trace));
            }
            trace.push(StepRecord {
                step,
                aux_loss: loss,
                grad_norm_theta: norm,
                feature_snapshot: snap,
            });
            state.apply_update(&selector, &grad, cfg.alpha);
        }
        if cfg.checkpoints.contains(&cfg.steps) {
            snapshots.push((cfg.steps, state.forward_features(test, mode)?.features));
        }
        Ok(())
    })();

    let predictions = outcome.and_then(|_| {
        if mode == Mode::Train {
            state.refresh_norm_stats(test)?;
        }
        infer(state, test)
    });
    if let Some(img) = restore {
        state.restore(&img)?;
    }
    Ok(EpisodeResult {
        predictions: predictions?,
        trace,
        feature_snapshots: snapshots,
    })
}

/// Results of adapting over a whole test set.
#[derive(Clone, Debug)]
pub struct StreamResult {
    pub predictions: Vec<usize>,
    /// One entry per episode, in test order.
    pub episodes: Vec<EpisodeResult>,
}

/// Runs episodes over every sample (single-reset) or batch (online) of `test`.
/// Single-reset episodes run in parallel on cloned states; output order follows
/// the test set regardless of completion order.
pub fn run_stream(
    state: &SplitNetworkState,
    test: &Tensor,
    cfg: &EpisodeConfig,
    res: EpisodeResources<'_>,
) -> Result<StreamResult> {
    cfg.validate()?;
    let n = test.rows();
    match cfg.mode {
        EpisodeMode::SingleReset => {
            let episodes: Vec<EpisodeResult> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut s = state.clone();
                    let mut c = cfg.clone();
                    c.seed = derive_seed(cfg.seed, i as u64);
                    ttt_episode(&mut s, &test.select_rows(&[i]), &c, res)
                })
                .collect::<Result<_>>()?;
            Ok(StreamResult {
                predictions: episodes
                    .iter()
                    .flat_map(|e| e.predictions.clone())
                    .collect(),
                episodes,
            })
        }
        EpisodeMode::BatchOnline {
            batch_size,
            reset_every,
        } => {
            let mut s = state.clone();
            let initial = state.snapshot();
            let mut episodes = Vec::new();
            let idx: Vec<usize> = (0..n).collect();
            for (b, chunk) in idx.chunks(batch_size).enumerate() {
                if let Some(k) = reset_every {
                    if b > 0 && b % k == 0 {
                        s.restore(&initial)?;
                    }
                }
                let mut c = cfg.clone();
                c.seed = derive_seed(cfg.seed, b as u64);
                episodes.push(ttt_episode(&mut s, &test.select_rows(chunk), &c, res)?);
            }
            Ok(StreamResult {
                predictions: episodes
                    .iter()
                    .flat_map(|e| e.predictions.clone())
                    .collect(),
                episodes,
            })
        }
    }
}

/// Baseline predictions over a stream, using the same batching as `cfg`.
pub fn baseline_stream(
    state: &SplitNetworkState,
    test: &Tensor,
    cfg: &EpisodeConfig,
) -> Result<Vec<usize>> {
    let chunk = match cfg.mode {
        EpisodeMode::SingleReset => 1,
        EpisodeMode::BatchOnline { batch_size, .. } => batch_size,
    };
    let idx: Vec<usize> = (0..test.rows()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for c in idx.chunks(chunk) {
        out.extend(predict_without_adaptation(
            state,
            &test.select_rows(c),
            &cfg.task,
        )?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    PlainTtt,
    MixTtt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::PlainTtt, Method::MixTtt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::PlainTtt => "ttt",
            Method::MixTtt => "mixttt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    /// Corruption name, or `avg` for the per-method mean row.
    pub corruption: String,
    pub severity: u8,
    pub method: Method,
    pub error_rate_percent: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub fn get(&self, corruption: &str, method: Method) -> Option<&ErrorRow> {
        self.rows
            .iter()
            .find(|r| r.corruption == corruption && r.method == method)
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!(
            "# config_hash={config_hash}\ncorruption,severity,method,error_rate_percent,n_samples,seed\n"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.corruption,
                r.severity,
                r.method.name(),
                r.error_rate_percent,
                r.n_samples,
                r.seed
            ));
        }
        s
    }
}

pub fn error_rate_percent(predictions: &[usize], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("no samples to score"));
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| **p != **y as usize)
        .count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Baseline, plain-TTT and MixTTT error rates for each corrupted test set,
/// followed by one `avg` row per method.
pub fn run_suite(
    state: &SplitNetworkState,
    test_sets: &[(CorruptionSpec, Dataset)],
    cfg: &EpisodeConfig,
    res: EpisodeResources<'_>,
) -> Result<ErrorTable> {
    let mut table = ErrorTable::default();
    let mut sums = [0.0; 3];
    for (spec, ds) in test_sets {
        ds.check_classes(state.spec().main_classes)?;
        for (m, method) in Method::ALL.into_iter().enumerate() {
            let preds = match method {
                Method::Baseline => baseline_stream(state, &ds.images, cfg)?,
                Method::PlainTtt | Method::MixTtt => {
                    let mut c = cfg.clone();
                    c.mix_enabled = method == Method::MixTtt;
                    run_stream(state, &ds.images, &c, res)?.predictions
                }
            };
            let err = error_rate_percent(&preds, &ds.labels)?;
            sums[m] += err;
            table.rows.push(ErrorRow {
                corruption: spec.kind.name().to_string(),
                severity: spec.severity,
                method,
                error_rate_percent: err,
                n_samples: ds.len(),
                seed: cfg.seed,
            });
        }
    }
    if !test_sets.is_empty() {
        let n: usize = test_sets.iter().map(|(_, d)| d.len()).sum();
        let severity = test_sets[0].0.severity;
        for (m, method) in Method::ALL.into_iter().enumerate() {
            table.rows.push(ErrorRow {
                corruption: "avg".into(),
                severity,
                method,
                error_rate_percent: sums[m] / test_sets.len() as f64,
                n_samples: n,
                seed: cfg.seed,
            });
        }
    }
    Ok(table)
}
