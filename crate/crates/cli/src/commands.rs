//! The harness subcommands. Each reads a resolved [`RunConfig`], writes its
//! artifacts into the output directory and returns an exit status.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use mixttt_core::analysis::{
    chain_rule_check, drift_experiment, grad_norm_compare, taylor_verify, taylor_verify_net,
    Jacobian, Quadratic, DEFAULT_MU_LIST,
};
use mixttt_core::data::{corrupt_dataset, load_dataset, save_dataset, synthetic_splits};
use mixttt_core::engine::{
    pretrain, run_suite, EpisodeConfig, EpisodeMode, EpisodeResources, LrSchedule,
};
use mixttt_core::{
    build_network, Activation, AuxTaskSpec, CorruptionKind, CorruptionSpec, Dataset, Error,
    Granularity, LayerSpec, MixupRatioSpec, NetworkSpec, ParameterImage, PretrainConfig,
    SplitNetworkState, SynthSpec, TaskKind, TrainFeatureStats, TrainPartnerPool,
};

use crate::config::RunConfig;

type Result<T> = std::result::Result<T, Error>;

pub const TAYLOR_EXPONENT: (f64, f64) = (1.8, 2.2);
pub const TAYLOR_HALVING: (f64, f64) = (3.5, 4.5);
pub const CHAIN_RULE_TOL: f64 = 1e-3;
const CHAIN_RULE_H: f64 = 1e-5;
const FEATURE_CHUNK: usize = 256;

/// Output directory plus the provenance line shared by every table.
pub struct Outputs {
    dir: PathBuf,
    hash: String,
}

impl Outputs {
    pub fn new(cfg: &RunConfig, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Outputs {
            dir,
            hash: cfg.hash(),
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, body)?;
        log::info!("wrote {}", p.display());
        Ok(p)
    }
}

fn seed(cfg: &RunConfig) -> Result<u64> {
    cfg.get("seed")
}

pub fn network_spec(cfg: &RunConfig, input_shape: (usize, usize, usize)) -> Result<NetworkSpec> {
    let widths: Vec<usize> = cfg.list("network.widths")?;
    let strides: Vec<usize> = cfg.list("network.strides")?;
    if widths.is_empty() || widths.len() != strides.len() {
        return Err(Error::Config(
            "network.widths and network.strides need the same, non-zero length".into(),
        ));
    }
    let mut layers: Vec<LayerSpec> = widths
        .iter()
        .zip(&strides)
        .map(|(&w, &s)| LayerSpec::conv_block(w, s))
        .collect();
    layers.push(LayerSpec::GlobalAvgPool);
    Ok(NetworkSpec {
        input_shape,
        encoder_layers: layers,
        main_classes: cfg.get("network.main_classes")?,
        aux_classes: cfg.get("network.aux_classes")?,
        activation: cfg.get::<Activation>("network.activation")?,
    })
}

pub fn task_spec(cfg: &RunConfig) -> Result<AuxTaskSpec> {
    let kind: TaskKind = cfg.get("ttt.task")?;
    let mut task = AuxTaskSpec::for_kind(kind);
    let low = cfg.get_opt("ttt.ratio_low")?.unwrap_or(task.ratio_spec.low);
    let high = cfg
        .get_opt("ttt.ratio_high")?
        .unwrap_or(task.ratio_spec.high);
    task.ratio_spec = MixupRatioSpec::new(low, high)?
        .with_granularity(cfg.get::<Granularity>("ttt.granularity")?);
    task.temperature = cfg.get("ttt.temperature")?;
    if kind == TaskKind::ContrastiveAlign {
        task.weights
            .insert("contrastive".into(), cfg.get("ttt.weight_contrastive")?);
        task.weights
            .insert("alignment".into(), cfg.get("ttt.weight_alignment")?);
    }
    task.validate()?;
    Ok(task)
}

pub fn episode_config(cfg: &RunConfig) -> Result<EpisodeConfig> {
    let mut ep = EpisodeConfig::new(task_spec(cfg)?, true);
    ep.alpha = cfg.get("ttt.alpha")?;
    ep.steps = cfg.get("ttt.steps")?;
    ep.partner_batch = cfg.get("ttt.partner_batch")?;
    ep.seed = seed(cfg)?;
    ep.mode = match cfg.raw("ttt.mode") {
        "single_reset" => EpisodeMode::SingleReset,
        "batch_online" => EpisodeMode::BatchOnline {
            batch_size: cfg.get("ttt.batch_size")?,
            reset_every: cfg.get_opt("ttt.reset_every")?,
        },
        other => return Err(Error::Config(format!("ttt.mode: unknown mode {other:?}"))),
    };
    ep.validate()?;
    Ok(ep)
}

fn corruption_kinds(cfg: &RunConfig) -> Result<Vec<CorruptionKind>> {
    let kinds: Vec<CorruptionKind> = cfg.list("corruptions")?;
    if kinds.is_empty() {
        return Err(Error::Config("corruptions lists no kinds".into()));
    }
    Ok(kinds)
}

fn load_checkpoint(
    cfg: &RunConfig,
    input_shape: (usize, usize, usize),
) -> Result<SplitNetworkState> {
    let spec = network_spec(cfg, input_shape)?;
    let mut state = build_network(&spec, 0)?;
    state.restore(&ParameterImage::load(cfg.input_path("checkpoint_path")?)?)?;
    Ok(state)
}

fn load_train(cfg: &RunConfig) -> Result<Arc<Dataset>> {
    Ok(Arc::new(load_dataset(cfg.input_path("train_path")?)?))
}

fn feature_stats(
    cfg: &RunConfig,
    state: &SplitNetworkState,
    train: &Dataset,
) -> Result<TrainFeatureStats> {
    match cfg.path("feature_stats_path") {
        Some(_) => TrainFeatureStats::load(cfg.input_path("feature_stats_path")?),
        None => TrainFeatureStats::compute(state, &train.images, FEATURE_CHUNK),
    }
}

/// First `ttt.max_samples` rows of a dataset (all when 0).
fn truncate(ds: Dataset, max: usize) -> Dataset {
    if max == 0 || max >= ds.len() {
        return ds;
    }
    ds.subset(&(0..max).collect::<Vec<_>>())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Outputs) -> Result<()> {
    let spec = SynthSpec {
        classes: cfg.get("synth.classes")?,
        channels: cfg.get("synth.channels")?,
        size: cfg.get("synth.size")?,
        grid: cfg.get("synth.grid")?,
        max_shift: cfg.get("synth.max_shift")?,
        pixel_noise: cfg.get("synth.pixel_noise")?,
        cell_jitter: cfg.get("synth.cell_jitter")?,
        contrast: cfg.get("synth.contrast")?,
    };
    let (train, test) = synthetic_splits(
        &spec,
        cfg.get("synth.n_train")?,
        cfg.get("synth.n_test")?,
        seed(cfg)?,
    )?;
    save_dataset(&train, out.path("train.mttt"))?;
    save_dataset(&test, out.path("test.mttt"))?;
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Outputs) -> Result<()> {
    let train = load_dataset(cfg.input_path("train_path")?)?;
    let spec = network_spec(cfg, train.image_shape())?;
    let s = seed(cfg)?;
    let pcfg = PretrainConfig {
        epochs: cfg.get("pretrain.epochs")?,
        batch_size: cfg.get("pretrain.batch_size")?,
        aux_weight: cfg.get("pretrain.aux_weight")?,
        lr: cfg.get("pretrain.lr")?,
        schedule: cfg.get::<LrSchedule>("pretrain.schedule")?,
        momentum: cfg.get("pretrain.momentum")?,
        seed: s,
    };
    pcfg.validate()?;
    let mut state = build_network(&spec, s)?;
    let metrics = pretrain(&mut state, &train, &pcfg)?;
    log::info!("clean training accuracy {:.4}", metrics.clean_accuracy);

    state.snapshot().save(out.path("checkpoint.mttt"))?;
    TrainFeatureStats::compute(&state, &train.images, FEATURE_CHUNK)?
        .save(out.path("train_feature_stats.mttt"))?;
    let mut csv = format!(
        "# config_hash={}\nepoch,lr,loss_main,loss_aux,train_accuracy\n",
        out.hash()
    );
    for e in &metrics.epochs {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.lr, e.loss_main, e.loss_aux, e.train_accuracy
        ));
    }
    out.text("pretrain_metrics.csv", &csv)?;
    Ok(())
}

/// Flags specific to `corrupt`; each overrides its config counterpart.
#[derive(Clone, Debug, Default)]
pub struct CorruptArgs {
    pub input: Option<PathBuf>,
    pub kind: Option<String>,
    pub severity: Option<u8>,
}

pub fn cmd_corrupt(cfg: &RunConfig, out: &Outputs, args: &CorruptArgs) -> Result<()> {
    let input = match &args.input {
        Some(p) if p.exists() => p.clone(),
        Some(p) => {
            return Err(Error::Config(format!(
                "--in: {} does not exist",
                p.display()
            )))
        }
        None => cfg.input_path("test_path")?,
    };
    let kinds = match &args.kind {
        Some(k) => vec![k.parse::<CorruptionKind>()?],
        None => corruption_kinds(cfg)?,
    };
    let severity = match args.severity {
        Some(s) => s,
        None => cfg.get("severity")?,
    };
    let clean = load_dataset(input)?;
    let s = seed(cfg)?;
    for kind in kinds {
        let spec = CorruptionSpec::new(kind, severity, s)?;
        let ds = corrupt_dataset(&clean, &spec)?;
        save_dataset(
            &ds,
            out.path(&format!("{}_s{}.mttt", kind.name(), severity)),
        )?;
    }
    Ok(())
}

pub fn cmd_ttt(cfg: &RunConfig, out: &Outputs) -> Result<()> {
    let test = load_dataset(cfg.input_path("test_path")?)?;
    let test = truncate(test, cfg.get("ttt.max_samples")?);
    let state = load_checkpoint(cfg, test.image_shape())?;
    let ep = episode_config(cfg)?;
    let train = load_train(cfg)?;
    let pool = TrainPartnerPool::new(train.clone())?;
    let stats = match ep.task.kind {
        TaskKind::ContrastiveAlign => Some(feature_stats(cfg, &state, &train)?),
        _ => None,
    };
    let res = EpisodeResources {
        pool: Some(&pool),
        feature_stats: stats.as_ref(),
    };
    let severity: u8 = cfg.get("severity")?;
    let s = seed(cfg)?;
    let sets = corruption_kinds(cfg)?
        .into_iter()
        .map(|k| {
            let spec = CorruptionSpec::new(k, severity, s)?;
            Ok((spec, corrupt_dataset(&test, &spec)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = run_suite(&state, &sets, &ep, res)?;
    out.text("error_table.csv", &table.to_csv(out.hash()))?;
    Ok(())
}

fn check(pass: bool, detail: Value) -> Value {
    let mut v = detail;
    v["pass"] = json!(pass);
    v
}

/// Runs every enabled property check, writes reports and a JSON summary, and
/// returns whether all of them passed.
pub fn cmd_verify(cfg: &RunConfig, out: &Outputs) -> Result<bool> {
    let enabled = |k: &str| -> Result<bool> { cfg.get::<bool>(&format!("verify.{k}")) };
    let s = seed(cfg)?;
    let mut checks = serde_json::Map::new();

    if enabled("quadratic")? {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut draw = || -> Vec<f64> { (0..16).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (x_t, x_i) = (draw(), draw());
        let r = taylor_verify(&Quadratic, &x_t, &x_i, &DEFAULT_MU_LIST)?;
        let pass = r.exponent_within(TAYLOR_EXPONENT.0, TAYLOR_EXPONENT.1);
        checks.insert(
            "quadratic".into(),
            check(pass, json!({ "exponent": r.fitted_exponent })),
        );
    }

    let needs_net = ["taylor", "chain_rule", "grad_norm", "drift"]
        .iter()
        .map(|k| enabled(k))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .any(|b| b);
    if needs_net {
        let test = load_dataset(cfg.input_path("test_path")?)?;
        let state = load_checkpoint(cfg, test.image_shape())?;
        let train = load_train(cfg)?;
        verify_network(cfg, out, &state, &test, train, &mut checks)?;
    }

    let all_pass = checks.values().all(|c| c["pass"] == json!(true));
    let summary = json!({
        "config_hash": out.hash(),
        "checks": Value::Object(checks),
        "all_pass": all_pass,
    });
    out.text(
        "verify_summary.json",
        &(serde_json::to_string_pretty(&summary).expect("plain json") + "\n"),
    )?;
    Ok(all_pass)
}

fn verify_network(
    cfg: &RunConfig,
    out: &Outputs,
    state: &SplitNetworkState,
    test: &Dataset,
    train: Arc<Dataset>,
    checks: &mut serde_json::Map<String, Value>,
) -> Result<()> {
    let enabled = |k: &str| -> Result<bool> { cfg.get::<bool>(&format!("verify.{k}")) };
    let s = seed(cfg)?;
    let row = |ds: &Dataset, i: usize| ds.images.select_rows(&[i]).into_data();

    if enabled("taylor")? {
        let n: usize = cfg.get("verify.taylor_samples")?;
        let n = n.min(test.len());
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let partners = sample(&mut rng, train.len(), n.min(train.len())).into_vec();
        let mut csv = format!(
            "# config_hash={}\nsample,mu,ratio_on_test,l_t,l_mt,first_order,remainder\n",
            out.hash()
        );
        let (mut exps, mut factors) = (Vec::new(), Vec::new());
        for (k, &j) in partners.iter().enumerate() {
            let r = taylor_verify_net(state, &row(test, k), 0, &row(&train, j), &DEFAULT_MU_LIST)?;
            for line in r.to_csv("").lines().skip(2) {
                csv.push_str(&format!("{k},{line}\n"));
            }
            exps.push(r.fitted_exponent);
            factors.push(r.halving_factors());
        }
        out.text("taylor.csv", &csv)?;
        // the halving law is asymptotic, so only the smallest-μ pair is held to it
        let smallest: Vec<f64> = factors.iter().filter_map(|f| f.last().copied()).collect();
        let pass = !exps.is_empty()
            && exps
                .iter()
                .all(|e| (TAYLOR_EXPONENT.0..=TAYLOR_EXPONENT.1).contains(e))
            && smallest.len() == exps.len()
            && smallest
                .iter()
                .all(|f| (TAYLOR_HALVING.0..=TAYLOR_HALVING.1).contains(f));
        checks.insert(
            "taylor".into(),
            check(
                pass,
                json!({ "exponents": exps, "halving_factors": factors, "smallest_mu_halving": smallest }),
            ),
        );
    }

    if enabled("chain_rule")? {
        let residual = chain_rule_check(
            state,
            &row(test, 0),
            0,
            Jacobian::FiniteDifference { h: CHAIN_RULE_H },
        )?;
        checks.insert(
            "chain_rule".into(),
            check(residual <= CHAIN_RULE_TOL, json!({ "residual": residual })),
        );
    }

    let run_grad = enabled("grad_norm")?;
    let run_drift = enabled("drift")?;
    if !(run_grad || run_drift) {
        return Ok(());
    }
    let kind: CorruptionKind = cfg.get("verify.corruption")?;
    let shifted = corrupt_dataset(test, &CorruptionSpec::new(kind, cfg.get("severity")?, s)?)?;
    let ep = episode_config(cfg)?;
    let pool = TrainPartnerPool::new(train.clone())?;
    let stats = match ep.task.kind {
        TaskKind::ContrastiveAlign => Some(feature_stats(cfg, state, &train)?),
        _ => None,
    };
    let res = EpisodeResources {
        pool: Some(&pool),
        feature_stats: stats.as_ref(),
    };
    let pair = |base: &EpisodeConfig| {
        let mut plain = base.clone();
        plain.mix_enabled = false;
        let mut mixed = base.clone();
        mixed.mix_enabled = true;
        (plain, mixed)
    };

    if run_grad {
        let n: usize = cfg.get("verify.grad_norm_samples")?;
        let sub = truncate(shifted.clone(), n);
        let mut base = ep.clone();
        base.mode = EpisodeMode::SingleReset;
        let (plain, mixed) = pair(&base);
        let g = grad_norm_compare(state, &sub.images, &plain, &mixed, res)?;
        out.text("grad_norm.csv", &g.to_csv(out.hash()))?;
        checks.insert(
            "grad_norm".into(),
            check(
                g.passed,
                json!({
                    "samples": g.traces.len(),
                    "mean_plain": g.mean_plain,
                    "mean_mixed": g.mean_mixed,
                    "mixed_lower": g.mixed_lower,
                    "ties": g.ties,
                    "sign_test_p": g.sign_test_p,
                    "paired_t": g.paired_t,
                    "paired_t_p": g.paired_t_p,
                }),
            ),
        );
    }

    if run_drift {
        let n: usize = cfg.get("verify.drift_samples")?;
        let sub = truncate(shifted, n);
        let mut base = ep.clone();
        base.steps = cfg.get("verify.drift_steps")?;
        base.checkpoints = cfg.list("verify.drift_checkpoints")?;
        let (plain, mixed) = pair(&base);
        let labels = sub.labels_usize();
        let mut deltas = Vec::new();
        for (name, c) in [("plain", &plain), ("mixttt", &mixed)] {
            let report = match drift_experiment(state, &sub.images, &labels, c, res) {
                Ok(r) => r,
                Err(e @ Error::Input(_)) => {
                    log::warn!("drift ({name}): {e}");
                    deltas.push(f64::NAN);
                    continue;
                }
                Err(e) => return Err(e),
            };
            out.text(&format!("drift_{name}.csv"), &report.to_csv(out.hash()))?;
            out.text(
                &format!("projection_{name}.csv"),
                &report.projection_csv(out.hash()),
            )?;
            deltas.push(report.delta());
        }
        let (dp, dm) = (deltas[0], deltas[1]);
        let pass = dp.is_finite() && dm.is_finite() && dp > dm;
        let finite_or_null = |v: f64| if v.is_finite() { json!(v) } else { Value::Null };
        checks.insert(
            "drift".into(),
            check(
                pass,
                json!({ "delta_plain": finite_or_null(dp), "delta_mixttt": finite_or_null(dm) }),
            ),
        );
    }
    Ok(())
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Numerical { .. } | Error::Episode { .. } => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

pub fn sidecar_log(path: &Path, lines: &[String]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}
