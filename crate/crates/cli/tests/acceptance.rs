//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 1–4 and 8 are exact properties and fail the run when red.
//! Criteria 5–7 are empirical outcomes of the desk-scale experiment; they are
//! reported either way and only fail the run with `MIXTTT_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mixttt_core::analysis::{
    drift_experiment, first_order_term_net, grad_norm_compare, secant_first_order,
    taylor_verify_net, AuxLossField, DEFAULT_MU_LIST,
};
use mixttt_core::aux_tasks::{cross_entropy_with_grad, entropy_with_grad};
use mixttt_core::data::{corrupt_dataset, load_dataset, save_dataset, synthetic_splits};
use mixttt_core::engine::{
    pretrain, run_stream, run_suite, ttt_episode, EpisodeConfig, EpisodeMode, EpisodeResources,
    ErrorTable, Method,
};
use mixttt_core::network::{ForwardOutputs, ObjectiveValue};
use mixttt_core::{
    build_network, Activation, AuxTaskSpec, CorruptionKind, CorruptionSpec, Dataset, LayerSpec,
    MixupRatioSpec, Mode, NetworkSpec, ParamSubset, PretrainConfig, SplitNetworkState, SynthSpec,
    TaskKind, Tensor, TrainFeatureStats, TrainPartnerPool,
};

// criterion 1
const TAYLOR_CONFIGS: u64 = 5;
const EXPONENT_RANGE: (f64, f64) = (1.8, 2.2);
const HALVING_RANGE: (f64, f64) = (3.5, 4.5);
const TAYLOR_BUDGET_SECS: f64 = 60.0;
// criterion 2
const SECANT_TRIPLES: u64 = 100;
const SECANT_H: f64 = 1e-5;
const SECANT_REL_TOL: f64 = 1e-3;
// criterion 3
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_ABS_FLOOR: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;
const MIN_COORDINATES: usize = 1000;
// desk-scale experiments (criteria 5–7)
const DESK_SIZE: usize = 8;
const DESK_WIDTHS: [usize; 3] = [8, 16, 32];
const DESK_TRAIN: usize = 4000;
const DESK_TEST: usize = 1000;
const DESK_EPOCHS: usize = 40;
const SEVERITY: u8 = 5;
const GRAD_NORM_SAMPLES: usize = 20;
const GRAD_NORM_PARTNERS: usize = 32;
const DRIFT_SEEDS: [u64; 4] = [0, 1, 2, 3];
const DRIFT_REQUIRED: usize = 3;
const DRIFT_STEPS: usize = 30;
const DRIFT_CHECKPOINTS: [usize; 4] = [0, 10, 20, 30];
const DRIFT_PARTNERS: usize = 8;
const ERROR_SEEDS: [u64; 3] = [0, 1, 2];
const ERROR_SAMPLES: usize = 300;
const ERROR_PARTNERS: usize = 8;
const ERROR_BUDGET_SECS: f64 = 3600.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Bypasses the test harness's output capture.
fn report(n: usize, name: &str, o: &Outcome) {
    let mut err = std::io::stderr();
    let _ = writeln!(
        err,
        "criterion {n} [{name}]: {} ({})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn smooth_net(seed: u64) -> SplitNetworkState {
    let spec = NetworkSpec {
        input_shape: (3, 6, 6),
        encoder_layers: vec![
            LayerSpec::conv_block(4, 1),
            LayerSpec::conv_block(6, 2),
            LayerSpec::GlobalAvgPool,
        ],
        main_classes: 5,
        aux_classes: 4,
        activation: Activation::Smooth,
    };
    build_network(&spec, seed).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn taylor_expansion() -> Outcome {
    let t0 = Instant::now();
    let (mut exps, mut factors, mut dropped) = (Vec::new(), Vec::new(), 0);
    for seed in 0..TAYLOR_CONFIGS {
        let state = smooth_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (x_t, x_i) = (uniform(&mut rng, 108), uniform(&mut rng, 108));
        let r =
            taylor_verify_net(&state, &x_t, (seed % 4) as usize, &x_i, &DEFAULT_MU_LIST).unwrap();
        exps.push(r.fitted_exponent);
        factors.extend(r.halving_factors());
        dropped += r.dropped.len();
    }
    let secs = t0.elapsed().as_secs_f64();
    let (lo, hi) = min_max(&exps);
    let (flo, fhi) = min_max(&factors);
    let pass = dropped == 0
        && exps
            .iter()
            .all(|e| (EXPONENT_RANGE.0..=EXPONENT_RANGE.1).contains(e))
        && factors
            .iter()
            .all(|f| (HALVING_RANGE.0..=HALVING_RANGE.1).contains(f))
        && secs < TAYLOR_BUDGET_SECS;
    outcome(
        pass,
        format!(
            "{TAYLOR_CONFIGS} nets, exponents {lo:.4}..{hi:.4}, halving factors {flo:.3}..{fhi:.3}, {dropped} dropped, {secs:.2}s"
        ),
    )
}

fn first_order_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for k in 0..SECANT_TRIPLES {
        let state = smooth_net(k % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + k);
        let (x_t, x_i) = (uniform(&mut rng, 108), uniform(&mut rng, 108));
        let label = rng.random_range(0..4);
        let mu = DEFAULT_MU_LIST[(k % 4) as usize];
        let analytic = first_order_term_net(&state, &x_t, label, &x_i, mu).unwrap();
        let secant = secant_first_order(
            &AuxLossField {
                state: &state,
                label,
            },
            &x_t,
            &x_i,
            mu,
            SECANT_H,
        )
        .unwrap();
        let rel = (analytic - secant).abs() / analytic.abs().max(secant.abs()).max(1e-300);
        worst = worst.max(rel);
        failures += (rel > SECANT_REL_TOL) as usize;
    }
    outcome(
        failures == 0,
        format!("{SECANT_TRIPLES} triples, worst relative gap {worst:.2e}, tolerance {SECANT_REL_TOL:e}"),
    )
}

fn toy_net(seed: u64) -> SplitNetworkState {
    let spec = NetworkSpec {
        input_shape: (2, 5, 5),
        encoder_layers: vec![
            LayerSpec::conv_block(3, 1),
            LayerSpec::conv_block(4, 2),
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                out_features: 5,
                norm: true,
                bias: false,
            },
        ],
        main_classes: 3,
        aux_classes: 4,
        activation: Activation::Smooth,
    };
    build_network(&spec, seed).unwrap()
}

/// Aux cross-entropy + main entropy + a feature penalty, so every head and
/// the encoder carry gradient.
fn full_objective(
    labels: Vec<usize>,
) -> impl Fn(&ForwardOutputs) -> mixttt_core::Result<ObjectiveValue> {
    move |out: &ForwardOutputs| {
        let (la, ga) = cross_entropy_with_grad(&out.aux_logits, &labels)?;
        let (lm, gm) = entropy_with_grad(&out.main_logits);
        let lf = 0.1 * out.features.data().iter().map(|v| v * v).sum::<f64>();
        Ok(ObjectiveValue {
            loss: la + lm + lf,
            d_features: Some(out.features.scale(0.2)),
            d_main: Some(gm),
            d_aux: Some(ga),
        })
    }
}

fn gradient_oracle() -> Outcome {
    let close =
        |a: f64, b: f64| (a - b).abs() <= GRAD_REL_TOL * a.abs().max(b.abs()) + GRAD_ABS_FLOOR;
    let (mut checked, mut bad) = (0usize, 0usize);
    let mut worst: f64 = 0.0;
    for seed in 0..2u64 {
        let s = toy_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
        let x = Tensor::new(vec![3, 2, 5, 5], uniform(&mut rng, 150)).unwrap();
        let obj = full_objective(vec![0, 3, 1]);
        for mode in [Mode::Eval, Mode::Train] {
            let loss =
                |s: &SplitNetworkState, x: &Tensor| obj(&s.forward(x, mode).unwrap()).unwrap().loss;
            let g = s.gradients(&obj, &x, mode).unwrap();
            let mut record = |a: f64, fd: f64| {
                checked += 1;
                bad += !close(a, fd) as usize;
                if fd.abs() > 1e-6 {
                    worst = worst.max((a - fd).abs() / fd.abs());
                }
            };
            for i in 0..s.parameter_count() {
                let mut p = s.clone();
                p.params_mut()[i] += FD_STEP;
                let up = loss(&p, &x);
                p.params_mut()[i] -= 2.0 * FD_STEP;
                let down = loss(&p, &x);
                record(g.params[i], (up - down) / (2.0 * FD_STEP));
            }
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += FD_STEP;
                xm.data_mut()[i] -= FD_STEP;
                record(
                    g.input.data()[i],
                    (loss(&s, &xp) - loss(&s, &xm)) / (2.0 * FD_STEP),
                );
            }
        }
    }
    outcome(
        bad == 0 && checked >= MIN_COORDINATES,
        format!("{checked} coordinates (parameters and inputs, eval and train norm), {bad} outside tolerance, worst relative gap {worst:.2e}"),
    )
}

/// Small random-init setup shared by the reduction and confinement checks.
struct Toy {
    state: SplitNetworkState,
    train: Arc<Dataset>,
    test: Dataset,
}

fn toy_setup() -> Toy {
    let synth = SynthSpec::desk_default(6);
    let (train, test) = synthetic_splits(&synth, 60, 8, 4).unwrap();
    let spec = NetworkSpec {
        input_shape: (3, 6, 6),
        encoder_layers: vec![
            LayerSpec::conv_block(4, 1),
            LayerSpec::conv_block(6, 2),
            LayerSpec::GlobalAvgPool,
        ],
        main_classes: 10,
        aux_classes: 4,
        activation: Activation::Smooth,
    };
    Toy {
        state: build_network(&spec, 4).unwrap(),
        train: Arc::new(train),
        test,
    }
}

fn reduction_law(toy: &Toy) -> Outcome {
    let pool = TrainPartnerPool::new(toy.train.clone()).unwrap();
    let stats = TrainFeatureStats::compute(&toy.state, &toy.train.images, 64).unwrap();
    let res = EpisodeResources {
        pool: Some(&pool),
        feature_stats: Some(&stats),
    };
    let bits = |r: &mixttt_core::engine::StreamResult| -> Vec<u64> {
        r.episodes
            .iter()
            .flat_map(|e| {
                e.trace
                    .iter()
                    .flat_map(|t| [t.aux_loss.to_bits(), t.grad_norm_theta.to_bits()])
            })
            .collect()
    };
    let mut mismatched = Vec::new();
    let mut runs = 0;
    for kind in [
        TaskKind::Rotation,
        TaskKind::EntropyMin,
        TaskKind::ContrastiveAlign,
    ] {
        for mode in [
            EpisodeMode::SingleReset,
            EpisodeMode::BatchOnline {
                batch_size: 4,
                reset_every: None,
            },
        ] {
            let mut plain = EpisodeConfig::new(AuxTaskSpec::for_kind(kind), false);
            plain.alpha = 0.05;
            plain.steps = 3;
            plain.partner_batch = 4;
            plain.seed = 11;
            plain.mode = mode;
            let mut mixed = plain.clone();
            mixed.mix_enabled = true;
            mixed.task.ratio_spec = MixupRatioSpec::new(1.0, 1.0).unwrap();
            let a = run_stream(&toy.state, &toy.test.images, &plain, res).unwrap();
            let b = run_stream(&toy.state, &toy.test.images, &mixed, res).unwrap();
            runs += 1;
            if a.predictions != b.predictions || bits(&a) != bits(&b) || bits(&a).is_empty() {
                mismatched.push(format!("{kind}/{mode:?}"));
            }
        }
    }
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{runs} task/mode pairs bit-identical in traces and predictions")
        } else {
            format!("mismatch in {}", mismatched.join(", "))
        },
    )
}

/// Desk-scale data and pretrained models, built once per seed.
struct Desk {
    models: BTreeMap<u64, (SplitNetworkState, Arc<Dataset>, Dataset)>,
    pretrain_secs: BTreeMap<u64, f64>,
}

impl Desk {
    fn get(&mut self, seed: u64) -> &(SplitNetworkState, Arc<Dataset>, Dataset) {
        self.models.entry(seed).or_insert_with(|| {
            let t0 = Instant::now();
            let (train, test) = synthetic_splits(
                &SynthSpec::desk_default(DESK_SIZE),
                DESK_TRAIN,
                DESK_TEST,
                seed,
            )
            .unwrap();
            let mut layers: Vec<LayerSpec> = DESK_WIDTHS
                .iter()
                .enumerate()
                .map(|(i, &w)| LayerSpec::conv_block(w, if i == 0 { 1 } else { 2 }))
                .collect();
            layers.push(LayerSpec::GlobalAvgPool);
            let spec = NetworkSpec {
                input_shape: (3, DESK_SIZE, DESK_SIZE),
                encoder_layers: layers,
                main_classes: 10,
                aux_classes: 4,
                activation: Activation::Smooth,
            };
            let mut state = build_network(&spec, seed).unwrap();
            let cfg = PretrainConfig {
                epochs: DESK_EPOCHS,
                seed,
                ..Default::default()
            };
            let m = pretrain(&mut state, &train, &cfg).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            self.pretrain_secs.insert(seed, secs);
            let _ = writeln!(
                std::io::stderr(),
                "  (desk model seed {seed}: train accuracy {:.3}, {secs:.0}s)",
                m.clean_accuracy
            );
            (state, Arc::new(train), test)
        })
    }
}

fn desk_config(seed: u64, partners: usize) -> EpisodeConfig {
    // lr 1e-3, 10 steps, rotation with ratios U[0.7, 1]
    let mut c = EpisodeConfig::new(AuxTaskSpec::rotation(), false);
    c.partner_batch = partners;
    c.seed = seed;
    c
}

fn noisy(test: &Dataset, seed: u64) -> Dataset {
    corrupt_dataset(
        test,
        &CorruptionSpec::new(CorruptionKind::GaussianNoise, SEVERITY, seed).unwrap(),
    )
    .unwrap()
}

fn grad_norm_control(desk: &mut Desk) -> Outcome {
    let (state, train, test) = desk.get(0);
    let pool = TrainPartnerPool::new(train.clone()).unwrap();
    let res = EpisodeResources {
        pool: Some(&pool),
        feature_stats: None,
    };
    let shifted = noisy(test, 0);
    let sub = shifted
        .images
        .select_rows(&(0..GRAD_NORM_SAMPLES).collect::<Vec<_>>());
    let plain = desk_config(0, GRAD_NORM_PARTNERS);
    let mut mixed = plain.clone();
    mixed.mix_enabled = true;
    let g = grad_norm_compare(state, &sub, &plain, &mixed, res).unwrap();
    outcome(
        g.passed,
        format!(
            "{} samples, mean norm plain {:.4} vs mixed {:.4}; mixed lower on {}/{}; sign test p={:.3}, paired t={:.2} p={:.3}",
            g.traces.len(),
            g.mean_plain,
            g.mean_mixed,
            g.mixed_lower,
            g.traces.len(),
            g.sign_test_p,
            g.paired_t,
            g.paired_t_p
        ),
    )
}

fn drift_control(desk: &mut Desk) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in DRIFT_SEEDS {
        let (state, train, test) = desk.get(seed);
        let pool = TrainPartnerPool::new(train.clone()).unwrap();
        let res = EpisodeResources {
            pool: Some(&pool),
            feature_stats: None,
        };
        let shifted = noisy(test, seed);
        let labels = shifted.labels_usize();
        let mut deltas = [0.0; 2];
        for (k, mix) in [false, true].into_iter().enumerate() {
            let mut c = desk_config(seed, DRIFT_PARTNERS);
            c.mix_enabled = mix;
            c.steps = DRIFT_STEPS;
            c.checkpoints = DRIFT_CHECKPOINTS.to_vec();
            deltas[k] = drift_experiment(state, &shifted.images, &labels, &c, res)
                .unwrap()
                .delta();
        }
        let win = deltas[0] > deltas[1];
        wins += win as usize;
        parts.push(format!(
            "seed {seed}: dDB plain {:+.4} vs mixed {:+.4}{}",
            deltas[0],
            deltas[1],
            if win { "" } else { " (miss)" }
        ));
    }
    outcome(
        wins >= DRIFT_REQUIRED,
        format!(
            "{wins}/{} seeds with plain drift above mixed; {}",
            DRIFT_SEEDS.len(),
            parts.join("; ")
        ),
    )
}

fn error_reproduction(desk: &mut Desk) -> Outcome {
    // whole pipeline, counting pretraining even when an earlier criterion paid for it
    let cached: f64 = ERROR_SEEDS
        .iter()
        .filter_map(|s| desk.pretrain_secs.get(s))
        .sum();
    let t0 = Instant::now();
    let mut tables: Vec<ErrorTable> = Vec::new();
    for seed in ERROR_SEEDS {
        let (state, train, test) = desk.get(seed);
        let pool = TrainPartnerPool::new(train.clone()).unwrap();
        let res = EpisodeResources {
            pool: Some(&pool),
            feature_stats: None,
        };
        let sub = test.subset(&(0..ERROR_SAMPLES).collect::<Vec<_>>());
        let sets: Vec<(CorruptionSpec, Dataset)> = CorruptionKind::ALL
            .into_iter()
            .map(|k| {
                let spec = CorruptionSpec::new(k, SEVERITY, seed).unwrap();
                (spec, corrupt_dataset(&sub, &spec).unwrap())
            })
            .collect();
        tables.push(run_suite(state, &sets, &desk_config(seed, ERROR_PARTNERS), res).unwrap());
    }
    let secs = t0.elapsed().as_secs_f64() + cached;
    let mean = |c: &str, m: Method| {
        tables
            .iter()
            .map(|t| t.get(c, m).unwrap().error_rate_percent)
            .sum::<f64>()
            / tables.len() as f64
    };
    let (base, plain, mix) = (
        mean("avg", Method::Baseline),
        mean("avg", Method::PlainTtt),
        mean("avg", Method::MixTtt),
    );
    let mut noise = Vec::new();
    let mut noise_ok = true;
    for k in CorruptionKind::ALL.into_iter().filter(|k| k.is_noise()) {
        let (b, p) = (
            mean(k.name(), Method::Baseline),
            mean(k.name(), Method::PlainTtt),
        );
        noise_ok &= p <= b;
        noise.push(format!("{} {b:.2}->{p:.2}", k.name()));
    }
    outcome(
        mix <= plain && noise_ok && secs < ERROR_BUDGET_SECS,
        format!(
            "mean error over {} seeds: baseline {base:.2}%, TTT {plain:.2}%, MixTTT {mix:.2}%; noise baseline->TTT: {}; {secs:.0}s",
            ERROR_SEEDS.len(),
            noise.join(", ")
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_mixttt"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .status()
        // verify reports red checks with exit 1; anything else is a failure
        .map(|s| s.success() || (args[0] == "verify" && s.code() == Some(1)))
        .unwrap_or(false)
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_none_or(|x| x != "log"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn infrastructure(toy: &Toy) -> Outcome {
    let mut failures = Vec::new();

    // snapshot/restore after adaptation
    let mut s = toy.state.clone();
    let image = s.snapshot();
    let before: Vec<u64> = s
        .params()
        .iter()
        .chain(s.norm_stats())
        .map(|v| v.to_bits())
        .collect();
    let mut c = EpisodeConfig::new(AuxTaskSpec::rotation(), false);
    c.alpha = 0.1;
    c.steps = 3;
    c.mode = EpisodeMode::BatchOnline {
        batch_size: 4,
        reset_every: None,
    };
    let pool = TrainPartnerPool::new(toy.train.clone()).unwrap();
    let res = EpisodeResources {
        pool: Some(&pool),
        feature_stats: None,
    };
    ttt_episode(&mut s, &toy.test.images.select_rows(&[0, 1, 2, 3]), &c, res).unwrap();
    s.restore(&image).unwrap();
    let after: Vec<u64> = s
        .params()
        .iter()
        .chain(s.norm_stats())
        .map(|v| v.to_bits())
        .collect();
    if before != after {
        failures.push("restore not bit-exact");
    }

    // entropy minimization confined to normalization affine parameters
    let mut s = toy.state.clone();
    let mut c = EpisodeConfig::new(AuxTaskSpec::entropy_min(), true);
    c.alpha = 0.1;
    c.partner_batch = 4;
    c.mode = EpisodeMode::BatchOnline {
        batch_size: 4,
        reset_every: None,
    };
    ttt_episode(&mut s, &toy.test.images.select_rows(&[0, 1, 2, 3]), &c, res).unwrap();
    let affine = s.selector(ParamSubset::NormAffineOnly).unwrap();
    let mut changed = 0;
    for i in 0..s.parameter_count() {
        let moved = s.params()[i].to_bits() != toy.state.params()[i].to_bits();
        if affine.contains(i) {
            changed += moved as usize;
        } else if moved {
            failures.push("entropy minimization moved a non-affine parameter");
            break;
        }
    }
    if changed == 0 {
        failures.push("entropy minimization moved nothing");
    }

    // dataset file round trip
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mttt"), dir.path().join("b.mttt"));
    save_dataset(&toy.test, &a).unwrap();
    save_dataset(&load_dataset(&a).unwrap(), &b).unwrap();
    if fs::read(&a).unwrap() != fs::read(&b).unwrap() {
        failures.push("dataset round trip not byte-identical");
    }

    // every CLI command, twice
    let cfg = "seed = 5\ntrain_path = data/train.mttt\ntest_path = data/test.mttt\n\
               checkpoint_path = model/checkpoint.mttt\nnetwork.widths = 4,6\nnetwork.strides = 1,2\n\
               synth.n_train = 120\nsynth.n_test = 16\npretrain.epochs = 2\nttt.steps = 2\n\
               ttt.partner_batch = 4\ncorruptions = gaussian_noise,contrast\nverify.taylor_samples = 2\n\
               verify.grad_norm_samples = 4\nverify.drift_samples = 16\nverify.drift_steps = 2\n\
               verify.drift_checkpoints = 0,2\n";
    let root = dir.path();
    fs::write(root.join("run.cfg"), cfg).unwrap();
    let base = [["synth", "data"], ["pretrain", "model"]];
    for [cmd, out] in base {
        if !run_cli(root, &[cmd, "--config", "run.cfg", "--out", out]) {
            failures.push("CLI setup command failed");
        }
    }
    let mut commands = 0;
    for cmd in ["synth", "pretrain", "corrupt", "ttt", "verify"] {
        let (x, y) = (format!("{cmd}_1"), format!("{cmd}_2"));
        let ok = run_cli(root, &[cmd, "--config", "run.cfg", "--out", &x])
            && run_cli(root, &[cmd, "--config", "run.cfg", "--out", &y]);
        let (ax, ay) = (artifacts(&root.join(&x)), artifacts(&root.join(&y)));
        if !ok || ax.is_empty() || ax != ay {
            failures.push("CLI command not deterministic");
        }
        commands += 1;
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("restore bit-exact, {changed} affine parameters moved and nothing else, dataset bytes stable, {commands} CLI commands byte-identical on rerun")
        } else {
            failures.join("; ")
        },
    )
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        })
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let strict = std::env::var("MIXTTT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let toy = toy_setup();
    let mut desk = Desk {
        models: BTreeMap::new(),
        pretrain_secs: BTreeMap::new(),
    };
    let mut hard_failures = 0;
    let mut soft_failures = 0;
    let mut check = |n: usize, name: &str, hard: bool, f: &mut dyn FnMut() -> Outcome| {
        let o = f();
        report(n, name, &o);
        if !o.pass {
            if hard {
                hard_failures += 1;
            } else {
                soft_failures += 1;
            }
        }
    };
    check(1, "taylor expansion", true, &mut taylor_expansion);
    check(2, "first-order identity", true, &mut first_order_identity);
    check(3, "gradient oracle", true, &mut gradient_oracle);
    check(4, "reduction law", true, &mut || reduction_law(&toy));
    check(8, "infrastructure exactness", true, &mut || {
        infrastructure(&toy)
    });
    check(5, "gradient-norm control", false, &mut || {
        grad_norm_control(&mut desk)
    });
    check(6, "drift control", false, &mut || drift_control(&mut desk));
    check(7, "directional error reproduction", false, &mut || {
        error_reproduction(&mut desk)
    });
    let mut err = std::io::stderr();
    let _ = writeln!(
        err,
        "acceptance: {hard_failures} exact-property failures, {soft_failures} experimental criteria red"
    );
    if hard_failures > 0 || (strict && soft_failures > 0) {
        std::process::exit(1);
    }
}
