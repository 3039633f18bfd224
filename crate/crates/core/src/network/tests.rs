use super::*;
use crate::aux_tasks::{cross_entropy_with_grad, entropy_with_grad, AuxCrossEntropy};
use rand::Rng;

fn toy_spec() -> NetworkSpec {
    NetworkSpec {
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
    }
}

fn random_batch(n: usize, shape: (usize, usize, usize), seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = shape;
    let data = (0..n * c * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

/// Touches every output: aux cross-entropy, main entropy and a feature penalty.
fn mixed_objective(labels: Vec<usize>) -> impl Fn(&ForwardOutputs) -> Result<ObjectiveValue> {
    move |out: &ForwardOutputs| {
        let (la, ga) = cross_entropy_with_grad(&out.aux_logits, &labels)?;
        let (lm, gm) = entropy_with_grad(&out.main_logits);
        let f = &out.features;
        let lf = 0.1 * f.data().iter().map(|v| v * v).sum::<f64>();
        let gf = f.scale(0.2);
        Ok(ObjectiveValue {
            loss: la + lm + lf,
            d_features: Some(gf),
            d_main: Some(gm),
            d_aux: Some(ga),
        })
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-9
}

#[test]
fn initialization_is_deterministic_per_seed() {
    let a = build_network(&toy_spec(), 7).unwrap();
    let b = build_network(&toy_spec(), 7).unwrap();
    let c = build_network(&toy_spec(), 8).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert_eq!(a.norm_stats(), b.norm_stats());
}

#[test]
fn output_shapes() {
    let s = build_network(&toy_spec(), 1).unwrap();
    let out = s
        .forward(&random_batch(3, (2, 5, 5), 0), Mode::Eval)
        .unwrap();
    assert_eq!(out.features.shape(), &[3, 5]);
    assert_eq!(out.main_logits.shape(), &[3, 3]);
    assert_eq!(out.aux_logits.shape(), &[3, 4]);
    assert!(s
        .forward(&random_batch(1, (2, 4, 5), 0), Mode::Eval)
        .is_err());
}

#[test]
fn mlp_parameter_count() {
    let spec = NetworkSpec {
        input_shape: (1, 1, 4),
        encoder_layers: vec![LayerSpec::dense(3)],
        main_classes: 2,
        aux_classes: 4,
        activation: Activation::Relu,
    };
    // 4*3+3, 3*2+2, 3*4+4
    assert_eq!(spec.parameter_count().unwrap(), 39);
    let s = build_network(&spec, 0).unwrap();
    assert_eq!(s.theta().len(), 15);
    assert_eq!(s.phi1().len(), 8);
    assert_eq!(s.phi2().len(), 16);
}

#[test]
fn bias_free_odd_encoder_maps_zero_to_zero() {
    let spec = NetworkSpec {
        input_shape: (1, 2, 3),
        encoder_layers: vec![
            LayerSpec::Linear {
                out_features: 4,
                norm: false,
                bias: false,
            },
            LayerSpec::Linear {
                out_features: 3,
                norm: false,
                bias: false,
            },
        ],
        main_classes: 2,
        aux_classes: 4,
        activation: Activation::Smooth,
    };
    let s = build_network(&spec, 3).unwrap();
    let f = s
        .forward_features(&Tensor::zeros(vec![2, 1, 2, 3]), Mode::Eval)
        .unwrap();
    assert!(f.features.data().iter().all(|&v| v == 0.0));
}

#[test]
fn train_and_eval_normalization_differ() {
    let s = build_network(&toy_spec(), 2).unwrap();
    let x = random_batch(4, (2, 5, 5), 1);
    let a = s.forward_features(&x, Mode::Train).unwrap();
    let b = s.forward_features(&x, Mode::Eval).unwrap();
    assert_ne!(a, b);
    // after refreshing, eval on the same batch reproduces train mode
    let mut r = s.clone();
    r.refresh_norm_stats(&x).unwrap();
    let c = r.forward_features(&x, Mode::Eval).unwrap();
    for (u, v) in a.features.data().iter().zip(c.features.data()) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn heads_match_hand_composition() {
    let spec = NetworkSpec {
        input_shape: (1, 1, 2),
        encoder_layers: vec![LayerSpec::dense(2)],
        main_classes: 2,
        aux_classes: 2,
        activation: Activation::Smooth,
    };
    let mut s = build_network(&spec, 0).unwrap();
    let values = [
        ("encoder.0.weight", vec![0.5, -1.0, 2.0, 0.25]),
        ("encoder.0.bias", vec![0.1, -0.2]),
        ("main_head.weight", vec![1.0, 2.0, -1.0, 0.5]),
        ("main_head.bias", vec![0.0, 1.0]),
        ("aux_head.weight", vec![-2.0, 1.0, 0.5, 0.5]),
        ("aux_head.bias", vec![0.3, 0.0]),
    ];
    let slots = s.slots().to_vec();
    for (name, v) in &values {
        let slot = slots.iter().find(|sl| sl.name == *name).unwrap();
        s.params_mut()[slot.range()].copy_from_slice(v);
    }
    let x = [0.4, -0.6];
    let f = [
        (0.5 * x[0] - 1.0 * x[1] + 0.1f64).tanh(),
        (2.0 * x[0] + 0.25 * x[1] - 0.2f64).tanh(),
    ];
    let batch = Tensor::new(vec![1, 1, 1, 2], x.to_vec()).unwrap();
    let main = s.forward_main(&batch, Mode::Eval).unwrap();
    let aux = s.forward_aux(&batch, Mode::Eval).unwrap();
    let want_main = [f[0] + 2.0 * f[1], -f[0] + 0.5 * f[1] + 1.0];
    let want_aux = [-2.0 * f[0] + f[1] + 0.3, 0.5 * f[0] + 0.5 * f[1]];
    for (a, b) in main.data().iter().zip(&want_main) {
        assert!((a - b).abs() < 1e-14);
    }
    for (a, b) in aux.data().iter().zip(&want_aux) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn check_param_gradients(mode: Mode) -> usize {
    let s = build_network(&toy_spec(), 11).unwrap();
    let x = random_batch(3, (2, 5, 5), 5);
    let obj = mixed_objective(vec![0, 3, 1]);
    let g = s.gradients(&obj, &x, mode).unwrap();
    let h = 1e-5;
    for i in 0..s.parameter_count() {
        let mut p = s.clone();
        p.params_mut()[i] += h;
        let up = obj(&p.forward(&x, mode).unwrap()).unwrap().loss;
        p.params_mut()[i] -= 2.0 * h;
        let down = obj(&p.forward(&x, mode).unwrap()).unwrap().loss;
        let fd = (up - down) / (2.0 * h);
        assert!(
            close(g.params[i], fd, 1e-4),
            "param {i}: {} vs {fd}",
            g.params[i]
        );
    }
    s.parameter_count()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let n = check_param_gradients(Mode::Eval) + check_param_gradients(Mode::Train);
    assert!(n > 400);
}

#[test]
fn input_gradients_match_finite_differences() {
    for mode in [Mode::Eval, Mode::Train] {
        let s = build_network(&toy_spec(), 4).unwrap();
        let x = random_batch(3, (2, 5, 5), 9);
        let obj = mixed_objective(vec![2, 2, 0]);
        let g = s.gradients(&obj, &x, mode).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj(&s.forward(&xp, mode).unwrap()).unwrap().loss
                - obj(&s.forward(&xm, mode).unwrap()).unwrap().loss)
                / (2.0 * h);
            assert!(close(g.input.data()[i], fd, 1e-4), "input {i}");
        }
    }
}

#[test]
fn relu_network_gradients_match_away_from_kinks() {
    let mut spec = toy_spec();
    spec.activation = Activation::Relu;
    let s = build_network(&spec, 6).unwrap();
    let x = random_batch(2, (2, 5, 5), 2);
    let labels = [1, 2];
    let obj = AuxCrossEntropy { labels: &labels };
    let (_, g) = s.grad_input(&obj, &x, Mode::Eval).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dir: Vec<f64> = (0..x.len()).map(|_| rng.random::<f64>() - 0.5).collect();
    let h = 1e-7;
    let shifted = |t: f64| {
        let v: Vec<f64> = x.data().iter().zip(&dir).map(|(a, d)| a + t * d).collect();
        let xb = Tensor::new(x.shape().to_vec(), v).unwrap();
        obj.evaluate(&s.forward(&xb, Mode::Eval).unwrap())
            .unwrap()
            .loss
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    let analytic: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
    assert!(close(analytic, fd, 1e-4));
}

#[test]
fn affine_selector_is_a_strict_subset_of_the_encoder() {
    let s = build_network(&toy_spec(), 0).unwrap();
    let affine = s.selector(ParamSubset::NormAffineOnly).unwrap();
    let enc = s.selector(ParamSubset::EncoderFull).unwrap();
    assert!(affine.len() < enc.len());
    // 3 + 4 + 5 channels, scale and shift each
    assert_eq!(affine.len(), 24);
    assert!(affine.indices().all(|i| enc.contains(i)));
    let main = s.selector(ParamSubset::MainHead).unwrap();
    let aux = s.selector(ParamSubset::AuxHead).unwrap();
    assert!(enc.is_disjoint(&main) && enc.is_disjoint(&aux) && main.is_disjoint(&aux));
    assert_eq!(enc.len() + main.len() + aux.len(), s.parameter_count());

    let mlp = NetworkSpec {
        input_shape: (1, 1, 4),
        encoder_layers: vec![LayerSpec::dense(3)],
        main_classes: 2,
        aux_classes: 4,
        activation: Activation::Smooth,
    };
    assert!(build_network(&mlp, 0)
        .unwrap()
        .selector(ParamSubset::NormAffineOnly)
        .is_err());
}

#[test]
fn snapshot_restore_is_bit_exact() {
    let mut s = build_network(&toy_spec(), 21).unwrap();
    let img = s.snapshot();
    let (p0, n0) = (s.params().to_vec(), s.norm_stats().to_vec());
    let x = random_batch(4, (2, 5, 5), 3);
    let labels = [0, 1, 2, 3];
    let sel = s.selector(ParamSubset::All).unwrap();
    for _ in 0..10 {
        let (_, g) = s
            .grad_params(&AuxCrossEntropy { labels: &labels }, &x, Mode::Train, &sel)
            .unwrap();
        s.apply_update(&sel, &g, 0.1);
    }
    s.refresh_norm_stats(&x).unwrap();
    assert_ne!(s.params(), &p0[..]);
    s.restore(&img).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(s.params()), bits(&p0));
    assert_eq!(bits(s.norm_stats()), bits(&n0));
    assert_eq!(img.scalar_count(), p0.len() + n0.len());
    let back = ParameterImage::from_bytes(&img.to_bytes().unwrap()).unwrap();
    assert_eq!(back.to_bytes().unwrap(), img.to_bytes().unwrap());
}

#[test]
fn restore_rejects_mismatched_image() {
    let a = build_network(&toy_spec(), 0).unwrap();
    let mut spec = toy_spec();
    spec.main_classes = 5;
    let mut b = build_network(&spec, 0).unwrap();
    let before = b.params().to_vec();
    assert!(b.restore(&a.snapshot()).is_err());
    assert_eq!(b.params(), &before[..]);
}

#[test]
fn update_is_confined_to_selector() {
    let mut s = build_network(&toy_spec(), 5).unwrap();
    let before = s.params().to_vec();
    let sel = s.selector(ParamSubset::NormAffineOnly).unwrap();
    let g = vec![1.0; sel.len()];
    s.apply_update(&sel, &g, 0.5);
    for (i, (a, b)) in s.params().iter().zip(&before).enumerate() {
        if sel.contains(i) {
            assert_eq!(*a, b - 0.5);
        } else {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn encoder_vjp_composes_with_head_gradient() {
    let s = build_network(&toy_spec(), 8).unwrap();
    let x = random_batch(2, (2, 5, 5), 4);
    let labels = [3, 0];
    let g = s
        .gradients(&AuxCrossEntropy { labels: &labels }, &x, Mode::Eval)
        .unwrap();
    let composed = s.encoder_vjp(&x, Mode::Eval, &g.features).unwrap();
    for (a, b) in composed.data().iter().zip(g.input.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
