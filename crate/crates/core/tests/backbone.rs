use dynslim::backbone::{Demucs, ModelConfig, Widths};
use dynslim::error::Error;
use dynslim::router::RouterConfig;
use dynslim::tensor::{finite_diff_grad, max_relative_error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        depth: 2,
        hidden: 4,
        groups: 2,
        router: RouterConfig { kernel: 16, hidden: 8 },
        ..ModelConfig::default()
    }
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(-0.5..0.5)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A router whose decision is `j` everywhere.
fn force_router(model: &mut Demucs, j: usize) {
    model.implant_router(9);
    let head = model.router.as_ref().unwrap().head.clone();
    model.params.get_mut(head.weight).data_mut().fill(0.0);
    let b = model.params.get_mut(head.bias).data_mut();
    b.fill(0.0);
    b[j] = 1.0;
}

#[test]
fn default_bottleneck_shape() {
    let model = Demucs::new(ModelConfig::default(), 0).unwrap();
    let cfg = &model.config;
    assert_eq!(cfg.valid_length(1000), 1024);
    let mut g = Graph::inference();
    let x = model.pad_input(&mut g, &noise(1000, 1));
    let mut h = g.upsample(x, cfg.resample).unwrap();
    let widths = Widths::constant(cfg, 1024, 3);
    for (i, enc) in model.encoders.iter().enumerate() {
        h = enc.forward(&mut g, &model.params, h, &widths.blocks[i], &cfg.uset).unwrap();
        assert_eq!(g.shape(h), &[cfg.block_hidden(i + 1), 4096 / 4usize.pow(i as u32 + 1)]);
    }
    assert_eq!(g.shape(h), &[512, 4]);
    let y = model.forward_static(&noise(1000, 1), 0.25).unwrap();
    assert_eq!(y.len(), 1000);
}

#[test]
fn zero_input_with_zero_biases_gives_zero() {
    let mut model = Demucs::new(small(), 2).unwrap();
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, n, _)| n.ends_with(".bias") || n.ends_with(".b_ih") || n.ends_with(".b_hh"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    for j in 0..4 {
        let y = model.forward_static_index(&vec![0.0; 100], j).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn narrow_and_full_outputs_differ() {
    let model = Demucs::new(small(), 3).unwrap();
    let x = noise(200, 4);
    let a = model.forward_static(&x, 0.125).unwrap();
    let b = model.forward_static(&x, 1.0).unwrap();
    assert!(max_diff(&a, &b) > 1e-6);
}

#[test]
fn input_validation() {
    let model = Demucs::new(small(), 3).unwrap();
    assert!(matches!(model.forward_static(&[0.1; 10], 0.3), Err(Error::UnknownUtilization { .. })));
    assert!(model.forward_static(&[], 1.0).is_err());
    assert!(matches!(
        model.forward_static(&[0.0, f64::NAN], 1.0),
        Err(Error::NonFiniteActivation { .. })
    ));
    assert!(model.forward_dynamic(&[0.1; 10]).is_err());
    let bad = ModelConfig { groups: 3, ..small() };
    assert!(Demucs::new(bad, 0).is_err());
    let bad = ModelConfig { kernel: 2, ..small() };
    assert!(Demucs::new(bad, 0).is_err());
}

fn sine(n: usize, freq: f64) -> Vec<f64> {
    (0..n).map(|t| (2.0 * std::f64::consts::PI * freq * t as f64).sin()).collect()
}

#[test]
fn resampling_passes_dc_and_round_trips() {
    let n = 512;
    let edge = 80;
    let mut g = Graph::inference();
    let dc = g.constant(Tensor::signal(vec![1.0; n]));
    let up = g.upsample(dc, 4).unwrap();
    assert_eq!(g.shape(up), &[1, 4 * n]);
    let v = g.value(up).data();
    assert!(v[4 * edge..4 * (n - edge)].iter().all(|x| (x - 1.0).abs() < 1e-3));
    let down = g.downsample(up, 4).unwrap();
    assert_eq!(g.shape(down), &[1, n]);

    let x = sine(n, 0.031);
    let xv = g.constant(Tensor::signal(x.clone()));
    let up = g.upsample(xv, 4).unwrap();
    let y = g.downsample(up, 4).unwrap();
    let y = g.value(y).data();
    let (sig, err) = (edge..n - edge).fold((0.0, 0.0), |(s, e), t| (s + x[t] * x[t], e + (x[t] - y[t]).powi(2)));
    let snr = 10.0 * (sig / err).log10();
    assert!(snr >= 60.0, "round trip SNR {snr:.1} dB");

    let short = g.constant(Tensor::signal(vec![1.0; 10]));
    assert!(g.downsample(short, 4).is_err());
}

/// First index where `a` and `b` differ.
fn first_change(a: &[f64], b: &[f64]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y)
}

#[test]
fn static_backbone_is_causal_up_to_lookahead() {
    let model = Demucs::new(small(), 5).unwrap();
    let look = model.config.lookahead();
    let x = noise(512, 6);
    let t0 = 300;
    let mut y = x.clone();
    for v in &mut y[t0..] {
        *v += 0.3;
    }
    for j in [0, 3] {
        let a = model.forward_static_index(&x, j).unwrap();
        let b = model.forward_static_index(&y, j).unwrap();
        let first = first_change(&a, &b).expect("perturbation has an effect");
        assert!(first >= t0 - look, "first change at {first}, bound {}", t0 - look);
    }
}

#[test]
fn dynamic_pass_is_causal_up_to_lookahead_plus_router_frame() {
    let mut model = Demucs::new(small(), 7).unwrap();
    model.implant_router(8);
    let look = model.config.lookahead() + model.config.router.kernel - 1;
    let x = noise(512, 9);
    let t0 = 333;
    let mut y = x.clone();
    for v in &mut y[t0..] {
        *v *= -2.0;
    }
    let (a, ta) = model.forward_dynamic(&x).unwrap();
    let (b, tb) = model.forward_dynamic(&y).unwrap();
    let kept = (t0 + 1) / model.config.router.kernel;
    assert_eq!(ta.decisions[..kept], tb.decisions[..kept]);
    let first = first_change(&a, &b).expect("perturbation has an effect");
    assert!(first >= t0 - look, "first change at {first}, bound {}", t0 - look);
}

#[test]
fn constant_router_reproduces_the_static_model() {
    for j in 0..4 {
        let mut model = Demucs::new(small(), 10).unwrap();
        force_router(&mut model, j);
        let x = noise(300, 11);
        let (dynamic, trace) = model.forward_dynamic(&x).unwrap();
        assert!(trace.decisions.iter().all(|&d| d == j));
        let stat = model.forward_static_index(&x, j).unwrap();
        assert!(max_diff(&dynamic, &stat) < 1e-12);
        assert!((trace.occurrence.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(trace.occurrence[j], 1.0);
        assert_eq!(trace.mean_utilization, model.config.uset.get(j));
    }
}

#[test]
fn occurrence_is_a_distribution() {
    let mut model = Demucs::new(small(), 12).unwrap();
    model.implant_router(13);
    let (_, trace) = model.forward_dynamic(&noise(700, 14)).unwrap();
    assert_eq!(trace.frames(), model.valid_length(700) / 16);
    assert!((trace.occurrence.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(trace.occurrence.iter().all(|&o| (0.0..=1.0).contains(&o)));
}

#[test]
fn switched_pass_matches_masked_sum_before_a_switch() {
    let model = Demucs::new(small(), 15).unwrap();
    let x = noise(512, 16);
    let mut decisions = vec![0; 16];
    decisions.extend(vec![3; 16]);
    let switched = model.forward_with_decisions(&x, &decisions).unwrap();
    let masked = model.forward_masked_sum(&x, &decisions).unwrap();
    let boundary = 256;
    let safe = boundary - model.config.lookahead();
    assert!(max_diff(&switched[..safe], &masked[..safe]) < 1e-12);
    let after = max_diff(&switched[boundary..], &masked[boundary..]);
    println!("switched vs masked sum after the switch: max |Δ| = {after:.3e}");

    let constant = model.forward_with_decisions(&x, &[2; 32]).unwrap();
    assert!(max_diff(&constant, &model.forward_static_index(&x, 2).unwrap()) < 1e-12);
    assert!(model.forward_with_decisions(&x, &[0; 31]).is_err());
    assert!(model.forward_with_decisions(&x, &[4; 32]).is_err());
}

fn projection(n: usize) -> Tensor {
    Tensor::signal(noise(n, 99))
}

#[test]
fn end_to_end_input_gradient() {
    let model = Demucs::new(small(), 17).unwrap();
    let x = Tensor::signal(noise(64, 18));
    let proj = projection(64);
    for j in [1, 3] {
        let err = dynslim::tensor::gradcheck(&[x.clone()], 1e-6, 1e-5, |g, v| {
            let widths = Widths::constant(&model.config, 64, j);
            let y = model.build(g, v[0], &widths)?;
            let y = g.mul_const(y, &proj)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err < 1e-3, "factor index {j}: relative error {err:.2e}");
    }
}

#[test]
fn end_to_end_parameter_gradients() {
    let model = Demucs::new(small(), 19).unwrap();
    let x = Tensor::signal(noise(64, 20));
    let proj = projection(64);
    let j = 2;
    let loss = |m: &Demucs, g: &mut Graph| {
        let xv = g.constant(x.clone());
        let y = m.build(g, xv, &Widths::constant(&m.config, 64, j)).unwrap();
        let y = g.mul_const(y, &proj).unwrap();
        g.sum(y)
    };
    let mut g = Graph::new();
    let l = loss(&model, &mut g);
    let grads = g.backward(l).unwrap().for_params(&model.params);
    let mut worst = 0.0f64;
    for (k, id) in model.params.ids().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut m = model.clone();
                *m.params.get_mut(id) = probe.clone();
                let mut g = Graph::inference();
                let l = loss(&m, &mut g);
                Ok(g.value(l).item())
            },
            model.params.get(id),
            1e-6,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&grads[k], &numeric, 1e-5));
    }
    assert!(worst < 1e-3, "relative error {worst:.2e}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Demucs::new(small(), 21).unwrap();
    model.implant_router(22);
    model.save(dir.path()).unwrap();
    let back = Demucs::load(dir.path()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.params.len(), model.params.len());
    let x = noise(200, 23);
    assert_eq!(back.forward_static(&x, 0.5).unwrap(), model.forward_static(&x, 0.5).unwrap());
    assert_eq!(back.forward_dynamic(&x).unwrap(), model.forward_dynamic(&x).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Demucs::new(small(), 24).unwrap();
    model.save(dir.path()).unwrap();
    let blob = dir.path().join("tensors.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Demucs::load(dir.path()), Err(Error::Checkpoint { .. })));

    let mut ck = model.to_checkpoint();
    ck.tensors.pop();
    ck.save(dir.path()).unwrap();
    assert!(matches!(Demucs::load(dir.path()), Err(Error::Checkpoint { .. })));
    assert!(matches!(Demucs::load(&dir.path().join("missing")), Err(Error::Checkpoint { .. })));
}

#[test]
fn implanting_a_router_replaces_the_old_one() {
    let mut model = Demucs::new(small(), 25).unwrap();
    let base = model.params.len();
    model.implant_router(1);
    let with = model.params.len();
    model.implant_router(2);
    assert_eq!(model.params.len(), with);
    assert!(with > base);
}

#[test]
fn input_gain_rescales_around_the_network() {
    let plain = Demucs::new(small(), 23).unwrap();
    let mut gained = plain.clone();
    gained.config.input_gain = 4.0;
    let x = noise(300, 24);
    let x4: Vec<f64> = x.iter().map(|v| 4.0 * v).collect();
    for j in 0..4 {
        let a = gained.forward_static_index(&x, j).unwrap();
        let b = plain.forward_static_index(&x4, j).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b / 4.0).abs() < 1e-12);
        }
    }
    for bad in [0.0, -1.0, f64::NAN] {
        assert!(ModelConfig { input_gain: bad, ..small() }.validate().is_err());
    }
}
