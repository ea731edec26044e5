//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. Set
//! `DYNSLIM_SKIP_DESK=1` to skip the end-to-end desk run.
//!
//! The desk-scale lines (7a-7d) report training outcomes and do not change
//! the exit status; every other failing line does.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use dynslim::backbone::{Demucs, ModelConfig};
use dynslim::data::{synth_corpus, Corpus, MixtureSpec, SynthSpec};
use dynslim::eval::{self, EvalRow, Mode};
use dynslim::layers::{decoder_pw_rows, slim_count, UtilizationSet, WidthSchedule};
use dynslim::losses::{
    bal_loss, bal_loss_value, combine_outputs, dynslim_loss, eff_loss, eff_loss_value, slim_loss,
    spectral_loss, spectral_loss_value, LossConfig,
};
use dynslim::metrics::{conv_macs, count_macs, spearman};
use dynslim::router::{self, argmax_columns, st_select, RouterConfig, SelectMode};
use dynslim::tensor::kernels::hann_window;
use dynslim::tensor::{finite_diff_grad, gradcheck, ChannelGate, GateKind, Graph, Tensor, Var};
use dynslim::training::{self, validate, Setup, Stage, TrainConfig};
use dynslim::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failed: usize,
    shortfalls: usize,
}

impl Report {
    fn line(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }

    /// Like [`Report::line`], without affecting the exit status.
    fn outcome(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        if !pass {
            self.shortfalls += 1;
        }
        println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }

    fn skip(&self, id: &str, name: &str, detail: &str) {
        println!("[SKIP] {id} {name}: {detail}");
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn project(g: &mut Graph, y: Var, v: &Tensor) -> Result<Var> {
    let p = g.mul_const(y, v)?;
    Ok(g.sum(p))
}

fn away_from_zero(shape: &[usize], gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, -1.0, 1.0, r);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = gap.copysign(*v);
        }
    }
    t
}

fn gate(kind: GateKind, frames: usize, channels: usize, r: &mut ChaCha8Rng) -> ChannelGate {
    let per: Vec<usize> = (0..frames).map(|_| r.gen_range(1..=channels)).collect();
    ChannelGate::from_per_frame(kind, &per)
}

fn probabilities(j: usize, r: &mut ChaCha8Rng) -> Tensor {
    let raw: Vec<f64> = (0..j).map(|_| r.gen_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    Tensor::vector(raw.iter().map(|v| v / z).collect())
}

const INSTANCES: usize = 20;
const GRAD_TOL: f64 = 1e-4;
/// Cases whose last input is an occurrence distribution, checked to sum to 1
/// within 1e-6, so they need a smaller difference step.
const ON_SIMPLEX: [&str; 3] = ["efficiency loss", "balance loss", "routed objective"];

type Instance = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// One random instance of every checked primitive and loss.
fn gradient_cases(r: &mut ChaCha8Rng) -> Vec<(&'static str, Instance)> {
    let mut out: Vec<(&'static str, Instance)> = Vec::new();

    let (ci, co, k, s) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..4));
    let t = k + s * r.gen_range(0..4);
    let v = Tensor::uniform(&[co, (t - k) / s + 1], -1.0, 1.0, r);
    out.push((
        "conv1d",
        (
            vec![
                Tensor::uniform(&[ci, t], -1.0, 1.0, r),
                Tensor::uniform(&[co, ci, k], -1.0, 1.0, r),
                Tensor::uniform(&[co], -1.0, 1.0, r),
            ],
            Box::new(move |g, l| {
                let y = g.conv1d(l[0], l[1], l[2], s)?;
                project(g, y, &v)
            }),
        ),
    ));

    let (ci, co, k, s) = (r.gen_range(1..5), 2 * r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..3));
    let t_out = r.gen_range(1..6);
    let kind = if r.gen_bool(0.5) { GateKind::Prefix } else { GateKind::Paired };
    let og = gate(kind, t_out, if kind == GateKind::Paired { co / 2 } else { co }, r);
    let ig = gate(GateKind::Prefix, t_out, ci, r);
    let v = Tensor::uniform(&[co, t_out], -1.0, 1.0, r);
    out.push((
        "conv1d (slimmed)",
        (
            vec![
                Tensor::uniform(&[ci, (t_out - 1) * s + k], -1.0, 1.0, r),
                Tensor::uniform(&[co, ci, k], -1.0, 1.0, r),
                Tensor::uniform(&[co], -1.0, 1.0, r),
            ],
            Box::new(move |g, l| {
                let y = g.conv1d_gated(l[0], l[1], l[2], s, Some(og.clone()), Some(ig.clone()))?;
                project(g, y, &v)
            }),
        ),
    ));

    let (ci, co, k, s, t) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..4), r.gen_range(1..6));
    let tg = r.gen_bool(0.5).then(|| gate(GateKind::Prefix, t, ci, r));
    let v = Tensor::uniform(&[co, (t - 1) * s + k], -1.0, 1.0, r);
    out.push((
        "conv_transpose1d",
        (
            vec![
                Tensor::uniform(&[ci, t], -1.0, 1.0, r),
                Tensor::uniform(&[ci, co, k], -1.0, 1.0, r),
                Tensor::uniform(&[co], -1.0, 1.0, r),
            ],
            Box::new(move |g, l| {
                let y = g.conv_transpose1d_gated(l[0], l[1], l[2], s, tg.clone())?;
                project(g, y, &v)
            }),
        ),
    ));

    let shape = [r.gen_range(1..4), r.gen_range(2..6)];
    let (c, t) = (shape[0], shape[1]);
    let v = Tensor::uniform(&shape, -1.0, 1.0, r);
    for (name, f) in [
        ("relu", Graph::relu as fn(&mut Graph, Var) -> Var),
        ("sigmoid", Graph::sigmoid),
        ("tanh", Graph::tanh),
        ("square", Graph::square),
    ] {
        let v = v.clone();
        out.push((
            name,
            (vec![away_from_zero(&shape, 1e-2, r)], Box::new(move |g, l| {
                let y = f(g, l[0]);
                project(g, y, &v)
            })),
        ));
    }
    let vp = v.clone();
    out.push((
        "pow_clamped",
        (vec![Tensor::uniform(&shape, 0.1, 2.0, r)], Box::new(move |g, l| {
            let y = g.pow_clamped(l[0], 0.3, 1e-16);
            project(g, y, &vp)
        })),
    ));
    let kc = Tensor::uniform(&shape, -1.0, 1.0, r);
    let ve = v.clone();
    out.push((
        "add/sub/mul/scale/const ops",
        (
            vec![Tensor::uniform(&shape, -1.0, 1.0, r), Tensor::uniform(&shape, -1.0, 1.0, r)],
            Box::new(move |g, l| {
                let a = g.add(l[0], l[1])?;
                let m = g.mul(a, l[1])?;
                let s = g.sub(m, l[0])?;
                let s = g.scale(s, 1.7);
                let s = g.add_scalar(s, 0.3);
                let s = g.mul_const(s, &kc)?;
                let s = g.sub_const(s, &kc)?;
                project(g, s, &ve)
            }),
        ),
    ));
    let left = r.gen_range(0..3);
    let map: Vec<usize> = (0..t + 2).map(|_| r.gen_range(0..t)).collect();
    let vg = Tensor::uniform(&[c, t + 2], -1.0, 1.0, r);
    out.push((
        "pad/slice/gather",
        (vec![Tensor::uniform(&shape, -1.0, 1.0, r)], Box::new(move |g, l| {
            let p = g.pad_time(l[0], left, 1)?;
            let s = g.slice_time(p, 1, t)?;
            let y = g.gather_time(s, map.clone())?;
            project(g, y, &vg)
        })),
    ));
    let vj = Tensor::uniform(&[c], -1.0, 1.0, r);
    out.push((
        "sum/mean/sum_last/index/reshape",
        (vec![Tensor::uniform(&shape, -1.0, 1.0, r)], Box::new(move |g, l| {
            let s = g.sum_last(l[0])?;
            let p = project(g, s, &vj)?;
            let flat = g.reshape(l[0], &[c * t])?;
            let m = g.mean(flat);
            let m = g.reshape(m, &[1])?;
            let m = g.index(m, 0)?;
            let row = g.index(l[0], 0)?;
            let q = g.sum(row);
            let pm = g.add(p, m)?;
            g.add(pm, q)
        })),
    ));

    let n = r.gen_range(1..4);
    let vglu = Tensor::uniform(&[n, t], -1.0, 1.0, r);
    out.push((
        "glu",
        (vec![Tensor::uniform(&[2 * n, t], -2.0, 2.0, r)], Box::new(move |g, l| {
            let y = g.glu(l[0])?;
            project(g, y, &vglu)
        })),
    ));

    let groups = r.gen_range(1..3);
    let f = groups * r.gen_range(1..4);
    let t = r.gen_range(1..5);
    let gsz = f / groups;
    let h0: Vec<f64> = (0..f).map(|_| r.gen_range(-0.5..0.5)).collect();
    let v = Tensor::uniform(&[f, t], -1.0, 1.0, r);
    out.push((
        "grouped GRU",
        (
            vec![
                Tensor::uniform(&[f, t], -1.0, 1.0, r),
                Tensor::uniform(&[groups, 3 * gsz, gsz], -0.8, 0.8, r),
                Tensor::uniform(&[groups, 3 * gsz, gsz], -0.8, 0.8, r),
                Tensor::uniform(&[groups, 3 * gsz], -0.5, 0.5, r),
                Tensor::uniform(&[groups, 3 * gsz], -0.5, 0.5, r),
            ],
            Box::new(move |g, l| {
                let y = g.gru_grouped(l[0], [l[1], l[2], l[3], l[4]], groups, &h0)?;
                project(g, y, &v)
            }),
        ),
    ));

    let (f, t) = (r.gen_range(1..5), r.gen_range(1..6));
    let h0: Vec<f64> = (0..f).map(|_| r.gen_range(-0.5..0.5)).collect();
    let v = Tensor::uniform(&[f, t], -1.0, 1.0, r);
    let mut inputs = vec![Tensor::uniform(&[f, t], -1.0, 1.0, r)];
    inputs.extend((0..4).map(|_| Tensor::uniform(&[3, f], -0.8, 0.8, r)));
    out.push((
        "diagonal GRU",
        (inputs, Box::new(move |g, l| {
            let y = g.gru_diagonal(l[0], [l[1], l[2], l[3], l[4]], &h0)?;
            project(g, y, &v)
        })),
    ));

    let win = 2 * r.gen_range(2..9);
    let hop = r.gen_range(1..=win);
    let frames = r.gen_range(1..4);
    let window = hann_window(win);
    let v = Tensor::uniform(&[2, frames, win / 2 + 1], -1.0, 1.0, r);
    out.push((
        "stft",
        (vec![Tensor::uniform(&[1, win + (frames - 1) * hop], -1.0, 1.0, r)], Box::new(move |g, l| {
            let y = g.stft(l[0], &window, hop)?;
            project(g, y, &v)
        })),
    ));

    let factor = r.gen_range(1..5);
    let t = r.gen_range(2..10);
    let v = Tensor::uniform(&[1, t], -1.0, 1.0, r);
    out.push((
        "upsample/downsample",
        (vec![Tensor::uniform(&[1, t], -1.0, 1.0, r)], Box::new(move |g, l| {
            let u = g.upsample(l[0], factor)?;
            let sq = g.square(u);
            let d = g.downsample(sq, factor)?;
            project(g, d, &v)
        })),
    ));

    let cfg = LossConfig {
        window: 16,
        hop: 8,
        alpha: r.gen_range(0.0..1.0),
        ..LossConfig::default()
    };
    let len = r.gen_range(20..48);
    let c1 = cfg.clone();
    out.push((
        "spectral loss",
        (
            vec![Tensor::uniform(&[1, len], -1.0, 1.0, r), Tensor::uniform(&[1, len], -1.0, 1.0, r)],
            Box::new(move |g, l| spectral_loss(g, l[0], l[1], &c1)),
        ),
    ));
    let j = r.gen_range(1..4);
    let c2 = cfg.clone();
    let mut inputs = vec![Tensor::uniform(&[1, len], -1.0, 1.0, r)];
    inputs.extend((0..j).map(|_| Tensor::uniform(&[1, len], -1.0, 1.0, r)));
    out.push((
        "slim loss",
        (inputs, Box::new(move |g, l| slim_loss(g, l[0], &l[1..], &c2, j))),
    ));

    let ufs = UtilizationSet::default();
    let target = r.gen_range(0.1..1.0);
    let u1 = ufs.clone();
    out.push((
        "efficiency loss",
        (vec![probabilities(4, r)], Box::new(move |g, l| eff_loss(g, l[0], &u1, target))),
    ));
    out.push(("balance loss", (vec![probabilities(4, r)], Box::new(move |g, l| bal_loss(g, l[0], 4)))));

    let c3 = LossConfig {
        beta: r.gen_range(0.1..2.0),
        gamma: r.gen_range(0.01..1.0),
        target,
        ..cfg
    };
    let u2 = ufs.clone();
    out.push((
        "routed objective",
        (
            vec![Tensor::uniform(&[1, len], -1.0, 1.0, r), Tensor::uniform(&[1, len], -1.0, 1.0, r), probabilities(4, r)],
            Box::new(move |g, l| {
                let se = spectral_loss(g, l[0], l[1], &c3)?;
                Ok(dynslim_loss(g, se, l[2], &u2, &c3)?.total)
            }),
        ),
    ));

    let (jn, t) = (r.gen_range(2..4), r.gen_range(2..8));
    let picks: Vec<usize> = (0..t).map(|_| r.gen_range(0..jn)).collect();
    let mut onehot = Tensor::zeros(&[jn, t]);
    for (col, &p) in picks.iter().enumerate() {
        onehot.data_mut()[p * t + col] = 1.0;
    }
    let v = Tensor::uniform(&[1, t], -1.0, 1.0, r);
    let inputs = (0..jn).map(|_| Tensor::uniform(&[1, t], -1.0, 1.0, r)).collect();
    out.push((
        "gated combination",
        (inputs, Box::new(move |g, l| {
            let gt = g.constant(onehot.clone());
            let y = combine_outputs(g, l, gt)?;
            project(g, y, &v)
        })),
    ));
    out
}

fn criterion_gradients(rep: &mut Report) {
    let started = Instant::now();
    let mut r = rng(2);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for _ in 0..INSTANCES {
        for (name, (inputs, build)) in gradient_cases(&mut r) {
            let eps = if ON_SIMPLEX.contains(&name) { 1e-7 } else { 1e-5 };
            let err = gradcheck(&inputs, eps, 1e-6, |g, l| build(g, l)).unwrap_or(f64::INFINITY);
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let (name, max) = worst.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = max < GRAD_TOL && secs < 120.0;
    rep.line(
        "2",
        "gradient suite",
        pass,
        format!(
            "{} checks x {INSTANCES} instances, max relative error {max:.2e} ({name}) < {GRAD_TOL:.0e}, {secs:.1} s < 120 s",
            worst.len()
        ),
    );
}

fn criterion_slimming(rep: &mut Report) {
    let mut worst = 0.0f64;
    let mut blocks = 0;
    let mut rows_ok = true;
    for cfg in [desk_config(), ModelConfig::default()] {
        let model = Demucs::new(cfg.clone(), 11).unwrap();
        let mut r = rng(3);
        for (enc, dec) in model.encoders.iter().zip(&model.decoders) {
            let frames = 6;
            let x = Tensor::uniform(&[enc.conv.c_in, frames * cfg.stride], -1.0, 1.0, &mut r);
            let xd = Tensor::uniform(&[dec.hidden, frames], -1.0, 1.0, &mut r);
            let skip = Tensor::uniform(&[dec.hidden, frames], -1.0, 1.0, &mut r);
            for (j, &uf) in cfg.uset.values().iter().enumerate() {
                let width = WidthSchedule::constant(frames, j);
                let mut g = Graph::inference();
                let (xv, xdv, sv) = (g.constant(x.clone()), g.constant(xd.clone()), g.constant(skip.clone()));
                let ye = enc.forward(&mut g, &model.params, xv, &width, &cfg.uset).unwrap();
                let yd = dec.forward(&mut g, &model.params, xdv, sv, &width, &cfg.uset).unwrap();
                let want_e = encoder_oracle(&model.params, enc, uf, &to_signal(&x));
                let want_d = decoder_oracle(&model.params, dec, uf, &to_signal(&xd), &to_signal(&skip));
                worst = worst.max(max_diff(&to_signal(g.value(ye)), &want_e));
                worst = worst.max(max_diff(&to_signal(g.value(yd)), &want_d));

                let h = dec.hidden;
                let c = slim_count(h, uf);
                let expect: Vec<usize> = (0..c).chain(h..h + c).collect();
                rows_ok &= decoder_pw_rows(2 * h, uf).unwrap() == expect;
            }
            blocks += 2;
        }
    }
    rep.line(
        "3",
        "slimming oracle",
        worst < 1e-10 && rows_ok,
        format!(
            "{blocks} blocks x 4 factors, max |slimmed - pruned copy| {worst:.1e} < 1e-10; decoder rows start+middle: {}",
            if rows_ok { "exact" } else { "MISMATCH" }
        ),
    );
}

fn criterion_routing(rep: &mut Report) {
    let mut model = Demucs::new(desk_config(), 5).unwrap();
    model.implant_router(6);
    let mut r = rng(4);
    let mut argmax_ok = true;
    for _ in 0..5 {
        let x: Vec<f64> = (0..3000).map(|_| r.gen_range(-0.5..0.5)).collect();
        let (_, trace) = model.forward_dynamic(&x).unwrap();
        let t = trace.frames();
        for f in 0..t {
            let col: Vec<f64> = (0..4).map(|k| trace.scores.data()[k * t + f]).collect();
            let best = (0..4).fold(0, |b, k| if col[k] > col[b] { k } else { b });
            argmax_ok &= trace.decisions[f] == best;
        }
        let mut g = Graph::inference();
        let sv = g.constant(trace.scores.clone());
        let sel = st_select(&mut g, sv, SelectMode::Infer, &mut r).unwrap();
        argmax_ok &= argmax_columns(g.value(sel)) == trace.decisions;
    }

    let draws = 100_000;
    let mut mc_worst = 0.0f64;
    for (seed, scores) in [[1.0, 0.0, -0.5, 0.5], [2.0, 1.9, -1.0, 0.0], [0.0, 0.0, 0.0, 0.0]].iter().enumerate() {
        let z: f64 = scores.iter().map(|v: &f64| v.exp()).sum();
        let mut rs = Tensor::zeros(&[4, draws]);
        for k in 0..4 {
            rs.data_mut()[k * draws..(k + 1) * draws].fill(scores[k]);
        }
        let mut noise = router::noise_rng(seed as u64, 0);
        let mut g = Graph::inference();
        let sv = g.constant(rs);
        let sel = st_select(&mut g, sv, SelectMode::Train, &mut noise).unwrap();
        let occ = router::occurrence(&argmax_columns(g.value(sel)), 4);
        for k in 0..4 {
            mc_worst = mc_worst.max((occ[k] - scores[k].exp() / z).abs());
        }
    }

    let mut st_worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (j, t) = (r.gen_range(2..6), r.gen_range(1..5));
        let v = Tensor::uniform(&[j, t], -1.0, 1.0, &mut r);
        let rv = Tensor::uniform(&[j, t], -2.0, 2.0, &mut r);
        let noise = Tensor::uniform(&[j, t], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let leaf = g.leaf(rv.clone(), true);
        let sel = g.straight_through(leaf, Some(&noise)).unwrap();
        let loss = project(&mut g, sel, &v).unwrap();
        let analytic = g.backward(loss).unwrap().wrt(leaf).unwrap().clone();
        let relaxed = |x: &Tensor| -> Result<f64> {
            let mut total = 0.0;
            for col in 0..t {
                let logits: Vec<f64> = (0..j).map(|k| x.data()[k * t + col] + noise.data()[k * t + col]).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                total += (0..j).map(|k| (logits[k] - m).exp() / z * v.data()[k * t + col]).sum::<f64>();
            }
            Ok(total)
        };
        let numeric = finite_diff_grad(relaxed, &rv, 1e-6).unwrap();
        st_worst = st_worst.max(analytic.max_abs_diff(&numeric));
    }
    let pass = argmax_ok && mc_worst < 0.01 && st_worst < 1e-6;
    rep.line(
        "4",
        "routing contract",
        pass,
        format!(
            "inference = argmax: {argmax_ok}; Gumbel frequency vs softmax max |diff| {mc_worst:.4} < 0.01 at 1e5 draws; \
             straight-through vs softmax relaxation {st_worst:.1e} < 1e-6"
        ),
    );
}

fn criterion_anchors(rep: &mut Report) {
    let ufs = UtilizationSet::default();
    let cases = [
        (bal_loss_value(&[0.25; 4]).unwrap(), 0.0),
        (bal_loss_value(&[0.0, 1.0, 0.0, 0.0]).unwrap(), 1.0),
        (bal_loss_value(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 1.0 / 3.0),
        (eff_loss_value(&[0.0, 0.0, 0.0, 1.0], &ufs, 0.5).unwrap(), 0.25),
        (eff_loss_value(&[0.5, 0.0, 0.0, 0.5], &ufs, 0.5625).unwrap(), 0.0),
        (eff_loss_value(&[1.0, 0.0, 0.0, 0.0], &ufs, 0.125).unwrap(), 0.0),
    ];
    let worst = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut r = rng(5);
    let s: Vec<f64> = (0..4000).map(|_| r.gen_range(-1.0..1.0)).collect();
    let se = spectral_loss_value(&s, &s, &LossConfig::default()).unwrap();
    rep.line(
        "5",
        "loss anchors",
        worst < 1e-12 && se == 0.0,
        format!("{} balance/efficiency anchors max |err| {worst:.1e} < 1e-12; spectral(s, s) = {se}", cases.len()),
    );
}

fn criterion_macs(rep: &mut Report) {
    let hand = conv_macs(32, 1, 8, 100);
    let cfg = ModelConfig::default();
    let report = count_macs(&cfg).unwrap();
    let overhead = report.router_overhead();
    let mut monotone = true;
    for c in [cfg.clone(), desk_config()] {
        let rp = count_macs(&c).unwrap();
        monotone &= (1..4).all(|j| rp.total(j) > rp.total(j - 1));
        monotone &= rp.layers.iter().all(|l| l.per_uf.windows(2).all(|w| w[0] <= w[1]));
    }
    rep.line(
        "6",
        "MAC accounting",
        hand == 25_600 && overhead <= 0.001 && monotone,
        format!(
            "conv 1->32, K=8, 100 frames = {hand} (hand count 25600); router {:.2} of {:.0} MACs/sample = {:.4}% <= 0.1%; monotone in factor: {monotone}",
            report.router,
            report.total(3),
            100.0 * overhead
        ),
    );
}

fn criterion_consistency(rep: &mut Report) {
    let mut r = rng(8);
    let x: Vec<f64> = (0..5000).map(|_| r.gen_range(-0.5..0.5)).collect();
    let mut worst = 0.0f64;
    let mut model = Demucs::new(desk_config(), 9).unwrap();
    for j in 0..4 {
        model.implant_router(10);
        let head = model.router.as_ref().unwrap().head.clone();
        model.params.get_mut(head.weight).data_mut().fill(0.0);
        let b = model.params.get_mut(head.bias).data_mut();
        b.fill(0.0);
        b[j] = 1.0;
        let (y, trace) = model.forward_dynamic(&x).unwrap();
        let want = model.forward_static_index(&x, j).unwrap();
        assert!(trace.decisions.iter().all(|&d| d == j));
        worst = worst.max(y.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    model.implant_router(12);
    let val = corpus(6, 0.5, 77, "c");
    let loss = LossConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let mut exact = true;
    for stage in [Stage::Slim, Stage::Dyn] {
        let before = validate(&model, &val, stage, &loss).unwrap();
        model.save(dir.path()).unwrap();
        let loaded = Demucs::load(dir.path()).unwrap();
        let after = validate(&loaded, &val, stage, &loss).unwrap();
        exact &= before == after && loaded.params.iter().zip(model.params.iter()).all(|(a, b)| a.2 == b.2);
    }
    rep.line(
        "8",
        "consistency",
        worst < 1e-6 && exact,
        format!("constant router vs static, max |diff| {worst:.1e} < 1e-6; checkpoint round-trip validation bit-exact: {exact}"),
    );
}

fn desk_config() -> ModelConfig {
    ModelConfig {
        depth: 3,
        hidden: 8,
        groups: 2,
        router: RouterConfig { kernel: 256, hidden: 16 },
        input_gain: DESK_INPUT_GAIN,
        ..ModelConfig::default()
    }
}

fn corpus(count: usize, seconds: f64, seed: u64, prefix: &str) -> Corpus {
    synth_corpus(&SynthSpec {
        count,
        seconds,
        mixture: MixtureSpec { seed, ..MixtureSpec::default() },
        prefix: prefix.into(),
    })
    .unwrap()
}

fn mean(rows: &[EvalRow], f: fn(&EvalRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

// Desk-scale schedule.
const DESK_TRAIN: usize = 200;
const DESK_VALIDATION: usize = 12;
const DESK_TEST: usize = 100;
const DESK_CROP_SECONDS: f64 = 0.25;
const DESK_INPUT_GAIN: f64 = 5.0;
const DESK_BATCH: usize = 4;
const STAGE1_EPOCHS: usize = 60;
const STAGE2_EPOCHS: usize = 15;
const STAGE1_LR: f64 = 3e-3;
const STAGE2_LR: f64 = 1e-3;
const PLATEAU: usize = 5;
const TARGET: f64 = 0.25;

fn criterion_desk(rep: &mut Report) {
    let started = Instant::now();
    let all = corpus(DESK_TRAIN, 2.0, 1, "train");
    let (train_set, val_set) = all.split_tail(DESK_VALIDATION);
    let test_set = corpus(DESK_TEST, 2.0, 2, "test");
    let mixture = MixtureSpec {
        segment_seconds: DESK_CROP_SECONDS,
        seed: 3,
        ..MixtureSpec::default()
    };
    let slim_cfg = TrainConfig {
        batch_size: DESK_BATCH,
        epochs: STAGE1_EPOCHS,
        lr: STAGE1_LR,
        plateau_epochs: PLATEAU,
        ..TrainConfig::default()
    };
    let loss = LossConfig { target: TARGET, ..LossConfig::default() };
    let mut progress = |r: &training::EpochRecord| {
        if r.epoch % 10 == 0 {
            eprintln!("  desk {} epoch {}: val {:.4}, si-sdr {:?}", r.stage.name(), r.epoch, r.val.loss, r.val.si_sdr);
        }
    };

    let mut model = Demucs::new(desk_config(), 4).unwrap();
    let setup = Setup { train: &slim_cfg, loss: &loss, mixture: &mixture, out: None };
    let s1 = training::stage1_train(&mut model, &train_set, &val_set, &setup, 5, &mut progress).unwrap();
    let t1 = started.elapsed().as_secs_f64();

    let static_rows: Vec<Vec<EvalRow>> =
        (0..4).map(|j| eval::evaluate(&model, &test_set, Mode::Static(j)).unwrap()).collect();
    let gains: Vec<f64> = static_rows.iter().map(|rows| mean(rows, |r| r.improvement)).collect();
    let noisy = mean(&static_rows[0], |r| r.si_sdr_in);
    let test_loss: Vec<f64> = (0..4)
        .map(|j| {
            let total: f64 = test_set
                .items
                .iter()
                .map(|u| spectral_loss_value(&u.clean, &model.forward_static_index(&u.noisy, j).unwrap(), &loss).unwrap())
                .sum();
            total / test_set.len() as f64
        })
        .collect();

    let dyn_cfg = TrainConfig {
        batch_size: DESK_BATCH,
        epochs: STAGE2_EPOCHS,
        lr: STAGE2_LR,
        ..TrainConfig::default()
    };
    let setup = Setup { train: &dyn_cfg, ..setup };
    let s2 = training::stage2_train(&mut model, &train_set, &val_set, &setup, 6, &mut progress).unwrap();
    let routed = eval::evaluate(&model, &test_set, Mode::Route).unwrap();
    let total = started.elapsed().as_secs_f64();

    let util = mean(&routed, |r| r.mean_utilization);
    let routed_sdr = mean(&routed, |r| r.si_sdr_out);
    let slim_sdr = mean(&static_rows[0], |r| r.si_sdr_out);
    let snr: Vec<f64> = routed.iter().map(|r| r.snr_db.unwrap()).collect();
    let per_utt: Vec<f64> = routed.iter().map(|r| r.mean_utilization).collect();
    let (rho, p) = spearman(&snr, &per_utt).unwrap();

    let budget = total <= 1800.0;
    println!(
        "       desk run: stage 1 {} epochs ({t1:.0} s), stage 2 {} epochs, total {total:.0} s; noisy test SI-SDR {noisy:.2} dB",
        s1.epoch, s2.epoch
    );
    let fmt = |g: &[f64]| g.iter().map(|v| format!("{v:+.2}")).collect::<Vec<_>>().join(", ");
    rep.outcome(
        "7a",
        "desk stage 1 improvement",
        gains[3] >= 3.0 && gains[0] >= 1.0 && budget,
        format!("SI-SDR gain {:+.2} dB at 1.0 (>= 3), {:+.2} dB at 0.125 (>= 1); within 30 min: {budget}", gains[3], gains[0]),
    );
    rep.outcome(
        "7b",
        "desk gain ordering",
        gains.windows(2).all(|w| w[1] >= w[0]),
        format!(
            "gains at 0.125, 0.25, 0.5, 1.0: {}; mean test spectral loss {}",
            fmt(&gains),
            test_loss.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    );
    rep.outcome(
        "7c",
        "desk routed utilization",
        (0.1..=0.5).contains(&util) && routed_sdr >= slim_sdr,
        format!(
            "target {TARGET}: mean utilization {util:.3} in [0.1, 0.5]; routed SI-SDR {routed_sdr:.2} dB vs static 0.125 {slim_sdr:.2} dB"
        ),
    );
    rep.outcome(
        "7d",
        "desk adaptivity",
        rho < 0.0 && p < 0.05,
        format!("Spearman(input SNR, utilization) over {} test utterances: rho {rho:+.3}, p {p:.2e}", routed.len()),
    );
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that excludes this suite skips it.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut rep = Report { failed: 0, shortfalls: 0 };
    rep.skip(
        "1",
        "full-scale results",
        "not reproducible here (licensed corpus, 400-epoch training, PESQ); covered by criteria 2-8",
    );
    criterion_gradients(&mut rep);
    criterion_slimming(&mut rep);
    criterion_routing(&mut rep);
    criterion_anchors(&mut rep);
    criterion_macs(&mut rep);
    if std::env::var("DYNSLIM_SKIP_DESK").is_ok_and(|v| v == "1") {
        rep.skip("7", "desk-scale end-to-end", "DYNSLIM_SKIP_DESK=1");
    } else {
        criterion_desk(&mut rep);
    }
    criterion_consistency(&mut rep);
    println!("acceptance: {} failed, {} desk-scale shortfalls", rep.failed, rep.shortfalls);
    if rep.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
