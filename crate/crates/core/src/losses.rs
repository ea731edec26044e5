//! Training objectives.
//!
//! The spectral loss compares power-law compressed spectrograms: a complex
//! term on `|S|^c e^{j∠S}` and a magnitude term on `|S|^c`, mixed by `α`.
//! Both terms are averaged over time-frequency bins. Spectrogram magnitudes
//! are clamped below at `1e-8` before the power law.
//!
//! The efficiency and balance terms act on the relative occurrence `Υ̃` of each
//! utilization factor. During training `Υ̃` is the mean of the
//! straight-through one-hot selections over every router frame of every
//! utterance in the batch: its value is the hard occurrence and its gradient
//! flows through the softmax relaxation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::UtilizationSet;
use crate::tensor::kernels::hann_window;
use crate::tensor::{Graph, Tensor, Var};

/// Floor on `|S|²` (that is, `|S| ≥ 1e-8`).
pub const POWER_FLOOR: f64 = 1e-16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Compression exponent `c`.
    pub compression: f64,
    /// Weight `α` of the complex term.
    pub alpha: f64,
    /// Efficiency weight `β`.
    pub beta: f64,
    /// Balance weight `γ`.
    pub gamma: f64,
    /// Target mean utilization.
    pub target: f64,
    pub window: usize,
    pub hop: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            compression: 0.3,
            alpha: 0.3,
            beta: 1.0,
            gamma: 0.1,
            target: 0.5,
            window: 512,
            hop: 256,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad("compression must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("beta and gamma must be non-negative");
        }
        if !(self.target > 0.0 && self.target <= 1.0) {
            return bad("target utilization must lie in (0, 1]");
        }
        if self.hop == 0 || self.window < self.hop || self.window % 2 != 0 {
            return bad("need an even window no shorter than a positive hop");
        }
        Ok(())
    }

    pub fn stft_window(&self) -> Vec<f64> {
        hann_window(self.window)
    }

    /// `(left, right)` zero padding applied before the STFT of a `t`-sample
    /// signal: `window − hop` on the left, then enough on the right to fill
    /// the last frame.
    pub fn stft_padding(&self, t: usize) -> (usize, usize) {
        let left = self.window - self.hop;
        let len = left + t;
        let frames = if len <= self.window {
            1
        } else {
            1 + (len - self.window).div_ceil(self.hop)
        };
        let total = self.window + (frames - 1) * self.hop;
        (left, total - len)
    }
}

/// Compressed spectrogram parts of a `[1, T]` signal: `(complex re, complex
/// im, |S|^c)`, each `[frames, bins]`.
fn compressed(g: &mut Graph, x: Var, cfg: &LossConfig, window: &[f64]) -> Result<(Var, Var, Var)> {
    let (left, right) = cfg.stft_padding(g.shape(x)[1]);
    let xp = g.pad_time(x, left, right)?;
    let spec = g.stft(xp, window, cfg.hop)?;
    let re = g.index(spec, 0)?;
    let im = g.index(spec, 1)?;
    let re2 = g.square(re);
    let im2 = g.square(im);
    let power = g.add(re2, im2)?;
    let mag_c = g.pow_clamped(power, cfg.compression / 2.0, POWER_FLOOR);
    let scale = g.pow_clamped(power, (cfg.compression - 1.0) / 2.0, POWER_FLOOR);
    let cre = g.mul(re, scale)?;
    let cim = g.mul(im, scale)?;
    Ok((cre, cim, mag_c))
}

/// Compressed spectral loss between target `s` and estimate `ŝ`, both `[1, T]`.
pub fn spectral_loss(g: &mut Graph, s: Var, s_hat: Var, cfg: &LossConfig) -> Result<Var> {
    if g.shape(s) != g.shape(s_hat) {
        return Err(Error::ShapeMismatch {
            op: "spectral_loss",
            axis: "time",
            expected: *g.shape(s).last().unwrap_or(&0),
            got: *g.shape(s_hat).last().unwrap_or(&0),
        });
    }
    let window = cfg.stft_window();
    let (sr, si, sm) = compressed(g, s, cfg, &window)?;
    let (hr, hi, hm) = compressed(g, s_hat, cfg, &window)?;
    let dr = g.sub(sr, hr)?;
    let di = g.sub(si, hi)?;
    let dr2 = g.square(dr);
    let di2 = g.square(di);
    let cplx = g.add(dr2, di2)?;
    let cplx = g.mean(cplx);
    let dm = g.sub(sm, hm)?;
    let mag = g.square(dm);
    let mag = g.mean(mag);
    let a = g.scale(cplx, cfg.alpha);
    let b = g.scale(mag, 1.0 - cfg.alpha);
    g.add(a, b)
}

/// [`spectral_loss`] evaluated on plain signals.
pub fn spectral_loss_value(s: &[f64], s_hat: &[f64], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::inference();
    let a = g.constant(Tensor::signal(s.to_vec()));
    let b = g.constant(Tensor::signal(s_hat.to_vec()));
    let l = spectral_loss(&mut g, a, b, cfg)?;
    Ok(g.value(l).item())
}

/// Sum of spectral losses of every per-factor output against the target.
pub fn slim_loss(g: &mut Graph, s: Var, outputs: &[Var], cfg: &LossConfig, choices: usize) -> Result<Var> {
    if outputs.len() != choices || outputs.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "slim_loss",
            axis: "utilization",
            expected: choices,
            got: outputs.len(),
        });
    }
    let mut total = spectral_loss(g, s, outputs[0], cfg)?;
    for &o in &outputs[1..] {
        let l = spectral_loss(g, s, o, cfg)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

fn check_distribution(op: &'static str, occ: &[f64], j: usize) -> Result<()> {
    if occ.len() != j {
        return Err(Error::ShapeMismatch {
            op,
            axis: "utilization",
            expected: j,
            got: occ.len(),
        });
    }
    let s: f64 = occ.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(op, format!("occurrences sum to {s}, not 1")));
    }
    Ok(())
}

/// `(Σ_j Υ̃_j υ_j − υ_trgt)²` on a graph node `occ: [J]`.
pub fn eff_loss(g: &mut Graph, occ: Var, ufs: &UtilizationSet, target: f64) -> Result<Var> {
    check_distribution("eff_loss", g.value(occ).data(), ufs.len())?;
    let w = g.mul_const(occ, &Tensor::vector(ufs.values().to_vec()))?;
    let mean = g.sum(w);
    let d = g.add_scalar(mean, -target);
    Ok(g.square(d))
}

/// `(J Σ_j Υ̃_j² − 1) / (J − 1)` on a graph node `occ: [J]`.
pub fn bal_loss(g: &mut Graph, occ: Var, choices: usize) -> Result<Var> {
    check_distribution("bal_loss", g.value(occ).data(), choices)?;
    if choices < 2 {
        return Err(Error::invalid("bal_loss", "needs at least two choices"));
    }
    let sq = g.square(occ);
    let s = g.sum(sq);
    let s = g.scale(s, choices as f64);
    let s = g.add_scalar(s, -1.0);
    Ok(g.scale(s, 1.0 / (choices as f64 - 1.0)))
}

pub fn eff_loss_value(occ: &[f64], ufs: &UtilizationSet, target: f64) -> Result<f64> {
    check_distribution("eff_loss", occ, ufs.len())?;
    let m: f64 = occ.iter().zip(ufs.values()).map(|(o, u)| o * u).sum();
    Ok((m - target).powi(2))
}

pub fn bal_loss_value(occ: &[f64]) -> Result<f64> {
    let j = occ.len();
    check_distribution("bal_loss", occ, j)?;
    if j < 2 {
        return Err(Error::invalid("bal_loss", "needs at least two choices"));
    }
    Ok((j as f64 * occ.iter().map(|o| o * o).sum::<f64>() - 1.0) / (j as f64 - 1.0))
}

/// The terms of the end-to-end objective, kept as separate nodes for logging.
#[derive(Clone, Copy, Debug)]
pub struct DynSlimTerms {
    pub total: Var,
    pub se: Var,
    pub eff: Var,
    pub bal: Var,
}

/// `L_SE + β L_Eff + γ L_Bal` given an already reduced `se` term.
pub fn dynslim_loss(
    g: &mut Graph,
    se: Var,
    occ: Var,
    ufs: &UtilizationSet,
    cfg: &LossConfig,
) -> Result<DynSlimTerms> {
    let eff = eff_loss(g, occ, ufs, cfg.target)?;
    let bal = bal_loss(g, occ, ufs.len())?;
    let be = g.scale(eff, cfg.beta);
    let gb = g.scale(bal, cfg.gamma);
    let t = g.add(se, be)?;
    let total = g.add(t, gb)?;
    Ok(DynSlimTerms { total, se, eff, bal })
}

/// Mean of one-hot selections `[J, T*]` over all frames of all utterances.
pub fn occurrence(g: &mut Graph, selections: &[Var]) -> Result<Var> {
    let first = *selections
        .first()
        .ok_or_else(|| Error::invalid("occurrence", "no selections"))?;
    let mut frames = g.shape(first)[1];
    let mut total = g.sum_last(first)?;
    for &s in &selections[1..] {
        frames += g.shape(s)[1];
        let c = g.sum_last(s)?;
        total = g.add(total, c)?;
    }
    Ok(g.scale(total, 1.0 / frames as f64))
}

/// Sample-wise `Σ_j ŝ_j ⊙ gate_j` for outputs `[1, T]` and a one-hot
/// gating `[J, T]`.
pub fn combine_outputs(g: &mut Graph, outputs: &[Var], gating: Var) -> Result<Var> {
    let (j, t) = (g.shape(gating)[0], g.shape(gating)[1]);
    if outputs.len() != j {
        return Err(Error::ShapeMismatch {
            op: "combine_outputs",
            axis: "utilization",
            expected: j,
            got: outputs.len(),
        });
    }
    let gd = g.value(gating).data();
    for col in 0..t {
        let mut ones = 0;
        for k in 0..j {
            let v = gd[k * t + col];
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                ones = usize::MAX;
                break;
            }
        }
        if ones != 1 {
            return Err(Error::invalid("combine_outputs", format!("gating at sample {col} is not one-hot")));
        }
    }
    let mut acc: Option<Var> = None;
    for (k, &o) in outputs.iter().enumerate() {
        let row = g.index(gating, k)?;
        let row = g.reshape(row, &[1, t])?;
        let term = g.mul(o, row)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one output"))
}
