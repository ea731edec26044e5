//! Quality and compute metrics.
//!
//! # MAC conventions
//!
//! Only multiply-accumulates are counted; activations, GLU gates and
//! additions are free. Counts are reported per input sample at the
//! original rate.
//!
//! | layer | MACs |
//! |---|---|
//! | conv | `C_out·C_in·K·T_out` over active channels |
//! | transposed conv | `C_out·C_in·K·T_in·S` (dense equivalent of the zero-stuffed input) |
//! | grouped GRU (`M` groups of `G`) | `6·G²·M + 3·F` per frame |
//! | diagonal GRU | `9·F` per frame |
//! | resampling by `U` | `2·Z·U` per input sample in each direction (`Z` zero crossings per side) |

use std::io::Write;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{slim_count, UtilizationSet};
use crate::router::{csv_err, RoutingTrace};
use crate::tensor::kernels::RESAMPLE_ZEROS;

/// Magnitude cap of reported SI-SDR values, in dB.
pub const SI_SDR_CAP: f64 = 100.0;

/// Scale-invariant SDR of `estimate` against `target`, in dB, capped at
/// `±SI_SDR_CAP`.
pub fn si_sdr(target: &[f64], estimate: &[f64]) -> Result<f64> {
    if target.len() != estimate.len() {
        return Err(Error::ShapeMismatch {
            op: "si_sdr",
            axis: "time",
            expected: target.len(),
            got: estimate.len(),
        });
    }
    let energy: f64 = target.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::invalid("si_sdr", "target has zero energy"));
    }
    let dot: f64 = target.iter().zip(estimate).map(|(a, b)| a * b).sum();
    let alpha = dot / energy;
    let (mut sig, mut err) = (0.0, 0.0);
    for (s, e) in target.iter().zip(estimate) {
        let p = alpha * s;
        sig += p * p;
        err += (e - p) * (e - p);
    }
    let db = if sig == 0.0 {
        -SI_SDR_CAP
    } else if err == 0.0 {
        SI_SDR_CAP
    } else {
        10.0 * (sig / err).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

pub fn conv_macs(c_out: usize, c_in: usize, kernel: usize, t_out: usize) -> u64 {
    (c_out * c_in * kernel * t_out) as u64
}

pub fn conv_transpose_macs(c_out: usize, c_in: usize, kernel: usize, t_in: usize, stride: usize) -> u64 {
    (c_out * c_in * kernel * t_in * stride) as u64
}

pub fn grouped_gru_macs(features: usize, groups: usize, frames: usize) -> u64 {
    let g = features / groups;
    ((6 * g * g * groups + 3 * features) * frames) as u64
}

pub fn diagonal_gru_macs(features: usize, frames: usize) -> u64 {
    (9 * features * frames) as u64
}

pub fn resample_macs(factor: usize, input_len: usize) -> u64 {
    if factor == 1 {
        return 0;
    }
    (2 * RESAMPLE_ZEROS * factor * input_len) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub slimmable: bool,
    /// MACs per input sample at each factor of the utilization set.
    pub per_uf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacReport {
    pub ufs: Vec<f64>,
    pub layers: Vec<LayerCost>,
    /// Router MACs per input sample.
    pub router: f64,
}

/// MACs per input sample of every layer at every factor.
pub fn count_macs(cfg: &ModelConfig) -> Result<MacReport> {
    cfg.validate()?;
    let t = cfg.length_quantum() * 4;
    let per = |m: u64| m as f64 / t as f64;
    let ufs = cfg.uset.values().to_vec();
    let (k, s) = (cfg.kernel, cfg.stride);
    let mut layers = Vec::new();
    let fixed = |name: String, m: u64| LayerCost {
        name,
        slimmable: false,
        per_uf: vec![per(m); ufs.len()],
    };
    layers.push(fixed("upsample".into(), resample_macs(cfg.resample, t)));
    let mut t_in = cfg.resample * t;
    for i in 1..=cfg.depth {
        let (c_in, h) = (cfg.block_input(i), cfg.block_hidden(i));
        let frames = t_in / s;
        let conv: Vec<f64> = ufs.iter().map(|&u| per(conv_macs(slim_count(h, u), c_in, k, frames))).collect();
        let pw: Vec<f64> = ufs.iter().map(|&u| per(conv_macs(2 * h, slim_count(h, u), 1, frames))).collect();
        layers.push(LayerCost {
            name: format!("encoder.{i}.conv"),
            slimmable: true,
            per_uf: conv,
        });
        layers.push(LayerCost {
            name: format!("encoder.{i}.pw"),
            slimmable: true,
            per_uf: pw,
        });
        t_in = frames;
    }
    layers.push(fixed(
        "bottleneck".into(),
        grouped_gru_macs(cfg.bottleneck_features(), cfg.groups, t_in),
    ));
    let mut dec = Vec::new();
    for i in (1..=cfg.depth).rev() {
        let (c_out, h) = (cfg.block_input(i), cfg.block_hidden(i));
        let frames = cfg.block_frames(i, t);
        let pw: Vec<f64> = ufs.iter().map(|&u| per(conv_macs(2 * slim_count(h, u), h, 1, frames))).collect();
        let tc: Vec<f64> = ufs
            .iter()
            .map(|&u| per(conv_transpose_macs(c_out, slim_count(h, u), k, frames, s)))
            .collect();
        dec.push(LayerCost {
            name: format!("decoder.{i}.pw"),
            slimmable: true,
            per_uf: pw,
        });
        dec.push(LayerCost {
            name: format!("decoder.{i}.tconv"),
            slimmable: true,
            per_uf: tc,
        });
    }
    layers.extend(dec);
    layers.push(fixed("downsample".into(), resample_macs(cfg.resample, t)));

    let rk = cfg.router.kernel;
    let rh = cfg.router.hidden;
    let t_star = t / rk;
    let router = per(conv_macs(rh, 1, rk, t_star) + diagonal_gru_macs(rh, t_star) + conv_macs(ufs.len(), rh, 1, t_star));
    Ok(MacReport { ufs, layers, router })
}

impl MacReport {
    /// Backbone MACs per input sample at factor index `j`.
    pub fn total(&self, j: usize) -> f64 {
        self.layers.iter().map(|l| l.per_uf[j]).sum()
    }

    /// Slimmable part of [`MacReport::total`].
    pub fn slimmable_total(&self, j: usize) -> f64 {
        self.layers.iter().filter(|l| l.slimmable).map(|l| l.per_uf[j]).sum()
    }

    /// Router cost relative to the full-width backbone.
    pub fn router_overhead(&self) -> f64 {
        self.router / self.total(self.ufs.len() - 1)
    }

    /// Mean backbone MACs per sample when each frame runs at its decision.
    pub fn mean_for_decisions(&self, decisions: &[usize]) -> f64 {
        if decisions.is_empty() {
            return 0.0;
        }
        decisions.iter().map(|&d| self.total(d)).sum::<f64>() / decisions.len() as f64
    }

    /// Backbone plus router MACs per sample for a routed utterance.
    pub fn mean_for_trace(&self, trace: &RoutingTrace) -> f64 {
        self.mean_for_decisions(&trace.decisions) + self.router
    }

    /// Aligned text table with one column per factor.
    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(10);
        let mut out = format!("{:<width$}", "layer");
        for u in &self.ufs {
            out.push_str(&format!(" {:>14}", format!("uf={u}")));
        }
        out.push('\n');
        for l in &self.layers {
            out.push_str(&format!("{:<width$}", l.name));
            for v in &l.per_uf {
                out.push_str(&format!(" {v:>14.2}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<width$}", "total"));
        for j in 0..self.ufs.len() {
            out.push_str(&format!(" {:>14.2}", self.total(j)));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<width$} {:>14.2}  ({:.4}% of full width)\n",
            "router",
            self.router,
            100.0 * self.router_overhead()
        ));
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["layer".to_string(), "slimmable".to_string()];
        header.extend(self.ufs.iter().map(|u| format!("macs_uf_{u}")));
        w.write_record(&header).map_err(csv_err)?;
        let mut row = |name: &str, slim: &str, vals: Vec<f64>| -> Result<()> {
            let mut r = vec![name.to_string(), slim.to_string()];
            r.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(&r).map_err(csv_err)
        };
        for l in &self.layers {
            row(&l.name, &l.slimmable.to_string(), l.per_uf.clone())?;
        }
        row("router", "false", vec![self.router; self.ufs.len()])?;
        let totals = (0..self.ufs.len()).map(|j| self.total(j)).collect();
        row("total", "", totals)?;
        w.flush()?;
        Ok(())
    }
}

/// Relative occurrence of each factor over every frame of `traces` and the
/// resulting mean utilization.
pub fn utilization_stats(traces: &[RoutingTrace], ufs: &UtilizationSet) -> Result<(Vec<f64>, f64)> {
    let mut counts = vec![0usize; ufs.len()];
    let mut frames = 0;
    for t in traces {
        for &d in &t.decisions {
            if d >= ufs.len() {
                return Err(Error::invalid("utilization_stats", format!("decision {d} out of range")));
            }
            counts[d] += 1;
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::invalid("utilization_stats", "no routed frames"));
    }
    let occ: Vec<f64> = counts.iter().map(|&c| c as f64 / frames as f64).collect();
    let mean = occ.iter().zip(ufs.values()).map(|(o, u)| o * u).sum();
    Ok((occ, mean))
}

/// `true` for points not dominated by any other. A point dominates another
/// if its cost is no higher and its quality no lower, with one strict.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(c, q)| {
            !points
                .iter()
                .any(|&(c2, q2)| c2 <= c && q2 >= q && (c2 < c || q2 > q))
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation and its two-sided p-value from the
/// Student-t approximation with `n − 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::invalid("spearman", "need at least three paired values"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let rho = sxy / (sxx * syy).sqrt();
    if rho.abs() >= 1.0 {
        return Ok((rho.signum(), 0.0));
    }
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).map_err(|e| Error::invalid("spearman", e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((rho, p))
}
