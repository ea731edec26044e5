//! Routing subnet: per-frame scores over utilization factors and their
//! conversion into hard decisions.
//!
//! The scores are computed on the input at its original rate by
//! `conv(1 → hidden, kernel = stride)` → ReLU → diagonal GRU →
//! pointwise conv to `J` channels. A decision for router frame `k` depends on
//! samples up to the end of that frame, so the router looks ahead by at most
//! `kernel − 1` samples.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, DiagonalGru, SlimAxis, UtilizationSet};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Lower clamp of the uniform draw behind each Gumbel sample.
pub const GUMBEL_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    /// Kernel size and stride of the first convolution.
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            kernel: 256,
            hidden: 64,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.hidden == 0 {
            return Err(Error::Config("router kernel and hidden size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Router {
    pub config: RouterConfig,
    pub conv: Conv,
    pub gru: DiagonalGru,
    pub head: Conv,
    pub choices: usize,
}

/// Whether Gumbel noise perturbs the scores before the argmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Train,
    Infer,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &RouterConfig, choices: usize, rng: &mut R) -> Self {
        let k = config.kernel;
        let conv = Conv::new(store, "router.conv", 1, config.hidden, k, k, false, SlimAxis::Fixed, rng);
        let gru = DiagonalGru::new(store, "router.gru", config.hidden, rng);
        let head = Conv::new(store, "router.head", config.hidden, choices, 1, 1, false, SlimAxis::Fixed, rng);
        Router {
            config: config.clone(),
            conv,
            gru,
            head,
            choices,
        }
    }

    /// Number of router frames for a padded length.
    pub fn frames(&self, t_pad: usize) -> Result<usize> {
        if t_pad == 0 || t_pad % self.config.kernel != 0 {
            return Err(Error::invalid(
                "router_scores",
                format!("length {t_pad} is not a multiple of the router kernel {}", self.config.kernel),
            ));
        }
        Ok(t_pad / self.config.kernel)
    }

    /// Scores `r: [J, T*]` for a padded signal `x: [1, T_pad]`.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.frames(g.shape(x)[1])?;
        let h = self.conv.forward(g, store, x, None, None)?;
        let h = g.relu(h);
        let (h, _) = self.gru.forward(g, store, h, None)?;
        self.head.forward(g, store, h, None, None)
    }
}

/// `−ln(−ln u)` with `u` clamped to `[ε, 1 − ε]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// i.i.d. Gumbel samples, one per entry.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect();
    Tensor::new(shape, data).expect("numel matches")
}

/// Noise stream for batch `index` of a run seeded with `seed`.
pub fn noise_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Hard one-hot selection with a straight-through softmax gradient.
///
/// In `Infer` mode no noise is used, so the selection is the plain argmax of
/// `r` with ties going to the lowest index.
pub fn st_select<R: Rng + ?Sized>(g: &mut Graph, r: Var, mode: SelectMode, rng: &mut R) -> Result<Var> {
    match mode {
        SelectMode::Infer => g.straight_through(r, None),
        SelectMode::Train => {
            let noise = gumbel_noise(g.shape(r), rng);
            g.straight_through(r, Some(&noise))
        }
    }
}

/// Column-wise argmax with lowest-index tie-break.
pub fn argmax_columns(scores: &Tensor) -> Vec<usize> {
    let (j, t) = (scores.dim(0), scores.dim(1));
    let d = scores.data();
    (0..t)
        .map(|col| {
            let mut best = 0;
            for k in 1..j {
                if d[k * t + col] > d[best * t + col] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Nearest-neighbour map from `to` output frames onto `from` input frames.
pub fn nearest_map(from: usize, to: usize) -> Vec<usize> {
    (0..to).map(|b| ((b * from) / to.max(1)).min(from.saturating_sub(1))).collect()
}

/// Map from each of `samples` samples to a router frame: nearest-neighbour
/// from `t_star` router frames to `bottleneck` frames, then zero-order hold.
pub fn sample_to_router_frame(t_star: usize, bottleneck: usize, samples: usize) -> Vec<usize> {
    let nn = nearest_map(t_star, bottleneck);
    (0..samples)
        .map(|t| nn[((t * bottleneck) / samples.max(1)).min(bottleneck - 1)])
        .collect()
}

/// Per-sample one-hot gating `[J, T]` from router decisions.
pub fn upsample_decisions(decisions: &[usize], choices: usize, bottleneck: usize, samples: usize) -> Result<Tensor> {
    let t_star = decisions.len();
    if t_star == 0 || t_star > bottleneck || bottleneck > samples {
        return Err(Error::invalid(
            "upsample_decisions",
            format!("need 0 < T* ({t_star}) ≤ bottleneck ({bottleneck}) ≤ T ({samples})"),
        ));
    }
    if let Some(&bad) = decisions.iter().find(|&&d| d >= choices) {
        return Err(Error::invalid("upsample_decisions", format!("decision {bad} out of {choices}")));
    }
    let map = sample_to_router_frame(t_star, bottleneck, samples);
    let mut out = Tensor::zeros(&[choices, samples]);
    for (t, &k) in map.iter().enumerate() {
        out.data_mut()[decisions[k] * samples + t] = 1.0;
    }
    Ok(out)
}

/// Decisions taken over one utterance together with their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    /// `[J, T*]`.
    pub scores: Tensor,
    pub decisions: Vec<usize>,
    /// Relative occurrence of each factor.
    pub occurrence: Vec<f64>,
    pub mean_utilization: f64,
}

impl RoutingTrace {
    pub fn new(scores: Tensor, decisions: Vec<usize>, ufs: &UtilizationSet) -> Self {
        let occurrence = occurrence(&decisions, ufs.len());
        let mean_utilization = occurrence.iter().zip(ufs.values()).map(|(o, u)| o * u).sum();
        RoutingTrace {
            scores,
            decisions,
            occurrence,
            mean_utilization,
        }
    }

    pub fn frames(&self) -> usize {
        self.decisions.len()
    }

    /// Writes `frame, score_1..score_J, decision, uf_value` rows.
    pub fn write_csv<W: Write>(&self, out: W, ufs: &UtilizationSet) -> Result<()> {
        let j = self.scores.dim(0);
        let t = self.frames();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["frame".to_string()];
        header.extend((1..=j).map(|k| format!("score_{k}")));
        header.push("decision".into());
        header.push("uf_value".into());
        w.write_record(&header).map_err(csv_err)?;
        for (f, &d) in self.decisions.iter().enumerate() {
            let mut row = vec![f.to_string()];
            row.extend((0..j).map(|k| format!("{}", self.scores.data()[k * t + f])));
            row.push(d.to_string());
            row.push(format!("{}", ufs.get(d)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Relative frequency of each of `choices` indices.
pub fn occurrence(decisions: &[usize], choices: usize) -> Vec<f64> {
    let mut counts = vec![0.0; choices];
    for &d in decisions {
        counts[d] += 1.0;
    }
    let n = decisions.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_fixed_points() {
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
        assert!((gumbel_from_uniform((-std::f64::consts::E).exp()) + 1.0).abs() < 1e-12);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn argmax_ties_go_low() {
        let s = Tensor::new(&[4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_columns(&s), vec![0]);
    }

    #[test]
    fn decision_upsampling() {
        let gate = upsample_decisions(&[1, 3], 4, 4, 8).unwrap();
        let rows: Vec<usize> = (0..8)
            .map(|t| (0..4).find(|&k| gate.data()[k * 8 + t] == 1.0).unwrap())
            .collect();
        assert_eq!(rows, vec![1, 1, 1, 1, 3, 3, 3, 3]);
        assert_eq!(nearest_map(2, 4), vec![0, 0, 1, 1]);
        assert_eq!(nearest_map(4, 4), vec![0, 1, 2, 3]);
    }
}
