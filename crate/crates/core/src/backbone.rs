//! The slimmable DEMUCS backbone.
//!
//! A padded input `[1, T_pad]` is upsampled by `U`, passed through `L`
//! encoder blocks, a grouped-GRU bottleneck and `L` decoder blocks with
//! additive skips, then downsampled by `U` and trimmed back to `T`.
//!
//! Encoder and decoder convolutions are causal, so the only lookahead comes
//! from the resampling filters and from the frame grid of the strided
//! convolutions; see [`ModelConfig::lookahead`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{DecoderBlock, EncoderBlock, GroupedGru, UtilizationSet, WidthSchedule};
use crate::router::{self, Router, RouterConfig, RoutingTrace};
use crate::tensor::kernels::RESAMPLE_ZEROS;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of encoder (and decoder) blocks, `L`.
    pub depth: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Resampling factor `U`.
    pub resample: usize,
    /// Hidden channels of the first block, `H`.
    pub hidden: usize,
    /// Bottleneck GRU groups, `M`.
    pub groups: usize,
    pub uset: UtilizationSet,
    pub router: RouterConfig,
    /// Fixed gain applied to the input of the backbone and router; the
    /// backbone output is divided by it again.
    pub input_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 5,
            kernel: 8,
            stride: 4,
            resample: 4,
            hidden: 32,
            groups: 4,
            uset: UtilizationSet::default(),
            router: RouterConfig::default(),
            input_gain: 1.0,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.hidden == 0 || self.groups == 0 {
            return e("depth, hidden and groups must be positive".into());
        }
        if self.stride == 0 || self.kernel < self.stride {
            return e(format!("need 0 < stride ≤ kernel, got S={} K={}", self.stride, self.kernel));
        }
        if !(self.input_gain.is_finite() && self.input_gain > 0.0) {
            return e(format!("input gain must be positive, got {}", self.input_gain));
        }
        if self.resample == 0 {
            return e("resample factor must be at least 1".into());
        }
        if self.depth > 12 || self.stride.checked_pow(self.depth as u32).is_none() {
            return e("depth too large".into());
        }
        if self.bottleneck_features() % self.groups != 0 {
            return e(format!(
                "bottleneck width {} is not divisible by {} groups",
                self.bottleneck_features(),
                self.groups
            ));
        }
        self.router.validate()?;
        for i in 1..=self.depth {
            self.uset.check_channels(self.block_hidden(i))?;
        }
        Ok(())
    }

    /// Hidden channels of block `i` (1-based): `2^{i-1} H`.
    pub fn block_hidden(&self, i: usize) -> usize {
        self.hidden << (i - 1)
    }

    /// Input channels of encoder `i` (= output channels of decoder `i`).
    pub fn block_input(&self, i: usize) -> usize {
        if i == 1 {
            1
        } else {
            self.block_hidden(i - 1)
        }
    }

    pub fn bottleneck_features(&self) -> usize {
        self.block_hidden(self.depth)
    }

    /// `S^L`.
    pub fn total_stride(&self) -> usize {
        self.stride.pow(self.depth as u32)
    }

    /// Granularity of valid input lengths.
    pub fn length_quantum(&self) -> usize {
        let s = self.total_stride();
        lcm(s / gcd(self.resample, s), self.router.kernel)
    }

    /// Smallest length `≥ max(t, 1)` that the backbone and router accept.
    pub fn valid_length(&self, t: usize) -> usize {
        let q = self.length_quantum();
        t.max(1).div_ceil(q) * q
    }

    /// Frames of block `i` output for a padded input length.
    pub fn block_frames(&self, i: usize, t_pad: usize) -> usize {
        self.resample * t_pad / self.stride.pow(i as u32)
    }

    pub fn bottleneck_frames(&self, t_pad: usize) -> usize {
        self.block_frames(self.depth, t_pad)
    }

    /// Upper bound, in input samples, on how far ahead of sample `t` the
    /// static backbone looks: the up- and down-sampling filters each reach
    /// `RESAMPLE_ZEROS` samples, and a bottleneck frame spans `S^L / U`
    /// input samples. Dynamic routing adds up to `router.kernel − 1`.
    pub fn lookahead(&self) -> usize {
        2 * RESAMPLE_ZEROS + self.total_stride().div_ceil(self.resample)
    }
}

/// Per-block width schedules for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Widths {
    /// Entry `i − 1` belongs to encoder `i` and decoder `i`.
    pub blocks: Vec<WidthSchedule>,
}

impl Widths {
    /// Every block at factor index `j`.
    pub fn constant(cfg: &ModelConfig, t_pad: usize, j: usize) -> Self {
        Widths {
            blocks: (1..=cfg.depth)
                .map(|i| WidthSchedule::constant(cfg.block_frames(i, t_pad), j))
                .collect(),
        }
    }

    /// Expands one factor index per bottleneck frame to every block by
    /// zero-order hold.
    pub fn from_bottleneck(cfg: &ModelConfig, t_pad: usize, per_frame: &[usize]) -> Result<Self> {
        let n = cfg.bottleneck_frames(t_pad);
        if per_frame.len() != n {
            return Err(Error::ShapeMismatch {
                op: "widths",
                axis: "bottleneck frames",
                expected: n,
                got: per_frame.len(),
            });
        }
        let blocks = (1..=cfg.depth)
            .map(|i| {
                let hold = cfg.stride.pow((cfg.depth - i) as u32);
                let frames = cfg.block_frames(i, t_pad);
                WidthSchedule::per_frame((0..frames).map(|f| per_frame[f / hold]).collect())
            })
            .collect();
        Ok(Widths { blocks })
    }
}

#[derive(Clone, Debug)]
pub struct Demucs {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoders: Vec<EncoderBlock>,
    /// Entry `i − 1` is decoder `i`; they run in reverse order.
    pub decoders: Vec<DecoderBlock>,
    pub bottleneck: GroupedGru,
    pub router: Option<Router>,
}

fn finite(g: &Graph, v: Var, layer: impl FnOnce() -> String) -> Result<Var> {
    if g.value(v).all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteActivation { layer: layer() })
    }
}

impl Demucs {
    /// Randomly initialised backbone without a router.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (k, s) = (config.kernel, config.stride);
        let encoders = (1..=config.depth)
            .map(|i| {
                let name = format!("encoder.{i}");
                EncoderBlock::new(&mut params, &name, config.block_input(i), config.block_hidden(i), k, s, &mut rng)
            })
            .collect();
        let bottleneck = GroupedGru::new(
            &mut params,
            "bottleneck",
            config.bottleneck_features(),
            config.groups,
            &mut rng,
        )?;
        let decoders = (1..=config.depth)
            .map(|i| {
                let name = format!("decoder.{i}");
                let h = config.block_hidden(i);
                DecoderBlock::new(&mut params, &name, h, config.block_input(i), k, s, i != 1, &mut rng)
            })
            .collect();
        Ok(Demucs {
            config,
            params,
            encoders,
            decoders,
            bottleneck,
            router: None,
        })
    }

    /// Adds a freshly initialised router (replacing any existing one).
    pub fn implant_router(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if self.router.is_some() {
            self.strip_router();
        }
        self.router = Some(Router::new(&mut self.params, &self.config.router, self.config.uset.len(), &mut rng));
    }

    fn strip_router(&mut self) {
        let mut kept = ParamStore::new();
        for (_, name, t) in self.params.iter() {
            if !name.starts_with("router.") {
                kept.add(name, t.clone());
            }
        }
        self.params = kept;
        self.router = None;
    }

    pub fn router(&self) -> Result<&Router> {
        self.router
            .as_ref()
            .ok_or_else(|| Error::invalid("forward_dynamic", "model has no router"))
    }

    pub fn valid_length(&self, t: usize) -> usize {
        self.config.valid_length(t)
    }

    /// Zero-pads `x` on the right to the valid length, as a `[1, T_pad]` leaf.
    pub fn pad_input(&self, g: &mut Graph, x: &[f64]) -> Var {
        let mut data = x.to_vec();
        data.resize(self.valid_length(x.len()), 0.0);
        g.constant(Tensor::signal(data))
    }

    /// Router scores `[J, T*]` for a padded signal, after the input gain.
    pub fn route(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let router = self.router()?;
        let xs = g.scale(x, self.config.input_gain);
        router.scores(g, &self.params, xs)
    }

    /// Backbone on a padded signal `[1, T_pad]`, returning `[1, T_pad]`.
    pub fn build(&self, g: &mut Graph, x: Var, widths: &Widths) -> Result<Var> {
        let cfg = &self.config;
        let t_pad = g.shape(x)[1];
        if t_pad == 0 || t_pad % cfg.length_quantum() != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("length {t_pad} is not a multiple of {}", cfg.length_quantum()),
            ));
        }
        if widths.blocks.len() != cfg.depth {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                axis: "width schedules",
                expected: cfg.depth,
                got: widths.blocks.len(),
            });
        }
        let xs = g.scale(x, cfg.input_gain);
        let mut h = g.upsample(xs, cfg.resample)?;
        h = finite(g, h, || "upsample".into())?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for (i, enc) in self.encoders.iter().enumerate() {
            h = enc.forward(g, &self.params, h, &widths.blocks[i], &cfg.uset)?;
            h = finite(g, h, || format!("encoder.{}", i + 1))?;
            skips.push(h);
        }
        let (y, _) = self.bottleneck.forward(g, &self.params, h, None)?;
        h = finite(g, y, || "bottleneck".into())?;
        for (i, dec) in self.decoders.iter().enumerate().rev() {
            h = dec.forward(g, &self.params, h, skips[i], &widths.blocks[i], &cfg.uset)?;
            h = finite(g, h, || format!("decoder.{}", i + 1))?;
        }
        let y = g.downsample(h, cfg.resample)?;
        let y = g.scale(y, 1.0 / cfg.input_gain);
        finite(g, y, || "downsample".into())
    }

    /// Backbone output for `x` with every block at factor index `j`,
    /// trimmed to `[1, T]`.
    pub fn build_static(&self, g: &mut Graph, x: &[f64], j: usize) -> Result<Var> {
        let xp = self.pad_input(g, x);
        let widths = Widths::constant(&self.config, g.shape(xp)[1], j);
        let y = self.build(g, xp, &widths)?;
        g.slice_time(y, 0, x.len())
    }

    pub fn forward_static(&self, x: &[f64], uf: f64) -> Result<Vec<f64>> {
        let j = self.config.uset.index_of(uf)?;
        self.forward_static_index(x, j)
    }

    pub fn forward_static_index(&self, x: &[f64], j: usize) -> Result<Vec<f64>> {
        check_signal(x)?;
        let mut g = Graph::inference();
        let y = self.build_static(&mut g, x, j)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Router scores `[J, T*]` for `x` (padded internally), without noise.
    pub fn router_scores(&self, x: &[f64]) -> Result<Tensor> {
        check_signal(x)?;
        let mut g = Graph::inference();
        let xp = self.pad_input(&mut g, x);
        let r = self.route(&mut g, xp)?;
        Ok(g.value(r).clone())
    }

    /// Switched-width pass: each bottleneck frame, and every encoder/decoder
    /// frame held onto it, runs at the factor chosen for its router frame.
    pub fn forward_with_decisions(&self, x: &[f64], decisions: &[usize]) -> Result<Vec<f64>> {
        check_signal(x)?;
        let t_pad = self.valid_length(x.len());
        let widths = self.widths_for_decisions(t_pad, decisions)?;
        let mut g = Graph::inference();
        let xp = self.pad_input(&mut g, x);
        let y = self.build(&mut g, xp, &widths)?;
        let y = g.slice_time(y, 0, x.len())?;
        Ok(g.value(y).data().to_vec())
    }

    /// Width schedules implied by one decision per router frame.
    pub fn widths_for_decisions(&self, t_pad: usize, decisions: &[usize]) -> Result<Widths> {
        let t_star = t_pad / self.config.router.kernel;
        if decisions.len() != t_star {
            return Err(Error::ShapeMismatch {
                op: "forward_dynamic",
                axis: "router frames",
                expected: t_star,
                got: decisions.len(),
            });
        }
        let j = self.config.uset.len();
        if let Some(&bad) = decisions.iter().find(|&&d| d >= j) {
            return Err(Error::invalid("forward_dynamic", format!("decision {bad} out of {j}")));
        }
        let n = self.config.bottleneck_frames(t_pad);
        let per_frame: Vec<usize> = router::nearest_map(t_star, n).iter().map(|&k| decisions[k]).collect();
        Widths::from_bottleneck(&self.config, t_pad, &per_frame)
    }

    /// Inference with the router: noise-free argmax decisions, then the
    /// switched-width pass.
    pub fn forward_dynamic(&self, x: &[f64]) -> Result<(Vec<f64>, RoutingTrace)> {
        let scores = self.router_scores(x)?;
        let decisions = router::argmax_columns(&scores);
        let y = self.forward_with_decisions(x, &decisions)?;
        Ok((y, RoutingTrace::new(scores, decisions, &self.config.uset)))
    }

    /// Reference form of dynamic inference: all `J` static outputs mixed
    /// sample-wise by the upsampled one-hot decisions.
    pub fn forward_masked_sum(&self, x: &[f64], decisions: &[usize]) -> Result<Vec<f64>> {
        check_signal(x)?;
        let t_pad = self.valid_length(x.len());
        let j = self.config.uset.len();
        let gate =
            router::upsample_decisions(decisions, j, self.config.bottleneck_frames(t_pad), t_pad)?;
        let mut out = vec![0.0; x.len()];
        for k in 0..j {
            let row = &gate.data()[k * t_pad..k * t_pad + x.len()];
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            let y = self.forward_static_index(x, k)?;
            for ((o, y), m) in out.iter_mut().zip(y).zip(row) {
                *o += y * m;
            }
        }
        Ok(out)
    }

    /// Model checkpoint: config keys plus every parameter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let c = &self.config;
        let uset: Vec<String> = c.uset.values().iter().map(|v| v.to_string()).collect();
        for (k, v) in [
            ("model.depth", c.depth.to_string()),
            ("model.kernel", c.kernel.to_string()),
            ("model.stride", c.stride.to_string()),
            ("model.resample", c.resample.to_string()),
            ("model.hidden", c.hidden.to_string()),
            ("model.groups", c.groups.to_string()),
            ("model.uset", uset.join(",")),
            ("model.router.kernel", c.router.kernel.to_string()),
            ("model.router.hidden", c.router.hidden.to_string()),
            ("model.input_gain", c.input_gain.to_string()),
            ("model.has_router", self.router.is_some().to_string()),
        ] {
            ck.meta.insert(k.to_string(), v);
        }
        ck.tensors = self
            .params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<Self> {
        let uset_raw: String = ck.parse(dir, "model.uset")?;
        let uset = uset_raw
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint {
                path: dir.to_path_buf(),
                msg: format!("bad utilization set `{uset_raw}`"),
            })?;
        let config = ModelConfig {
            depth: ck.parse(dir, "model.depth")?,
            kernel: ck.parse(dir, "model.kernel")?,
            stride: ck.parse(dir, "model.stride")?,
            resample: ck.parse(dir, "model.resample")?,
            hidden: ck.parse(dir, "model.hidden")?,
            groups: ck.parse(dir, "model.groups")?,
            uset: UtilizationSet::new(uset)?,
            router: RouterConfig {
                kernel: ck.parse(dir, "model.router.kernel")?,
                hidden: ck.parse(dir, "model.router.hidden")?,
            },
            input_gain: ck.parse(dir, "model.input_gain")?,
        };
        let mut model = Demucs::new(config, 0)?;
        if ck.parse::<bool>(dir, "model.has_router")? {
            model.implant_router(0);
        }
        model.load_params(ck, dir)?;
        Ok(model)
    }

    /// Overwrites parameters with the same-named checkpoint tensors. Every
    /// parameter must be present with a matching shape.
    pub fn load_params(&mut self, ck: &Checkpoint, dir: &Path) -> Result<()> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let t = ck.tensor(&name).ok_or_else(|| Error::Checkpoint {
                path: dir.to_path_buf(),
                msg: format!("missing tensor `{name}`"),
            })?;
            if t.shape() != self.params.get(id).shape() {
                return Err(Error::Checkpoint {
                    path: dir.to_path_buf(),
                    msg: format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        self.params.get(id).shape()
                    ),
                });
            }
            *self.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Demucs::from_checkpoint(&Checkpoint::load(dir)?, dir)
    }
}

fn check_signal(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid("forward", "empty signal"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteActivation { layer: "input".into() });
    }
    Ok(())
}
