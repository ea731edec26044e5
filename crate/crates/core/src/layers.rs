//! Slimmable convolutions, encoder/decoder blocks and recurrent cells.
//!
//! Slimming never copies weights. A block run at utilization `υ` reads the
//! leading `⌈C·υ⌉` channels of its full tensors (or, for the decoder's
//! pointwise convolution, the leading `⌈C·υ⌉` rows of each GLU half) by
//! gating the kernels. Inactive channels are exact zeros.
//!
//! The GLU convention is fixed: the first half of the channels is the
//! activation, the second half the gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ChannelGate, GateKind, Graph, ParamId, ParamStore, Tensor, Var};

/// Sorted set of utilization factors, the largest being 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UtilizationSet {
    values: Vec<f64>,
}

impl UtilizationSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Config("utilization set needs at least two factors".into()));
        }
        if values.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::Config(format!("utilization factors must lie in (0, 1]: {values:?}")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("utilization factors must be strictly increasing: {values:?}")));
        }
        if *values.last().unwrap() != 1.0 {
            return Err(Error::Config("largest utilization factor must be 1.0".into()));
        }
        Ok(UtilizationSet { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, j: usize) -> f64 {
        self.values[j]
    }

    /// Index of `uf`, matched with a small tolerance.
    pub fn index_of(&self, uf: f64) -> Result<usize> {
        self.values
            .iter()
            .position(|v| (v - uf).abs() < 1e-9)
            .ok_or(Error::UnknownUtilization(uf))
    }

    /// Checks that every factor keeps at least one channel of a `c`-wide layer.
    pub fn check_channels(&self, c: usize) -> Result<()> {
        if c == 0 || slim_count(c, self.values[0]) == 0 {
            return Err(Error::Config(format!("{c} channels cannot be slimmed")));
        }
        Ok(())
    }
}

impl Default for UtilizationSet {
    fn default() -> Self {
        UtilizationSet {
            values: vec![0.125, 0.25, 0.5, 1.0],
        }
    }
}

impl TryFrom<Vec<f64>> for UtilizationSet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        UtilizationSet::new(v)
    }
}

impl From<UtilizationSet> for Vec<f64> {
    fn from(u: UtilizationSet) -> Self {
        u.values
    }
}

/// `⌈c·υ⌉`, robust to the representation error of products like `3·(1/3)`.
pub fn slim_count(c: usize, uf: f64) -> usize {
    let x = c as f64 * uf;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Output rows of a GLU-feeding convolution with `rows` outputs kept at
/// utilization `uf`: `⌈rows·υ⌉` rounded up to even, half from the start and
/// half from the middle.
pub fn decoder_pw_rows(rows: usize, uf: f64) -> Result<Vec<usize>> {
    if rows % 2 != 0 {
        return Err(Error::invalid("decoder_pw_rows", format!("{rows} rows cannot be split in two halves")));
    }
    let count = slim_count(rows, uf);
    let count = count + count % 2;
    let half = rows / 2;
    if count / 2 > half {
        return Err(Error::invalid(
            "decoder_pw_rows",
            format!("selecting {count} rows exceeds the halves of {rows}"),
        ));
    }
    Ok(ChannelGate::rows(GateKind::Paired, rows, count / 2))
}

/// Which axis of a convolution shrinks with the utilization factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlimAxis {
    Fixed,
    Output,
    Input,
    GluPairedOutput,
}

/// 1-D convolution layer, optionally transposed.
///
/// Regular weights are `[C_out, C_in, K]`, transposed ones `[C_in, C_out, K]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub transposed: bool,
    pub slim: SlimAxis,
}

fn uniform_param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    bound: f64,
    rng: &mut R,
) -> ParamId {
    store.add(name, Tensor::uniform(shape, -bound, bound, rng))
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        transposed: bool,
        slim: SlimAxis,
        rng: &mut R,
    ) -> Self {
        let shape = if transposed {
            [c_in, c_out, kernel]
        } else {
            [c_out, c_in, kernel]
        };
        let fan_in = if transposed { c_out * kernel } else { c_in * kernel };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform_param(store, format!("{name}.weight"), &shape, bound, rng);
        let bias = uniform_param(store, format!("{name}.bias"), &[c_out], bound, rng);
        Conv {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            transposed,
            slim,
        }
    }

    /// Active (input, output) channel counts at utilization `uf`.
    pub fn active(&self, uf: f64) -> (usize, usize) {
        match self.slim {
            SlimAxis::Fixed => (self.c_in, self.c_out),
            SlimAxis::Output => (self.c_in, slim_count(self.c_out, uf)),
            SlimAxis::Input => (slim_count(self.c_in, uf), self.c_out),
            SlimAxis::GluPairedOutput => (self.c_in, 2 * slim_count(self.c_out / 2, uf)),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        out_gate: Option<ChannelGate>,
        in_gate: Option<ChannelGate>,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        if self.transposed {
            g.conv_transpose1d_gated(x, w, b, self.stride, in_gate)
        } else {
            g.conv1d_gated(x, w, b, self.stride, out_gate, in_gate)
        }
    }
}

/// Converts a gate expressed as UF indices into one of active channel counts.
pub fn channel_gate(kind: GateKind, channels: usize, ufs: &UtilizationSet, per_frame: &[usize]) -> ChannelGate {
    let counts: Vec<usize> = per_frame.iter().map(|&j| slim_count(channels, ufs.get(j))).collect();
    ChannelGate::from_per_frame(kind, &counts)
}

/// Per-frame UF indices for one block, run-length encoded.
///
/// A block's width schedule lives on the frames of its encoder output, which
/// are also the input frames of the matching decoder block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WidthSchedule {
    per_frame: Vec<usize>,
}

impl WidthSchedule {
    pub fn constant(frames: usize, j: usize) -> Self {
        WidthSchedule {
            per_frame: vec![j; frames],
        }
    }

    pub fn per_frame(per_frame: Vec<usize>) -> Self {
        WidthSchedule { per_frame }
    }

    pub fn frames(&self) -> usize {
        self.per_frame.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.per_frame
    }

    /// Active-count gate for a `channels`-wide layer.
    pub fn gate(&self, kind: GateKind, channels: usize, ufs: &UtilizationSet) -> ChannelGate {
        channel_gate(kind, channels, ufs, &self.per_frame)
    }
}

/// Encoder block: strided conv (output-slimmed) → ReLU → pointwise conv
/// (input-slimmed) → GLU. Maps `[C_in, T]` to `[H, T/S]`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub conv: Conv,
    pub pointwise: Conv,
    pub hidden: usize,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        hidden: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), c_in, hidden, kernel, stride, false, SlimAxis::Output, rng);
        let pointwise = Conv::new(store, &format!("{name}.pw"), hidden, 2 * hidden, 1, 1, false, SlimAxis::Input, rng);
        EncoderBlock { conv, pointwise, hidden }
    }

    /// Left padding that makes the strided conv causal and length-exact.
    pub fn padding(&self) -> usize {
        self.conv.kernel.saturating_sub(self.conv.stride)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        width: &WidthSchedule,
        ufs: &UtilizationSet,
    ) -> Result<Var> {
        let t = g.shape(x)[1];
        if t % self.conv.stride != 0 {
            return Err(Error::invalid(
                "encoder_block",
                format!("length {t} not divisible by stride {}", self.conv.stride),
            ));
        }
        if width.frames() != t / self.conv.stride {
            return Err(Error::ShapeMismatch {
                op: "encoder_block",
                axis: "width schedule",
                expected: t / self.conv.stride,
                got: width.frames(),
            });
        }
        let gate = width.gate(GateKind::Prefix, self.hidden, ufs);
        let xp = g.pad_time(x, self.padding(), 0)?;
        let h = self.conv.forward(g, store, xp, Some(gate.clone()), None)?;
        let h = g.relu(h);
        let h = self.pointwise.forward(g, store, h, None, Some(gate))?;
        g.glu(h)
    }
}

/// Decoder block: skip addition → pointwise conv (paired-row slimmed) → GLU
/// → transposed conv (input-slimmed) → ReLU unless it is the last block.
/// Maps `[H, T]` to `[C_out, T·S]`.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub pointwise: Conv,
    pub tconv: Conv,
    pub hidden: usize,
    pub relu: bool,
}

impl DecoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        let pointwise = Conv::new(
            store,
            &format!("{name}.pw"),
            hidden,
            2 * hidden,
            1,
            1,
            false,
            SlimAxis::GluPairedOutput,
            rng,
        );
        let tconv = Conv::new(store, &format!("{name}.tconv"), hidden, c_out, kernel, stride, true, SlimAxis::Input, rng);
        DecoderBlock {
            pointwise,
            tconv,
            hidden,
            relu,
        }
    }

    /// Trailing samples dropped from the transposed conv output.
    pub fn trim(&self) -> usize {
        self.tconv.kernel.saturating_sub(self.tconv.stride)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        skip: Var,
        width: &WidthSchedule,
        ufs: &UtilizationSet,
    ) -> Result<Var> {
        let t = g.shape(x)[1];
        if width.frames() != t {
            return Err(Error::ShapeMismatch {
                op: "decoder_block",
                axis: "width schedule",
                expected: t,
                got: width.frames(),
            });
        }
        let sum = g.add(x, skip)?;
        let paired = width.gate(GateKind::Paired, self.hidden, ufs);
        let h = self.pointwise.forward(g, store, sum, Some(paired), None)?;
        let h = g.glu(h)?;
        let gate = width.gate(GateKind::Prefix, self.hidden, ufs);
        let y = self.tconv.forward(g, store, h, None, Some(gate))?;
        let y = g.slice_time(y, 0, t * self.tconv.stride)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

/// `M` independent GRUs over equal slices of the feature vector.
#[derive(Clone, Debug)]
pub struct GroupedGru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub features: usize,
    pub groups: usize,
}

impl GroupedGru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || features % groups != 0 {
            return Err(Error::Config(format!("{features} features do not split into {groups} groups")));
        }
        let g = features / groups;
        let bound = 1.0 / (g as f64).sqrt();
        Ok(GroupedGru {
            w_ih: uniform_param(store, format!("{name}.w_ih"), &[groups, 3 * g, g], bound, rng),
            w_hh: uniform_param(store, format!("{name}.w_hh"), &[groups, 3 * g, g], bound, rng),
            b_ih: uniform_param(store, format!("{name}.b_ih"), &[groups, 3 * g], bound, rng),
            b_hh: uniform_param(store, format!("{name}.b_hh"), &[groups, 3 * g], bound, rng),
            features,
            groups,
        })
    }

    pub fn group_size(&self) -> usize {
        self.features / self.groups
    }

    /// Runs over `x: [F, T]` from state `h0` (zeros if `None`); returns the
    /// output sequence and the final state.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h0: Option<&[f64]>) -> Result<(Var, Vec<f64>)> {
        let zeros = vec![0.0; self.features];
        let w = [self.w_ih, self.w_hh, self.b_ih, self.b_hh].map(|p| g.param(store, p));
        let y = g.gru_grouped(x, w, self.groups, h0.unwrap_or(&zeros))?;
        Ok((y, last_column(g.value(y))))
    }
}

/// Elementwise GRU: one scalar recurrence per feature.
#[derive(Clone, Debug)]
pub struct DiagonalGru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub features: usize,
}

impl DiagonalGru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, features: usize, rng: &mut R) -> Self {
        DiagonalGru {
            w_ih: uniform_param(store, format!("{name}.w_ih"), &[3, features], 1.0, rng),
            w_hh: uniform_param(store, format!("{name}.w_hh"), &[3, features], 1.0, rng),
            b_ih: uniform_param(store, format!("{name}.b_ih"), &[3, features], 1.0, rng),
            b_hh: uniform_param(store, format!("{name}.b_hh"), &[3, features], 1.0, rng),
            features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h0: Option<&[f64]>) -> Result<(Var, Vec<f64>)> {
        let zeros = vec![0.0; self.features];
        let w = [self.w_ih, self.w_hh, self.b_ih, self.b_hh].map(|p| g.param(store, p));
        let y = g.gru_diagonal(x, w, h0.unwrap_or(&zeros))?;
        Ok((y, last_column(g.value(y))))
    }
}

fn last_column(t: &Tensor) -> Vec<f64> {
    let (f, len) = (t.dim(0), t.dim(1));
    if len == 0 {
        return vec![0.0; f];
    }
    (0..f).map(|i| t.data()[i * len + len - 1]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slim_counts() {
        assert_eq!(slim_count(64, 0.125), 8);
        assert_eq!(slim_count(64, 1.0), 64);
        assert_eq!(slim_count(3, 0.5), 2);
        assert_eq!(slim_count(3, 1.0 / 3.0), 1);
    }

    #[test]
    fn decoder_rows() {
        let r = decoder_pw_rows(128, 0.25).unwrap();
        let want: Vec<usize> = (0..16).chain(64..80).collect();
        assert_eq!(r, want);
        assert_eq!(decoder_pw_rows(128, 1.0).unwrap(), (0..128).collect::<Vec<_>>());
        assert_eq!(decoder_pw_rows(8, 0.5).unwrap(), vec![0, 1, 4, 5]);
        // odd counts round up to even
        assert_eq!(decoder_pw_rows(6, 0.5).unwrap(), vec![0, 1, 3, 4]);
        assert!(decoder_pw_rows(7, 0.5).is_err());
    }

    #[test]
    fn utilization_set_validation() {
        assert!(UtilizationSet::new(vec![1.0]).is_err());
        assert!(UtilizationSet::new(vec![0.5, 0.25, 1.0]).is_err());
        assert!(UtilizationSet::new(vec![0.25, 0.5]).is_err());
        assert!(UtilizationSet::new(vec![0.0, 1.0]).is_err());
        let u = UtilizationSet::default();
        assert_eq!(u.index_of(0.5).unwrap(), 2);
        assert!(matches!(u.index_of(0.3), Err(Error::UnknownUtilization(_))));
    }
}
