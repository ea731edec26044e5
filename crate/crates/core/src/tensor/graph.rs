use std::collections::HashMap;

use super::gate::ChannelGate;
use super::kernels::{self, ConvDims, GruCache, GruGrads, GruWeights};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Models hold `ParamId`s into a store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

enum Op {
    Leaf,
    Param,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    SubConst(Var),
    Sum(Var),
    SumLast(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    PowClamped { x: Var, p: f64, floor: f64 },
    Reshape(Var),
    Index(Var, usize),
    PadTime { x: Var, left: usize },
    SliceTime { x: Var, start: usize },
    GatherTime { x: Var, map: Vec<usize> },
    Glu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
        out_gate: Option<ChannelGate>,
        in_gate: Option<ChannelGate>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
        in_gate: Option<ChannelGate>,
    },
    GruGrouped {
        x: Var,
        w: [Var; 4],
        groups: usize,
        cache: GruCache,
    },
    GruDiagonal {
        x: Var,
        w: [Var; 4],
        cache: GruCache,
    },
    Stft { x: Var, window: Vec<f64>, hop: usize },
    Upsample { x: Var, factor: usize, taps: Vec<f64> },
    Downsample { x: Var, factor: usize, taps: Vec<f64> },
    StraightThrough { r: Var, probs: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Detach => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::SubConst(..) => "sub_const",
            Op::Sum(..) => "sum",
            Op::SumLast(..) => "sum_last",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::PowClamped { .. } => "pow_clamped",
            Op::Reshape(..) => "reshape",
            Op::Index(..) => "index",
            Op::PadTime { .. } => "pad_time",
            Op::SliceTime { .. } => "slice_time",
            Op::GatherTime { .. } => "gather_time",
            Op::Glu(..) => "glu",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::GruGrouped { .. } => "gru_grouped",
            Op::GruDiagonal { .. } => "gru_diagonal",
            Op::Stft { .. } => "stft",
            Op::Upsample { .. } => "upsample",
            Op::Downsample { .. } => "downsample",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass; [`Graph::backward`] replays them
/// in reverse.
///
/// A graph built with [`Graph::inference`] records values only and refuses
/// to differentiate.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Time length of the last axis of a `[C, T]` (or `[T]`) tensor.
fn channels_time(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [c, len] => Ok((*c, *len)),
        [len] => Ok((1, *len)),
        _ => Err(Error::invalid(op, format!("expected [C, T], got {:?}", t.shape()))),
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        let axis = a
            .shape()
            .iter()
            .zip(b.shape())
            .position(|(x, y)| x != y)
            .unwrap_or(0);
        return Err(Error::ShapeMismatch {
            op,
            axis: if a.rank() != b.rank() {
                "rank"
            } else if axis + 1 == a.rank() {
                "time"
            } else {
                "channel"
            },
            expected: a.shape().get(axis).copied().unwrap_or(a.rank()),
            got: b.shape().get(axis).copied().unwrap_or(b.rank()),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let ng = requires_grad && self.grad_enabled;
        self.push_with(value, Op::Leaf, ng)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let ng = self.grad_enabled;
        let v = self.push_with(store.get(id).clone(), Op::Param, ng);
        self.params.insert(id, v);
        v
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push_with(value, Op::Detach, false)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.map(x, |a| a * k);
        self.push(v, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let v = self.map(x, |a| a + k);
        self.push(v, Op::AddScalar(x), &[x])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        check_same("mul_const", self.value(x), c)?;
        let t = self.value(x);
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::new(t.shape(), data)?;
        Ok(self.push(v, Op::MulConst(x, c.clone()), &[x]))
    }

    /// `x − c` for a constant tensor `c`.
    pub fn sub_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        check_same("sub_const", self.value(x), c)?;
        let t = self.value(x);
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a - b).collect();
        let v = Tensor::new(t.shape(), data)?;
        Ok(self.push(v, Op::SubConst(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums a `[J, T]` tensor over its last axis, giving `[J]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let (j, t) = channels_time(self.value(x), "sum_last")?;
        let data = self.value(x).data();
        let v = (0..j).map(|r| data[r * t..(r + 1) * t].iter().sum()).collect();
        Ok(self.push(Tensor::vector(v), Op::SumLast(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, kernels::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a * a);
        self.push(v, Op::Square(x), &[x])
    }

    /// `max(x, floor)^p`; the gradient is zero where the clamp is active.
    pub fn pow_clamped(&mut self, x: Var, p: f64, floor: f64) -> Var {
        let v = self.map(x, |a| a.max(floor).powf(p));
        self.push(v, Op::PowClamped { x, p, floor }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Slice `i` of the leading axis.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        let lead = *t
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("index", "scalar has no leading axis"))?;
        if i >= lead {
            return Err(Error::invalid("index", format!("index {i} out of {lead}")));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let v = Tensor::new(&t.shape()[1..], t.data()[i * inner..(i + 1) * inner].to_vec())?;
        Ok(self.push(v, Op::Index(x, i), &[x]))
    }

    /// Zero-pads the time axis of `[C, T]`.
    pub fn pad_time(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let (c, t) = channels_time(self.value(x), "pad_time")?;
        let nt = t + left + right;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * nt];
        for ch in 0..c {
            out[ch * nt + left..ch * nt + left + t].copy_from_slice(&src[ch * t..(ch + 1) * t]);
        }
        let v = Tensor::new(&[c, nt], out)?;
        Ok(self.push(v, Op::PadTime { x, left }, &[x]))
    }

    /// `x[:, start..start+len]` of `[C, T]`.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, t) = channels_time(self.value(x), "slice_time")?;
        if start + len > t {
            return Err(Error::ShapeMismatch {
                op: "slice_time",
                axis: "time",
                expected: t,
                got: start + len,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * len);
        for ch in 0..c {
            out.extend_from_slice(&src[ch * t + start..ch * t + start + len]);
        }
        let v = Tensor::new(&[c, len], out)?;
        Ok(self.push(v, Op::SliceTime { x, start }, &[x]))
    }

    /// `y[c, t] = x[c, map[t]]` on `[C, T_in]`; used for nearest-neighbour
    /// and zero-order-hold resampling of routing decisions.
    pub fn gather_time(&mut self, x: Var, map: Vec<usize>) -> Result<Var> {
        let (c, t) = channels_time(self.value(x), "gather_time")?;
        if let Some(&bad) = map.iter().find(|&&m| m >= t) {
            return Err(Error::ShapeMismatch {
                op: "gather_time",
                axis: "time",
                expected: t,
                got: bad + 1,
            });
        }
        let src = self.value(x).data();
        let n = map.len();
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            out.extend(map.iter().map(|&m| src[ch * t + m]));
        }
        let v = Tensor::new(&[c, n], out)?;
        Ok(self.push(v, Op::GatherTime { x, map }, &[x]))
    }

    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (c, t) = channels_time(self.value(x), "glu")?;
        if c % 2 != 0 {
            return Err(Error::invalid("glu", format!("odd channel count {c}")));
        }
        let v = Tensor::new(&[c / 2, t], kernels::glu_forward(self.value(x).data(), c / 2, t))?;
        Ok(self.push(v, Op::Glu(x), &[x]))
    }

    fn conv_dims(&self, op: &'static str, x: Var, w: Var, b: Var, stride: usize, transposed: bool) -> Result<ConvDims> {
        let (c_in, t_in) = channels_time(self.value(x), op)?;
        let ws = self.value(w).shape();
        if ws.len() != 3 {
            return Err(Error::invalid(op, format!("weight must be rank 3, got {ws:?}")));
        }
        let (w_in, c_out, kernel) = if transposed {
            (ws[0], ws[1], ws[2])
        } else {
            (ws[1], ws[0], ws[2])
        };
        if w_in != c_in {
            return Err(Error::ShapeMismatch {
                op,
                axis: "input channel",
                expected: w_in,
                got: c_in,
            });
        }
        if self.value(b).len() != c_out {
            return Err(Error::ShapeMismatch {
                op,
                axis: "bias",
                expected: c_out,
                got: self.value(b).len(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        if !transposed && t_in < kernel {
            return Err(Error::ShapeMismatch {
                op,
                axis: "time",
                expected: kernel,
                got: t_in,
            });
        }
        if transposed && t_in == 0 {
            return Err(Error::invalid(op, "empty input"));
        }
        Ok(ConvDims {
            c_in,
            t_in,
            c_out,
            kernel,
            stride,
        })
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.conv1d_gated(x, w, b, stride, None, None)
    }

    /// Convolution with optional per-frame output and input channel gates.
    pub fn conv1d_gated(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        out_gate: Option<ChannelGate>,
        in_gate: Option<ChannelGate>,
    ) -> Result<Var> {
        let dims = self.conv_dims("conv1d", x, w, b, stride, false)?;
        for g in out_gate.iter().chain(in_gate.iter()) {
            if g.frames() != dims.t_out() {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    axis: "gate time",
                    expected: dims.t_out(),
                    got: g.frames(),
                });
            }
        }
        let y = kernels::conv1d_forward(
            dims,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out_gate.as_ref(),
            in_gate.as_ref(),
        );
        let v = Tensor::new(&[dims.c_out, dims.t_out()], y)?;
        Ok(self.push(
            v,
            Op::Conv1d {
                x,
                w,
                b,
                dims,
                out_gate,
                in_gate,
            },
            &[x, w, b],
        ))
    }

    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.conv_transpose1d_gated(x, w, b, stride, None)
    }

    pub fn conv_transpose1d_gated(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        in_gate: Option<ChannelGate>,
    ) -> Result<Var> {
        let dims = self.conv_dims("conv_transpose1d", x, w, b, stride, true)?;
        if let Some(g) = &in_gate {
            if g.frames() != dims.t_in {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose1d",
                    axis: "gate time",
                    expected: dims.t_in,
                    got: g.frames(),
                });
            }
        }
        let y = kernels::conv_transpose1d_forward(
            dims,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            in_gate.as_ref(),
        );
        let v = Tensor::new(&[dims.c_out, dims.t_out_transposed()], y)?;
        Ok(self.push(
            v,
            Op::ConvTranspose1d {
                x,
                w,
                b,
                dims,
                in_gate,
            },
            &[x, w, b],
        ))
    }

    /// Grouped GRU over `x: [F, T]` with weights `w_ih, w_hh: [M, 3G, G]`
    /// and biases `[M, 3G]`, starting from `h0`.
    pub fn gru_grouped(&mut self, x: Var, w: [Var; 4], groups: usize, h0: &[f64]) -> Result<Var> {
        let (f, t) = channels_time(self.value(x), "gru_grouped")?;
        if groups == 0 || f % groups != 0 {
            return Err(Error::invalid(
                "gru_grouped",
                format!("{f} features do not split into {groups} groups"),
            ));
        }
        let g = f / groups;
        let expect = [groups * 3 * g * g, groups * 3 * g * g, groups * 3 * g, groups * 3 * g];
        for (k, (var, n)) in w.iter().zip(expect).enumerate() {
            if self.value(*var).len() != n {
                return Err(Error::ShapeMismatch {
                    op: "gru_grouped",
                    axis: ["w_ih", "w_hh", "b_ih", "b_hh"][k],
                    expected: n,
                    got: self.value(*var).len(),
                });
            }
        }
        if h0.len() != f {
            return Err(Error::ShapeMismatch {
                op: "gru_grouped",
                axis: "state",
                expected: f,
                got: h0.len(),
            });
        }
        let wts = GruWeights {
            w_ih: self.value(w[0]).data(),
            w_hh: self.value(w[1]).data(),
            b_ih: self.value(w[2]).data(),
            b_hh: self.value(w[3]).data(),
        };
        let (y, _, cache) = kernels::gru_grouped_forward(wts, groups, self.value(x).data(), f, t, h0);
        let v = Tensor::new(&[f, t], y)?;
        let inputs = [x, w[0], w[1], w[2], w[3]];
        Ok(self.push(v, Op::GruGrouped { x, w, groups, cache }, &inputs))
    }

    /// Diagonal GRU over `x: [F, T]` with all four weight tensors `[3, F]`.
    pub fn gru_diagonal(&mut self, x: Var, w: [Var; 4], h0: &[f64]) -> Result<Var> {
        let (f, t) = channels_time(self.value(x), "gru_diagonal")?;
        for (k, var) in w.iter().enumerate() {
            if self.value(*var).len() != 3 * f {
                return Err(Error::ShapeMismatch {
                    op: "gru_diagonal",
                    axis: ["w_ih", "w_hh", "b_ih", "b_hh"][k],
                    expected: 3 * f,
                    got: self.value(*var).len(),
                });
            }
        }
        if h0.len() != f {
            return Err(Error::ShapeMismatch {
                op: "gru_diagonal",
                axis: "state",
                expected: f,
                got: h0.len(),
            });
        }
        let wts = GruWeights {
            w_ih: self.value(w[0]).data(),
            w_hh: self.value(w[1]).data(),
            b_ih: self.value(w[2]).data(),
            b_hh: self.value(w[3]).data(),
        };
        let (y, _, cache) = kernels::gru_diagonal_forward(wts, self.value(x).data(), f, t, h0);
        let v = Tensor::new(&[f, t], y)?;
        let inputs = [x, w[0], w[1], w[2], w[3]];
        Ok(self.push(v, Op::GruDiagonal { x, w, cache }, &inputs))
    }

    /// One-sided STFT of a flattened signal; output `[2, frames, bins]`
    /// holding real then imaginary parts. No padding is applied.
    pub fn stft(&mut self, x: Var, window: &[f64], hop: usize) -> Result<Var> {
        let len = self.value(x).len();
        if hop == 0 {
            return Err(Error::invalid("stft", "hop must be positive"));
        }
        if window.is_empty() || len < window.len() {
            return Err(Error::invalid(
                "stft",
                format!("signal of {len} samples shorter than window {}", window.len()),
            ));
        }
        let frames = kernels::stft_frames(len, window.len(), hop);
        let bins = window.len() / 2 + 1;
        let y = kernels::stft_forward(self.value(x).data(), window, hop);
        let v = Tensor::new(&[2, frames, bins], y)?;
        Ok(self.push(
            v,
            Op::Stft {
                x,
                window: window.to_vec(),
                hop,
            },
            &[x],
        ))
    }

    /// Windowed-sinc interpolation by `factor` of a `[1, T]` signal.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample", "factor must be at least 1"));
        }
        let (c, t) = channels_time(self.value(x), "upsample")?;
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op: "upsample",
                axis: "channel",
                expected: 1,
                got: c,
            });
        }
        let taps = kernels::upsample_taps(factor);
        let y = kernels::upsample_forward(self.value(x).data(), factor, &taps);
        let v = Tensor::new(&[1, t * factor], y)?;
        Ok(self.push(v, Op::Upsample { x, factor, taps }, &[x]))
    }

    /// Anti-aliased decimation by `factor` of a `[1, T]` signal, `T % factor == 0`.
    pub fn downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("downsample", "factor must be at least 1"));
        }
        let (c, t) = channels_time(self.value(x), "downsample")?;
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op: "downsample",
                axis: "channel",
                expected: 1,
                got: c,
            });
        }
        if t % factor != 0 {
            return Err(Error::invalid(
                "downsample",
                format!("length {t} not divisible by {factor}"),
            ));
        }
        let taps = kernels::downsample_taps(factor);
        let y = kernels::downsample_forward(self.value(x).data(), factor, &taps);
        let v = Tensor::new(&[1, t / factor], y)?;
        Ok(self.push(v, Op::Downsample { x, factor, taps }, &[x]))
    }

    /// Straight-through categorical selection over the leading axis of
    /// `r: [J, T]`. The forward value is the one-hot argmax of `r + noise`
    /// (lowest index wins ties); the backward pass uses the Jacobian of
    /// `softmax(r + noise)`.
    pub fn straight_through(&mut self, r: Var, noise: Option<&Tensor>) -> Result<Var> {
        let (j, t) = channels_time(self.value(r), "straight_through")?;
        if let Some(n) = noise {
            check_same("straight_through", self.value(r), n)?;
        }
        let rv = self.value(r).data();
        let mut onehot = vec![0.0; j * t];
        let mut probs = vec![0.0; j * t];
        for col in 0..t {
            let logit = |k: usize| rv[k * t + col] + noise.map_or(0.0, |n| n.data()[k * t + col]);
            let mut best = 0;
            let mut max = logit(0);
            for k in 1..j {
                if logit(k) > max {
                    max = logit(k);
                    best = k;
                }
            }
            onehot[best * t + col] = 1.0;
            let z: f64 = (0..j).map(|k| (logit(k) - max).exp()).sum();
            for k in 0..j {
                probs[k * t + col] = (logit(k) - max).exp() / z;
            }
        }
        let v = Tensor::new(&[j, t], onehot)?;
        let probs = Tensor::new(&[j, t], probs)?;
        Ok(self.push(v, Op::StraightThrough { r, probs }, &[r]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward", "graph was built without gradients"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite {
                node: loss.0,
                op: self.nodes[loss.0].op.name(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![1.0]).expect("scalar"));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let g = if keep { grads[i].clone() } else { grads[i].take() };
            let Some(g) = g else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.propagate(node, &g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .map(|(id, v)| (*id, *v))
            .collect::<HashMap<_, _>>();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let add_scaled = |dst: &mut [f64], k: f64| {
            for (d, s) in dst.iter_mut().zip(gd) {
                *d += k * s;
            }
        };
        match &node.op {
            Op::Leaf | Op::Param | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_scaled(d, 1.0));
                self.accumulate(grads, *b, |d| add_scaled(d, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_scaled(d, 1.0));
                self.accumulate(grads, *b, |d| add_scaled(d, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, s), y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += s * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, s), x) in d.iter_mut().zip(gd).zip(va) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, |d| add_scaled(d, *k)),
            Op::AddScalar(x) | Op::SubConst(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| add_scaled(d, 1.0))
            }
            Op::MulConst(x, c) => self.accumulate(grads, *x, |d| {
                for ((d, s), k) in d.iter_mut().zip(gd).zip(c.data()) {
                    *d += s * k;
                }
            }),
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|v| *v += s));
            }
            Op::SumLast(x) => {
                let t = self.value(*x).len() / gd.len().max(1);
                self.accumulate(grads, *x, |d| {
                    for (r, s) in gd.iter().enumerate() {
                        d[r * t..(r + 1) * t].iter_mut().for_each(|v| *v += s);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, s), v) in d.iter_mut().zip(gd).zip(xv) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((d, s), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += s * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((d, s), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += s * (1.0 - y * y);
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, s), v) in d.iter_mut().zip(gd).zip(xv) {
                        *d += 2.0 * s * v;
                    }
                });
            }
            Op::PowClamped { x, p, floor } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, s), v) in d.iter_mut().zip(gd).zip(xv) {
                        if *v > *floor {
                            *d += s * p * v.powf(p - 1.0);
                        }
                    }
                });
            }
            Op::Index(x, i) => {
                let n = gd.len();
                self.accumulate(grads, *x, |d| {
                    for (d, s) in d[i * n..(i + 1) * n].iter_mut().zip(gd) {
                        *d += s;
                    }
                });
            }
            Op::PadTime { x, left } => {
                let (c, t) = channels_time(self.value(*x), "pad_time").expect("validated");
                let nt = g.dim(1);
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        for k in 0..t {
                            d[ch * t + k] += gd[ch * nt + left + k];
                        }
                    }
                });
            }
            Op::SliceTime { x, start } => {
                let (c, t) = channels_time(self.value(*x), "slice_time").expect("validated");
                let len = g.dim(1);
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        for k in 0..len {
                            d[ch * t + start + k] += gd[ch * len + k];
                        }
                    }
                });
            }
            Op::GatherTime { x, map } => {
                let (c, t) = channels_time(self.value(*x), "gather_time").expect("validated");
                let n = map.len();
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        for (k, &m) in map.iter().enumerate() {
                            d[ch * t + m] += gd[ch * n + k];
                        }
                    }
                });
            }
            Op::Glu(x) => {
                let xv = self.value(*x);
                let (c, t) = channels_time(xv, "glu").expect("validated");
                self.accumulate(grads, *x, |d| kernels::glu_backward(xv.data(), c / 2, t, gd, d));
            }
            Op::Conv1d {
                x,
                w,
                b,
                dims,
                out_gate,
                in_gate,
            } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.needs(*w).then(|| vec![0.0; wv.len()]);
                let mut db = self.needs(*b).then(|| vec![0.0; dims.c_out]);
                kernels::conv1d_backward(
                    *dims,
                    xv,
                    wv,
                    gd,
                    out_gate.as_ref(),
                    in_gate.as_ref(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.merge(grads, *x, dx);
                self.merge(grads, *w, dw);
                self.merge(grads, *b, db);
            }
            Op::ConvTranspose1d {
                x,
                w,
                b,
                dims,
                in_gate,
            } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.needs(*w).then(|| vec![0.0; wv.len()]);
                let mut db = self.needs(*b).then(|| vec![0.0; dims.c_out]);
                kernels::conv_transpose1d_backward(
                    *dims,
                    xv,
                    wv,
                    gd,
                    in_gate.as_ref(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.merge(grads, *x, dx);
                self.merge(grads, *w, dw);
                self.merge(grads, *b, db);
            }
            Op::GruGrouped { x, w, groups, cache } => {
                let (f, t) = channels_time(self.value(*x), "gru_grouped").expect("validated");
                let (dx, dws) = self.gru_grad_buffers(*x, w);
                let [mut dwi, mut dwh, mut dbi, mut dbh] = dws;
                let mut dx = dx;
                kernels::gru_grouped_backward(
                    self.gru_weights(w),
                    *groups,
                    self.value(*x).data(),
                    f,
                    t,
                    cache,
                    gd,
                    GruGrads {
                        dx: dx.as_deref_mut(),
                        dw_ih: dwi.as_deref_mut(),
                        dw_hh: dwh.as_deref_mut(),
                        db_ih: dbi.as_deref_mut(),
                        db_hh: dbh.as_deref_mut(),
                    },
                );
                self.merge(grads, *x, dx);
                for (v, d) in w.iter().zip([dwi, dwh, dbi, dbh]) {
                    self.merge(grads, *v, d);
                }
            }
            Op::GruDiagonal { x, w, cache } => {
                let (f, t) = channels_time(self.value(*x), "gru_diagonal").expect("validated");
                let (dx, dws) = self.gru_grad_buffers(*x, w);
                let [mut dwi, mut dwh, mut dbi, mut dbh] = dws;
                let mut dx = dx;
                kernels::gru_diagonal_backward(
                    self.gru_weights(w),
                    self.value(*x).data(),
                    f,
                    t,
                    cache,
                    gd,
                    GruGrads {
                        dx: dx.as_deref_mut(),
                        dw_ih: dwi.as_deref_mut(),
                        dw_hh: dwh.as_deref_mut(),
                        db_ih: dbi.as_deref_mut(),
                        db_hh: dbh.as_deref_mut(),
                    },
                );
                self.merge(grads, *x, dx);
                for (v, d) in w.iter().zip([dwi, dwh, dbi, dbh]) {
                    self.merge(grads, *v, d);
                }
            }
            Op::Stft { x, window, hop } => {
                let len = self.value(*x).len();
                self.accumulate(grads, *x, |d| kernels::stft_backward(len, window, *hop, gd, d));
            }
            Op::Upsample { x, factor, taps } => {
                self.accumulate(grads, *x, |d| kernels::upsample_backward(gd, *factor, taps, d));
            }
            Op::Downsample { x, factor, taps } => {
                self.accumulate(grads, *x, |d| kernels::downsample_backward(gd, *factor, taps, d));
            }
            Op::StraightThrough { r, probs } => {
                let (j, t) = (probs.dim(0), probs.dim(1));
                let p = probs.data();
                self.accumulate(grads, *r, |d| {
                    for col in 0..t {
                        let dot: f64 = (0..j).map(|k| p[k * t + col] * gd[k * t + col]).sum();
                        for k in 0..j {
                            d[k * t + col] += p[k * t + col] * (gd[k * t + col] - dot);
                        }
                    }
                });
            }
        }
    }

    fn merge(&self, grads: &mut [Option<Tensor>], v: Var, d: Option<Vec<f64>>) {
        if let Some(d) = d {
            self.accumulate(grads, v, |slot| {
                for (s, x) in slot.iter_mut().zip(d) {
                    *s += x;
                }
            });
        }
    }

    fn gru_weights(&self, w: &[Var; 4]) -> GruWeights<'_> {
        GruWeights {
            w_ih: self.value(w[0]).data(),
            w_hh: self.value(w[1]).data(),
            b_ih: self.value(w[2]).data(),
            b_hh: self.value(w[3]).data(),
        }
    }

    #[allow(clippy::type_complexity)]
    fn gru_grad_buffers(&self, x: Var, w: &[Var; 4]) -> (Option<Vec<f64>>, [Option<Vec<f64>>; 4]) {
        let buf = |v: Var| self.needs(v).then(|| vec![0.0; self.value(v).len()]);
        (buf(x), [buf(w[0]), buf(w[1]), buf(w[2]), buf(w[3])])
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// One gradient per stored parameter; unreachable parameters get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| self.param(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
