//! Independent reference implementations used as test oracles. Everything
//! here works on plain nested vectors with direct loops and physically sliced
//! weights, sharing no kernel code with the library.
#![allow(dead_code)]

use dynslim::layers::{DecoderBlock, EncoderBlock};
use dynslim::tensor::{ParamId, ParamStore, Tensor};

pub type Signal = Vec<Vec<f64>>;

pub fn to_signal(t: &Tensor) -> Signal {
    let (c, n) = (t.dim(0), t.dim(1));
    (0..c).map(|i| t.data()[i * n..(i + 1) * n].to_vec()).collect()
}

pub fn from_signal(s: &Signal) -> Tensor {
    let c = s.len();
    let n = s[0].len();
    Tensor::new(&[c, n], s.concat()).unwrap()
}

pub fn max_diff(a: &Signal, b: &Signal) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// `⌈c·υ⌉` for the dyadic factors used in tests.
pub fn ceil_count(c: usize, uf: f64) -> usize {
    (c as f64 * uf).ceil() as usize
}

/// Weight entry `w[a][b][k]` of a rank-3 parameter.
pub fn w3(store: &ParamStore, id: ParamId, a: usize, b: usize, k: usize) -> f64 {
    let t = store.get(id);
    let (d1, d2) = (t.dim(1), t.dim(2));
    t.data()[(a * d1 + b) * d2 + k]
}

pub fn b1(store: &ParamStore, id: ParamId, i: usize) -> f64 {
    store.get(id).data()[i]
}

/// Physically sliced convolution weights `[rows.len(), cols, K]` and biases.
pub struct Sliced {
    pub w: Vec<Vec<Vec<f64>>>,
    pub b: Vec<f64>,
}

pub fn slice_conv(store: &ParamStore, w: ParamId, b: ParamId, rows: &[usize], cols: usize) -> Sliced {
    let k = store.get(w).dim(2);
    Sliced {
        w: rows
            .iter()
            .map(|&r| (0..cols).map(|c| (0..k).map(|kk| w3(store, w, r, c, kk)).collect()).collect())
            .collect(),
        b: rows.iter().map(|&r| b1(store, b, r)).collect(),
    }
}

pub fn conv(x: &Signal, p: &Sliced, stride: usize) -> Signal {
    let k = p.w[0][0].len();
    let t = x[0].len();
    let t_out = (t - k) / stride + 1;
    p.w.iter()
        .zip(&p.b)
        .map(|(wo, bo)| {
            (0..t_out)
                .map(|n| {
                    let mut acc = *bo;
                    for (xi, wi) in x.iter().zip(wo) {
                        for kk in 0..k {
                            acc += xi[n * stride + kk] * wi[kk];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Transposed conv with weights `w[in][out][k]`, full output length.
pub fn conv_transpose(x: &Signal, w: &[Vec<Vec<f64>>], b: &[f64], stride: usize) -> Signal {
    let k = w[0][0].len();
    let t = x[0].len();
    let len = (t - 1) * stride + k;
    let mut y: Signal = b.iter().map(|bo| vec![*bo; len]).collect();
    for (xi, wi) in x.iter().zip(w) {
        for (o, wo) in wi.iter().enumerate() {
            for n in 0..t {
                for kk in 0..k {
                    y[o][n * stride + kk] += xi[n] * wo[kk];
                }
            }
        }
    }
    y
}

pub fn relu(x: Signal) -> Signal {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn glu(x: &Signal) -> Signal {
    let n = x.len() / 2;
    (0..n)
        .map(|i| x[i].iter().zip(&x[n + i]).map(|(a, g)| a * sigmoid(*g)).collect())
        .collect()
}

pub fn pad_left(x: &Signal, n: usize) -> Signal {
    x.iter()
        .map(|r| std::iter::repeat(0.0).take(n).chain(r.iter().cloned()).collect())
        .collect()
}

/// Encoder block rebuilt from copies of the first `⌈h·υ⌉` filters.
pub fn encoder_oracle(store: &ParamStore, blk: &EncoderBlock, uf: f64, x: &Signal) -> Signal {
    let h = blk.hidden;
    let a = ceil_count(h, uf);
    let c_in = blk.conv.c_in;
    let rows: Vec<usize> = (0..a).collect();
    let first = slice_conv(store, blk.conv.weight, blk.conv.bias, &rows, c_in);
    let all: Vec<usize> = (0..2 * h).collect();
    let pw = slice_conv(store, blk.pointwise.weight, blk.pointwise.bias, &all, a);
    let xp = pad_left(x, blk.conv.kernel - blk.conv.stride);
    let hdn = relu(conv(&xp, &first, blk.conv.stride));
    glu(&conv(&hdn, &pw, 1))
}

/// Decoder block rebuilt from the paired pointwise rows and the first
/// `⌈h·υ⌉` transposed-conv input filters.
pub fn decoder_oracle(store: &ParamStore, blk: &DecoderBlock, uf: f64, x: &Signal, skip: &Signal) -> Signal {
    let per_frame = vec![uf; x[0].len()];
    decoder_oracle_per_frame(store, blk, &per_frame, x, skip)
}

/// Decoder oracle where input frame `f` runs at `ufs[f]`.
pub fn decoder_oracle_per_frame(store: &ParamStore, blk: &DecoderBlock, ufs: &[f64], x: &Signal, skip: &Signal) -> Signal {
    let h = blk.hidden;
    let t = x[0].len();
    let (k, s) = (blk.tconv.kernel, blk.tconv.stride);
    let c_out = blk.tconv.c_out;
    let sum: Signal = x
        .iter()
        .zip(skip)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    let mut y: Signal = (0..c_out).map(|o| vec![b1(store, blk.tconv.bias, o); t * s + k - s]).collect();
    for f in 0..t {
        let a = ceil_count(h, ufs[f]);
        let rows: Vec<usize> = (0..a).chain(h..h + a).collect();
        let pw = slice_conv(store, blk.pointwise.weight, blk.pointwise.bias, &rows, h);
        let col: Signal = sum.iter().map(|r| vec![r[f]]).collect();
        let g = glu(&conv(&col, &pw, 1));
        for i in 0..a {
            for o in 0..c_out {
                for kk in 0..k {
                    y[o][f * s + kk] += g[i][0] * w3(store, blk.tconv.weight, i, o, kk);
                }
            }
        }
    }
    let y: Signal = y.into_iter().map(|r| r[..t * s].to_vec()).collect();
    if blk.relu {
        relu(y)
    } else {
        y
    }
}

/// Encoder oracle where output frame `f` runs at `ufs[f]`.
pub fn encoder_oracle_per_frame(store: &ParamStore, blk: &EncoderBlock, ufs: &[f64], x: &Signal) -> Signal {
    let frames = ufs.len();
    let mut out: Signal = vec![vec![0.0; frames]; blk.hidden];
    for (f, &uf) in ufs.iter().enumerate() {
        let full = encoder_oracle(store, blk, uf, x);
        for (o, row) in out.iter_mut().zip(&full) {
            o[f] = row[f];
        }
    }
    out
}

/// Dense GRU with PyTorch-style gates on `[F, T]` input.
/// `w_ih`, `w_hh` are `[3F][F]` with (reset, update, candidate) row blocks.
pub struct DenseGru {
    pub w_ih: Vec<Vec<f64>>,
    pub w_hh: Vec<Vec<f64>>,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
}

impl DenseGru {
    /// Block-diagonal dense equivalent of grouped weights `[M, 3G, G]`.
    pub fn from_grouped(w_ih: &Tensor, w_hh: &Tensor, b_ih: &Tensor, b_hh: &Tensor) -> Self {
        let (m, g) = (w_ih.dim(0), w_ih.dim(2));
        let f = m * g;
        let mut wi = vec![vec![0.0; f]; 3 * f];
        let mut wh = vec![vec![0.0; f]; 3 * f];
        let mut bi = vec![0.0; 3 * f];
        let mut bh = vec![0.0; 3 * f];
        for grp in 0..m {
            for gate in 0..3 {
                for i in 0..g {
                    let row = gate * f + grp * g + i;
                    let src = grp * 3 * g + gate * g + i;
                    bi[row] = b_ih.data()[src];
                    bh[row] = b_hh.data()[src];
                    for c in 0..g {
                        wi[row][grp * g + c] = w_ih.data()[src * g + c];
                        wh[row][grp * g + c] = w_hh.data()[src * g + c];
                    }
                }
            }
        }
        DenseGru {
            w_ih: wi,
            w_hh: wh,
            b_ih: bi,
            b_hh: bh,
        }
    }

    pub fn run(&self, x: &Signal, h0: &[f64]) -> Signal {
        let f = h0.len();
        let t = x[0].len();
        let mut h = h0.to_vec();
        let mut y = vec![vec![0.0; t]; f];
        let mv = |w: &Vec<Vec<f64>>, b: &[f64], v: &[f64]| -> Vec<f64> {
            w.iter().zip(b).map(|(r, bb)| bb + r.iter().zip(v).map(|(p, q)| p * q).sum::<f64>()).collect()
        };
        for step in 0..t {
            let xs: Vec<f64> = x.iter().map(|r| r[step]).collect();
            let gi = mv(&self.w_ih, &self.b_ih, &xs);
            let gh = mv(&self.w_hh, &self.b_hh, &h);
            let mut hn = vec![0.0; f];
            for i in 0..f {
                let r = sigmoid(gi[i] + gh[i]);
                let z = sigmoid(gi[f + i] + gh[f + i]);
                let n = (gi[2 * f + i] + r * gh[2 * f + i]).tanh();
                hn[i] = (1.0 - z) * n + z * h[i];
                y[i][step] = hn[i];
            }
            h = hn;
        }
        y
    }
}
