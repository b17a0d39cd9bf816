//! Minimal reverse-mode autodiff over dense row-major tensors.
//!
//! Nodes are appended in evaluation order, so the backward sweep is a plain
//! reverse walk. Every op keeps whatever it needs from the forward pass.
//! Generic over the scalar so the same graph runs in `f32` for training and
//! `f64` for finite-difference checks.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Default
    + Debug
    + Send
    + Sync
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    /// `c = a·b + beta·c` for strided `a [m, k]`, `b [k, n]`, `c [m, n]`.
    fn gemm(m: usize, k: usize, n: usize, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>);
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

/// Borrowed matrix with row and column strides.
#[derive(Clone, Copy)]
pub struct Mat<'a, S> {
    pub data: &'a [S],
    pub rs: usize,
    pub cs: usize,
}

pub struct MatMut<'a, S> {
    pub data: &'a mut [S],
    pub rs: usize,
    pub cs: usize,
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn gemm(m: usize, k: usize, n: usize, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
                assert!(a.data.len() >= span(m, k, a.rs, a.cs), "gemm lhs bounds");
                assert!(b.data.len() >= span(k, n, b.rs, b.cs), "gemm rhs bounds");
                assert!(c.data.len() >= span(m, n, c.rs, c.cs), "gemm out bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the three extents were checked against the slice lengths above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr(),
                        b.rs as isize,
                        b.cs as isize,
                        beta,
                        c.data.as_mut_ptr(),
                        c.rs as isize,
                        c.cs as isize,
                    );
                }
            }
        }
    };
}
impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2 { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<S>, rstd: Vec<S> },
    Silu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    AddChannelBias { x: Var, v: Var },
    MulChannel { x: Var, g: Var },
    MeanTime { x: Var },
    ChannelContext { s: Var },
    Reshape { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var> },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    Kan { x: Var, coef: Var, base: Var, bias: Var, basis: Vec<S>, dbasis: Vec<S> },
    GatherRows { table: Var, idx: Vec<usize> },
    Blend { a: Var, b: Var, mask: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

/// Number of output positions of a 1-D convolution.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Uniform cubic B-spline basis value and derivative at local coordinate `v`
/// (support `[0, 4)`).
pub fn cubic_bspline(v: f64) -> (f64, f64) {
    if !(0.0..4.0).contains(&v) {
        (0.0, 0.0)
    } else if v < 1.0 {
        (v * v * v / 6.0, v * v / 2.0)
    } else if v < 2.0 {
        (
            (-3.0 * v * v * v + 12.0 * v * v - 12.0 * v + 4.0) / 6.0,
            (-9.0 * v * v + 24.0 * v - 12.0) / 6.0,
        )
    } else if v < 3.0 {
        (
            (3.0 * v * v * v - 24.0 * v * v + 60.0 * v - 44.0) / 6.0,
            (9.0 * v * v - 48.0 * v + 60.0) / 6.0,
        )
    } else {
        let r = 4.0 - v;
        (r * r * r / 6.0, -r * r / 2.0)
    }
}

/// Uniform cubic spline grid over `[lo, hi]` with `intervals` cells,
/// giving `intervals + 3` basis functions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplineGrid {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
}

impl SplineGrid {
    pub fn n_basis(&self) -> usize {
        self.intervals + 3
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    /// Maps a pre-activation into the open grid range with `half * tanh(x / half)`.
    pub fn squash(&self, x: f64) -> (f64, f64) {
        let mid = 0.5 * (self.lo + self.hi);
        let half = 0.5 * (self.hi - self.lo);
        let th = (x / half).tanh();
        (mid + half * th, 1.0 - th * th)
    }

    /// Basis values and their derivatives w.r.t. the squashed coordinate.
    pub fn eval(&self, u: f64, values: &mut [f64], derivs: &mut [f64]) {
        let h = self.step();
        for j in 0..self.n_basis() {
            let knot = self.lo + (j as f64 - 3.0) * h;
            let (b, db) = cubic_bspline((u - knot) / h);
            values[j] = b;
            derivs[j] = db / h;
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `x [B, Ci, L]`, `w [Co, Ci, K]`, `b [Co]` → `[B, Co, Lout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (bsz, ci, len) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv input channels");
        let lout = conv_out_len(len, k, stride, pad);
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![S::zero(); bsz * co * lout];
        let rows = ci * k;
        let mut cols = vec![S::zero(); rows * lout];
        for bi in 0..bsz {
            im2col(&xv[bi * ci * len..(bi + 1) * ci * len], ci, len, k, stride, pad, lout, &mut cols);
            let ob = &mut out[bi * co * lout..(bi + 1) * co * lout];
            for (o, row) in ob.chunks_mut(lout).enumerate() {
                row.fill(bv[o]);
            }
            S::gemm(
                co,
                rows,
                lout,
                Mat { data: wv, rs: rows, cs: 1 },
                Mat { data: &cols, rs: lout, cs: 1 },
                S::one(),
                MatMut { data: ob, rs: lout, cs: 1 },
            );
        }
        self.push(
            Tensor::new(vec![bsz, co, lout], out),
            Op::Conv1d { x, w, b, stride, pad },
        )
    }

    /// Nearest-neighbour ×2 along time.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let xv = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(xv.len() * 2);
        for v in xv {
            out.push(*v);
            out.push(*v);
        }
        self.push(Tensor::new(vec![s[0], s[1], s[2] * 2], out), Op::Upsample2 { x })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (bsz, c, len) = (s[0], s[1], s[2]);
        assert_eq!(c % groups, 0, "{c} channels into {groups} groups");
        let per = c / groups * len;
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let bt = &self.nodes[beta.0].value.data;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); bsz * groups];
        let mut out = vec![S::zero(); xv.len()];
        let eps = S::from_f64(1e-5);
        let n = S::from_f64(per as f64);
        for bi in 0..bsz {
            for gi in 0..groups {
                let start = (bi * c + gi * (c / groups)) * len;
                let chunk = &xv[start..start + per];
                let mean = chunk.iter().fold(S::zero(), |a, &v| a + v) / n;
                let var = chunk.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
                let r = S::one() / (var + eps).sqrt();
                rstd[bi * groups + gi] = r;
                for (j, &v) in chunk.iter().enumerate() {
                    let ch = gi * (c / groups) + j / len;
                    let xh = (v - mean) * r;
                    xhat[start + j] = xh;
                    out[start + j] = xh * g[ch] + bt[ch];
                }
            }
        }
        self.push(
            Tensor::new(s, out),
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd },
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect());
        self.push(out, op)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape.clone(), data);
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape.clone(), data);
        self.push(out, Op::Mul { a, b })
    }

    /// `x [B, C, L] + v [B, C]` broadcast over time.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &s[..2], "bias shape");
        let len = s[2];
        let xv = &self.nodes[x.0].value.data;
        let vv = &self.nodes[v.0].value.data;
        let data = xv.iter().enumerate().map(|(i, &a)| a + vv[i / len]).collect();
        self.push(Tensor::new(s, data), Op::AddChannelBias { x, v })
    }

    /// `x [B, C, L] * g [B, C]` broadcast over time.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(g), &s[..2], "gate shape");
        let len = s[2];
        let xv = &self.nodes[x.0].value.data;
        let gv = &self.nodes[g.0].value.data;
        let data = xv.iter().enumerate().map(|(i, &a)| a * gv[i / len]).collect();
        self.push(Tensor::new(s, data), Op::MulChannel { x, g })
    }

    /// Adaptive average pooling to one step: `[B, C, L]` → `[B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let len = s[2];
        let inv = S::from_f64(1.0 / len as f64);
        let data = self.nodes[x.0]
            .value
            .data
            .chunks(len)
            .map(|row| row.iter().fold(S::zero(), |a, &v| a + v) * inv)
            .collect();
        self.push(Tensor::new(vec![s[0], s[1]], data), Op::MeanTime { x })
    }

    /// `s [B, C]` → `[B*C, 2]` rows of (own statistic, mean over channels).
    pub fn channel_context(&mut self, s: Var) -> Var {
        let sh = self.shape(s).to_vec();
        let (bsz, c) = (sh[0], sh[1]);
        let sv = &self.nodes[s.0].value.data;
        let inv = S::from_f64(1.0 / c as f64);
        let mut data = Vec::with_capacity(bsz * c * 2);
        for bi in 0..bsz {
            let row = &sv[bi * c..(bi + 1) * c];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv;
            for &v in row {
                data.push(v);
                data.push(mean);
            }
        }
        self.push(Tensor::new(vec![bsz * c, 2], data), Op::ChannelContext { s })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(t.len(), shape.iter().product::<usize>(), "reshape size");
        let out = Tensor::new(shape.to_vec(), t.data.clone());
        self.push(out, Op::Reshape { x })
    }

    /// `x [B, I]`, `w [O, I]`, `b [O]` → `[B, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (bsz, inp, outp) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], inp, "linear input width");
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out: Vec<S> = (0..bsz).flat_map(|_| bv.iter().copied()).collect();
        S::gemm(
            bsz,
            inp,
            outp,
            Mat { data: xv, rs: inp, cs: 1 },
            Mat { data: wv, rs: 1, cs: inp },
            S::one(),
            MatMut { data: &mut out, rs: outp, cs: 1 },
        );
        self.push(Tensor::new(vec![bsz, outp], out), Op::Linear { x, w, b })
    }

    /// Concatenation along axis 1 of tensors agreeing on every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!((s[0], &s[2..]), (first[0], &first[2..]), "concat shapes");
            total += s[1];
        }
        let mut data = Vec::with_capacity(first[0] * total * inner);
        for bi in 0..first[0] {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let block = t.shape[1] * inner;
                data.extend_from_slice(&t.data[bi * block..(bi + 1) * block]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        self.push(Tensor::new(shape, data), Op::Concat { parts: parts.to_vec() })
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shapes");
        let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let sum = av.iter().zip(bv).fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let v = sum / S::from_f64(av.len() as f64);
        self.push(Tensor::scalar(v), Op::Mse { a, b })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        let (bsz, k) = (s[0], s[1]);
        assert_eq!(labels.len(), bsz, "one label per row");
        let lv = &self.nodes[logits.0].value.data;
        let mut probs = Vec::with_capacity(bsz * k);
        let mut total = S::zero();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv[bi * k..(bi + 1) * k];
            let (p, lse) = softmax_row(row);
            total += lse - row[label];
            probs.extend(p);
        }
        let v = total / S::from_f64(bsz as f64);
        self.push(
            Tensor::scalar(v),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// KAN layer: `y[b,o] = bias[o] + Σ_i base[o,i]·x[b,i] + Σ_i Σ_j coef[o,i,j]·B_j(squash(x[b,i]))`.
    pub fn kan(&mut self, x: Var, coef: Var, base: Var, bias: Var, grid: SplineGrid) -> Var {
        let (xs, cs) = (self.shape(x).to_vec(), self.shape(coef).to_vec());
        let (bsz, inp) = (xs[0], xs[1]);
        let (outp, nb) = (cs[0], cs[2]);
        assert_eq!((cs[1], nb), (inp, grid.n_basis()), "kan coefficient shape");
        let xv = &self.nodes[x.0].value.data;
        let cv = &self.nodes[coef.0].value.data;
        let bw = &self.nodes[base.0].value.data;
        let bv = &self.nodes[bias.0].value.data;
        let mut basis = vec![S::zero(); bsz * inp * nb];
        let mut dbasis = vec![S::zero(); bsz * inp * nb];
        let mut vals = vec![0.0; nb];
        let mut ders = vec![0.0; nb];
        for bi in 0..bsz {
            for i in 0..inp {
                let (u, du) = grid.squash(xv[bi * inp + i].to_f64());
                grid.eval(u, &mut vals, &mut ders);
                let off = (bi * inp + i) * nb;
                for j in 0..nb {
                    basis[off + j] = S::from_f64(vals[j]);
                    dbasis[off + j] = S::from_f64(ders[j] * du);
                }
            }
        }
        let mut out = Vec::with_capacity(bsz * outp);
        for bi in 0..bsz {
            let xr = &xv[bi * inp..(bi + 1) * inp];
            let br = &basis[bi * inp * nb..(bi + 1) * inp * nb];
            for o in 0..outp {
                let lin = dot(xr, &bw[o * inp..(o + 1) * inp]);
                let spl = dot(br, &cv[o * inp * nb..(o + 1) * inp * nb]);
                out.push(bv[o] + lin + spl);
            }
        }
        self.push(
            Tensor::new(vec![bsz, outp], out),
            Op::Kan { x, coef, base, bias, basis, dbasis },
        )
    }

    /// Rows of `table [N, D]` selected by `idx` → `[idx.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        let d = s[1];
        let tv = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(Tensor::new(vec![idx.len(), d], data), Op::GatherRows { table, idx: idx.to_vec() })
    }

    /// Row-wise `mask·a + (1 − mask)·b` for 2-D `a`, `b`.
    pub fn blend(&mut self, a: Var, b: Var, mask: &[S]) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(self.shape(b), &s[..], "blend shapes");
        assert_eq!(mask.len(), s[0], "one mask value per row");
        let d = s[1];
        let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let data = av
            .iter()
            .zip(bv)
            .enumerate()
            .map(|(i, (&x, &y))| {
                let m = mask[i / d];
                m * x + (S::one() - m) * y
            })
            .collect();
        self.push(Tensor::new(s, data), Op::Blend { a, b, mask: mask.to_vec() })
    }

    /// Gradients of the scalar `root` w.r.t. every node (None where unreached).
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one(); self.nodes[root.0].value.len()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, stride, pad } => {
                let (xs, ws) = (val(*x).shape.clone(), val(*w).shape.clone());
                let (bsz, ci, len) = (xs[0], xs[1], xs[2]);
                let (co, k) = (ws[0], ws[2]);
                let lout = node.value.shape[2];
                let (stride, pad) = (*stride, *pad);
                let xv = &val(*x).data;
                let wv = &val(*w).data;
                let mut dx = vec![S::zero(); xv.len()];
                let mut dw = vec![S::zero(); wv.len()];
                let mut db = vec![S::zero(); co];
                let rows = ci * k;
                let mut cols = vec![S::zero(); rows * lout];
                let mut dcols = vec![S::zero(); rows * lout];
                for bi in 0..bsz {
                    let gb = &g[bi * co * lout..(bi + 1) * co * lout];
                    for (o, row) in gb.chunks(lout).enumerate() {
                        db[o] += row.iter().fold(S::zero(), |a, &v| a + v);
                    }
                    im2col(&xv[bi * ci * len..(bi + 1) * ci * len], ci, len, k, stride, pad, lout, &mut cols);
                    // dw += g_b · colsᵀ
                    S::gemm(
                        co,
                        lout,
                        rows,
                        Mat { data: gb, rs: lout, cs: 1 },
                        Mat { data: &cols, rs: 1, cs: lout },
                        S::one(),
                        MatMut { data: &mut dw, rs: rows, cs: 1 },
                    );
                    // dcols = wᵀ · g_b
                    S::gemm(
                        rows,
                        co,
                        lout,
                        Mat { data: wv, rs: 1, cs: rows },
                        Mat { data: gb, rs: lout, cs: 1 },
                        S::zero(),
                        MatMut { data: &mut dcols, rs: lout, cs: 1 },
                    );
                    col2im(&dcols, ci, len, k, stride, pad, lout, &mut dx[bi * ci * len..(bi + 1) * ci * len]);
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Upsample2 { x } => {
                let dx = g.chunks(2).map(|p| p[0] + p[1]).collect();
                accumulate(grads, *x, dx);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let s = &node.value.shape;
                let (bsz, c, len) = (s[0], s[1], s[2]);
                let cpg = c / groups;
                let per = cpg * len;
                let gv = &val(*gamma).data;
                let mut dx = vec![S::zero(); g.len()];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let n = S::from_f64(per as f64);
                for bi in 0..bsz {
                    for gi in 0..*groups {
                        let start = (bi * c + gi * cpg) * len;
                        let r = rstd[bi * groups + gi];
                        let (mut sum_dxh, mut sum_dxh_xh) = (S::zero(), S::zero());
                        for j in 0..per {
                            let ch = gi * cpg + j / len;
                            let gg = g[start + j];
                            let xh = xhat[start + j];
                            dgamma[ch] += gg * xh;
                            dbeta[ch] += gg;
                            let dxh = gg * gv[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        for j in 0..per {
                            let ch = gi * cpg + j / len;
                            let dxh = g[start + j] * gv[ch];
                            let xh = xhat[start + j];
                            dx[start + j] = r * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Silu { x } => {
                let dx = val(*x)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| {
                        let s = sigmoid(v);
                        gg * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node.value.data.iter().zip(g).map(|(&y, &gg)| gg * y * (S::one() - y)).collect();
                accumulate(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = node.value.data.iter().zip(g).map(|(&y, &gg)| gg * (S::one() - y * y)).collect();
                accumulate(grads, *x, dx);
            }
            Op::Scale { x, c } => {
                let dx = g.iter().map(|&gg| gg * *c).collect();
                accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                accumulate(grads, *a, g.iter().zip(bv).map(|(&gg, &y)| gg * y).collect());
                accumulate(grads, *b, g.iter().zip(av).map(|(&gg, &x)| gg * x).collect());
            }
            Op::AddChannelBias { x, v } => {
                let len = node.value.shape[2];
                let dv = g.chunks(len).map(|r| r.iter().fold(S::zero(), |a, &x| a + x)).collect();
                accumulate(grads, *x, g.to_vec());
                accumulate(grads, *v, dv);
            }
            Op::MulChannel { x, g: gate } => {
                let len = node.value.shape[2];
                let xv = &val(*x).data;
                let gv = &val(*gate).data;
                let dx = g.iter().enumerate().map(|(i, &gg)| gg * gv[i / len]).collect();
                let dg = g
                    .chunks(len)
                    .zip(xv.chunks(len))
                    .map(|(gr, xr)| dot(gr, xr))
                    .collect();
                accumulate(grads, *x, dx);
                accumulate(grads, *gate, dg);
            }
            Op::MeanTime { x } => {
                let len = val(*x).shape[2];
                let inv = S::from_f64(1.0 / len as f64);
                let dx = g.iter().flat_map(|&gg| std::iter::repeat_n(gg * inv, len)).collect();
                accumulate(grads, *x, dx);
            }
            Op::ChannelContext { s } => {
                let sh = &val(*s).shape;
                let (bsz, c) = (sh[0], sh[1]);
                let inv = S::from_f64(1.0 / c as f64);
                let mut ds = vec![S::zero(); bsz * c];
                for bi in 0..bsz {
                    let mean_grad = (0..c).fold(S::zero(), |a, ci| a + g[(bi * c + ci) * 2 + 1]) * inv;
                    for ci in 0..c {
                        ds[bi * c + ci] = g[(bi * c + ci) * 2] + mean_grad;
                    }
                }
                accumulate(grads, *s, ds);
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::Linear { x, w, b } => {
                let (xs, ws) = (&val(*x).shape, &val(*w).shape);
                let (bsz, inp, outp) = (xs[0], xs[1], ws[0]);
                let xv = &val(*x).data;
                let wv = &val(*w).data;
                let mut dx = vec![S::zero(); xv.len()];
                let mut dw = vec![S::zero(); wv.len()];
                let mut db = vec![S::zero(); outp];
                for row in g.chunks(outp) {
                    for (d, &gg) in db.iter_mut().zip(row) {
                        *d += gg;
                    }
                }
                // dx = g · w, dw = gᵀ · x
                S::gemm(
                    bsz,
                    outp,
                    inp,
                    Mat { data: g, rs: outp, cs: 1 },
                    Mat { data: wv, rs: inp, cs: 1 },
                    S::zero(),
                    MatMut { data: &mut dx, rs: inp, cs: 1 },
                );
                S::gemm(
                    outp,
                    bsz,
                    inp,
                    Mat { data: g, rs: 1, cs: outp },
                    Mat { data: xv, rs: inp, cs: 1 },
                    S::zero(),
                    MatMut { data: &mut dw, rs: inp, cs: 1 },
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Concat { parts } => {
                let s = &node.value.shape;
                let inner: usize = s[2..].iter().product();
                let mut offset = 0;
                let widths: Vec<usize> = parts.iter().map(|p| val(*p).shape[1]).collect();
                let total: usize = widths.iter().sum();
                for (p, &wd) in parts.iter().zip(&widths) {
                    let mut d = Vec::with_capacity(s[0] * wd * inner);
                    for bi in 0..s[0] {
                        let start = (bi * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + wd * inner]);
                    }
                    accumulate(grads, *p, d);
                    offset += wd;
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                let c = g[0] * S::from_f64(2.0 / av.len() as f64);
                let da: Vec<S> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                let db = da.iter().map(|&v| -v).collect();
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape[1];
                let c = g[0] / S::from_f64(labels.len() as f64);
                let mut d: Vec<S> = probs.iter().map(|&p| p * c).collect();
                for (bi, &l) in labels.iter().enumerate() {
                    d[bi * k + l] -= c;
                }
                accumulate(grads, *logits, d);
            }
            Op::Kan { x, coef, base, bias, basis, dbasis } => {
                let (xs, cs) = (&val(*x).shape, &val(*coef).shape);
                let (bsz, inp) = (xs[0], xs[1]);
                let (outp, nb) = (cs[0], cs[2]);
                let xv = &val(*x).data;
                let cv = &val(*coef).data;
                let bw = &val(*base).data;
                let mut dx = vec![S::zero(); xv.len()];
                let mut dc = vec![S::zero(); cv.len()];
                let mut dbase = vec![S::zero(); bw.len()];
                let mut dbias = vec![S::zero(); outp];
                for bi in 0..bsz {
                    let br = &basis[bi * inp * nb..(bi + 1) * inp * nb];
                    let dbr = &dbasis[bi * inp * nb..(bi + 1) * inp * nb];
                    for o in 0..outp {
                        let gg = g[bi * outp + o];
                        dbias[o] += gg;
                        let crow = &cv[o * inp * nb..(o + 1) * inp * nb];
                        let dcrow = &mut dc[o * inp * nb..(o + 1) * inp * nb];
                        for (d, &bv) in dcrow.iter_mut().zip(br) {
                            *d += gg * bv;
                        }
                        for i in 0..inp {
                            dbase[o * inp + i] += gg * xv[bi * inp + i];
                            let spline_slope = dot(&crow[i * nb..(i + 1) * nb], &dbr[i * nb..(i + 1) * nb]);
                            dx[bi * inp + i] += gg * (bw[o * inp + i] + spline_slope);
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *coef, dc);
                accumulate(grads, *base, dbase);
                accumulate(grads, *bias, dbias);
            }
            Op::GatherRows { table, idx } => {
                let d = val(*table).shape[1];
                let mut dt = vec![S::zero(); val(*table).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Blend { a, b, mask } => {
                let d = node.value.shape[1];
                let da = g.iter().enumerate().map(|(i, &gg)| gg * mask[i / d]).collect();
                let db = g.iter().enumerate().map(|(i, &gg)| gg * (S::one() - mask[i / d])).collect();
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
        }
    }
}

pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, d: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// `cols[(i*k + kk), t] = x[i, t*stride + kk - pad]`, zero outside the signal.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(x: &[S], ci: usize, len: usize, k: usize, stride: usize, pad: usize, lout: usize, cols: &mut [S]) {
    for i in 0..ci {
        let xrow = &x[i * len..(i + 1) * len];
        for kk in 0..k {
            let crow = &mut cols[(i * k + kk) * lout..(i * k + kk + 1) * lout];
            let (t0, t1) = valid_range(len, lout, kk, stride, pad);
            crow[..t0].fill(S::zero());
            crow[t1..].fill(S::zero());
            if stride == 1 {
                let off = t0 + kk - pad;
                crow[t0..t1].copy_from_slice(&xrow[off..off + (t1 - t0)]);
            } else {
                for t in t0..t1 {
                    crow[t] = xrow[t * stride + kk - pad];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(cols: &[S], ci: usize, len: usize, k: usize, stride: usize, pad: usize, lout: usize, dx: &mut [S]) {
    for i in 0..ci {
        let drow = &mut dx[i * len..(i + 1) * len];
        for kk in 0..k {
            let crow = &cols[(i * k + kk) * lout..(i * k + kk + 1) * lout];
            let (t0, t1) = valid_range(len, lout, kk, stride, pad);
            for t in t0..t1 {
                drow[t * stride + kk - pad] += crow[t];
            }
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Output positions `t` for which input index `t*stride + k - pad` is in range.
fn valid_range(len: usize, lout: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let t0 = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest t with t*stride + k - pad <= len - 1
    let limit = len + pad - 1;
    let t1 = if limit < k { 0 } else { ((limit - k) / stride + 1).min(lout) };
    (t0.min(t1), t1)
}

/// Numerically stable softmax of one row plus its log-sum-exp.
pub fn softmax_row<S: Scalar>(row: &[S]) -> (Vec<S>, S) {
    let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(S::zero(), |a, &v| a + v);
    (exps.iter().map(|&e| e / sum).collect(), max + sum.ln())
}
