//! A small reverse-mode tape.
//!
//! Every operation computes its value eagerly and records just enough to run
//! its adjoint later. Nodes built only from constants carry no gradient and
//! are skipped during [`Tape::backward`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{ShapeFmt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ragged neighbor lists in compressed form: the neighbors of center `i` are
/// `indices[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Csr {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    pub fn centers(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    /// The center owning each entry of `indices`.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.indices.len());
        for i in 0..self.centers() {
            out.extend(core::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i]));
        }
        out
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleBy(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    Sqrt(usize),
    Square(usize),
    Recip(usize),
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    AddCol(usize, usize),
    MulCol(usize, usize),
    RowMean(usize),
    Softmax(usize),
    Column(usize, usize),
    ConcatCols(usize, usize),
    BroadcastRows(usize),
    GatherRows(usize, Vec<usize>),
    SegmentMean(usize, Vec<usize>),
    SegmentSum(usize, Vec<usize>),
    SegmentMax(usize, Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
    },
    MaxPool2(usize, Vec<usize>),
    Upsample2(usize),
    Unfold {
        x: usize,
        p: usize,
        s: usize,
    },
    FoldMean {
        x: usize,
        p: usize,
        s: usize,
        inv_count: Vec<f64>,
    },
    Window {
        x: usize,
        p: usize,
        s: usize,
        scale: usize,
    },
    NodesToPixels {
        x: usize,
        channels: usize,
    },
    PixelsToNodes {
        x: usize,
        positions: usize,
    },
    HeadDot {
        z: usize,
        a: usize,
    },
    Attention {
        left: usize,
        right: usize,
        z: usize,
        nbrs: Csr,
        weights: Vec<f64>,
        dh: usize,
        slope: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not require one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn expect_shape(context: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(context, ShapeFmt(shape), ShapeFmt(t.shape())));
    }
    Ok(())
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

/// Softmax over `LeakyReLU(left[i,h] + right[j,h])` for every center `i`,
/// head `h` and neighbor `j`. Weights are laid out `[entry, head]` following
/// the CSR entry order.
pub(crate) fn attention_weights(left: &[f64], right: &[f64], heads: usize, nbrs: &Csr, slope: f64) -> Vec<f64> {
    let mut weights = vec![0.0; nbrs.indices.len() * heads];
    for i in 0..nbrs.centers() {
        let (lo, hi) = (nbrs.offsets[i], nbrs.offsets[i + 1]);
        for h in 0..heads {
            let mut max = f64::NEG_INFINITY;
            for e in lo..hi {
                let j = nbrs.indices[e];
                let l = leaky(left[i * heads + h] + right[j * heads + h], slope);
                weights[e * heads + h] = l;
                max = max.max(l);
            }
            let mut sum = 0.0;
            for e in lo..hi {
                let v = libm::exp(weights[e * heads + h] - max);
                weights[e * heads + h] = v;
                sum += v;
            }
            for e in lo..hi {
                weights[e * heads + h] /= sum;
            }
        }
    }
    weights
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        let op = if grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: usize) -> bool {
        self.nodes[v].grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(context, ShapeFmt(sa), ShapeFmt(sb)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let g = self.g(a.0) || self.g(b.0);
        Ok(self.push(v, Op::Add(a.0, b.0), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let g = self.g(a.0) || self.g(b.0);
        Ok(self.push(v, Op::Sub(a.0, b.0), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let g = self.g(a.0) || self.g(b.0);
        Ok(self.push(v, Op::Mul(a.0, b.0), g))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let v = self.value(a).map(|x| x * f);
        let g = self.g(a.0);
        self.push(v, Op::Scale(a.0, f), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let g = self.g(a.0);
        self.push(v, Op::AddScalar(a.0), g)
    }

    /// `a * s` where `s` holds a single element.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", "1 element", ShapeFmt(self.value(s).shape())));
        }
        let f = self.value(s).data()[0];
        let v = self.value(a).map(|x| x * f);
        let g = self.g(a.0) || self.g(s.0);
        Ok(self.push(v, Op::ScaleBy(a.0, s.0), g))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.g(a.0);
        self.push(v, Op::Relu(a.0), g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| leaky(x, slope));
        let g = self.g(a.0);
        self.push(v, Op::LeakyRelu(a.0, slope), g)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let g = self.g(a.0);
        self.push(v, Op::Clamp(a.0, lo, hi), g)
    }

    /// Square root; the adjoint at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| libm::sqrt(x.max(0.0)));
        let g = self.g(a.0);
        self.push(v, Op::Sqrt(a.0), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let g = self.g(a.0);
        self.push(v, Op::Square(a.0), g)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let g = self.g(a.0);
        self.push(v, Op::Recip(a.0), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.g(a.0);
        self.push(v, Op::SumAll(a.0), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let g = self.g(a.0);
        self.push(v, Op::MeanAll(a.0), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let g = self.g(a.0);
        Ok(self.push(v, Op::Reshape(a.0), g))
    }

    /// `x · wᵀ (+ b)` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, win) = self.value(w).dims2()?;
        if win != din {
            return Err(Error::shape(
                "linear",
                format!("weight with {din} inputs"),
                ShapeFmt(self.value(w).shape()),
            ));
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            expect_shape("linear bias", self.value(b), &[dout])?;
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let g = self.g(x.0) || self.g(w.0) || b.is_some_and(|b| self.g(b.0));
        let v = Tensor::new(&[n, dout], out)?;
        Ok(self.push(
            v,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            g,
        ))
    }

    /// `x[r, :] + v[r]` for `x: [rows, cols]`, `v: [rows]`.
    pub fn add_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        expect_shape("add_col", self.value(v), &[r])?;
        let vv = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + vv[i / c])
            .collect();
        let g = self.g(x.0) || self.g(v.0);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::AddCol(x.0, v.0), g))
    }

    /// `x[r, :] * v[r]` for `x: [rows, cols]`, `v: [rows]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        expect_shape("mul_col", self.value(v), &[r])?;
        let vv = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * vv[i / c])
            .collect();
        let g = self.g(x.0) || self.g(v.0);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::MulCol(x.0, v.0), g))
    }

    /// Mean of each row: `[rows, cols] -> [rows]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        let g = self.g(x.0);
        Ok(self.push(Tensor::new(&[r], data)?, Op::RowMean(x.0), g))
    }

    /// Row-wise softmax of `[rows, cols]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let g = self.g(x.0);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::Softmax(x.0), g))
    }

    /// Column `j` of `[rows, cols]` as `[rows]`.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if j >= c {
            return Err(Error::shape("column", format!("index < {c}"), j));
        }
        let data = self.value(x).data().chunks_exact(c).map(|row| row[j]).collect();
        let g = self.g(x.0);
        Ok(self.push(Tensor::new(&[r], data)?, Op::Column(x.0, j), g))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::shape("concat_cols", ra, rb));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for (x, y) in self
            .value(a)
            .data()
            .chunks_exact(ca.max(1))
            .zip(self.value(b).data().chunks_exact(cb.max(1)))
        {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        let g = self.g(a.0) || self.g(b.0);
        Ok(self.push(Tensor::new(&[ra, ca + cb], data)?, Op::ConcatCols(a.0, b.0), g))
    }

    /// Repeats a vector `[d]` as `n` rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let t = self.value(v);
        if t.shape().len() != 1 {
            return Err(Error::shape("broadcast_rows", "rank-1", ShapeFmt(t.shape())));
        }
        let d = t.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let g = self.g(v.0);
        Ok(self.push(Tensor::new(&[n, d], data)?, Op::BroadcastRows(v.0), g))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("index < {r}"), bad));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let g = self.g(x.0);
        Ok(self.push(
            Tensor::new(&[idx.len(), c], data)?,
            Op::GatherRows(x.0, idx.to_vec()),
            g,
        ))
    }

    fn check_segments(&self, context: &'static str, x: Var, offsets: &[usize]) -> Result<(usize, usize)> {
        let (r, c) = self.value(x).dims2()?;
        if offsets.first() != Some(&0) || offsets.last() != Some(&r) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::shape(
                context,
                format!("monotone offsets from 0 to {r}"),
                "other",
            ));
        }
        Ok((r, c))
    }

    fn segment_reduce(&mut self, x: Var, offsets: &[usize], mean: bool) -> Result<Var> {
        let (_, c) = self.check_segments("segment reduction", x, offsets)?;
        let groups = offsets.len() - 1;
        let src = self.value(x).data();
        let mut data = vec![0.0; groups * c];
        for gi in 0..groups {
            let (lo, hi) = (offsets[gi], offsets[gi + 1]);
            let dst = &mut data[gi * c..(gi + 1) * c];
            for r in lo..hi {
                for (d, s) in dst.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                    *d += s;
                }
            }
            if mean && hi > lo {
                let inv = 1.0 / (hi - lo) as f64;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let g = self.g(x.0);
        let op = if mean {
            Op::SegmentMean(x.0, offsets.to_vec())
        } else {
            Op::SegmentSum(x.0, offsets.to_vec())
        };
        Ok(self.push(Tensor::new(&[groups, c], data)?, op, g))
    }

    /// Mean over consecutive row groups `offsets[g]..offsets[g+1]`; empty groups give zeros.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        self.segment_reduce(x, offsets, true)
    }

    pub fn segment_sum(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        self.segment_reduce(x, offsets, false)
    }

    /// Elementwise max over row groups; empty groups give zeros.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (_, c) = self.check_segments("segment_max", x, offsets)?;
        let groups = offsets.len() - 1;
        let src = self.value(x).data();
        let mut data = vec![0.0; groups * c];
        let mut arg = vec![usize::MAX; groups * c];
        for gi in 0..groups {
            for r in offsets[gi]..offsets[gi + 1] {
                for j in 0..c {
                    let v = src[r * c + j];
                    let slot = gi * c + j;
                    if arg[slot] == usize::MAX || v > data[slot] {
                        data[slot] = v;
                        arg[slot] = r * c + j;
                    }
                }
            }
        }
        let g = self.g(x.0);
        Ok(self.push(Tensor::new(&[groups, c], data)?, Op::SegmentMax(x.0, arg), g))
    }

    /// Stride-1 "same" convolution with reflection padding.
    /// `x: [c, h, w]`, `w: [o, c, k, k]` (odd `k`), `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::shape(
                "conv2d weight",
                format!("(o,{c},k,k) with odd k"),
                ShapeFmt(&ws),
            ));
        }
        let (o, k) = (ws[0], ws[2]);
        expect_shape("conv2d bias", self.value(b), &[o])?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            (c, h, wd),
            self.value(w).data(),
            self.value(b).data(),
            o,
            k,
        );
        let g = self.g(x.0) || self.g(w.0) || self.g(b.0);
        Ok(self.push(Tensor::new(&[o, h, wd], out)?, Op::Conv2d { x: x.0, w: w.0, b: b.0 }, g))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h < 2 || w < 2 {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min: 2,
            });
        }
        let (out, arg) = kernels::max_pool2(self.value(x).data(), (c, h, w));
        let g = self.g(x.0);
        Ok(self.push(Tensor::new(&[c, h / 2, w / 2], out)?, Op::MaxPool2(x.0, arg), g))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let out = kernels::upsample2_forward(self.value(x).data(), (c, h, w));
        let g = self.g(x.0);
        Ok(self.push(Tensor::new(&[c, 2 * h, 2 * w], out)?, Op::Upsample2(x.0), g))
    }

    fn check_window(&self, x: Var, p: usize, s: usize) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.value(x).dims3()?;
        if p == 0 || s == 0 {
            return Err(Error::Parameter(format!(
                "patch side {p} and stride {s} must be positive"
            )));
        }
        if p > h || p > w {
            return Err(Error::PatchTooLarge {
                patch: p,
                height: h,
                width: w,
            });
        }
        Ok((c, h, w))
    }

    /// Sliding-window patches `[c, h, w] -> [n, c·p·p]`.
    pub fn unfold(&mut self, x: Var, p: usize, s: usize) -> Result<Var> {
        let (c, h, w) = self.check_window(x, p, s)?;
        let n = kernels::grid_len(h, p, s) * kernels::grid_len(w, p, s);
        let out = kernels::unfold(self.value(x).data(), (c, h, w), p, s);
        let g = self.g(x.0);
        Ok(self.push(Tensor::new(&[n, c * p * p], out)?, Op::Unfold { x: x.0, p, s }, g))
    }

    /// Overlap-averaged recomposition `[n, c·p·p] -> [c, h, w]`.
    pub fn fold_mean(&mut self, x: Var, (c, h, w): (usize, usize, usize), p: usize, s: usize) -> Result<Var> {
        if p == 0 || s == 0 || p > h || p > w {
            return Err(Error::Composition(format!(
                "patch side {p} / stride {s} invalid for a {h}x{w} map"
            )));
        }
        let n = kernels::grid_len(h, p, s) * kernels::grid_len(w, p, s);
        expect_shape("fold_mean input", self.value(x), &[n, c * p * p])?;
        let out = kernels::fold_mean(self.value(x).data(), (c, h, w), p, s);
        let inv_count: Vec<f64> = kernels::coverage(h, w, p, s)
            .into_iter()
            .map(|n| if n > 0.0 { 1.0 / n } else { 0.0 })
            .collect();
        let g = self.g(x.0);
        Ok(self.push(
            Tensor::new(&[c, h, w], out)?,
            Op::FoldMean {
                x: x.0,
                p,
                s,
                inv_count,
            },
            g,
        ))
    }

    /// Windows of side `scale` around each base `p`-grid location, resized to `p × p`.
    pub fn window_patches(&mut self, x: Var, p: usize, s: usize, scale: usize) -> Result<Var> {
        let (c, h, w) = self.check_window(x, p, s)?;
        if scale == 0 || scale > h || scale > w {
            return Err(Error::PatchTooLarge {
                patch: scale,
                height: h,
                width: w,
            });
        }
        let n = kernels::grid_len(h, p, s) * kernels::grid_len(w, p, s);
        let out = kernels::window_patches(self.value(x).data(), (c, h, w), p, s, scale);
        let g = self.g(x.0);
        Ok(self.push(
            Tensor::new(&[n, c * p * p], out)?,
            Op::Window { x: x.0, p, s, scale },
            g,
        ))
    }

    /// `[n, channels·positions]` (channel-major) to `[n·positions, channels]`.
    pub fn nodes_to_pixels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if channels == 0 || d % channels != 0 {
            return Err(Error::shape("nodes_to_pixels", format!("multiple of {channels}"), d));
        }
        let positions = d / channels;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for ch in 0..channels {
                for pos in 0..positions {
                    out[(i * positions + pos) * channels + ch] = src[i * d + ch * positions + pos];
                }
            }
        }
        let g = self.g(x.0);
        Ok(self.push(
            Tensor::new(&[n * positions, channels], out)?,
            Op::NodesToPixels { x: x.0, channels },
            g,
        ))
    }

    /// Inverse of [`Tape::nodes_to_pixels`].
    pub fn pixels_to_nodes(&mut self, x: Var, positions: usize) -> Result<Var> {
        let (m, channels) = self.value(x).dims2()?;
        if positions == 0 || m % positions != 0 {
            return Err(Error::shape("pixels_to_nodes", format!("multiple of {positions}"), m));
        }
        let n = m / positions;
        let d = channels * positions;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for pos in 0..positions {
                for ch in 0..channels {
                    out[i * d + ch * positions + pos] = src[(i * positions + pos) * channels + ch];
                }
            }
        }
        let g = self.g(x.0);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::PixelsToNodes { x: x.0, positions }, g))
    }

    /// Per-head inner products: `z: [m, heads·dh]`, `a: [heads, dh]` -> `[m, heads]`.
    pub fn head_dot(&mut self, z: Var, a: Var) -> Result<Var> {
        let (m, hd) = self.value(z).dims2()?;
        let (heads, dh) = self.value(a).dims2()?;
        if heads * dh != hd {
            return Err(Error::shape(
                "head_dot",
                format!("{hd} = heads·dh"),
                ShapeFmt(self.value(a).shape()),
            ));
        }
        let (zv, av) = (self.value(z).data(), self.value(a).data());
        let mut out = vec![0.0; m * heads];
        for r in 0..m {
            for h in 0..heads {
                out[r * heads + h] =
                    kernels::dot(&zv[r * hd + h * dh..r * hd + (h + 1) * dh], &av[h * dh..(h + 1) * dh]);
            }
        }
        let g = self.g(z.0) || self.g(a.0);
        Ok(self.push(Tensor::new(&[m, heads], out)?, Op::HeadDot { z: z.0, a: a.0 }, g))
    }

    /// Multi-head attention aggregation over ragged neighborhoods.
    ///
    /// `left: [centers, heads]` and `right: [keys, heads]` are the two halves
    /// of the attention logit, `z: [keys, positions·heads·dh]` the transformed
    /// neighbor messages. Output `[centers, positions·dh]` is the head-mean of
    /// the attention-weighted message sums.
    pub fn attention(&mut self, left: Var, right: Var, z: Var, nbrs: &Csr, dh: usize, slope: f64) -> Result<Var> {
        let (centers, heads) = self.value(left).dims2()?;
        let (keys, rh) = self.value(right).dims2()?;
        let (zk, zd) = self.value(z).dims2()?;
        if rh != heads || zk != keys {
            return Err(Error::shape(
                "attention",
                format!("right [{keys},{heads}] and z [{keys},..]"),
                format!("right [{keys},{rh}], z [{zk},{zd}]"),
            ));
        }
        if nbrs.centers() != centers {
            return Err(Error::shape("attention neighborhoods", centers, nbrs.centers()));
        }
        if let Some(bad) = nbrs.indices.iter().find(|&&j| j >= keys) {
            return Err(Error::shape("attention neighbor index", format!("< {keys}"), bad));
        }
        if (0..centers).any(|i| nbrs.neighbors(i).is_empty()) {
            return Err(Error::Contract(
                "attention needs at least one neighbor per center".into(),
            ));
        }
        if dh == 0 || zd % (heads * dh) != 0 {
            return Err(Error::shape(
                "attention messages",
                format!("multiple of heads·dh = {}", heads * dh),
                zd,
            ));
        }
        let weights = attention_weights(self.value(left).data(), self.value(right).data(), heads, nbrs, slope);
        let positions = zd / (heads * dh);
        let od = positions * dh;
        let zv = self.value(z).data();
        let mut out = vec![0.0; centers * od];
        let inv_heads = 1.0 / heads as f64;
        for i in 0..centers {
            let dst = &mut out[i * od..(i + 1) * od];
            for e in nbrs.offsets[i]..nbrs.offsets[i + 1] {
                let j = nbrs.indices[e];
                let msg = &zv[j * zd..(j + 1) * zd];
                for pos in 0..positions {
                    for h in 0..heads {
                        let w = weights[e * heads + h] * inv_heads;
                        let src = &msg[(pos * heads + h) * dh..(pos * heads + h + 1) * dh];
                        let d = &mut dst[pos * dh..(pos + 1) * dh];
                        for (a, b) in d.iter_mut().zip(src) {
                            *a += w * b;
                        }
                    }
                }
            }
        }
        let g = self.g(left.0) || self.g(right.0) || self.g(z.0);
        let v = Tensor::new(&[centers, od], out)?;
        Ok(self.push(
            v,
            Op::Attention {
                left: left.0,
                right: right.0,
                z: z.0,
                nbrs: nbrs.clone(),
                weights,
                dh,
                slope,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar output",
                ShapeFmt(self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.propagate(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape(), data).expect("gradient shape")
}

impl Tape {
    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let go = gout.data();
        let val = |v: usize| &self.nodes[v].value;
        let want = |v: usize| self.nodes[v].grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, gout.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let d = go.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, like(val(*a), d));
                }
                if want(*b) {
                    let d = go.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, like(val(*b), d));
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, gout.map(|v| v * f)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(grads, *a, like(val(*a), go.to_vec()));
            }
            Op::ScaleBy(a, s) => {
                let f = val(*s).data()[0];
                if want(*a) {
                    accumulate(grads, *a, gout.map(|v| v * f));
                }
                if want(*s) {
                    let d: f64 = go.iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                    accumulate(grads, *s, like(val(*s), vec![d]));
                }
            }
            Op::Relu(a) => {
                let d = go
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, like(val(*a), d));
            }
            Op::LeakyRelu(a, slope) => {
                let d = go
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                    .collect();
                accumulate(grads, *a, like(val(*a), d));
            }
            Op::Clamp(a, lo, hi) => {
                let d = go
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, like(val(*a), d));
            }
            Op::Sqrt(a) => {
                let d = go
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                accumulate(grads, *a, like(val(*a), d));
            }
            Op::Square(a) => {
                let d = go.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(grads, *a, like(val(*a), d));
            }
            Op::Recip(a) => {
                let d = go.iter().zip(node.value.data()).map(|(g, y)| -g * y * y).collect();
                accumulate(grads, *a, like(val(*a), d));
            }
            Op::SumAll(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), go[0])),
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                accumulate(grads, *a, Tensor::full(val(*a).shape(), go[0] / n));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = val(*x).dims2()?;
                let dout = val(*w).shape()[0];
                if want(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(n, dout, din, go, false, val(*w).data(), false, 0.0, &mut dx);
                    accumulate(grads, *x, like(val(*x), dx));
                }
                if want(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(dout, n, din, go, true, val(*x).data(), false, 0.0, &mut dw);
                    accumulate(grads, *w, like(val(*w), dw));
                }
                if let Some(b) = b {
                    if want(*b) {
                        let mut db = vec![0.0; dout];
                        for row in go.chunks_exact(dout) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        accumulate(grads, *b, like(val(*b), db));
                    }
                }
            }
            Op::AddCol(x, v) => {
                let (_, c) = val(*x).dims2()?;
                if want(*x) {
                    accumulate(grads, *x, gout.clone());
                }
                if want(*v) {
                    let d = go.chunks_exact(c).map(|r| r.iter().sum()).collect();
                    accumulate(grads, *v, like(val(*v), d));
                }
            }
            Op::MulCol(x, v) => {
                let (_, c) = val(*x).dims2()?;
                let vv = val(*v).data();
                if want(*x) {
                    let d = go.iter().enumerate().map(|(k, g)| g * vv[k / c]).collect();
                    accumulate(grads, *x, like(val(*x), d));
                }
                if want(*v) {
                    let d = go
                        .chunks_exact(c)
                        .zip(val(*x).data().chunks_exact(c))
                        .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *v, like(val(*v), d));
                }
            }
            Op::RowMean(x) => {
                let (_, c) = val(*x).dims2()?;
                let d = (0..val(*x).len()).map(|k| go[k / c] / c as f64).collect();
                accumulate(grads, *x, like(val(*x), d));
            }
            Op::Softmax(x) => {
                let (_, c) = val(*x).dims2()?;
                let mut d = vec![0.0; val(*x).len()];
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(c)
                    .zip(node.value.data().chunks_exact(c))
                    .zip(go.chunks_exact(c))
                {
                    let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for k in 0..c {
                        dr[k] = yr[k] * (gr[k] - inner);
                    }
                }
                accumulate(grads, *x, like(val(*x), d));
            }
            Op::Column(x, j) => {
                let (_, c) = val(*x).dims2()?;
                let mut d = vec![0.0; val(*x).len()];
                for (r, g) in go.iter().enumerate() {
                    d[r * c + j] = *g;
                }
                accumulate(grads, *x, like(val(*x), d));
            }
            Op::ConcatCols(a, b) => {
                let (_, ca) = val(*a).dims2()?;
                let (_, cb) = val(*b).dims2()?;
                let (mut da, mut db) = (Vec::with_capacity(val(*a).len()), Vec::with_capacity(val(*b).len()));
                for row in go.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                if want(*a) {
                    accumulate(grads, *a, like(val(*a), da));
                }
                if want(*b) {
                    accumulate(grads, *b, like(val(*b), db));
                }
            }
            Op::BroadcastRows(v) => {
                let d = val(*v).len();
                let mut acc = vec![0.0; d];
                for row in go.chunks_exact(d) {
                    for (a, g) in acc.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                accumulate(grads, *v, like(val(*v), acc));
            }
            Op::GatherRows(x, idx) => {
                let (_, c) = val(*x).dims2()?;
                let mut d = vec![0.0; val(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for k in 0..c {
                        d[src * c + k] += go[r * c + k];
                    }
                }
                accumulate(grads, *x, like(val(*x), d));
            }
            Op::SegmentMean(x, offsets) | Op::SegmentSum(x, offsets) => {
                let mean = matches!(node.op, Op::SegmentMean(..));
                let (_, c) = val(*x).dims2()?;
                let mut d = vec![0.0; val(*x).len()];
                for gi in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[gi], offsets[gi + 1]);
                    let f = if mean && hi > lo { 1.0 / (hi - lo) as f64 } else { 1.0 };
                    for r in lo..hi {
                        for k in 0..c {
                            d[r * c + k] = go[gi * c + k] * f;
                        }
                    }
                }
                accumulate(grads, *x, like(val(*x), d));
            }
            Op::SegmentMax(x, arg) => {
                let mut d = vec![0.0; val(*x).len()];
                for (slot, &src) in arg.iter().enumerate() {
                    if src != usize::MAX {
                        d[src] += go[slot];
                    }
                }
                accumulate(grads, *x, like(val(*x), d));
            }
            Op::Conv2d { x, w, b } => {
                let dims = val(*x).dims3()?;
                let ws = val(*w).shape();
                let (o, k) = (ws[0], ws[2]);
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x).data(), dims, val(*w).data(), o, k, go, want(*x), want(*w));
                if let Some(dx) = dx {
                    accumulate(grads, *x, like(val(*x), dx));
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, like(val(*w), dw));
                }
                if want(*b) {
                    accumulate(grads, *b, like(val(*b), db));
                }
            }
            Op::MaxPool2(x, arg) => {
                let mut d = vec![0.0; val(*x).len()];
                for (g, &src) in go.iter().zip(arg) {
                    d[src] += g;
                }
                accumulate(grads, *x, like(val(*x), d));
            }
            Op::Upsample2(x) => {
                let dims = val(*x).dims3()?;
                accumulate(grads, *x, like(val(*x), kernels::upsample2_backward(go, dims)));
            }
            Op::Unfold { x, p, s } => {
                let dims = val(*x).dims3()?;
                accumulate(grads, *x, like(val(*x), kernels::fold_sum(go, dims, *p, *s)));
            }
            Op::FoldMean { x, p, s, inv_count } => {
                let dims = node.value.dims3()?;
                let hw = dims.1 * dims.2;
                let scaled: Vec<f64> = go.iter().enumerate().map(|(k, g)| g * inv_count[k % hw]).collect();
                accumulate(grads, *x, like(val(*x), kernels::unfold(&scaled, dims, *p, *s)));
            }
            Op::Window { x, p, s, scale } => {
                let dims = val(*x).dims3()?;
                let d = kernels::window_patches_backward(go, dims, *p, *s, *scale);
                accumulate(grads, *x, like(val(*x), d));
            }
            Op::NodesToPixels { x, channels } => {
                let (n, d) = val(*x).dims2()?;
                let positions = d / channels;
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for ch in 0..*channels {
                        for pos in 0..positions {
                            dx[r * d + ch * positions + pos] = go[(r * positions + pos) * channels + ch];
                        }
                    }
                }
                accumulate(grads, *x, like(val(*x), dx));
            }
            Op::PixelsToNodes { x, positions } => {
                let (m, channels) = val(*x).dims2()?;
                let n = m / positions;
                let d = channels * positions;
                let mut dx = vec![0.0; m * channels];
                for r in 0..n {
                    for pos in 0..*positions {
                        for ch in 0..channels {
                            dx[(r * positions + pos) * channels + ch] = go[r * d + ch * positions + pos];
                        }
                    }
                }
                accumulate(grads, *x, like(val(*x), dx));
            }
            Op::HeadDot { z, a } => {
                let (m, hd) = val(*z).dims2()?;
                let (heads, dh) = val(*a).dims2()?;
                let (zv, av) = (val(*z).data(), val(*a).data());
                if want(*z) {
                    let mut dz = vec![0.0; m * hd];
                    for r in 0..m {
                        for h in 0..heads {
                            let g = go[r * heads + h];
                            for t in 0..dh {
                                dz[r * hd + h * dh + t] = g * av[h * dh + t];
                            }
                        }
                    }
                    accumulate(grads, *z, like(val(*z), dz));
                }
                if want(*a) {
                    let mut da = vec![0.0; heads * dh];
                    for r in 0..m {
                        for h in 0..heads {
                            let g = go[r * heads + h];
                            for t in 0..dh {
                                da[h * dh + t] += g * zv[r * hd + h * dh + t];
                            }
                        }
                    }
                    accumulate(grads, *a, like(val(*a), da));
                }
            }
            Op::Attention {
                left,
                right,
                z,
                nbrs,
                weights,
                dh,
                slope,
            } => {
                let (centers, heads) = val(*left).dims2()?;
                let (_, zd) = val(*z).dims2()?;
                let dh = *dh;
                let positions = zd / (heads * dh);
                let od = positions * dh;
                let zv = val(*z).data();
                let (lv, rv) = (val(*left).data(), val(*right).data());
                let inv_heads = 1.0 / heads as f64;
                let mut dz = want(*z).then(|| vec![0.0; val(*z).len()]);
                let mut dl = vec![0.0; val(*left).len()];
                let mut dr = vec![0.0; val(*right).len()];
                let mut dw = Vec::new();
                for i in 0..centers {
                    let (lo, hi) = (nbrs.offsets[i], nbrs.offsets[i + 1]);
                    let gi = &go[i * od..(i + 1) * od];
                    for h in 0..heads {
                        // d loss / d weight for each neighbor of this (center, head)
                        dw.clear();
                        for e in lo..hi {
                            let j = nbrs.indices[e];
                            let msg = &zv[j * zd..(j + 1) * zd];
                            let mut s = 0.0;
                            for pos in 0..positions {
                                let src = &msg[(pos * heads + h) * dh..(pos * heads + h + 1) * dh];
                                s += kernels::dot(&gi[pos * dh..(pos + 1) * dh], src);
                            }
                            dw.push(s * inv_heads);
                            if let Some(dz) = dz.as_mut() {
                                let w = weights[e * heads + h] * inv_heads;
                                for pos in 0..positions {
                                    let base = j * zd + (pos * heads + h) * dh;
                                    for t in 0..dh {
                                        dz[base + t] += w * gi[pos * dh + t];
                                    }
                                }
                            }
                        }
                        let inner: f64 = (lo..hi).zip(&dw).map(|(e, d)| weights[e * heads + h] * d).sum();
                        for (e, d) in (lo..hi).zip(&dw) {
                            let j = nbrs.indices[e];
                            let dlogit = weights[e * heads + h] * (d - inner);
                            let pre = lv[i * heads + h] + rv[j * heads + h];
                            let dpre = if pre > 0.0 { dlogit } else { dlogit * slope };
                            dl[i * heads + h] += dpre;
                            dr[j * heads + h] += dpre;
                        }
                    }
                }
                if let Some(dz) = dz {
                    accumulate(grads, *z, like(val(*z), dz));
                }
                if want(*left) {
                    accumulate(grads, *left, like(val(*left), dl));
                }
                if want(*right) {
                    accumulate(grads, *right, like(val(*right), dr));
                }
            }
        }
        Ok(())
    }
}
