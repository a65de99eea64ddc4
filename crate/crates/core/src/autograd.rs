//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows the parameter store for the duration of one forward
//! pass; parameters enter the tape by id and their gradients come back keyed
//! the same way. Every op is shape-checked when it is recorded (mismatches are
//! programming errors and panic).

use std::collections::HashMap;
use std::sync::Arc;

use crate::attention::flops::FlopLedger;
use crate::attention::sparse::{self, LocalityBias, Propagated, SparsePattern};
use crate::nn::{ParamId, ParamStore};
use crate::par;
use crate::tensor::Tensor;
use crate::wavelet;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Token windows for windowed self-attention.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    /// Token indices of every window.
    pub windows: Vec<Vec<u32>>,
    /// Region label per token; tokens attend only within their region.
    pub region: Option<Vec<u8>>,
}

impl WindowPlan {
    /// Swin-style partition of an `h × w` token grid into `window × window`
    /// tiles, optionally cyclically shifted by `window / 2` with region masking
    /// so that wrapped-around tokens do not attend to each other.
    pub fn new(h: usize, w: usize, window: usize, shifted: bool) -> Self {
        let mut ws = window.min(h).min(w).max(1);
        while !h.is_multiple_of(ws) || !w.is_multiple_of(ws) {
            ws -= 1;
        }
        let shift = if shifted && ws < h.max(w) { ws / 2 } else { 0 };
        let mut windows = Vec::with_capacity((h / ws) * (w / ws));
        for wy in 0..h / ws {
            for wx in 0..w / ws {
                let mut idx = Vec::with_capacity(ws * ws);
                for dy in 0..ws {
                    for dx in 0..ws {
                        let y = (wy * ws + dy + shift) % h;
                        let x = (wx * ws + dx + shift) % w;
                        idx.push((y * w + x) as u32);
                    }
                }
                windows.push(idx);
            }
        }
        let region = (shift > 0).then(|| {
            let band = |p: usize, n: usize| -> u8 {
                // position in the shifted frame
                let s = (p + n - shift) % n;
                if s < n - ws {
                    0
                } else if s < n - shift {
                    1
                } else {
                    2
                }
            };
            (0..h * w)
                .map(|t| band(t / w, h) * 3 + band(t % w, w))
                .collect()
        });
        Self { windows, region }
    }
}

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MatMul(Var, Var),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    ToTokens(Var),
    FromTokens(Var),
    Dwt(Var),
    Idwt(Var),
    PixelShuffle(Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        plan: Arc<WindowPlan>,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
    SparseSoftmax {
        q: Var,
        k: Var,
        pattern: Arc<SparsePattern>,
        scale: f64,
    },
    Propagate {
        prev: Option<Var>,
        oam: Var,
        pattern_in: Arc<SparsePattern>,
        out: Arc<Propagated>,
    },
    SparseAttend {
        a: Var,
        v: Var,
        pattern: Arc<SparsePattern>,
    },
    Mse(Var, Var),
    Rms(Var, Var),
    MeanAbs(Var, Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Adds `scale · other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            let e = self.grads.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in e.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Euclidean norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        let mut keys: Vec<_> = self.grads.keys().copied().collect();
        keys.sort();
        keys.iter()
            .map(|k| self.grads[k].iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max: f64) -> f64 {
        let n = self.global_norm();
        if n > max && n > 0.0 {
            self.scale(max / n);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// A recording of one forward computation.
pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    ledger: Option<&'a FlopLedger>,
    scope: String,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            ledger: None,
            scope: String::new(),
        }
    }

    pub fn with_ledger(params: &'a ParamStore, ledger: &'a FlopLedger) -> Self {
        let mut g = Self::new(params);
        g.ledger = Some(ledger);
        g
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn ledger(&self) -> Option<&'a FlopLedger> {
        self.ledger
    }

    /// Label under which subsequent FLOPs are recorded.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn record_flops(&self, flops: u64) {
        if let Some(l) = self.ledger {
            l.record(&self.scope, flops);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|&v| self.needs_grad(v));
        self.nodes.push(Node {
            value: Some(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// 2D convolution of a `C × H × W` input with `O × C × k × k` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => panic!("conv2d input must be C x H x W, got {s:?}"),
        };
        let (o, ci, k) = match self.shape(w) {
            &[o, ci, k, k2] if k == k2 => (o, ci, k),
            s => panic!("conv2d weight must be O x C x k x k, got {s:?}"),
        };
        assert_eq!(c, ci, "conv2d channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let xs = self.data(x);
        let ws = self.data(w);
        let bs = b.map(|b| self.data(b));
        let mut out = vec![0.0; o * ho * wo];
        par::for_each_chunk(&mut out, ho * wo, |oc, dst| {
            if let Some(bs) = bs {
                dst.iter_mut().for_each(|v| *v = bs[oc]);
            }
            for cc in 0..c {
                let src = &xs[cc * h * wd..(cc + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ws[((oc * c + cc) * k + ky) * k + kx];
                        conv_tap(src, h, wd, dst, ho, wo, ky, kx, stride, pad, |d, s| *d += wv * s);
                    }
                }
            }
        });
        self.record_flops(2 * (o * c * k * k * ho * wo) as u64);
        let t = Tensor::from_parts(vec![o, ho, wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// `[n, k] × [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = dims2(self.shape(a));
        let (k2, m) = dims2(self.shape(b));
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        par::for_each_chunk(&mut out, m, |i, row| {
            for kk in 0..k {
                let av = ad[i * k + kk];
                for (o, &bv) in row.iter_mut().zip(&bd[kk * m..(kk + 1) * m]) {
                    *o += av * bv;
                }
            }
        });
        self.record_flops(2 * (n * k * m) as u64);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, x: Var, v: Var) -> Var {
        let (n, m) = dims2(self.shape(x));
        assert_eq!(self.value(v).len(), m, "row vector length mismatch");
        let vd = self.data(v);
        let mut out = self.data(x).to_vec();
        for i in 0..n {
            for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(vd) {
                *o += b;
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::AddRow(x, v), &[x, v])
    }

    /// Row-wise layer normalization of `[n, d]` with affine `g`, `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (n, d) = dims2(self.shape(x));
        let (xd, gd, bd) = (self.data(x), self.data(g), self.data(b));
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mean) * r;
            }
        }
        let out = xhat
            .iter()
            .enumerate()
            .map(|(idx, &v)| v * gd[idx % d] + bd[idx % d])
            .collect();
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::LayerNorm {
                x,
                g,
                b,
                xhat,
                rstd,
            },
            &[x, g, b],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(t, Op::Silu(x), &[x])
    }

    /// `C × H × W` map to `(H·W) × C` tokens in row-major spatial order.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        let out = transpose(self.data(x), c, h * w);
        self.push(Tensor::from_parts(vec![h * w, c], out), Op::ToTokens(x), &[x])
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, c) = dims2(self.shape(x));
        assert_eq!(n, h * w, "token count does not match the grid");
        let out = transpose(self.data(x), n, c);
        self.push(Tensor::from_parts(vec![c, h, w], out), Op::FromTokens(x), &[x])
    }

    /// Haar analysis, stacked `[ll; lh; hl; hh]` along channels.
    pub fn dwt(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "dwt needs even spatial size");
        let out = wavelet::dwt_stacked(self.data(x), c, h, w);
        self.push(
            Tensor::from_parts(vec![4 * c, h / 2, w / 2], out),
            Op::Dwt(x),
            &[x],
        )
    }

    /// Haar synthesis from stacked `[ll; lh; hl; hh]`.
    pub fn idwt(&mut self, x: Var) -> Var {
        let (c4, h, w) = dims3(self.shape(x));
        assert_eq!(c4 % 4, 0, "idwt needs 4c channels");
        let out = wavelet::idwt_stacked(self.data(x), c4 / 4, h, w);
        self.push(
            Tensor::from_parts(vec![c4 / 4, 2 * h, 2 * w], out),
            Op::Idwt(x),
            &[x],
        )
    }

    /// Depth-to-space: group `g = 2·dy + dx` of `4c` channels fills offset `(dy, dx)`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Var {
        let (c4, h, w) = dims3(self.shape(x));
        assert_eq!(c4 % 4, 0, "pixel shuffle needs 4c channels");
        let c = c4 / 4;
        let src = self.data(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for g in 0..4 {
            let (dy, dx) = (g / 2, g % 2);
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx] =
                            src[((g * c + ch) * h + y) * w + xx];
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![c, 2 * h, 2 * w], out),
            Op::PixelShuffle(x),
            &[x],
        )
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        assert!(start + len <= c, "channel slice out of range");
        let n = h * w;
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::from_parts(vec![len, h, w], out),
            Op::SliceChannels { x, start },
            &[x],
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let (_, h, w) = dims3(self.shape(xs[0]));
        let mut out = Vec::new();
        let mut c = 0;
        for &x in xs {
            let (cx, hx, wx) = dims3(self.shape(x));
            assert_eq!((hx, wx), (h, w), "concat spatial mismatch");
            c += cx;
            out.extend_from_slice(self.data(x));
        }
        self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::ConcatChannels(xs.to_vec()),
            xs,
        )
    }

    /// Columns `start..start + len` of an `[n, m]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = dims2(self.shape(x));
        assert!(start + len <= m, "column slice out of range");
        let d = self.data(x);
        let out = (0..n)
            .flat_map(|i| d[i * m + start..i * m + start + len].iter().copied())
            .collect();
        self.push(
            Tensor::from_parts(vec![n, len], out),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        if xs.len() == 1 {
            return xs[0];
        }
        let (n, _) = dims2(self.shape(xs[0]));
        let widths: Vec<usize> = xs.iter().map(|&x| dims2(self.shape(x)).1).collect();
        let m: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for (&x, &wx) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x)[i * wx..(i + 1) * wx]);
            }
        }
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::ConcatCols(xs.to_vec()),
            xs,
        )
    }

    /// Stacks `[n_i, m]` matrices vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let (_, m) = dims2(self.shape(xs[0]));
        let mut out = Vec::new();
        let mut n = 0;
        for &x in xs {
            let (nx, mx) = dims2(self.shape(x));
            assert_eq!(mx, m, "row concat width mismatch");
            n += nx;
            out.extend_from_slice(self.data(x));
        }
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::ConcatRows(xs.to_vec()),
            xs,
        )
    }

    /// Softmax self-attention inside each window of `plan`.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, plan: Arc<WindowPlan>, scale: f64) -> Var {
        let (n, d) = dims2(self.shape(q));
        assert_eq!(self.shape(k), &[n, d][..]);
        assert_eq!(self.shape(v), &[n, d][..]);
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let region = plan.region.as_deref();
        let per_window: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(plan.windows.len(), |wi| {
            let idx = &plan.windows[wi];
            let t = idx.len();
            let mut p = vec![0.0; t * t];
            let mut o = vec![0.0; t * d];
            for a in 0..t {
                let ia = idx[a] as usize;
                let qa = &qd[ia * d..(ia + 1) * d];
                let row = &mut p[a * t..(a + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for b in 0..t {
                    let ib = idx[b] as usize;
                    if region.is_some_and(|r| r[ia] != r[ib]) {
                        row[b] = f64::NEG_INFINITY;
                        continue;
                    }
                    row[b] = scale * dot(qa, &kd[ib * d..(ib + 1) * d]);
                    max = max.max(row[b]);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
                let oa = &mut o[a * d..(a + 1) * d];
                for b in 0..t {
                    let w = row[b];
                    if w != 0.0 {
                        let ib = idx[b] as usize;
                        for (x, &vv) in oa.iter_mut().zip(&vd[ib * d..(ib + 1) * d]) {
                            *x += w * vv;
                        }
                    }
                }
            }
            (p, o)
        });
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(per_window.len());
        let mut pairs = 0u64;
        for (idx, (p, o)) in plan.windows.iter().zip(per_window) {
            for (a, &ia) in idx.iter().enumerate() {
                out[ia as usize * d..(ia as usize + 1) * d].copy_from_slice(&o[a * d..(a + 1) * d]);
            }
            pairs += (idx.len() * idx.len()) as u64;
            probs.push(p);
        }
        self.record_flops(4 * pairs * d as u64);
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::WindowAttention {
                q,
                k,
                v,
                plan,
                scale,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Sparse scores + row softmax over `pattern`; the value holds one entry per nonzero.
    pub fn sparse_softmax(
        &mut self,
        q: Var,
        k: Var,
        pattern: Arc<SparsePattern>,
        scale: f64,
        bias: Option<&LocalityBias>,
    ) -> Var {
        let (n, d) = dims2(self.shape(q));
        let (m, d2) = dims2(self.shape(k));
        assert_eq!(d, d2, "query/key width mismatch");
        assert_eq!((pattern.rows(), pattern.cols()), (n, m), "pattern shape mismatch");
        let vals = sparse::sparse_scores_softmax(self.data(q), self.data(k), d, &pattern, scale, bias);
        self.record_flops(2 * (d * pattern.nnz()) as u64);
        let nnz = pattern.nnz();
        self.push(
            Tensor::from_parts(vec![nnz], vals),
            Op::SparseSoftmax {
                q,
                k,
                pattern,
                scale,
            },
            &[q, k],
        )
    }

    /// `Norm(prev ⊙ oam ⊙ keep)`; returns the new values and their support.
    pub fn propagate(
        &mut self,
        prev: Option<Var>,
        oam: Var,
        pattern_in: Arc<SparsePattern>,
        keep: &[bool],
    ) -> (Var, Arc<SparsePattern>) {
        let out = sparse::propagate(
            &pattern_in,
            prev.map(|p| self.data(p)),
            self.data(oam),
            keep,
        );
        let pattern = Arc::new(out.pattern.clone());
        let t = Tensor::from_parts(vec![out.values.len()], out.values.clone());
        let mut inputs = vec![oam];
        inputs.extend(prev);
        let v = self.push(
            t,
            Op::Propagate {
                prev,
                oam,
                pattern_in,
                out: Arc::new(out),
            },
            &inputs,
        );
        (v, pattern)
    }

    /// `A · V` over the nonzeros of `pattern`.
    pub fn sparse_attend(&mut self, a: Var, v: Var, pattern: Arc<SparsePattern>) -> Var {
        let (m, d) = dims2(self.shape(v));
        assert_eq!(pattern.cols(), m, "value rows do not match the pattern");
        assert_eq!(self.value(a).len(), pattern.nnz());
        let out = sparse::sparse_attend(self.data(a), &pattern, self.data(v), d);
        self.record_flops(2 * (d * pattern.nnz()) as u64);
        let n = pattern.rows();
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::SparseAttend { a, v, pattern },
            &[a, v],
        )
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let n = self.value(a).len() as f64;
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// Root-mean-square difference.
    pub fn rms_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let n = self.value(a).len() as f64;
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar((s / n).sqrt()), Op::Rms(a, b), &[a, b])
    }

    /// Mean absolute difference.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let n = self.value(a).len() as f64;
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y).abs()).sum();
        self.push(Tensor::scalar(s / n), Op::MeanAbs(a, b), &[a, b])
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => {
                let e = out.grads.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
                e.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.iter().map(|v| -v).collect());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = self.conv_backward(*x, *w, *stride, *pad, &g);
                if let Some(b) = b {
                    acc(*b, db);
                }
                acc(*w, dw);
                acc(*x, dx);
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = dims2(self.shape(*b)).1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    par::for_each_chunk(&mut da, k, |r, row| {
                        let gr = &g[r * m..(r + 1) * m];
                        for (kk, o) in row.iter_mut().enumerate() {
                            *o = dot(gr, &bd[kk * m..(kk + 1) * m]);
                        }
                    });
                    acc(*a, da);
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    par::for_each_chunk(&mut db, m, |kk, row| {
                        for r in 0..n {
                            let av = ad[r * k + kk];
                            if av != 0.0 {
                                for (o, &gv) in row.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                    acc(*b, db);
                }
            }
            Op::AddRow(x, v) => {
                let m = self.value(*v).len();
                let mut dv = vec![0.0; m];
                for row in g.chunks(m) {
                    dv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc(*v, dv);
                acc(*x, g);
            }
            Op::LayerNorm {
                x,
                g: gamma,
                b,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gd = self.data(*gamma);
                let n = rstd.len();
                let mut dg = vec![0.0; d];
                let mut dbv = vec![0.0; d];
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * xr[j];
                        dbv[j] += gr[j];
                        let dxh = gr[j] * gd[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (gr[j] * gd[j] - m1 - xr[j] * m2);
                    }
                }
                acc(*gamma, dg);
                acc(*b, dbv);
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, g.iter().zip(xd).map(|(gv, &v)| gv * gelu_grad(v)).collect());
            }
            Op::Silu(x) => {
                let xd = self.data(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(gv, &v)| {
                            let s = sigmoid(v);
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::ToTokens(x) => {
                let (c, h, w) = dims3(self.shape(*x));
                acc(*x, transpose(&g, h * w, c));
            }
            Op::FromTokens(x) => {
                let (n, c) = dims2(self.shape(*x));
                acc(*x, transpose(&g, c, n));
            }
            Op::Dwt(x) => {
                let (c, h, w) = dims3(self.shape(*x));
                acc(*x, wavelet::idwt_stacked(&g, c, h / 2, w / 2));
            }
            Op::Idwt(x) => {
                let (c4, h, w) = dims3(self.shape(*x));
                acc(*x, wavelet::dwt_stacked(&g, c4 / 4, 2 * h, 2 * w));
            }
            Op::PixelShuffle(x) => {
                let (c4, h, w) = dims3(self.shape(*x));
                let c = c4 / 4;
                let mut dx = vec![0.0; c4 * h * w];
                for gi in 0..4 {
                    let (dy, dxo) = (gi / 2, gi % 2);
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[((gi * c + ch) * h + y) * w + xx] =
                                    g[(ch * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dxo];
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SliceChannels { x, start } => {
                let (_, h, w) = dims3(self.shape(*x));
                let mut dx = vec![0.0; self.value(*x).len()];
                let off = start * h * w;
                dx[off..off + g.len()].copy_from_slice(&g);
                acc(*x, dx);
            }
            Op::ConcatChannels(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, m) = dims2(self.shape(*x));
                let len = g.len() / n.max(1);
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    dx[r * m + start..r * m + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&x| dims2(self.shape(x)).1).collect();
                let m: usize = widths.iter().sum();
                let n = g.len() / m;
                let mut off = 0;
                for (&x, &wx) in xs.iter().zip(&widths) {
                    let mut dx = Vec::with_capacity(n * wx);
                    for r in 0..n {
                        dx.extend_from_slice(&g[r * m + off..r * m + off + wx]);
                    }
                    acc(x, dx);
                    off += wx;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                plan,
                scale,
                probs,
            } => {
                let (dq, dk, dv) = self.window_attention_backward(*q, *k, *v, plan, *scale, probs, &g);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::SparseSoftmax {
                q,
                k,
                pattern,
                scale,
            } => {
                let d = dims2(self.shape(*q)).1;
                let (dq, dk) = sparse::sparse_scores_softmax_backward(
                    self.data(*q),
                    self.data(*k),
                    d,
                    pattern,
                    *scale,
                    self.nodes[i].value.as_ref().expect("stored").data(),
                    &g,
                );
                acc(*q, dq);
                acc(*k, dk);
            }
            Op::Propagate {
                prev,
                oam,
                pattern_in,
                out: result,
            } => {
                let (dprev, doam) = sparse::propagate_backward(
                    pattern_in,
                    result,
                    prev.map(|p| self.data(p)),
                    self.data(*oam),
                    &g,
                );
                if let (Some(p), Some(dp)) = (prev, dprev) {
                    acc(*p, dp);
                }
                acc(*oam, doam);
            }
            Op::SparseAttend { a, v, pattern } => {
                let d = dims2(self.shape(*v)).1;
                let (da, dv) = sparse::sparse_attend_backward(self.data(*a), pattern, self.data(*v), d, &g);
                acc(*a, da);
                acc(*v, dv);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let k = 2.0 * g[0] / n;
                let d: Vec<f64> = self.data(*a).iter().zip(self.data(*b)).map(|(x, y)| k * (x - y)).collect();
                acc(*b, d.iter().map(|v| -v).collect());
                acc(*a, d);
            }
            Op::Rms(a, b) => {
                let n = self.value(*a).len() as f64;
                let r = self.nodes[i].value.as_ref().expect("stored").item();
                let k = if r > 0.0 { g[0] / (n * r) } else { 0.0 };
                let d: Vec<f64> = self.data(*a).iter().zip(self.data(*b)).map(|(x, y)| k * (x - y)).collect();
                acc(*b, d.iter().map(|v| -v).collect());
                acc(*a, d);
            }
            Op::MeanAbs(a, b) => {
                let n = self.value(*a).len() as f64;
                let k = g[0] / n;
                let d: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(x, y)| k * (x - y).signum() * ((x - y) != 0.0) as u8 as f64)
                    .collect();
                acc(*b, d.iter().map(|v| -v).collect());
                acc(*a, d);
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, stride: usize, pad: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (c, h, wd) = dims3(self.shape(x));
        let (o, _, k, _) = match self.shape(w) {
            &[o, c, k, k2] => (o, c, k, k2),
            _ => unreachable!(),
        };
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (xs, ws) = (self.data(x), self.data(w));
        let db: Vec<f64> = (0..o).map(|oc| g[oc * ho * wo..(oc + 1) * ho * wo].iter().sum()).collect();
        let mut dw = vec![0.0; o * c * k * k];
        if self.needs_grad(w) {
            par::for_each_chunk(&mut dw, c * k * k, |oc, dst| {
                let go = &g[oc * ho * wo..(oc + 1) * ho * wo];
                for cc in 0..c {
                    let src = &xs[cc * h * wd..(cc + 1) * h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut s = 0.0;
                            conv_tap_read(src, h, wd, go, ho, wo, ky, kx, stride, pad, |gv, xv| s += gv * xv);
                            dst[(cc * k + ky) * k + kx] = s;
                        }
                    }
                }
            });
        }
        let mut dx = vec![0.0; c * h * wd];
        if self.needs_grad(x) {
            par::for_each_chunk(&mut dx, h * wd, |cc, dst| {
                for oc in 0..o {
                    let go = &g[oc * ho * wo..(oc + 1) * ho * wo];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = ws[((oc * c + cc) * k + ky) * k + kx];
                            scatter_tap(dst, h, wd, go, ho, wo, ky, kx, stride, pad, wv);
                        }
                    }
                }
            });
        }
        (dx, dw, db)
    }

    #[allow(clippy::too_many_arguments)]
    fn window_attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        plan: &WindowPlan,
        scale: f64,
        probs: &[Vec<f64>],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (n, d) = dims2(self.shape(q));
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let per_window: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = par::map_range(plan.windows.len(), |wi| {
            let idx = &plan.windows[wi];
            let t = idx.len();
            let p = &probs[wi];
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for a in 0..t {
                let ia = idx[a] as usize;
                let ga = &g[ia * d..(ia + 1) * d];
                let prow = &p[a * t..(a + 1) * t];
                for b in 0..t {
                    let ib = idx[b] as usize;
                    dp[b] = dot(ga, &vd[ib * d..(ib + 1) * d]);
                    if prow[b] != 0.0 {
                        for (o, &gv) in dv[b * d..(b + 1) * d].iter_mut().zip(ga) {
                            *o += prow[b] * gv;
                        }
                    }
                }
                let inner: f64 = prow.iter().zip(&dp).map(|(x, y)| x * y).sum();
                let qa = &qd[ia * d..(ia + 1) * d];
                for b in 0..t {
                    let ds = scale * prow[b] * (dp[b] - inner);
                    if ds == 0.0 {
                        continue;
                    }
                    let ib = idx[b] as usize;
                    for (o, &kv) in dq[a * d..(a + 1) * d].iter_mut().zip(&kd[ib * d..(ib + 1) * d]) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in dk[b * d..(b + 1) * d].iter_mut().zip(qa) {
                        *o += ds * qv;
                    }
                }
            }
            (dq, dk, dv)
        });
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for (idx, (wq, wk, wv)) in plan.windows.iter().zip(per_window) {
            for (a, &ia) in idx.iter().enumerate() {
                let r = ia as usize * d..(ia as usize + 1) * d;
                dq[r.clone()].copy_from_slice(&wq[a * d..(a + 1) * d]);
                dk[r.clone()].copy_from_slice(&wk[a * d..(a + 1) * d]);
                dv[r].copy_from_slice(&wv[a * d..(a + 1) * d]);
            }
        }
        (dq, dk, dv)
    }
}

fn dims2(s: &[usize]) -> (usize, usize) {
    match *s {
        [a, b] => (a, b),
        _ => panic!("expected a matrix, got shape {s:?}"),
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    match *s {
        [a, b, c] => (a, b, c),
        _ => panic!("expected a C x H x W map, got shape {s:?}"),
    }
}

/// `[r, c]` row-major to `[c, r]`.
fn transpose(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// Output rows `oy` whose input row `oy·stride + ky − pad` lies inside `0..h`.
#[inline]
fn valid_range(h: usize, ho: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // iy = oy*stride + k - pad >= 0  and  < h
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if h + pad > k {
        ((h + pad - k - 1) / stride + 1).min(ho)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits every (output, input) pair of one kernel tap.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap(
    src: &[f64],
    h: usize,
    w: usize,
    dst: &mut [f64],
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
    mut f: impl FnMut(&mut f64, f64),
) {
    let (y0, y1) = valid_range(h, ho, ky, stride, pad);
    let (x0, x1) = valid_range(w, wo, kx, stride, pad);
    for oy in y0..y1 {
        let iy = oy * stride + ky - pad;
        let srow = &src[iy * w..(iy + 1) * w];
        let drow = &mut dst[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            let ix0 = x0 + kx - pad;
            for (d, &s) in drow[x0..x1].iter_mut().zip(&srow[ix0..ix0 + (x1 - x0)]) {
                f(d, s);
            }
        } else {
            for ox in x0..x1 {
                f(&mut drow[ox], srow[ox * stride + kx - pad]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_read(
    src: &[f64],
    h: usize,
    w: usize,
    go: &[f64],
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
    mut f: impl FnMut(f64, f64),
) {
    let (y0, y1) = valid_range(h, ho, ky, stride, pad);
    let (x0, x1) = valid_range(w, wo, kx, stride, pad);
    for oy in y0..y1 {
        let iy = oy * stride + ky - pad;
        let srow = &src[iy * w..(iy + 1) * w];
        let grow = &go[oy * wo..(oy + 1) * wo];
        for ox in x0..x1 {
            f(grow[ox], srow[ox * stride + kx - pad]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_tap(
    dst: &mut [f64],
    h: usize,
    w: usize,
    go: &[f64],
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
    wv: f64,
) {
    let (y0, y1) = valid_range(h, ho, ky, stride, pad);
    let (x0, x1) = valid_range(w, wo, kx, stride, pad);
    for oy in y0..y1 {
        let iy = oy * stride + ky - pad;
        let grow = &go[oy * wo..(oy + 1) * wo];
        let drow = &mut dst[iy * w..(iy + 1) * w];
        for ox in x0..x1 {
            drow[ox * stride + kx - pad] += wv * grow[ox];
        }
    }
}
