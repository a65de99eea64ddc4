//! Token-level building blocks shared by the two networks.


use std::sync::Arc;

use crate::autograd::{Graph, Var, WindowPlan};
use crate::error::{Error, Result};
use crate::nn::{Linear, Norm, ParamStore};
use crate::tensor::Tensor;

/// Sinusoidal encoding of `t`: pairs `(sin(t·ω_k), cos(t·ω_k))` with
/// `ω_k = 10000^(-k / (dim/2))`.
pub fn timestep_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "timestep embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Ok(out)
}

/// Pre-norm windowed self-attention plus feed-forward, Swin style.
#[derive(Clone, Debug)]
pub struct SwinLayer {
    pub name: String,
    heads: usize,
    window: usize,
    shifted: bool,
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

impl SwinLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        ffn_mult: usize,
    ) -> Self {
        let hidden = dim * ffn_mult.max(1);
        Self {
            name: name.to_string(),
            heads,
            window,
            shifted,
            norm1: Norm::new(ps, &format!("{name}.norm1"), dim),
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim),
            norm2: Norm::new(ps, &format!("{name}.norm2"), dim),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dim, hidden),
            ff2: Linear::new(ps, &format!("{name}.ff2"), hidden, dim),
        }
    }

    /// `x` holds `h·w` tokens in row-major grid order.
    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
        let prev = g.scope().to_string();
        g.set_scope(self.name.clone());
        let dim = g.value(x).shape()[1];
        let dh = dim / self.heads;
        let plan = Arc::new(WindowPlan::new(h, w, self.window, self.shifted));
        let xn = self.norm1.forward(g, x);
        let qkv = self.qkv.forward(g, xn);
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let q = g.slice_cols(qkv, hd * dh, dh);
            let k = g.slice_cols(qkv, dim + hd * dh, dh);
            let v = g.slice_cols(qkv, 2 * dim + hd * dh, dh);
            outs.push(g.window_attention(q, k, v, plan.clone(), 1.0 / (dh as f64).sqrt()));
        }
        let o = g.concat_cols(&outs);
        let o = self.proj.forward(g, o);
        let y = g.add(x, o);
        let f = self.norm2.forward(g, y);
        let f = self.ff1.forward(g, f);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, f);
        let y = g.add(y, f);
        g.set_scope(prev);
        y
    }
}

/// Two affine layers with a SiLU between them, mapping the sinusoidal
/// timestep code to a stage's channel width.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    dim_in: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeMlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize) -> Self {
        Self {
            dim_in,
            l1: Linear::new(ps, &format!("{name}.l1"), dim_in, dim_out),
            l2: Linear::new(ps, &format!("{name}.l2"), dim_out, dim_out),
        }
    }

    /// Returns a `[1, dim_out]` row.
    pub fn forward(&self, g: &mut Graph, t: f64) -> Result<Var> {
        let e = timestep_embed(t, self.dim_in)?;
        let e = g.input(Tensor::from_parts(vec![1, self.dim_in], e));
        let h = self.l1.forward(g, e);
        let h = g.silu(h);
        Ok(self.l2.forward(g, h))
    }
}

/// Position-wise MLP with the timestep code added after normalization.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    norm: Norm,
    l1: Linear,
    l2: Linear,
}

impl MlpBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, ffn_mult: usize) -> Self {
        let hidden = dim * ffn_mult.max(1);
        Self {
            norm: Norm::new(ps, &format!("{name}.norm"), dim),
            l1: Linear::new(ps, &format!("{name}.l1"), dim, hidden),
            l2: Linear::new(ps, &format!("{name}.l2"), hidden, dim),
        }
    }

    /// `temb` is a `[1, dim]` row broadcast over all tokens.
    pub fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Var {
        let h = self.norm.forward(g, x);
        let h = g.add_row(h, temb);
        let h = self.l1.forward(g, h);
        let h = g.gelu(h);
        let h = self.l2.forward(g, h);
        g.add(x, h)
    }
}

