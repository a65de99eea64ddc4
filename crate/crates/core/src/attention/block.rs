//! The DFA transformer block on the autodiff graph.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sparse::{LocalityBias, SparsePattern};
use super::{select_keep, values_on, AttentionState, MaskRule};
use crate::attention::flops::FlopLedger;
use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Linear, Norm, ParamStore};
use crate::tensor::{Mask, Matrix, Tensor};

/// Shape options of a DFA block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfaConfig {
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of the model width.
    pub ffn_mult: usize,
    /// Strength of the grid-distance score bias; `None` disables it.
    pub locality: Option<f64>,
}

impl Default for DfaConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            ffn_mult: 2,
            locality: Some(1.0),
        }
    }
}

/// Per-layer diagnostics collected during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub label: String,
    pub head: usize,
    pub nnz_in: usize,
    pub nnz_out: usize,
    pub k_star: Option<f64>,
    pub degenerate: bool,
}

/// Mask selection for one forward pass.
///
/// In recording mode every survivor set is stored; after [`freeze`](Self::freeze)
/// the same survivor sets are replayed in order, which makes the masks
/// constants when the pass is re-run under perturbed parameters.
#[derive(Clone, Debug)]
pub struct GraphAttention {
    pub rule: MaskRule,
    tape: Vec<Vec<bool>>,
    replay: bool,
    cursor: usize,
    pub trace: Vec<LayerTrace>,
}

impl GraphAttention {
    pub fn new(rule: MaskRule) -> Self {
        Self {
            rule,
            tape: Vec::new(),
            replay: false,
            cursor: 0,
            trace: Vec::new(),
        }
    }

    /// Switches to replaying the masks recorded so far.
    pub fn freeze(&mut self) {
        self.replay = true;
        self.rewind();
    }

    /// Starts a new pass (clears the trace, rewinds the replay cursor).
    pub fn rewind(&mut self) {
        self.cursor = 0;
        self.trace.clear();
    }

    pub fn is_frozen(&self) -> bool {
        self.replay
    }

    fn select(&mut self, label: &str, head: usize, pat: &SparsePattern, oam: &[f64]) -> Result<Vec<bool>> {
        let (keep, thr) = if self.replay {
            let keep = self
                .tape
                .get(self.cursor)
                .cloned()
                .ok_or_else(|| Error::Contract("no recorded mask left to replay".into()))?;
            if keep.len() != pat.nnz() {
                return Err(Error::Contract("replayed mask does not fit the current support".into()));
            }
            self.cursor += 1;
            (keep, None)
        } else {
            let (keep, thr) = select_keep(pat, oam, self.rule)?;
            self.tape.push(keep.clone());
            (keep, thr)
        };
        self.trace.push(LayerTrace {
            label: label.to_string(),
            head,
            nnz_in: pat.nnz(),
            nnz_out: 0,
            k_star: thr.as_ref().map(|t| t.k_star),
            degenerate: thr.is_some_and(|t| t.degenerate),
        });
        Ok(keep)
    }
}

/// Running `(A, I)` per head along a chain of DFA blocks; `None` is the
/// uniform all-ones initial state.
#[derive(Clone, Debug)]
pub struct DfaChain {
    heads: Vec<Option<(Var, Arc<SparsePattern>)>>,
    pub layer: usize,
}

impl DfaChain {
    pub fn new(heads: usize) -> Self {
        Self {
            heads: vec![None; heads],
            layer: 0,
        }
    }

    /// Support of head `h`'s current map.
    pub fn pattern(&self, h: usize) -> Option<&Arc<SparsePattern>> {
        self.heads[h].as_ref().map(|(_, p)| p)
    }

    pub fn values(&self, h: usize) -> Option<Var> {
        self.heads[h].as_ref().map(|(v, _)| *v)
    }
}

/// Token inputs of a DFA block.
#[derive(Clone, Copy, Debug)]
pub struct DfaInput {
    /// Query tokens, `N × d`, row-major over a grid `width` wide.
    pub x: Var,
    pub width: usize,
    /// Key/value tokens `M × d` (guidance subbands stacked along the token
    /// axis, each on the query grid); `None` attends to `x` itself.
    pub kv: Option<Var>,
}

/// Pre-norm sparse cross-attention followed by a position-wise feed-forward
/// sublayer, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct DfaBlock {
    pub name: String,
    pub dim: usize,
    pub cfg: DfaConfig,
    norm_q: Norm,
    norm_kv: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_ff: Norm,
    ff1: Linear,
    ff2: Linear,
}

impl DfaBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, cfg: &DfaConfig) -> Result<Self> {
        Self::build(ps, name, dim, cfg, false)
    }

    /// Output projection and feed-forward output start at zero, so the fresh
    /// block is the identity on its query tokens.
    pub fn zero_output(ps: &mut ParamStore, name: &str, dim: usize, cfg: &DfaConfig) -> Result<Self> {
        Self::build(ps, name, dim, cfg, true)
    }

    fn build(ps: &mut ParamStore, name: &str, dim: usize, cfg: &DfaConfig, zero: bool) -> Result<Self> {
        if cfg.heads == 0 || !dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide width {dim}",
                cfg.heads
            )));
        }
        let hidden = dim * cfg.ffn_mult.max(1);
        let out = |ps: &mut ParamStore, n: &str, i, o| {
            if zero {
                Linear::zeroed(ps, n, i, o)
            } else {
                Linear::new(ps, n, i, o)
            }
        };
        Ok(Self {
            name: name.to_string(),
            dim,
            cfg: cfg.clone(),
            norm_q: Norm::new(ps, &format!("{name}.norm_q"), dim),
            norm_kv: Norm::new(ps, &format!("{name}.norm_kv"), dim),
            wq: Linear::new(ps, &format!("{name}.q"), dim, dim),
            wk: Linear::new(ps, &format!("{name}.k"), dim, dim),
            wv: Linear::new(ps, &format!("{name}.v"), dim, dim),
            wo: out(ps, &format!("{name}.o"), dim, dim),
            norm_ff: Norm::new(ps, &format!("{name}.norm_ff"), dim),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dim, hidden),
            ff2: out(ps, &format!("{name}.ff2"), hidden, dim),
        })
    }

    /// Runs the block and advances `chain` by one layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut GraphAttention,
        input: DfaInput,
        chain: &mut DfaChain,
    ) -> Result<Var> {
        let heads = self.cfg.heads;
        if chain.heads.len() != heads {
            return Err(dim_err("attention chain head count differs from the block"));
        }
        let prev_scope = g.scope().to_string();
        g.set_scope(self.name.clone());
        let n = g.value(input.x).shape()[0];
        let xn = self.norm_q.forward(g, input.x);
        let kvn = match input.kv {
            Some(kv) => self.norm_kv.forward(g, kv),
            None => xn,
        };
        let m = g.value(kvn).shape()[0];
        if input.width == 0 || !n.is_multiple_of(input.width) || !m.is_multiple_of(n) {
            return Err(dim_err(format!(
                "{}: {m} key tokens do not tile {n} query tokens of width {}",
                self.name, input.width
            )));
        }
        let q = self.wq.forward(g, xn);
        let k = self.wk.forward(g, kvn);
        let v = self.wv.forward(g, kvn);
        let dh = self.dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias = self.cfg.locality.map(|gamma| LocalityBias {
            query_width: input.width,
            key_width: input.width,
            key_period: n,
            gamma,
        });
        let mut initial: Option<Arc<SparsePattern>> = None;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let (prev, pat_in) = match &chain.heads[h] {
                Some((a, p)) => {
                    if p.rows() != n || p.cols() != m {
                        return Err(dim_err("attention state does not match N x M"));
                    }
                    (Some(*a), p.clone())
                }
                None => (None, initial.get_or_insert_with(|| {
                    Arc::new(match &bias {
                        Some(b) => b.support(n, m),
                        None => SparsePattern::dense(n, m),
                    })
                }).clone()),
            };
            let oam = g.sparse_softmax(qh, kh, pat_in.clone(), scale, bias.as_ref());
            let keep = ctx.select(&self.name, h, &pat_in, g.value(oam).data())?;
            let (a, pat) = g.propagate(prev, oam, pat_in, &keep);
            if let Some(t) = ctx.trace.last_mut() {
                t.nnz_out = pat.nnz();
            }
            outs.push(g.sparse_attend(a, vh, pat.clone()));
            chain.heads[h] = Some((a, pat));
        }
        chain.layer += 1;
        let o = g.concat_cols(&outs);
        let o = self.wo.forward(g, o);
        let y = g.add(input.x, o);
        let f = self.norm_ff.forward(g, y);
        let f = self.ff1.forward(g, f);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, f);
        let y = g.add(y, f);
        g.set_scope(prev_scope);
        Ok(y)
    }

    /// Evaluates the block on plain matrices. `states` holds one
    /// [`AttentionState`] per head (use [`AttentionState::initial`] at layer 0)
    /// and is returned advanced by one layer.
    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        ps: &ParamStore,
        x: &Matrix,
        width: usize,
        guidance: Option<&Matrix>,
        states: &[AttentionState],
        rule: MaskRule,
        ledger: Option<&FlopLedger>,
    ) -> Result<(Matrix, Vec<AttentionState>)> {
        if x.cols != self.dim || guidance.is_some_and(|gm| gm.cols != self.dim) {
            return Err(dim_err(format!("{}: token width must be {}", self.name, self.dim)));
        }
        if states.len() != self.cfg.heads {
            return Err(dim_err("one attention state per head is required"));
        }
        let m = guidance.map_or(x.rows, |gm| gm.rows);
        let mut g = match ledger {
            Some(l) => Graph::with_ledger(ps, l),
            None => Graph::new(ps),
        };
        let xv = g.input(Tensor::from_parts(vec![x.rows, x.cols], x.data.clone()));
        let kv = guidance.map(|gm| g.input(Tensor::from_parts(vec![gm.rows, gm.cols], gm.data.clone())));
        let mut chain = DfaChain::new(self.cfg.heads);
        for (h, s) in states.iter().enumerate() {
            if s.a.rows != x.rows || s.a.cols != m {
                return Err(dim_err("attention state does not match N x M"));
            }
            if s.layer > 0 {
                s.validate()?;
                let pat = Arc::new(SparsePattern::from_mask(&s.i));
                let vals = values_on(&s.a, &pat);
                let var = g.input(Tensor::from_parts(vec![vals.len()], vals));
                chain.heads[h] = Some((var, pat));
            }
        }
        let mut ctx = GraphAttention::new(rule);
        let y = self.forward(
            &mut g,
            &mut ctx,
            DfaInput {
                x: xv,
                width,
                kv,
            },
            &mut chain,
        )?;
        let out = Matrix::from_vec(x.rows, x.cols, g.value(y).data().to_vec())?;
        let next = states
            .iter()
            .enumerate()
            .map(|(h, s)| {
                let pat = chain.pattern(h).expect("every head ran");
                let vals = g.value(chain.values(h).expect("every head ran")).data();
                let mut a = Matrix::zeros(pat.rows(), pat.cols());
                for i in 0..pat.rows() {
                    for (kk, &j) in pat.row_range(i).zip(pat.row_cols(i)) {
                        a.set(i, j as usize, vals[kk]);
                    }
                }
                AttentionState {
                    i: Mask::support_of(&a),
                    a,
                    layer: s.layer + 1,
                }
            })
            .collect();
        Ok((out, next))
    }
}
