use crate::attention::{DfaBlock, DfaChain, DfaConfig, DfaInput};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{Conv, ParamStore};

use super::layers::{MlpBlock, SwinLayer, TimeMlp};
use super::{ForwardCtx, GuidanceMode, ModelConfig, SamplingMode};

/// Noise predictor: wavelet U-shaped network with guided DFA encoders, a
/// self-attention bottleneck and timestep-conditioned windowed decoders.
#[derive(Clone, Debug)]
pub struct HaNet {
    levels: usize,
    widths: Vec<usize>,
    sampling: SamplingMode,
    guidance: GuidanceMode,
    stem: Conv,
    down: Vec<Conv>,
    enc_swin: Vec<Vec<SwinLayer>>,
    enc_dfa: Vec<Vec<DfaBlock>>,
    adjust: Vec<Conv>,
    pfa: Vec<DfaBlock>,
    up: Vec<Conv>,
    dec_swin: Vec<Vec<SwinLayer>>,
    dec_mlp: Vec<MlpBlock>,
    time: Vec<TimeMlp>,
    reduce: Vec<Conv>,
    head: Conv,
    heads: usize,
}

/// Splits stacked `[lh; hl; hh]` into three token blocks stacked along the token axis.
fn subband_tokens(g: &mut Graph, highs: Var, w: usize) -> Var {
    let parts: Vec<Var> = (0..3)
        .map(|b| {
            let s = g.slice_channels(highs, b * w, w);
            g.to_tokens(s)
        })
        .collect();
    g.concat_rows(&parts)
}

impl HaNet {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let l = cfg.levels;
        let widths: Vec<usize> = (1..=l).map(|j| cfg.width(j)).collect();
        let dfa_cfg = DfaConfig {
            heads: cfg.heads,
            ffn_mult: cfg.ffn_mult,
            locality: cfg.locality,
        };
        let swin = |ps: &mut ParamStore, name: String, w: usize, i: usize| {
            SwinLayer::new(ps, &name, w, cfg.heads, cfg.swin_window, i % 2 == 1, cfg.ffn_mult)
        };
        let stem = Conv::new(ps, "ha.stem", cfg.in_channels, widths[0], 3, 1);
        let mut down = Vec::new();
        let mut up = Vec::new();
        if cfg.sampling == SamplingMode::StridedConv {
            for j in 1..=l {
                let w = widths[j - 1];
                down.push(Conv::new(ps, &format!("ha.down{j}"), w, w, 3, 2));
                let mut c = Conv::new(ps, &format!("ha.up{j}"), w, 4 * w, 1, 1);
                c.pad = 0;
                up.push(c);
            }
        }
        let mut enc_swin = Vec::with_capacity(l);
        let mut enc_dfa = Vec::with_capacity(l);
        for j in 1..=l {
            let w = widths[j - 1];
            enc_swin.push(
                (0..cfg.encoder_swin)
                    .map(|i| swin(ps, format!("ha.enc{j}.swin{i}"), w, i))
                    .collect(),
            );
            enc_dfa.push(
                (0..cfg.dfa_repeats[j - 1])
                    .map(|i| DfaBlock::new(ps, &format!("ha.enc{j}.dfa{i}"), w, &dfa_cfg))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let adjust = (1..l)
            .map(|j| Conv::new(ps, &format!("ha.adjust{j}"), widths[j - 1], widths[j], 3, 1))
            .collect();
        let pfa = (0..cfg.pfa_repeats)
            .map(|i| DfaBlock::new(ps, &format!("ha.pfa{i}"), widths[l - 1], &dfa_cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut dec_swin = Vec::with_capacity(l);
        let mut dec_mlp = Vec::with_capacity(l);
        let mut time = Vec::with_capacity(l);
        for j in 1..=l {
            let w = widths[j - 1];
            dec_swin.push(
                (0..cfg.decoder_repeats[j - 1])
                    .map(|i| swin(ps, format!("ha.dec{j}.swin{i}"), w, i))
                    .collect(),
            );
            dec_mlp.push(MlpBlock::new(ps, &format!("ha.dec{j}.mlp"), w, cfg.ffn_mult));
            time.push(TimeMlp::new(ps, &format!("ha.dec{j}.time"), cfg.time_dim, w));
        }
        let reduce = (2..=l)
            .map(|j| Conv::new(ps, &format!("ha.reduce{j}"), widths[j - 1], widths[j - 2], 3, 1))
            .collect();
        let head = Conv::new(ps, "ha.head", widths[0], cfg.in_channels, 3, 1);
        if cfg.residual_head {
            // The residual estimate starts at zero: the pre-upsampled image alone.
            ps.get_mut(head.w).data_mut().fill(0.0);
        }
        Ok(Self {
            levels: l,
            widths,
            sampling: cfg.sampling,
            guidance: cfg.guidance,
            stem,
            down,
            enc_swin,
            enc_dfa,
            adjust,
            pfa,
            up,
            dec_swin,
            dec_mlp,
            time,
            reduce,
            head,
            heads: cfg.heads,
        })
    }

    pub fn dfa_counts(&self) -> Vec<usize> {
        self.enc_dfa.iter().map(Vec::len).collect()
    }

    pub fn decoder_counts(&self) -> Vec<usize> {
        self.dec_swin.iter().map(Vec::len).collect()
    }

    pub fn encoder_swin_counts(&self) -> Vec<usize> {
        self.enc_swin.iter().map(Vec::len).collect()
    }

    pub fn pfa_count(&self) -> usize {
        self.pfa.len()
    }

    /// Predicts the injected noise for `x_t` (`C × H × W`). `guidance` holds
    /// HE-Net's stacked high subbands per level when that source is active.
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        x_t: Var,
        t: f64,
        guidance: &[Var],
    ) -> Result<Var> {
        let prev_scope = g.scope().to_string();
        let shape = g.value(x_t).shape().to_vec();
        let (mut h, mut w) = (shape[1], shape[2]);
        g.set_scope("ha.stem");
        let mut f = self.stem.forward(g, x_t);
        // Per level: what the up path needs (own highs, or the pre-downsampling map).
        let mut skips = Vec::with_capacity(self.levels);
        let mut e = f;
        for j in 1..=self.levels {
            let c = self.widths[j - 1];
            if j > 1 {
                g.set_scope(format!("ha.adjust{}", j - 1));
                f = self.adjust[j - 2].forward(g, e);
            }
            g.set_scope(format!("ha.down{j}"));
            let ll = match self.sampling {
                SamplingMode::Dwt => {
                    let d = g.dwt(f);
                    skips.push(g.slice_channels(d, c, 3 * c));
                    g.slice_channels(d, 0, c)
                }
                SamplingMode::StridedConv => {
                    skips.push(f);
                    self.down[j - 1].forward(g, f)
                }
            };
            h /= 2;
            w /= 2;
            let mut tok = g.to_tokens(ll);
            for layer in &self.enc_swin[j - 1] {
                tok = layer.forward(g, tok, h, w);
            }
            let kv = if !ctx.mode.uses_guidance() {
                None
            } else {
                match self.guidance {
                    GuidanceMode::HeNet => Some(subband_tokens(g, guidance[j - 1], c)),
                    GuidanceMode::HaNetSelf => Some(subband_tokens(g, skips[j - 1], c)),
                    GuidanceMode::None => None,
                }
            };
            let mut chain = DfaChain::new(self.heads);
            for blk in &self.enc_dfa[j - 1] {
                tok = blk.forward(g, &mut ctx.attn, DfaInput { x: tok, width: w, kv }, &mut chain)?;
            }
            e = g.from_tokens(tok, h, w);
        }
        let mut tok = g.to_tokens(e);
        let mut chain = DfaChain::new(self.heads);
        for blk in &self.pfa {
            tok = blk.forward(g, &mut ctx.attn, DfaInput { x: tok, width: w, kv: None }, &mut chain)?;
        }
        let mut z = g.from_tokens(tok, h, w);
        for j in (1..=self.levels).rev() {
            g.set_scope(format!("ha.up{j}"));
            f = match self.sampling {
                SamplingMode::Dwt => {
                    let cat = g.concat_channels(&[z, skips[j - 1]]);
                    g.idwt(cat)
                }
                SamplingMode::StridedConv => {
                    let u = self.up[j - 1].forward(g, z);
                    let u = g.pixel_shuffle(u);
                    g.add(u, skips[j - 1])
                }
            };
            h *= 2;
            w *= 2;
            let mut tok = g.to_tokens(f);
            for layer in &self.dec_swin[j - 1] {
                tok = layer.forward(g, tok, h, w);
            }
            g.set_scope(format!("ha.dec{j}.mlp"));
            let temb = self.time[j - 1].forward(g, t)?;
            tok = self.dec_mlp[j - 1].forward(g, tok, temb);
            f = g.from_tokens(tok, h, w);
            if j > 1 {
                g.set_scope(format!("ha.reduce{j}"));
                z = self.reduce[j - 2].forward(g, f);
            }
        }
        g.set_scope("ha.head");
        let out = self.head.forward(g, f);
        g.set_scope(prev_scope);
        Ok(out)
    }
}
