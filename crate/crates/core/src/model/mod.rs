//! HE-Net (guidance extractor) and HA-Net (noise predictor), their losses,
//! introspection and checkpoints.

mod checkpoint;
mod config;
mod ha_net;
mod he_net;
pub mod layers;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{AttentionMode, GuidanceMode, ModelConfig, SamplingMode, ScheduleConfig};
pub use ha_net::HaNet;
pub use he_net::{HeNet, HeOutput};
pub use layers::timestep_embed;

use crate::attention::{FlopLedger, GraphAttention};
use crate::autograd::{Graph, Var};
use crate::diffusion::{self, LossTerms, NoiseSchedule};
use crate::error::{dim_err, Result};
use crate::nn::ParamStore;
use crate::tensor::{FeatureMap, Tensor};

/// Per-forward attention settings and the mask record.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub mode: AttentionMode,
    pub attn: GraphAttention,
}

impl ForwardCtx {
    pub fn new(mode: AttentionMode) -> Self {
        Self {
            mode,
            attn: GraphAttention::new(mode.rule()),
        }
    }
}

/// High subbands exported by HE-Net, finest level first. Each entry stacks
/// `[lh; hl; hh]` along channels (level `j` has `3·C·2^(j-1)` channels).
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePyramid {
    pub levels: Vec<FeatureMap>,
}

impl GuidancePyramid {
    /// `(lh, hl, hh)` of level `j` (0-based).
    pub fn triplet(&self, j: usize) -> (FeatureMap, FeatureMap, FeatureMap) {
        let m = &self.levels[j];
        let c = m.channels() / 3;
        (m.slice_channels(0, c), m.slice_channels(c, c), m.slice_channels(2 * c, c))
    }
}

/// Constructed layer counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub dfa: Vec<usize>,
    pub decoder: Vec<usize>,
    pub encoder_swin: Vec<usize>,
    pub pfa: usize,
    pub parameters: usize,
}

/// Scalar loss nodes of one training example.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_he: Option<Var>,
    pub l_ha: Var,
    pub eps_pred: Var,
}

/// Both networks.
#[derive(Clone, Debug)]
pub struct HdwModel {
    pub cfg: ModelConfig,
    pub schedule: NoiseSchedule,
    pub he: Option<HeNet>,
    pub ha: HaNet,
}

fn map_var(g: &mut Graph, m: &FeatureMap) -> Var {
    g.input(Tensor::from(m))
}

fn var_map(g: &Graph, v: Var) -> FeatureMap {
    g.value(v).to_feature_map().expect("graph maps are C x H x W")
}

impl HdwModel {
    /// Validates `cfg` and registers every parameter in `ps`.
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let he = (cfg.guidance != GuidanceMode::None).then(|| HeNet::new(ps, cfg));
        let ha = HaNet::new(ps, cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            schedule: cfg.schedule.build()?,
            he,
            ha,
        })
    }

    pub fn layer_counts(&self, ps: &ParamStore) -> LayerCounts {
        LayerCounts {
            dfa: self.ha.dfa_counts(),
            decoder: self.ha.decoder_counts(),
            encoder_swin: self.ha.encoder_swin_counts(),
            pfa: self.ha.pfa_count(),
            parameters: ps.num_scalars(),
        }
    }

    /// Checks that a `C × H × W` image fits the configured channel count and levels.
    pub fn check_image(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = shape;
        let m = self.cfg.size_multiple();
        if c != self.cfg.in_channels {
            return Err(dim_err(format!(
                "image has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(dim_err(format!(
                "image {h}x{w} is not divisible by {m} ({} wavelet levels)",
                self.cfg.levels
            )));
        }
        Ok(())
    }

    /// HE-Net on the graph; `None` when guidance is disabled.
    pub fn guidance(&self, g: &mut Graph, presr: Var) -> Option<HeOutput> {
        self.he.as_ref().map(|he| he.forward(g, presr))
    }

    pub fn predict_eps(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        x_t: Var,
        t: usize,
        guidance: &[Var],
    ) -> Result<Var> {
        let out = self.ha.forward(g, ctx, x_t, t as f64, guidance)?;
        if !self.cfg.residual_head {
            return Ok(out);
        }
        if t == 0 || t > self.schedule.steps() {
            return Err(crate::Error::Index {
                index: t,
                max: self.schedule.steps(),
            });
        }
        let ab = self.schedule.alpha_bar(t);
        let d = g.scale(out, ab.sqrt());
        let d = g.sub(x_t, d);
        Ok(g.scale(d, 1.0 / (1.0 - ab).sqrt()))
    }

    /// `β·L_HE + (1−β)·L_HA` for one `(presr, x_t, t, ε)` example. Without a
    /// guidance network the HE term is zero.
    pub fn training_loss(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        presr: Var,
        x_t: Var,
        t: usize,
        eps: Var,
    ) -> Result<LossVars> {
        let he = self.guidance(g, presr);
        let highs = he.as_ref().map(|o| o.highs.clone()).unwrap_or_default();
        let eps_pred = self.predict_eps(g, ctx, x_t, t, &highs)?;
        g.set_scope("loss");
        let l_ha = g.mse(eps_pred, eps);
        let beta = self.cfg.beta_weight;
        let l_he = he.map(|o| {
            let rms = g.rms_diff(o.recon, presr);
            let mad = g.mean_abs_diff(o.recon, presr);
            g.add(rms, mad)
        });
        let wa = g.scale(l_ha, 1.0 - beta);
        let total = match l_he {
            Some(l) => {
                let wh = g.scale(l, beta);
                g.add(wh, wa)
            }
            None => wa,
        };
        Ok(LossVars {
            total,
            l_he,
            l_ha,
            eps_pred,
        })
    }

    /// Reads the scalar terms of `vars` back from the graph.
    pub fn loss_terms(&self, g: &Graph, vars: &LossVars) -> Result<LossTerms> {
        let l_he = vars.l_he.map_or(0.0, |v| g.value(v).item());
        diffusion::loss_total(l_he, g.value(vars.l_ha).item(), self.cfg.beta_weight)
    }
}

/// Reconstruction of `presr` and its guidance pyramid.
pub fn he_net_forward(model: &HdwModel, ps: &ParamStore, presr: &FeatureMap) -> Result<(FeatureMap, GuidancePyramid)> {
    model.check_image(presr.shape())?;
    let he = model
        .he
        .as_ref()
        .ok_or_else(|| crate::Error::Config("the model was built without a guidance network".into()))?;
    let mut g = Graph::new(ps);
    let x = map_var(&mut g, presr);
    let out = he.forward(&mut g, x);
    let levels = out.highs.iter().map(|&v| var_map(&g, v)).collect();
    Ok((var_map(&g, out.recon), GuidancePyramid { levels }))
}

/// Noise prediction for `x_t` at step `t`. `guidance` may be empty when the
/// model has no guidance network or the attention mode ignores it.
pub fn ha_net_forward(
    model: &HdwModel,
    ps: &ParamStore,
    x_t: &FeatureMap,
    t: usize,
    guidance: &GuidancePyramid,
    mode: AttentionMode,
    ledger: Option<&FlopLedger>,
) -> Result<FeatureMap> {
    model.check_image(x_t.shape())?;
    let cfg = &model.cfg;
    let needs = model.he.is_some() && cfg.guidance == GuidanceMode::HeNet && mode.uses_guidance();
    if needs {
        if guidance.levels.len() != cfg.levels {
            return Err(dim_err(format!(
                "guidance has {} levels, model expects {}",
                guidance.levels.len(),
                cfg.levels
            )));
        }
        for (j, m) in guidance.levels.iter().enumerate() {
            let s = 1 << (j + 1);
            let want = (3 * cfg.width(j + 1), x_t.height() / s, x_t.width() / s);
            if m.shape() != want {
                return Err(dim_err(format!(
                    "guidance level {} is {:?}, expected {:?}",
                    j + 1,
                    m.shape(),
                    want
                )));
            }
        }
    }
    let mut g = match ledger {
        Some(l) => Graph::with_ledger(ps, l),
        None => Graph::new(ps),
    };
    let x = map_var(&mut g, x_t);
    let highs: Vec<Var> = if needs {
        guidance.levels.iter().map(|m| map_var(&mut g, m)).collect()
    } else {
        Vec::new()
    };
    let mut ctx = ForwardCtx::new(mode);
    let out = model.predict_eps(&mut g, &mut ctx, x, t, &highs)?;
    Ok(var_map(&g, out))
}

/// Root-mean-square difference plus mean absolute difference.
pub fn loss_he(target: &FeatureMap, recon: &FeatureMap) -> Result<f64> {
    target.check_same_shape(recon, "loss_he")?;
    let n = target.len() as f64;
    let (mut sq, mut ab) = (0.0, 0.0);
    for (a, b) in target.data().iter().zip(recon.data()) {
        let d = a - b;
        sq += d * d;
        ab += d.abs();
    }
    Ok((sq / n).sqrt() + ab / n)
}
