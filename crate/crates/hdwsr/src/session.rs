//! A model with its parameters, ready to sample.

use std::path::Path;

use hdwsr_core::attention::FlopLedger;
use hdwsr_core::diffusion::{compose_sr, reverse_step};
use hdwsr_core::metrics::{flop_report, FlopReport};
use hdwsr_core::model::{
    ha_net_forward, he_net_forward, AttentionMode, Checkpoint, GuidanceMode, GuidancePyramid, HdwModel,
};
use hdwsr_core::nn::{Adam, ParamStore};
use hdwsr_core::presr::{presr_generate, LightCnn, PreSrMode};
use hdwsr_core::{Error, FeatureMap, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub struct Session {
    pub cfg: RunConfig,
    pub model: HdwModel,
    pub ps: ParamStore,
    pub cnn: Option<LightCnn>,
}

impl Session {
    /// Freshly initialized parameters, seeded by `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg)
    }

    /// Skips the path checks of [`RunConfig::validate`]: a checkpoint may be
    /// used on a machine that lacks the training folders.
    fn build(cfg: &RunConfig) -> Result<Self> {
        let mut ps = ParamStore::new(cfg.seed);
        let model = HdwModel::new(&mut ps, &cfg.model_config())?;
        // Registered after the model so that the model's tensors keep their
        // positions whether or not the light CNN is present.
        let cnn = (cfg.presr.mode == PreSrMode::LightCnn)
            .then(|| LightCnn::new(&mut ps, cfg.model.in_channels, cfg.presr.hidden));
        Ok(Self {
            cfg: cfg.clone(),
            model,
            ps,
            cnn,
        })
    }

    /// Rebuilds the session a checkpoint was written from. Also returns the
    /// optimizer state and the iteration count.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, Adam, u64)> {
        let ck = Checkpoint::load(path)?;
        let cfg = RunConfig::from_json(&ck.config)?;
        let mut s = Self::build(&cfg)?;
        let opt = ck.restore(&mut s.ps)?;
        Ok((s, opt, ck.iteration))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(path)?.0)
    }

    pub fn scale(&self) -> usize {
        self.cfg.data.scale
    }

    /// Checks that an LR image of `shape` yields an HR image the model accepts.
    pub fn check_lr(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = shape;
        self.model.check_image((c, h * self.scale(), w * self.scale()))
    }

    pub fn presr(&self, lr: &FeatureMap) -> Result<FeatureMap> {
        self.check_lr(lr.shape())?;
        presr_generate(lr, &self.cfg.presr_source(), self.cnn.as_ref().map(|c| (c, &self.ps)))
    }

    /// Guidance pyramid for `presr`, or an empty one when the model or the
    /// attention mode does not use it.
    pub fn guidance(&self, presr: &FeatureMap, mode: AttentionMode) -> Result<GuidancePyramid> {
        if self.model.he.is_some() && self.model.cfg.guidance == GuidanceMode::HeNet && mode.uses_guidance() {
            Ok(he_net_forward(&self.model, &self.ps, presr)?.1)
        } else {
            Ok(GuidancePyramid { levels: Vec::new() })
        }
    }

    /// Super-resolves `lr`: the reverse chain from seeded Gaussian noise,
    /// added to the pre-upsampled image and clamped.
    pub fn sample(&self, lr: &FeatureMap, seed: u64, mode: AttentionMode) -> Result<FeatureMap> {
        self.check_lr(lr.shape())?;
        let presr = self.presr(lr)?;
        let guidance = self.guidance(&presr, mode)?;
        let (c, h, w) = presr.shape();
        let s = &self.model.schedule;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = FeatureMap::randn(c, h, w, &mut rng);
        for t in (1..=s.steps()).rev() {
            let eps = ha_net_forward(&self.model, &self.ps, &x, t, &guidance, mode, None)?;
            let z = if t > 1 {
                FeatureMap::randn(c, h, w, &mut rng)
            } else {
                FeatureMap::zeros(c, h, w)
            };
            x = reverse_step(&x, &eps, t, s, &z)?;
            if !x.is_finite() {
                return Err(Error::Contract(format!("reverse chain diverged at step {t}")));
            }
        }
        compose_sr(&presr, &x)
    }

    /// Multiply-accumulate counts of one noise prediction at the last step
    /// for an LR input of `shape`.
    pub fn flops(&self, shape: (usize, usize, usize), mode: AttentionMode) -> Result<FlopReport> {
        self.check_lr(shape)?;
        let (c, h, w) = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let lr = FeatureMap::rand_uniform(c, h, w, 0.0, 1.0, &mut rng);
        let presr = self.presr(&lr)?;
        let guidance = self.guidance(&presr, mode)?;
        let (c, h, w) = presr.shape();
        let x = FeatureMap::randn(c, h, w, &mut rng);
        let ledger = FlopLedger::new();
        let t = self.model.schedule.steps();
        ha_net_forward(&self.model, &self.ps, &x, t, &guidance, mode, Some(&ledger))?;
        flop_report(&ledger)
    }
}
