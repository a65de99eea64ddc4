//! Run configuration: a TOML file, then `--set key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use hdwsr_core::model::{AttentionMode, GuidanceMode, ModelConfig, SamplingMode};
use hdwsr_core::presr::{PreSrMode, PreSrSource};
use hdwsr_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub presr: PreSrConfig,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the iteration budget.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub iterations: u64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; absent means no clipping.
    pub clip_norm: Option<f64>,
    pub lr_schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            iterations: 1000,
            batch_size: 4,
            clip_norm: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl OptimConfig {
    /// Learning rate for 0-based iteration `it`.
    pub fn lr_at(&self, it: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let p = it as f64 / self.iterations.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    /// HR crop side.
    pub patch: usize,
    pub scale: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            eval_dir: None,
            patch: 64,
            scale: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreSrConfig {
    pub mode: PreSrMode,
    /// Pre-upsampled image for external mode (sampling only).
    pub path: Option<PathBuf>,
    /// Hidden width of the light CNN.
    pub hidden: usize,
    /// Fit the light CNN to the HR crops alongside the diffusion model.
    pub trainable: bool,
}

impl Default for PreSrConfig {
    fn default() -> Self {
        Self {
            mode: PreSrMode::Bicubic,
            path: None,
            hidden: 16,
            trainable: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub attention: AttentionMode,
    pub sampling: SamplingMode,
    pub guidance: GuidanceMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            attention: AttentionMode::Dtb,
            sampling: SamplingMode::Dwt,
            guidance: GuidanceMode::HeNet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}


impl RunConfig {
    /// Reads `path` (if any), applies `key.path=value` overrides in order
    /// and validates the result.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            apply_override(&mut table, s)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The model configuration with the ablation switches applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            sampling: self.ablation.sampling,
            guidance: self.ablation.guidance,
            ..self.model.clone()
        }
    }

    pub fn presr_source(&self) -> PreSrSource {
        PreSrSource {
            mode: self.presr.mode,
            scale: self.data.scale,
            path: self.presr.path.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model_config();
        m.validate()?;
        let bad = |s: String| Err(Error::Config(s));
        if self.data.scale == 0 {
            return bad("data.scale must be at least 1".into());
        }
        let unit = self.data.scale * m.size_multiple();
        if self.data.patch == 0 || !self.data.patch.is_multiple_of(unit) {
            return bad(format!(
                "data.patch ({}) must be a positive multiple of scale·2^levels = {unit}",
                self.data.patch
            ));
        }
        if !(self.optim.lr.is_finite() && self.optim.lr > 0.0) {
            return bad(format!("optim.lr must be positive, got {}", self.optim.lr));
        }
        if self.optim.batch_size == 0 {
            return bad("optim.batch_size must be at least 1".into());
        }
        if let Some(c) = self.optim.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("optim.clip_norm must be positive, got {c}"));
            }
        }
        if self.output.checkpoint_every == 0 || self.output.log_every == 0 {
            return bad("output.checkpoint_every and output.log_every must be at least 1".into());
        }
        if self.presr.hidden == 0 {
            return bad("presr.hidden must be at least 1".into());
        }
        if self.presr.mode == PreSrMode::External && self.presr.path.is_none() {
            return bad("presr.mode = \"external\" needs presr.path".into());
        }
        for p in [&self.data.train_dir, &self.data.eval_dir, &self.presr.path].into_iter().flatten() {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// The configuration echoed into checkpoints.
    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("echoed config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key in override {spec:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().expect("nonempty key");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::load(
            None,
            &[
                "model.beta_weight=0.5".into(),
                "ablation.attention=topk:8".into(),
                "optim.lr_schedule=cosine".into(),
                "seed=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.beta_weight, 0.5);
        assert_eq!(cfg.ablation.attention, AttentionMode::TopK(Some(8)));
        assert_eq!(cfg.optim.lr_schedule, LrSchedule::Cosine);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::load(None, &["model.nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["data.patch=60".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["missing-equals".into()]), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::load(None, &["data.train_dir=/definitely/not/here".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toml_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.optim.clip_norm = Some(1.0);
        cfg.ablation.guidance = GuidanceMode::None;
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn cosine_decays_to_zero() {
        let o = OptimConfig {
            lr_schedule: LrSchedule::Cosine,
            iterations: 10,
            ..OptimConfig::default()
        };
        assert_eq!(o.lr_at(0), o.lr);
        assert!((o.lr_at(5) - 0.5 * o.lr).abs() < 1e-15);
        assert!(o.lr_at(10).abs() < 1e-15);
    }
}
