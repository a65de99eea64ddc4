use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::MaskRule;
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};

/// Linear beta schedule parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// 100 steps, with the endpoints of the common 1000-step 1e-4 → 0.02
    /// schedule scaled by 1000/100 so that the final ᾱ still ends near zero.
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        diffusion::make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// How the filtered attention map is chosen, and where keys come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Dtb,
    /// Per-row top-k; `None` keeps half of the keys.
    TopK(Option<usize>),
    Dense,
    /// DTB masking with keys and values taken from the query tokens.
    SelfOnly,
}

impl AttentionMode {
    pub fn rule(self) -> MaskRule {
        match self {
            Self::Dtb | Self::SelfOnly => MaskRule::Dtb,
            Self::TopK(k) => MaskRule::TopK(k),
            Self::Dense => MaskRule::Dense,
        }
    }

    pub fn uses_guidance(self) -> bool {
        self != Self::SelfOnly
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dtb => f.write_str("dtb"),
            Self::TopK(None) => f.write_str("topk"),
            Self::TopK(Some(k)) => write!(f, "topk:{k}"),
            Self::Dense => f.write_str("dense"),
            Self::SelfOnly => f.write_str("self-only"),
        }
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let topk = |k: &str| {
            k.trim_end_matches(')')
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .map(|k| Self::TopK(Some(k)))
                .ok_or_else(|| Error::Config(format!("bad top-k size in {s:?}")))
        };
        match s.as_str() {
            "dtb" => Ok(Self::Dtb),
            "dense" => Ok(Self::Dense),
            "self-only" | "self" => Ok(Self::SelfOnly),
            "topk" | "top-k" => Ok(Self::TopK(None)),
            _ => {
                if let Some(k) = s.strip_prefix("topk:").or_else(|| s.strip_prefix("topk(")) {
                    topk(k)
                } else {
                    Err(Error::Config(format!(
                        "unknown attention mode {s:?} (dtb, topk, topk:K, dense, self-only)"
                    )))
                }
            }
        }
    }
}

/// Down/up-sampling operator of HA-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Dwt,
    /// Stride-2 convolution down, 1×1 convolution plus pixel shuffle up.
    StridedConv,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dwt => "dwt",
            Self::StridedConv => "strided-conv",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dwt" => Ok(Self::Dwt),
            "strided-conv" | "cnn" | "conv" => Ok(Self::StridedConv),
            other => Err(Error::Config(format!(
                "unknown sampling mode {other:?} (dwt, strided-conv)"
            ))),
        }
    }
}

/// Where HA-Net's encoder keys and values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    HeNet,
    /// HA-Net's own high subbands at each level.
    HaNetSelf,
    /// No guidance network at all; encoder blocks attend to themselves.
    None,
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HeNet => "he-net",
            Self::HaNetSelf => "ha-net-self",
            Self::None => "none",
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "he-net" | "henet" => Ok(Self::HeNet),
            "ha-net-self" | "self" => Ok(Self::HaNetSelf),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown guidance mode {other:?} (he-net, ha-net-self, none)"
            ))),
        }
    }
}

macro_rules! serde_via_str {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_str!(AttentionMode);
serde_via_str!(SamplingMode);
serde_via_str!(GuidanceMode);

/// Architecture of the two networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image channels.
    pub in_channels: usize,
    /// Width `C` of the first level; level `j` uses `C·2^(j-1)`.
    pub base_channels: usize,
    pub levels: usize,
    /// DFA blocks per encoder stage.
    pub dfa_repeats: Vec<usize>,
    /// Windowed-attention layers per decoder stage.
    pub decoder_repeats: Vec<usize>,
    /// Windowed-attention layers ahead of each stage's DFA blocks.
    pub encoder_swin: usize,
    /// Self-attention DFA blocks at the bottleneck.
    pub pfa_repeats: usize,
    pub swin_window: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Grid-distance score bias inside DFA blocks (`None` disables it).
    pub locality: Option<f64>,
    /// Width of the sinusoidal timestep code.
    pub time_dim: usize,
    pub beta_weight: f64,
    pub schedule: ScheduleConfig,
    /// Read HA-Net's head as a residual estimate `D` and return the noise
    /// `(x_t − √ᾱ_t·D) / √(1−ᾱ_t)` it implies; otherwise the head is the noise.
    pub residual_head: bool,
    /// Not serialized: run configurations carry the two ablation switches
    /// in their own section.
    #[serde(skip)]
    pub sampling: SamplingMode,
    #[serde(skip)]
    pub guidance: GuidanceMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            levels: 3,
            dfa_repeats: vec![2, 4, 4],
            decoder_repeats: vec![4, 6, 6],
            encoder_swin: 2,
            pfa_repeats: 2,
            swin_window: 8,
            heads: 1,
            ffn_mult: 2,
            locality: Some(1.0),
            time_dim: 32,
            beta_weight: 0.2,
            schedule: ScheduleConfig::default(),
            residual_head: true,
            sampling: SamplingMode::Dwt,
            guidance: GuidanceMode::HeNet,
        }
    }
}

impl ModelConfig {
    /// Channel width at level `j` (1-based); level 0 is the stem width.
    pub fn width(&self, j: usize) -> usize {
        self.base_channels << j.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        for (name, v) in [("dfa_repeats", &self.dfa_repeats), ("decoder_repeats", &self.decoder_repeats)] {
            if v.len() != self.levels {
                return bad(format!("{name} has {} entries but levels = {}", v.len(), self.levels));
            }
            if v.contains(&0) {
                return bad(format!("{name} entries must be at least 1"));
            }
        }
        if self.pfa_repeats == 0 || self.swin_window == 0 || self.ffn_mult == 0 {
            return bad("pfa_repeats, swin_window and ffn_mult must be positive".into());
        }
        if self.heads == 0 || !self.base_channels.is_multiple_of(self.heads) {
            return bad(format!(
                "heads ({}) must divide base_channels ({})",
                self.heads, self.base_channels
            ));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim must be even and positive, got {}", self.time_dim));
        }
        if let Some(g) = self.locality {
            if !(g.is_finite() && g >= 0.0) {
                return bad(format!("locality must be a nonnegative number, got {g}"));
            }
        }
        if self.sampling == SamplingMode::StridedConv && self.guidance == GuidanceMode::HaNetSelf {
            return bad("ha-net-self guidance needs wavelet sampling (strided convolutions have no high subbands)".into());
        }
        diffusion::check_beta_weight(self.beta_weight)?;
        self.schedule.build()?;
        Ok(())
    }

    /// Required divisor of the image height and width.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }
}
