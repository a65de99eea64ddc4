//! DDPM machinery in residual space: schedule, forward corruption, ancestral
//! reverse step, pair formation and the composite loss.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Precomputed `beta_t`, `alpha_t` and `alpha_bar_t` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear beta schedule over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Index {
                index: t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `HR − PreSR`: the signal the diffusion model learns to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap(FeatureMap);

impl ResidualMap {
    pub fn new(map: FeatureMap) -> Self {
        Self(map)
    }

    pub fn into_inner(self) -> FeatureMap {
        self.0
    }
}

impl Deref for ResidualMap {
    type Target = FeatureMap;

    fn deref(&self) -> &FeatureMap {
        &self.0
    }
}

/// Closed-form forward corruption `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &FeatureMap, t: usize, eps: &FeatureMap, s: &NoiseSchedule) -> Result<FeatureMap> {
    s.check(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One ancestral DDPM step from `x_t` to `x_{t-1}`.
///
/// `z` must be all zeros at `t = 1`.
pub fn reverse_step(
    x_t: &FeatureMap,
    eps_pred: &FeatureMap,
    t: usize,
    s: &NoiseSchedule,
    z: &FeatureMap,
) -> Result<FeatureMap> {
    s.check(t)?;
    x_t.check_same_shape(eps_pred, "reverse step")?;
    x_t.check_same_shape(z, "reverse step noise")?;
    if t == 1 && z.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Contract(
            "the final reverse step (t = 1) must not inject noise".into(),
        ));
    }
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let eps_coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let sigma = s.posterior_variance(t).sqrt();
    let out = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * n)
        .collect();
    Ok(x_t.with_data(out))
}

/// Residual target `hr − presr`.
pub fn form_pair(hr: &FeatureMap, presr: &FeatureMap) -> Result<ResidualMap> {
    Ok(ResidualMap(hr.zip_map(presr, |h, p| h - p)?))
}

/// `presr + residual` without clamping.
pub fn recompose(presr: &FeatureMap, residual: &FeatureMap) -> Result<FeatureMap> {
    presr.zip_map(residual, |p, r| p + r)
}

/// Final super-resolved image: `presr + residual` clamped to `[0, 1]`.
pub fn compose_sr(presr: &FeatureMap, residual: &FeatureMap) -> Result<FeatureMap> {
    presr.zip_map(residual, |p, r| (p + r).clamp(0.0, 1.0))
}

/// Mean squared error between true and predicted noise.
pub fn loss_ha(eps_true: &FeatureMap, eps_pred: &FeatureMap) -> Result<f64> {
    eps_true.check_same_shape(eps_pred, "noise loss")?;
    let n = eps_true.len() as f64;
    Ok(eps_true
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Weighted objective `beta * l_he + (1 - beta) * l_ha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_he: f64,
    pub l_ha: f64,
    pub beta_weight: f64,
    pub total: f64,
}

pub fn check_beta_weight(beta_weight: f64) -> Result<()> {
    if beta_weight > 0.0 && beta_weight < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "loss weight beta must lie in (0, 1), got {beta_weight}"
        )))
    }
}

pub fn loss_total(l_he: f64, l_ha: f64, beta_weight: f64) -> Result<LossTerms> {
    check_beta_weight(beta_weight)?;
    Ok(LossTerms {
        l_he,
        l_ha,
        beta_weight,
        total: beta_weight * l_he + (1.0 - beta_weight) * l_ha,
    })
}
