//! Full-reference quality metrics and the FLOP report.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{FlopEntry, FlopLedger};
use crate::error::{dim_err, Error, Result};
use crate::tensor::FeatureMap;

/// `10·log10(peak² / MSE)`; infinite when the images are identical.
pub fn psnr(a: &FeatureMap, b: &FeatureMap, peak: f64) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-region separable filtering of an `h × w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let n = mu_a.len();
    let mut s = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        s += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    s / n as f64
}

fn check_ssim_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    a.check_same_shape(b, "ssim")?;
    if a.height() < WINDOW || a.width() < WINDOW {
        return Err(dim_err(format!(
            "ssim needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Gaussian-window SSIM (11 taps, σ = 1.5) averaged over channels.
pub fn ssim(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    check_ssim_shape(a, b)?;
    let (c, h, w) = a.shape();
    Ok((0..c).map(|ch| ssim_plane(a.channel(ch), b.channel(ch), h, w)).sum::<f64>() / c as f64)
}

/// Luma of an RGB map in `[0, 1]` (ITU-R BT.601, studio range).
pub fn luma(m: &FeatureMap) -> Result<FeatureMap> {
    if m.channels() != 3 {
        return Err(dim_err("luma needs three channels"));
    }
    let (r, g, b) = (m.channel(0), m.channel(1), m.channel(2));
    let data = (0..r.len())
        .map(|i| (65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i] + 16.0) / 255.0)
        .collect();
    FeatureMap::from_vec(1, m.height(), m.width(), data)
}

/// SSIM on the luma channel only.
pub fn ssim_y(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    check_ssim_shape(a, b)?;
    ssim(&luma(a)?, &luma(b)?)
}

/// Per-module multiply-accumulate counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub entries: Vec<FlopEntry>,
    pub total: u64,
}

impl FlopReport {
    /// Sum of entries whose label starts with `prefix`.
    pub fn total_with_prefix(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.label.starts_with(prefix)).map(|e| e.flops).sum()
    }
}

pub fn flop_report(ledger: &FlopLedger) -> Result<FlopReport> {
    if ledger.is_empty() {
        return Err(Error::Reporting("the FLOP ledger is empty".into()));
    }
    let entries = ledger.entries();
    let total = entries.iter().map(|e| e.flops).sum();
    Ok(FlopReport { entries, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` stands for +∞ (identical images).
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub flops: Option<FlopReport>,
}

impl MetricReport {
    pub fn new(psnr_db: f64, ssim: f64, flops: Option<FlopReport>) -> Self {
        Self {
            psnr_db: psnr_db.is_finite().then_some(psnr_db),
            ssim,
            flops,
        }
    }

    pub fn psnr(&self) -> f64 {
        self.psnr_db.unwrap_or(f64::INFINITY)
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// One `name=value` line per metric.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "psnr_db={}", format_db(self.psnr()))?;
        writeln!(f, "ssim={:.6}", self.ssim)?;
        if let Some(r) = &self.flops {
            for e in &r.entries {
                writeln!(f, "flops.{}={}", e.label, e.flops)?;
            }
            writeln!(f, "flops.total={}", r.total)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = FeatureMap::filled(3, 4, 4, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert!(psnr(&a, &FeatureMap::zeros(3, 4, 5), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = FeatureMap::from_fn(3, 16, 16, |c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f64 / 11.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let p = FeatureMap::filled(1, 12, 12, 0.2);
        let q = FeatureMap::filled(1, 12, 12, 0.7);
        let expect = (2.0 * 0.2 * 0.7 + C1) / (0.04 + 0.49 + C1);
        assert!((ssim(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert!(ssim(&FeatureMap::zeros(1, 10, 12), &FeatureMap::zeros(1, 10, 12)).is_err());
    }

    #[test]
    fn empty_ledger_is_an_error() {
        assert!(matches!(flop_report(&FlopLedger::new()), Err(Error::Reporting(_))));
    }

    #[test]
    fn report_lines() {
        let r = MetricReport::new(f64::INFINITY, 1.0, None);
        assert_eq!(r.to_string(), "psnr_db=inf\nssim=1.000000\n");
    }
}
