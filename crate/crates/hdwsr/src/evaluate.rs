//! PSNR/SSIM over a folder of images.

use std::fmt;
use std::path::Path;

use hdwsr_core::io::load_png;
use hdwsr_core::metrics::{format_db, psnr, ssim, FlopReport};
use hdwsr_core::model::AttentionMode;
use hdwsr_core::{par, Error, FeatureMap, Result};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{degrade, png_files};
use crate::session::Session;

/// One evaluation image: the network input and its reference.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub name: String,
    pub lr: FeatureMap,
    pub hr: FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    /// `None` stands for +∞.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

impl ImageMetrics {
    pub fn psnr(&self) -> f64 {
        self.psnr_db.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: f64,
    pub attention: Option<String>,
    pub flops: Option<FlopReport>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.mean_psnr_db.unwrap_or(f64::INFINITY)
    }
}

/// `name=value` lines: per image, then the means and the optional FLOP counts.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(a) = &self.attention {
            writeln!(f, "attention={a}")?;
        }
        for m in &self.images {
            writeln!(f, "image.{}.psnr_db={}", m.name, format_db(m.psnr()))?;
            writeln!(f, "image.{}.ssim={:.6}", m.name, m.ssim)?;
        }
        writeln!(f, "mean.psnr_db={}", format_db(self.mean_psnr()))?;
        writeln!(f, "mean.ssim={:.6}", self.mean_ssim)?;
        if let Some(r) = &self.flops {
            for e in &r.entries {
                writeln!(f, "flops.{}={}", e.label, e.flops)?;
            }
            writeln!(f, "flops.total={}", r.total)?;
        }
        Ok(())
    }
}

/// Reads `dir/lr` and `dir/hr` (paired by file name) when both exist;
/// otherwise treats every PNG of `dir` as HR, crops it to a multiple of
/// `multiple` and degrades it by `scale`. Unusable files are skipped with a
/// warning.
pub fn load_eval_set(dir: &Path, scale: usize, multiple: usize) -> Result<Vec<EvalPair>> {
    let (lr_dir, hr_dir) = (dir.join("lr"), dir.join("hr"));
    let mut out = Vec::new();
    if lr_dir.is_dir() && hr_dir.is_dir() {
        for hp in png_files(&hr_dir)? {
            let name = stem(&hp);
            let lp = lr_dir.join(hp.file_name().expect("listed files have names"));
            let loaded = load_png(&hp).and_then(|hr| Ok((load_png(&lp)?, hr)));
            match loaded {
                Ok((lr, hr)) if (lr.height() * scale, lr.width() * scale) == (hr.height(), hr.width()) => {
                    out.push(EvalPair { name, lr, hr })
                }
                Ok(_) => warn!("skipping {name}: LR and HR sizes do not differ by the scale {scale}"),
                Err(e) => warn!("skipping {name}: {e}"),
            }
        }
    } else {
        let unit = scale * multiple;
        for p in png_files(dir)? {
            let name = stem(&p);
            match load_png(&p) {
                Ok(img) => {
                    let (h, w) = (img.height() / unit * unit, img.width() / unit * unit);
                    if h == 0 || w == 0 {
                        warn!("skipping {name}: smaller than {unit}px");
                        continue;
                    }
                    let hr = FeatureMap::from_fn(img.channels(), h, w, |c, y, x| img.get(c, y, x));
                    let lr = degrade(&hr, scale)?.clamp(0.0, 1.0);
                    out.push(EvalPair { name, lr, hr });
                }
                Err(e) => warn!("skipping {name}: {e}"),
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("no usable images in {}", dir.display())));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Scores `model(pair)` against each pair's HR image. Images are processed
/// in parallel; the report keeps the input order.
pub fn evaluate_pairs<F>(pairs: &[EvalPair], model: F) -> Result<EvalReport>
where
    F: Fn(&EvalPair) -> Result<FeatureMap> + Sync + Send,
{
    if pairs.is_empty() {
        return Err(Error::Ingestion("nothing to evaluate".into()));
    }
    let scored = par::map_range(pairs.len(), |i| -> Result<ImageMetrics> {
        let p = &pairs[i];
        let sr = model(p)?;
        let v = psnr(&sr, &p.hr, 1.0)?;
        Ok(ImageMetrics {
            name: p.name.clone(),
            psnr_db: v.is_finite().then_some(v),
            ssim: ssim(&sr, &p.hr)?,
        })
    });
    let images = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let n = images.len() as f64;
    let mean_psnr = images.iter().map(ImageMetrics::psnr).sum::<f64>() / n;
    let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / n;
    Ok(EvalReport {
        images,
        mean_psnr_db: mean_psnr.is_finite().then_some(mean_psnr),
        mean_ssim,
        attention: None,
        flops: None,
    })
}

/// Samples every pair of `dir` with `seed` and scores the results.
pub fn evaluate(sess: &Session, dir: &Path, mode: AttentionMode, seed: u64, with_flops: bool) -> Result<EvalReport> {
    let pairs = load_eval_set(dir, sess.scale(), sess.model.cfg.size_multiple())?;
    for p in &pairs {
        sess.check_lr(p.lr.shape())?;
    }
    let mut report = evaluate_pairs(&pairs, |p| sess.sample(&p.lr, seed, mode))?;
    report.attention = Some(mode.to_string());
    if with_flops {
        report.flops = Some(sess.flops(pairs[0].lr.shape(), mode)?);
    }
    Ok(report)
}

pub fn write_json(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}
