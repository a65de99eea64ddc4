//! Image folders, random crops and bicubic degradation.

use std::fs;
use std::path::{Path, PathBuf};

use hdwsr_core::io::load_png;
use hdwsr_core::presr::bicubic_resize;
use hdwsr_core::{Error, FeatureMap, Result};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One training example: a bicubic-degraded crop and the crop itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub lr: FeatureMap,
    pub hr: FeatureMap,
    /// Index of the source image in its [`Dataset`].
    pub source: usize,
    /// Top-left corner `(y, x)` of the crop in the source image.
    pub crop: (usize, usize),
}

/// Bicubic downsampling by an integer factor. `hr` must divide evenly.
pub fn degrade(hr: &FeatureMap, scale: usize) -> Result<FeatureMap> {
    let (_, h, w) = hr.shape();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Dimension(format!("{h}x{w} is not divisible by scale {scale}")));
    }
    if scale == 1 {
        return Ok(hr.clone());
    }
    bicubic_resize(hr, h / scale, w / scale)
}

/// Sorted `*.png` files of `dir`.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Ingestion(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Decoded HR images large enough for `patch × patch` crops.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<(PathBuf, FeatureMap)>,
    patch: usize,
    scale: usize,
}

impl Dataset {
    /// Loads every decodable PNG in `dir`, skipping (with a warning) files
    /// that fail to decode or are smaller than `patch`.
    pub fn load(dir: &Path, patch: usize, scale: usize) -> Result<Self> {
        if scale == 0 || patch == 0 || !patch.is_multiple_of(scale) {
            return Err(Error::Config(format!("patch {patch} is not a multiple of scale {scale}")));
        }
        let mut images = Vec::new();
        for p in png_files(dir)? {
            match load_png(&p) {
                Ok(m) if m.height() < patch || m.width() < patch => {
                    warn!("skipping {}: {}x{} is smaller than the {patch}px patch", p.display(), m.height(), m.width());
                }
                Ok(m) => images.push((p, m)),
                Err(e) => warn!("skipping {}: {e}", p.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::Ingestion(format!("no usable images in {}", dir.display())));
        }
        Ok(Self { images, patch, scale })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn path(&self, i: usize) -> &Path {
        &self.images[i].0
    }

    /// Picks an image and a crop position from `rng`.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Pair> {
        let source = rng.gen_range(0..self.images.len());
        let img = &self.images[source].1;
        let y = rng.gen_range(0..=img.height() - self.patch);
        let x = rng.gen_range(0..=img.width() - self.patch);
        self.pair_at(source, (y, x))
    }

    pub fn pair_at(&self, source: usize, crop: (usize, usize)) -> Result<Pair> {
        let img = &self.images[source].1;
        let (y0, x0) = crop;
        if y0 + self.patch > img.height() || x0 + self.patch > img.width() {
            return Err(Error::Dimension(format!("crop at {crop:?} leaves the image")));
        }
        let hr = FeatureMap::from_fn(img.channels(), self.patch, self.patch, |c, y, x| img.get(c, y0 + y, x0 + x));
        let lr = degrade(&hr, self.scale)?.clamp(0.0, 1.0);
        Ok(Pair { lr, hr, source, crop })
    }

    /// Endless seeded stream of pairs.
    pub fn stream(&self, seed: u64) -> impl Iterator<Item = Result<Pair>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::iter::repeat_with(move || self.sample(&mut rng))
    }
}

/// Loads `dir` and returns its seeded pair stream.
pub fn ingest(dir: &Path, patch: usize, scale: usize, seed: u64) -> Result<impl Iterator<Item = Result<Pair>>> {
    let ds = Dataset::load(dir, patch, scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(std::iter::repeat_with(move || ds.sample(&mut rng)))
}
