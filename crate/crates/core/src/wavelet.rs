//! Orthonormal 2D Haar transform and multi-level pyramid.
//!
//! For every 2×2 block `(p00 p01 / p10 p11)`:
//!
//! ```text
//! ll = (p00 + p01 + p10 + p11) / 2
//! lh = (p00 - p01 + p10 - p11) / 2
//! hl = (p00 + p01 - p10 - p11) / 2
//! hh = (p00 - p01 - p10 + p11) / 2
//! ```
//!
//! The transform is orthogonal, so the inverse is also its transpose; the
//! autodiff graph uses that to back-propagate through both directions.

use crate::error::{dim_err, Result};
use crate::par;
use crate::tensor::FeatureMap;

/// The four subbands of one decomposition level, each half the parent size.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: FeatureMap,
    pub lh: FeatureMap,
    pub hl: FeatureMap,
    pub hh: FeatureMap,
}

impl SubbandSet {
    /// `lh`, `hl`, `hh` stacked along the channel axis.
    pub fn highs(&self) -> FeatureMap {
        FeatureMap::concat_channels(&[&self.lh, &self.hl, &self.hh])
            .expect("subbands share a shape")
    }

    /// Sum of squares over all four subbands.
    pub fn energy(&self) -> f64 {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }

    fn check_consistent(&self) -> Result<()> {
        let s = self.ll.shape();
        for (name, b) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if b.shape() != s {
                return Err(dim_err(format!(
                    "subband {name} has shape {:?}, ll has {s:?}",
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if h == 0 || !h.is_multiple_of(2) {
        return Err(dim_err(format!("height {h} is not a positive even number")));
    }
    if w == 0 || !w.is_multiple_of(2) {
        return Err(dim_err(format!("width {w} is not a positive even number")));
    }
    Ok(())
}

/// Number of times `h × w` can be halved while staying integral.
pub fn max_levels(h: usize, w: usize) -> usize {
    let mut levels = 0;
    let (mut h, mut w) = (h, w);
    while h > 0 && w > 0 && h % 2 == 0 && w % 2 == 0 {
        h /= 2;
        w /= 2;
        levels += 1;
    }
    levels
}

/// Single-level forward transform into a stacked `[ll; lh; hl; hh]` buffer of
/// `4c` planes, each `h/2 × w/2`.
pub(crate) fn dwt_stacked(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let plane = h2 * w2;
    let mut out = vec![0.0; 4 * c * plane];
    par::for_each_chunk(&mut out, plane, |k, dst| {
        let band = k / c;
        let ch = k % c;
        let s = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h2 {
            let r0 = &s[2 * y * w..(2 * y + 1) * w];
            let r1 = &s[(2 * y + 1) * w..(2 * y + 2) * w];
            let d = &mut dst[y * w2..(y + 1) * w2];
            for x in 0..w2 {
                let (p00, p01, p10, p11) = (r0[2 * x], r0[2 * x + 1], r1[2 * x], r1[2 * x + 1]);
                d[x] = match band {
                    0 => (p00 + p01 + p10 + p11) * 0.5,
                    1 => (p00 - p01 + p10 - p11) * 0.5,
                    2 => (p00 + p01 - p10 - p11) * 0.5,
                    _ => (p00 - p01 - p10 + p11) * 0.5,
                };
            }
        }
    });
    out
}

/// Inverse of [`dwt_stacked`]: `4c × h2 × w2` stacked subbands to `c × 2h2 × 2w2`.
pub(crate) fn idwt_stacked(src: &[f64], c: usize, h2: usize, w2: usize) -> Vec<f64> {
    let plane = h2 * w2;
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![0.0; c * h * w];
    par::for_each_chunk(&mut out, h * w, |ch, dst| {
        let ll = &src[ch * plane..(ch + 1) * plane];
        let lh = &src[(c + ch) * plane..(c + ch + 1) * plane];
        let hl = &src[(2 * c + ch) * plane..(2 * c + ch + 1) * plane];
        let hh = &src[(3 * c + ch) * plane..(3 * c + ch + 1) * plane];
        for y in 0..h2 {
            for x in 0..w2 {
                let i = y * w2 + x;
                let (a, b, cc, d) = (ll[i], lh[i], hl[i], hh[i]);
                dst[2 * y * w + 2 * x] = (a + b + cc + d) * 0.5;
                dst[2 * y * w + 2 * x + 1] = (a - b + cc - d) * 0.5;
                dst[(2 * y + 1) * w + 2 * x] = (a + b - cc - d) * 0.5;
                dst[(2 * y + 1) * w + 2 * x + 1] = (a - b - cc + d) * 0.5;
            }
        }
    });
    out
}

/// One level of the 2D Haar transform, applied per channel.
pub fn dwt2_haar(x: &FeatureMap) -> Result<SubbandSet> {
    let (c, h, w) = x.shape();
    check_even(h, w)?;
    let stacked = dwt_stacked(x.data(), c, h, w);
    let (h2, w2) = (h / 2, w / 2);
    let n = c * h2 * w2;
    let band = |k: usize| FeatureMap::from_vec(c, h2, w2, stacked[k * n..(k + 1) * n].to_vec());
    Ok(SubbandSet {
        ll: band(0)?,
        lh: band(1)?,
        hl: band(2)?,
        hh: band(3)?,
    })
}

/// Exact inverse of [`dwt2_haar`].
pub fn idwt2_haar(s: &SubbandSet) -> Result<FeatureMap> {
    s.check_consistent()?;
    let (c, h2, w2) = s.ll.shape();
    let mut stacked = Vec::with_capacity(4 * s.ll.len());
    for b in [&s.ll, &s.lh, &s.hl, &s.hh] {
        stacked.extend_from_slice(b.data());
    }
    FeatureMap::from_vec(c, 2 * h2, 2 * w2, idwt_stacked(&stacked, c, h2, w2))
}

/// Recursive decomposition on the `ll` band, finest level first.
pub fn decompose_pyramid(x: &FeatureMap, levels: usize) -> Result<Vec<SubbandSet>> {
    if levels == 0 {
        return Err(dim_err("pyramid needs at least one level"));
    }
    let feasible = max_levels(x.height(), x.width());
    if feasible < levels {
        return Err(dim_err(format!(
            "{}x{} supports at most {feasible} Haar levels, {levels} requested",
            x.height(),
            x.width()
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for _ in 0..levels {
        let s = dwt2_haar(&cur)?;
        cur = s.ll.clone();
        out.push(s);
    }
    Ok(out)
}
