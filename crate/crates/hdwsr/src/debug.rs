//! Subband dumps and FLOP tables.

use std::fs;
use std::path::{Path, PathBuf};

use hdwsr_core::io::{load_png, save_png, visualize_signed};
use hdwsr_core::metrics::FlopReport;
use hdwsr_core::model::AttentionMode;
use hdwsr_core::wavelet::decompose_pyramid;
use hdwsr_core::{Error, FeatureMap, Result};

use crate::session::Session;

/// Writes `level{j}_{ll,lh,hl,hh}.png` for `j = 1..=levels`. The
/// approximation band is divided by `2^j` to bring it back to `[0, 1]`; the
/// detail bands are centred on mid-grey and scaled by their largest magnitude.
pub fn dwt_debug(input: &Path, levels: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let img = load_png(input)?;
    let m = 1 << levels;
    let (h, w) = (img.height() / m * m, img.width() / m * m);
    if levels == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "{}x{} image cannot be decomposed {levels} times",
            img.height(),
            img.width()
        )));
    }
    let img = FeatureMap::from_fn(img.channels(), h, w, |c, y, x| img.get(c, y, x));
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (j, s) in decompose_pyramid(&img, levels)?.iter().enumerate() {
        let j = j + 1;
        let ll = s.ll.map(|v| v / (1 << j) as f64);
        for (name, m) in [
            ("ll", ll),
            ("lh", visualize_signed(&s.lh)),
            ("hl", visualize_signed(&s.hl)),
            ("hh", visualize_signed(&s.hh)),
        ] {
            let p = out.join(format!("level{j}_{name}.png"));
            save_png(&p, &m, false)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// FLOP reports of one noise prediction per attention mode.
pub fn flop_table(sess: &Session, lr_shape: (usize, usize, usize), modes: &[AttentionMode]) -> Result<Vec<(AttentionMode, FlopReport)>> {
    modes.iter().map(|&m| Ok((m, sess.flops(lr_shape, m)?))).collect()
}

/// Attention-only share of a report (every DFA and bottleneck block).
pub fn attention_flops(r: &FlopReport) -> u64 {
    r.entries
        .iter()
        .filter(|e| e.label.contains("dfa") || e.label.contains("pfa"))
        .map(|e| e.flops)
        .sum()
}
