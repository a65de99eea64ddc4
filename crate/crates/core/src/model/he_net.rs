use crate::autograd::{Graph, Var};
use crate::nn::{Conv, ParamStore};

use super::ModelConfig;

/// Wavelet encoder-decoder that reconstructs the pre-upsampled image and
/// exports each level's high subbands as guidance.
///
/// All convolutions start as bias-free channel copies, so the fresh network
/// reproduces its input exactly and passes constants through unchanged.
#[derive(Clone, Debug)]
pub struct HeNet {
    levels: usize,
    widths: Vec<usize>,
    stem: Conv,
    adjust: Vec<Conv>,
    fc: Conv,
    reduce: Vec<Conv>,
    head: Conv,
}

/// Graph outputs of [`HeNet::forward`].
#[derive(Clone, Debug)]
pub struct HeOutput {
    pub recon: Var,
    /// Stacked `[lh; hl; hh]` per level, finest first.
    pub highs: Vec<Var>,
}

impl HeNet {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let l = cfg.levels;
        let widths: Vec<usize> = (1..=l).map(|j| cfg.width(j)).collect();
        let stem = Conv::identity(ps, "he.stem", cfg.in_channels, widths[0], 3);
        let adjust = (2..=l)
            .map(|j| Conv::identity(ps, &format!("he.adjust{j}"), widths[j - 2], widths[j - 1], 3))
            .collect();
        let fc = Conv::identity(ps, "he.fc", widths[l - 1], widths[l - 1], 1);
        let reduce = (2..=l)
            .map(|j| Conv::identity(ps, &format!("he.reduce{j}"), widths[j - 1], widths[j - 2], 3))
            .collect();
        let head = Conv::identity(ps, "he.head", widths[0], cfg.in_channels, 3);
        Self {
            levels: l,
            widths,
            stem,
            adjust,
            fc,
            reduce,
            head,
        }
    }

    pub fn forward(&self, g: &mut Graph, presr: Var) -> HeOutput {
        let prev = g.scope().to_string();
        g.set_scope("he");
        let mut f = self.stem.forward(g, presr);
        let mut highs = Vec::with_capacity(self.levels);
        let mut ll = f;
        for j in 1..=self.levels {
            let w = self.widths[j - 1];
            if j > 1 {
                f = self.adjust[j - 2].forward(g, ll);
            }
            let d = g.dwt(f);
            ll = g.slice_channels(d, 0, w);
            highs.push(g.slice_channels(d, w, 3 * w));
        }
        let mut z = self.fc.forward(g, ll);
        for j in (1..=self.levels).rev() {
            let cat = g.concat_channels(&[z, highs[j - 1]]);
            f = g.idwt(cat);
            if j > 1 {
                z = self.reduce[j - 2].forward(g, f);
            }
        }
        let recon = self.head.forward(g, f);
        g.set_scope(prev);
        HeOutput { recon, highs }
    }
}
