//! Pre-upsampling front end: bicubic interpolation, an optional small
//! residual CNN on top of it, or externally produced images.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{Conv, ParamStore};
use crate::par;
use crate::tensor::{FeatureMap, Tensor};

/// Catmull-Rom cubic convolution kernel (a = −0.5).
#[inline]
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps and weights that produce each output sample along one axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let ratio = n_in as f64 / n_out as f64;
    // Downscaling stretches the kernel so it also acts as an anti-alias filter.
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut idx = Vec::new();
            let mut w = Vec::new();
            for i in lo..=hi {
                let k = cubic((i as f64 - center) / stretch);
                if k != 0.0 {
                    idx.push(i.clamp(0, n_in as i64 - 1) as usize);
                    w.push(k);
                }
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling with half-pixel centres and edge clamping.
pub fn bicubic_resize(x: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be nonempty".into()));
    }
    let (c, h, w) = x.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let wy = axis_weights(h, out_h);
    let wx = axis_weights(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    par::for_each_chunk(&mut out, out_h * out_w, |ch, dst| {
        let src = x.channel(ch);
        // Horizontal pass into an h × out_w buffer, then vertical.
        let mut tmp = vec![0.0; h * out_w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (ox, (idx, ws)) in wx.iter().enumerate() {
                tmp[y * out_w + ox] = idx.iter().zip(ws).map(|(&i, &k)| row[i] * k).sum();
            }
        }
        for (oy, (idx, ws)) in wy.iter().enumerate() {
            let d = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (&i, &k) in idx.iter().zip(ws) {
                for (o, &v) in d.iter_mut().zip(&tmp[i * out_w..(i + 1) * out_w]) {
                    *o += k * v;
                }
            }
        }
    });
    FeatureMap::from_vec(c, out_h, out_w, out)
}

/// Which front end produces the pre-upsampled image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreSrMode {
    Bicubic,
    LightCnn,
    External,
}

impl std::str::FromStr for PreSrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bicubic" => Ok(Self::Bicubic),
            "light-cnn" => Ok(Self::LightCnn),
            "external" => Ok(Self::External),
            o => Err(Error::Config(format!(
                "unknown pre-upsampling mode {o:?} (bicubic, light-cnn, external)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreSrSource {
    pub mode: PreSrMode,
    pub scale: usize,
    /// Image used verbatim in external mode.
    pub path: Option<PathBuf>,
}

impl PreSrSource {
    pub fn bicubic(scale: usize) -> Self {
        Self {
            mode: PreSrMode::Bicubic,
            scale,
            path: None,
        }
    }
}

/// Bicubic upsampling followed by three 3×3 convolutions whose output is
/// added back. The last layer starts at zero, so a fresh stack is plain bicubic.
#[derive(Clone, Debug)]
pub struct LightCnn {
    convs: [Conv; 3],
}

impl LightCnn {
    pub fn new(ps: &mut ParamStore, channels: usize, hidden: usize) -> Self {
        let c1 = Conv::new(ps, "presr.conv1", channels, hidden, 3, 1);
        let c2 = Conv::new(ps, "presr.conv2", hidden, hidden, 3, 1);
        let c3 = Conv::new(ps, "presr.conv3", hidden, channels, 3, 1);
        ps.get_mut(c3.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        Self { convs: [c1, c2, c3] }
    }

    /// `up` is the bicubic image on the graph.
    pub fn forward(&self, g: &mut Graph, up: Var) -> Var {
        let prev = g.scope().to_string();
        g.set_scope("presr");
        let h = self.convs[0].forward(g, up);
        let h = g.gelu(h);
        let h = self.convs[1].forward(g, h);
        let h = g.gelu(h);
        let h = self.convs[2].forward(g, h);
        let out = g.add(up, h);
        g.set_scope(prev);
        out
    }
}

/// Produces the pre-upsampled image for `lr`, clamped to `[0, 1]`.
///
/// `cnn` supplies the residual stack in light-cnn mode.
pub fn presr_generate(
    lr: &FeatureMap,
    src: &PreSrSource,
    cnn: Option<(&LightCnn, &ParamStore)>,
) -> Result<FeatureMap> {
    if src.scale == 0 {
        return Err(Error::Config("scale must be at least 1".into()));
    }
    let (c, h, w) = lr.shape();
    let (oh, ow) = (h * src.scale, w * src.scale);
    let out = match src.mode {
        PreSrMode::Bicubic => bicubic_resize(lr, oh, ow)?,
        PreSrMode::LightCnn => {
            let up = bicubic_resize(lr, oh, ow)?;
            let (net, ps) =
                cnn.ok_or_else(|| Error::Config("light-cnn mode needs its parameters".into()))?;
            let mut g = Graph::new(ps);
            let x = g.input(Tensor::from(&up));
            let y = net.forward(&mut g, x);
            g.value(y).to_feature_map()?
        }
        PreSrMode::External => {
            let path = src
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("external mode needs an image path".into()))?;
            let img = io::load_png(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
            if img.shape() != (c, oh, ow) {
                return Err(Error::Ingestion(format!(
                    "{} is {:?}, expected {:?}",
                    path.display(),
                    img.shape(),
                    (c, oh, ow)
                )));
            }
            img
        }
    };
    Ok(out.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_partition_of_unity() {
        for k in 0..10 {
            let f = k as f64 / 10.0;
            let s: f64 = (-2..=2).map(|i| cubic(i as f64 - f)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
    }

    #[test]
    fn constant_stays_constant() {
        let x = FeatureMap::filled(3, 5, 7, 0.37);
        let up = presr_generate(&x, &PreSrSource::bicubic(4), None).unwrap();
        assert_eq!(up.shape(), (3, 20, 28));
        assert!(up.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        let down = bicubic_resize(&up, 5, 7).unwrap();
        assert!(down.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn unit_scale_is_identity() {
        let x = FeatureMap::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64 / 16.0);
        assert_eq!(presr_generate(&x, &PreSrSource::bicubic(1), None).unwrap(), x);
        assert!(presr_generate(&x, &PreSrSource::bicubic(0), None).is_err());
    }

    #[test]
    fn fresh_light_cnn_is_bicubic() {
        let mut ps = ParamStore::new(3);
        let net = LightCnn::new(&mut ps, 3, 8);
        let x = FeatureMap::from_fn(3, 4, 4, |c, y, x| ((c + y * x) % 5) as f64 / 5.0);
        let src = PreSrSource {
            mode: PreSrMode::LightCnn,
            ..PreSrSource::bicubic(2)
        };
        let a = presr_generate(&x, &src, Some((&net, &ps))).unwrap();
        let b = presr_generate(&x, &PreSrSource::bicubic(2), None).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-12));
    }
}
