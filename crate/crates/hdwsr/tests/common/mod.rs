#![allow(dead_code)]

use std::path::Path;

use hdwsr::RunConfig;
use hdwsr_core::io::save_png;
use hdwsr_core::model::{ModelConfig, ScheduleConfig};
use hdwsr_core::FeatureMap;

/// Smooth, band-limited test image with some texture.
pub fn texture(h: usize, w: usize, phase: f64) -> FeatureMap {
    FeatureMap::from_fn(3, h, w, |c, y, x| {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        let v = 0.5 + 0.25 * (5.0 * fx + 3.0 * fy + c as f64 + phase).sin() + 0.1 * (13.0 * fy - 7.0 * fx).cos();
        v.clamp(0.0, 1.0)
    })
}

pub fn write(dir: &Path, name: &str, m: &FeatureMap) {
    std::fs::create_dir_all(dir).unwrap();
    save_png(&dir.join(name), m, true).unwrap();
}

/// One wavelet level, four diffusion steps, width 4: trains in seconds on 8×8 crops.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        levels: 1,
        dfa_repeats: vec![1],
        decoder_repeats: vec![1],
        encoder_swin: 1,
        pfa_repeats: 1,
        swin_window: 2,
        time_dim: 8,
        schedule: ScheduleConfig {
            steps: 4,
            beta_start: 0.05,
            beta_end: 0.5,
        },
        ..ModelConfig::default()
    }
}

/// A tiny run over `train_dir`, writing into `out`.
pub fn tiny_run(train_dir: &Path, out: &Path, iterations: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.model = tiny_model();
    cfg.data.train_dir = Some(train_dir.to_path_buf());
    cfg.data.patch = 8;
    cfg.optim.iterations = iterations;
    cfg.optim.lr = 1e-3;
    cfg.output.dir = out.to_path_buf();
    cfg.output.checkpoint_every = 1000;
    cfg.output.log_every = 10;
    cfg
}
