//! The training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hdwsr_core::autograd::{Gradients, Graph};
use hdwsr_core::diffusion::{form_pair, q_sample, LossTerms};
use hdwsr_core::model::{Checkpoint, ForwardCtx};
use hdwsr_core::nn::Adam;
use hdwsr_core::presr::{bicubic_resize, PreSrMode};
use hdwsr_core::{Error, FeatureMap};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{Dataset, Pair};
use crate::session::Session;
use crate::RunError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG: &str = "loss.log";
pub const NAN_DUMP: &str = "nan_dump.json";

/// Batch-mean losses of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub total: f64,
    pub l_he: f64,
    pub l_ha: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Iterations completed, counting those before a resume.
    pub iterations: u64,
    /// Records of the iterations run by this call.
    pub losses: Vec<LossRecord>,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct NanDump<'a> {
    iteration: u64,
    example: usize,
    image: String,
    crop: (usize, usize),
    t: usize,
    l_he: f64,
    l_ha: f64,
    total: f64,
    /// `loss` or `gradients`: where the first non-finite value showed up.
    stage: &'static str,
    lr_shape: (usize, usize, usize),
    lr: &'a [f64],
    hr: &'a [f64],
}

/// What went into one example's loss, kept for the diagnostic dump.
struct Example {
    pair: Pair,
    t: usize,
    terms: LossTerms,
}

/// Trains from scratch, or from `resume`, up to `optim.iterations`. With
/// `stop_at` the loop ends early after that many completed iterations (a
/// checkpoint is still written).
pub fn train(cfg: &RunConfig, resume: Option<&Path>, stop_at: Option<u64>) -> Result<TrainReport, RunError> {
    cfg.validate()?;
    if cfg.presr.mode == PreSrMode::External {
        return Err(Error::Config("external pre-upsampling is available for sampling only".into()).into());
    }
    let dir = cfg
        .data
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_dir is required for training".into()))?;
    let data = Dataset::load(dir, cfg.data.patch, cfg.data.scale)?;
    info!("{} training images from {}", data.len(), dir.display());

    let (mut sess, mut opt, start) = match resume {
        Some(p) => {
            let (s, opt, it) = Session::from_checkpoint(p)?;
            check_resumable(&s.cfg, cfg)?;
            let mut s = s;
            s.cfg = cfg.clone();
            (s, opt, it)
        }
        None => {
            let s = Session::new(cfg)?;
            let opt = Adam::new(&s.ps, cfg.optim.lr);
            (s, opt, 0)
        }
    };
    let counts = sess.model.layer_counts(&sess.ps);
    info!("model: {} parameters, dfa {:?}, decoder {:?}", counts.parameters, counts.dfa, counts.decoder);

    let out = &cfg.output.dir;
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(if start > 0 {
        OpenOptions::new().create(true).append(true).open(out.join(LOSS_LOG))?
    } else {
        File::create(out.join(LOSS_LOG))?
    });
    let ck_path = out.join(CHECKPOINT_FILE);
    let echo = cfg.to_json()?;
    let end = stop_at.map_or(cfg.optim.iterations, |s| s.min(cfg.optim.iterations));
    let batch = cfg.optim.batch_size;
    let steps = sess.model.schedule.steps();
    let src = cfg.presr_source();
    let mut losses = Vec::new();

    for it in start..end {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(it);
        let mut acc = Gradients::default();
        let mut rec = LossRecord { iteration: it + 1, total: 0.0, l_he: 0.0, l_ha: 0.0 };
        let mut examples = Vec::with_capacity(batch);
        for b in 0..batch {
            let pair = data.sample(&mut rng)?;
            // The pre-upsampled image is an input here: the diffusion loss
            // does not reach the light CNN.
            let presr = hdwsr_core::presr::presr_generate(&pair.lr, &src, sess.cnn.as_ref().map(|c| (c, &sess.ps)))?;
            let x0 = form_pair(&pair.hr, &presr)?.into_inner();
            let t = rng.gen_range(1..=steps);
            let (c, h, w) = x0.shape();
            let eps = FeatureMap::randn(c, h, w, &mut rng);
            let x_t = q_sample(&x0, t, &eps, &sess.model.schedule)?;

            let mut g = Graph::new(&sess.ps);
            let p = g.input((&presr).into());
            let x = g.input((&x_t).into());
            let e = g.input((&eps).into());
            let mut ctx = ForwardCtx::new(cfg.ablation.attention);
            let lv = sess.model.training_loss(&mut g, &mut ctx, p, x, t, e)?;
            let total = g.value(lv.total).item();
            let l_he = lv.l_he.map_or(0.0, |v| g.value(v).item());
            let l_ha = g.value(lv.l_ha).item();
            let terms = LossTerms { l_he, l_ha, beta_weight: cfg.model.beta_weight, total };
            examples.push(Example { pair, t, terms });
            if !total.is_finite() {
                return Err(nan_abort(out, it + 1, b, &data, &examples[b], true));
            }
            let grads = g.backward(lv.total);
            acc.accumulate(&grads, 1.0 / batch as f64);
            rec.total += total / batch as f64;
            rec.l_he += l_he / batch as f64;
            rec.l_ha += l_ha / batch as f64;

            if cfg.presr.trainable {
                if let Some(cnn) = &sess.cnn {
                    let ex = &examples[b].pair;
                    let up = bicubic_resize(&ex.lr, h, w)?;
                    let mut g = Graph::new(&sess.ps);
                    let u = g.input((&up).into());
                    let y = cnn.forward(&mut g, u);
                    let target = g.input((&ex.hr).into());
                    let l = g.mse(y, target);
                    acc.accumulate(&g.backward(l), 1.0 / batch as f64);
                }
            }
        }
        if !acc.is_finite() {
            return Err(nan_abort(out, it + 1, 0, &data, &examples[0], false));
        }
        if let Some(c) = cfg.optim.clip_norm {
            acc.clip_norm(c);
        }
        opt.lr = cfg.optim.lr_at(it);
        opt.update(&mut sess.ps, &acc);

        let done = it + 1;
        if done % cfg.output.log_every == 0 || done == end {
            writeln!(log, "iteration={} total={:.9e} l_he={:.9e} l_ha={:.9e}", done, rec.total, rec.l_he, rec.l_ha)?;
            info!("iteration {done}: total {:.5} l_he {:.5} l_ha {:.5}", rec.total, rec.l_he, rec.l_ha);
        }
        losses.push(rec);
        if done % cfg.output.checkpoint_every == 0 && done != end {
            log.flush()?;
            Checkpoint::new(echo.clone(), done, &sess.ps, &opt).save(&ck_path)?;
        }
    }
    log.flush()?;
    let done = end.max(start);
    Checkpoint::new(echo, done, &sess.ps, &opt).save(&ck_path)?;
    info!("checkpoint written to {}", ck_path.display());
    Ok(TrainReport {
        iterations: done,
        losses,
        checkpoint: ck_path,
    })
}

/// Resuming may change budgets, paths and logging but not anything that
/// shapes the parameters or the data stream.
fn check_resumable(saved: &RunConfig, now: &RunConfig) -> Result<(), Error> {
    let same = saved.seed == now.seed
        && saved.model == now.model
        && saved.ablation == now.ablation
        && saved.presr.mode == now.presr.mode
        && saved.presr.hidden == now.presr.hidden
        && saved.data.patch == now.data.patch
        && saved.data.scale == now.data.scale;
    if same {
        Ok(())
    } else {
        Err(Error::Checkpoint(
            "the checkpoint was trained with a different seed, model, ablation, pre-upsampler or patch setup".into(),
        ))
    }
}

fn nan_abort(out: &Path, iteration: u64, example: usize, data: &Dataset, ex: &Example, loss: bool) -> RunError {
    let dump = out.join(NAN_DUMP);
    let record = NanDump {
        iteration,
        example,
        image: data.path(ex.pair.source).display().to_string(),
        crop: ex.pair.crop,
        t: ex.t,
        l_he: ex.terms.l_he,
        l_ha: ex.terms.l_ha,
        total: ex.terms.total,
        stage: if loss { "loss" } else { "gradients" },
        lr_shape: ex.pair.lr.shape(),
        lr: ex.pair.lr.data(),
        hr: ex.pair.hr.data(),
    };
    let written = serde_json::to_vec_pretty(&record)
        .map_err(Error::from)
        .and_then(|b| fs::write(&dump, b).map_err(Error::from));
    match written {
        Ok(()) => RunError::NonFinite { iteration, dump },
        Err(e) => RunError::Core(e),
    }
}
