use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdwsr::debug::{attention_flops, dwt_debug, flop_table};
use hdwsr::evaluate::{evaluate, write_json};
use hdwsr::{deterministic_requested, train, RunConfig, RunError, Session, DETERMINISTIC_ENV};
use hdwsr_core::io::{load_png, save_png};
use hdwsr_core::model::AttentionMode;
use hdwsr_core::{par, Error};
use log::info;

#[derive(Parser)]
#[command(name = "hdwsr", version, about = "Wavelet-guided residual diffusion super-resolution")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set optim.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Random seed (overrides `seed`; required in deterministic mode).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a model; writes checkpoint.json and loss.log under output.dir.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one PNG.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Attention mode (defaults to the checkpoint's).
        #[arg(long)]
        attention: Option<AttentionMode>,
        /// Pre-upsampled image for external mode.
        #[arg(long)]
        presr_image: Option<PathBuf>,
        /// Write a 16-bit PNG.
        #[arg(long)]
        sixteen_bit: bool,
    },
    /// PSNR/SSIM over a folder (lr/ and hr/ subfolders, or HR images only).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        attention: Option<AttentionMode>,
        /// Also count multiply-accumulates of one noise prediction.
        #[arg(long)]
        flops: bool,
        /// Write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Dump the Haar subbands of an image as PNGs.
    DwtDebug {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-module FLOP counts of one noise prediction.
    Flops {
        /// Checkpoint to read the model from (otherwise the run configuration).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Attention modes to compare (default: dtb, topk, dense, self-only).
        #[arg(long, value_delimiter = ',')]
        attention: Vec<AttentionMode>,
        /// LR input size.
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut sets = cli.sets.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    RunConfig::load(cli.config.as_deref(), &sets)
}

fn run(cli: Cli) -> Result<(), RunError> {
    if deterministic_requested() {
        par::set_parallel(false);
        let needs_seed = matches!(cli.verb, Verb::Train { .. } | Verb::Sample { .. } | Verb::Eval { .. });
        if needs_seed && cli.seed.is_none() {
            return Err(Error::Config(format!("{DETERMINISTIC_ENV} is set: pass --seed")).into());
        }
    }
    match &cli.verb {
        Verb::Train { resume } => {
            let cfg = run_config(&cli)?;
            let r = train::train(&cfg, resume.as_deref(), None)?;
            println!("iterations={}", r.iterations);
            if let Some(last) = r.losses.last() {
                println!("loss.total={:.9e}", last.total);
            }
            println!("checkpoint={}", r.checkpoint.display());
        }
        Verb::Sample { checkpoint, input, output, attention, presr_image, sixteen_bit } => {
            let mut sess = Session::load(checkpoint)?;
            if let Some(p) = presr_image {
                sess.cfg.presr.path = Some(p.clone());
            }
            let lr = load_png(input)?;
            let mode = attention.unwrap_or(sess.cfg.ablation.attention);
            let seed = cli.seed.unwrap_or(sess.cfg.seed);
            let sr = sess.sample(&lr, seed, mode)?;
            save_png(output, &sr, *sixteen_bit)?;
            info!("wrote {}", output.display());
            let (_, h, w) = sr.shape();
            println!("output={}\nheight={h}\nwidth={w}", output.display());
        }
        Verb::Eval { checkpoint, dir, attention, flops, json } => {
            let sess = Session::load(checkpoint)?;
            let mode = attention.unwrap_or(sess.cfg.ablation.attention);
            let seed = cli.seed.unwrap_or(sess.cfg.seed);
            let report = evaluate(&sess, dir, mode, seed, *flops)?;
            print!("{report}");
            if let Some(p) = json {
                write_json(&report, p)?;
            }
        }
        Verb::DwtDebug { input, levels, out } => {
            for p in dwt_debug(input, *levels, out)? {
                println!("{}", p.display());
            }
        }
        Verb::Flops { checkpoint, attention, height, width } => {
            let sess = match checkpoint {
                Some(p) => Session::load(p)?,
                None => Session::new(&run_config(&cli)?)?,
            };
            let modes = if attention.is_empty() {
                vec![AttentionMode::Dtb, AttentionMode::TopK(None), AttentionMode::Dense, AttentionMode::SelfOnly]
            } else {
                attention.clone()
            };
            let shape = (sess.model.cfg.in_channels, *height, *width);
            for (mode, r) in flop_table(&sess, shape, &modes)? {
                for e in &r.entries {
                    println!("{mode}.{}={}", e.label, e.flops);
                }
                println!("{mode}.attention={}", attention_flops(&r));
                println!("{mode}.total={}", r.total);
            }
        }
    }
    Ok(())
}
