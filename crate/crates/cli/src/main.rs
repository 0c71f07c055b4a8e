mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use stcorr::archive;
use stcorr::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use stcorr::config::RunConfig;
use stcorr::data::{label_entry, read_clip_dir, synth_clip, write_clip_dir, LabelMap};
use stcorr::encoder::Encoder;
use stcorr::gradsuite;
use stcorr::pipeline::{self, encode_frames};
use stcorr::propagation::run_sequence;
use stcorr::Tensor;

const USAGE_EXIT: u8 = 1;
const NUMERIC_EXIT: u8 = 2;
const VERIFY_EXIT: u8 = 3;

/// Failure raised when a verification suite does not pass.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Parser, Debug)]
#[command(
    name = "stcorr",
    version,
    about = "Self-supervised spatial and temporal correspondence learning",
    after_help = "Any config key can be overridden with `--section.key value`, e.g. `--temporal.iters 500`."
)]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive pretraining on the sprite corpus.
    TrainSpatial {
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction-driven training on synthetic clips.
    TrainTemporal {
        #[arg(long)]
        out: PathBuf,
        /// Step-1 checkpoint to start from and distil against.
        #[arg(long, conflicts_with = "from_scratch", required_unless_present = "from_scratch")]
        init: Option<PathBuf>,
        /// Train a freshly initialized encoder with no teacher.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Carry frame-0 labels of a clip directory through the clip.
    Propagate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score propagation on generated held-out clips.
    EvalSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "from_scratch", required_unless_present = "from_scratch")]
        checkpoint: Option<PathBuf>,
        /// Train from scratch first (with `--iters` steps) instead of loading a checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Temporal iterations for `--from-scratch`; defaults to `temporal.iters`.
        #[arg(long, requires = "from_scratch")]
        iters: Option<usize>,
    },
    /// Finite-difference checks of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render loss or score CSVs to PNG charts.
    Plot {
        /// CSV files; the first column is the x axis.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Columns to draw; all numeric columns by default.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
    },
    /// Write a generated clip (`data.clip` settings) as a clip directory.
    SynthClip {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Splits `--a.b value` and `--a.b=value` config overrides from the rest.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--").filter(|k| k.contains('.') && !k.starts_with('-')) else {
            rest.push(arg);
            continue;
        };
        if let Some((k, v)) = key.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().with_context(|| format!("override --{key} needs a value"))?;
            overrides.push((key.to_string(), v));
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p, overrides)?,
        None => RunConfig::from_toml_str("", overrides)?,
    })
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Loads a checkpoint and adopts its encoder layout and Lab normalization.
fn adopt_checkpoint(path: &Path, cfg: &mut RunConfig) -> Result<Encoder> {
    let (encoder, manifest) =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if cfg.encoder != manifest.encoder {
        log::warn!("encoder settings taken from checkpoint {}", path.display());
        cfg.encoder = manifest.encoder;
    }
    cfg.data.lab = manifest.lab;
    cfg.validate()?;
    Ok(encoder)
}

fn manifest(stage: &str, cfg: &RunConfig, steps: usize) -> CheckpointManifest {
    CheckpointManifest {
        stage: stage.into(),
        encoder: cfg.encoder.clone(),
        lab: cfg.data.lab,
        steps,
        seed: cfg.run.seed,
    }
}

/// Overlay of labels on an RGB frame, as an 8-bit image.
fn overlay(frame: &Tensor, labels: &LabelMap) -> image::RgbImage {
    const PALETTE: [[f64; 3]; 6] = [
        [0.9, 0.1, 0.1],
        [0.1, 0.8, 0.2],
        [0.2, 0.3, 0.95],
        [0.95, 0.8, 0.1],
        [0.8, 0.2, 0.8],
        [0.1, 0.8, 0.8],
    ];
    let (h, w) = (labels.height, labels.width);
    let d = frame.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let l = labels.labels[i];
        let px = [0, 1, 2].map(|c| {
            let v = d[i * 3 + c];
            let v = if l == 0 { v } else { 0.5 * v + 0.5 * PALETTE[(l as usize - 1) % PALETTE.len()][c] };
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        image::Rgb(px)
    })
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::TrainSpatial { out } => {
            let cfg = load_config(cfg_path, overrides)?;
            prepare_out(&out, &cfg)?;
            let (encoder, rows) = pipeline::train_spatial(&cfg, |_| {})?;
            pipeline::write_csv(out.join("loss.csv"), &rows)?;
            save_checkpoint(out.join("checkpoint.tarc"), &encoder, &manifest("spatial", &cfg, rows.len()))?;
            println!("step-1 checkpoint written to {}", out.join("checkpoint.tarc").display());
        }
        Command::TrainTemporal { out, init, from_scratch: _ } => {
            let mut cfg = load_config(cfg_path, overrides)?;
            let init = init.map(|p| adopt_checkpoint(&p, &mut cfg)).transpose()?;
            prepare_out(&out, &cfg)?;
            let (encoder, rows) = pipeline::train_temporal(&cfg, init.as_ref(), |_| {})?;
            pipeline::write_csv(out.join("loss.csv"), &rows)?;
            save_checkpoint(out.join("checkpoint.tarc"), &encoder, &manifest("temporal", &cfg, rows.len()))?;
            println!("step-2 checkpoint written to {}", out.join("checkpoint.tarc").display());
        }
        Command::Propagate { checkpoint, clip, out } => {
            let mut cfg = load_config(cfg_path, overrides)?;
            let encoder = adopt_checkpoint(&checkpoint, &mut cfg)?;
            prepare_out(&out, &cfg)?;
            let clip = read_clip_dir(&clip).with_context(|| format!("reading clip {}", clip.display()))?;
            let frames = encode_frames(&clip, &cfg.data.lab)?;
            let init = &clip.masks[0];
            let classes = (init.max_label() as usize + 1).max(2);
            let preds = run_sequence(&encoder, &frames, init, classes, cfg.eval_level(), &cfg.propagation)?;
            for (t, (pred, frame)) in preds.iter().zip(&clip.frames).enumerate() {
                archive::write_archive(out.join(format!("labels_{t:04}.tarc")), &[label_entry("labels", pred)])?;
                overlay(frame, pred)
                    .save_with_format(out.join(format!("overlay_{t:04}.ppm")), image::ImageFormat::Pnm)?;
            }
            println!("{} label maps written to {}", preds.len(), out.display());
        }
        Command::EvalSynth { out, checkpoint, from_scratch: _, iters } => {
            let mut cfg = load_config(cfg_path, overrides)?;
            let encoder = match checkpoint {
                Some(p) => adopt_checkpoint(&p, &mut cfg)?,
                None => {
                    if let Some(n) = iters {
                        cfg.temporal.iters = n;
                    }
                    pipeline::train_temporal(&cfg, None, |_| {})?.0
                }
            };
            prepare_out(&out, &cfg)?;
            let report = pipeline::eval_synth(&cfg, &encoder, &cfg.data.lab)?;
            pipeline::write_csv(out.join("scores.csv"), &report.frames)?;
            let s = &report.summary;
            let summary = json!({
                "j_mean": s.j_mean,
                "f_mean": s.f_mean,
                "jf_mean": s.jf_mean,
                "sequences": report.sequences.len(),
                "seed": cfg.eval.seed,
            });
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("J {:.4}  F {:.4}  J&F {:.4}", s.j_mean, s.f_mean, s.jf_mean);
        }
        Command::Gradcheck { seed } => {
            let reports = gradsuite::run_all(seed)?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!("{status}  {:<42} max rel err {:.3e} (tol {:.0e})", r.name, r.max_rel_error, r.tolerance);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(VerificationFailed(format!("{failed} of {} gradient checks failed", reports.len())).into());
            }
        }
        Command::Plot { inputs, out, columns } => {
            fs::create_dir_all(&out)?;
            for input in &inputs {
                let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
                let parent = input
                    .parent()
                    .and_then(|p| p.file_name())
                    .and_then(|s| s.to_str())
                    .map(|p| format!("{p}_"))
                    .unwrap_or_default();
                let dest = out.join(format!("{parent}{stem}.png"));
                plot::plot_csv(input, &dest, &columns)?;
                println!("{}", dest.display());
            }
        }
        Command::SynthClip { out, seed } => {
            let cfg = load_config(cfg_path, overrides)?;
            let mut clip_cfg = cfg.data.clip.clone();
            if let Some(s) = seed {
                clip_cfg.seed = s;
            }
            let clip = synth_clip(&clip_cfg)?;
            write_clip_dir(&clip, &out)?;
            for (t, (f, m)) in clip.frames.iter().zip(&clip.masks).enumerate() {
                overlay(f, m)
                    .save_with_format(out.join(format!("frame_{t:04}.ppm")), image::ImageFormat::Pnm)?;
            }
            println!("clip with {} frames written to {}", clip.frames.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<VerificationFailed>() {
        return VERIFY_EXIT;
    }
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<stcorr::Error>().is_some_and(|e| e.is_numeric_fault()));
    if numeric {
        NUMERIC_EXIT
    } else {
        USAGE_EXIT
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(USAGE_EXIT);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
