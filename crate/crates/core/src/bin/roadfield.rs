use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use roadfield::encoding::EncoderConfig;
use roadfield::evaluation::render_eval_views;
use roadfield::experiments::{
    ablate, desk_config, desk_hash, desk_pe, evaluate, generate, manifest, new_trainer, prepare, train_in_epochs,
    ALL_MODES,
};
use roadfield::io::{export_surface, Manifest, RunConfig};
use roadfield::synthetic::SceneSpec;
use roadfield::training::{load_checkpoint, save_checkpoint};
use roadfield::{Error, Result};

const CHECKPOINT: &str = "model.ckpt";
const MANIFEST: &str = "manifest.toml";
const TRACE: &str = "loss.csv";
const REPORT: &str = "report.json";

#[derive(Parser)]
#[command(name = "roadfield", version, about = "Road surface height, color and semantics from posed images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderKind {
    Hash,
    Pe,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ImageFormat {
    Png,
    Ppm,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory.
    Gen {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Scene parameters as JSON; the default scene otherwise.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print a run configuration to stdout.
    Config {
        #[arg(long, default_value = "data")]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "hash")]
        encoder: EncoderKind,
    },
    /// Train both stages; writes checkpoint, loss trace and manifest.
    Train {
        /// Run configuration (TOML); a reduced default otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "hash")]
        encoder: EncoderKind,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from the checkpoint in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained run against its dataset; writes a JSON report.
    Eval {
        #[arg(long, default_value = "run")]
        run: PathBuf,
        /// Report path; `<run>/report.json` otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the surface mesh and rendered views of a trained run.
    Export {
        #[arg(long, default_value = "run")]
        run: PathBuf,
        /// Output directory; `<run>/export` otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mesh grid spacing in meters; the run's eval setting otherwise.
        #[arg(long)]
        step: Option<f64>,
        /// Number of frames to render.
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long, value_enum, default_value = "png")]
        format: ImageFormat,
    },
    /// Train and evaluate every hash-grid mode on one configuration.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        dataset: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

fn default_config(dataset: &Path, encoder: EncoderKind) -> RunConfig {
    let enc = match encoder {
        EncoderKind::Hash => EncoderConfig::Hash(desk_hash()),
        EncoderKind::Pe => EncoderConfig::Pe(desk_pe()),
    };
    desk_config(dataset, enc)
}

fn resolve_config(path: Option<&Path>, dataset: &Path, encoder: EncoderKind) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(default_config(dataset, encoder)),
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_run(run: &Path) -> Result<(Manifest, roadfield::training::Trainer)> {
    let ckpt = run.join(CHECKPOINT);
    if !ckpt.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}; run `roadfield train` first", ckpt.display())));
    }
    let trainer = load_checkpoint(&ckpt)?;
    let manifest = Manifest::load(&run.join(MANIFEST))?;
    Ok((manifest, trainer))
}

fn gen(out: &Path, scene: Option<&Path>, seed: u64) -> Result<()> {
    let spec = match scene {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str::<SceneSpec>(&text)?
        }
        None => SceneSpec::default(),
    };
    info!("rendering {} frames into {}", spec.camera.count, out.display());
    generate(out, &spec, seed)
}

fn train(cfg: RunConfig, out: &Path, resume: bool) -> Result<()> {
    cfg.validate()?;
    let prepared = prepare(&cfg)?;
    mkdir(out)?;
    let ckpt = out.join(CHECKPOINT);
    let mut trainer = if resume && ckpt.exists() {
        let t = load_checkpoint(&ckpt)?;
        let saved = Manifest::load(&out.join(MANIFEST))?;
        if saved.config != cfg {
            return Err(Error::Config("resume config differs from the one in the run directory".into()));
        }
        info!("resuming at height step {}, epoch {}", t.progress.height_step, t.progress.epoch);
        t
    } else {
        new_trainer(&cfg, prepared.bounds)?
    };
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    train_in_epochs(&mut trainer, &prepared, |t| {
        save_checkpoint(t, &ckpt)?;
        t.trace.write_csv(&out.join(TRACE))?;
        manifest(&cfg, t)?.save(&out.join(MANIFEST))
    })?;
    info!("model written to {}", ckpt.display());
    Ok(())
}

fn eval(run: &Path, out: Option<&Path>) -> Result<()> {
    let (manifest, trainer) = load_run(run)?;
    let prepared = prepare(&manifest.config)?;
    let report = evaluate(&trainer.model, &prepared, &manifest.config)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run.join(REPORT));
    write(&path, &serde_json::to_string_pretty(&report)?)?;
    info!(
        "psnr {:.3} dB, miou {:.4}, report at {}",
        report.psnr_db.unwrap_or(f64::INFINITY),
        report.miou,
        path.display()
    );
    Ok(())
}

fn export(run: &Path, out: Option<&Path>, step: Option<f64>, views: usize, format: ImageFormat) -> Result<()> {
    let (manifest, trainer) = load_run(run)?;
    let cfg = &manifest.config;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("export"));
    mkdir(&out)?;
    let prepared = prepare(cfg)?;
    let model = &trainer.model;
    let summary = export_surface(model, &prepared.bounds, step.unwrap_or(cfg.eval.export_step), &out.join("surface.ply"))?;
    info!("{} vertices, {} faces in {}", summary.vertices, summary.faces, summary.color_path.display());
    let frames = &prepared.reference_frames[..views.min(prepared.reference_frames.len())];
    let rendered = render_eval_views(model, frames, &cfg.train.patch, &cfg.eval.sampler());
    let palette = &model.config().classes.palette;
    for v in rendered {
        let stem = format!("view_{:06}", v.frame);
        let labels = v.labels.colorize(palette);
        match format {
            ImageFormat::Png => {
                v.color.save_png(&out.join(format!("{stem}_color.png")))?;
                labels.save_png(&out.join(format!("{stem}_semantic.png")))?;
            }
            ImageFormat::Ppm => {
                v.color.save_ppm(&out.join(format!("{stem}_color.ppm")))?;
                labels.save_ppm(&out.join(format!("{stem}_semantic.ppm")))?;
            }
        }
    }
    Ok(())
}

fn run_ablation(cfg: RunConfig, out: &Path) -> Result<()> {
    let prepared = prepare(&cfg)?;
    mkdir(out)?;
    let results = ablate(&cfg, &prepared, &ALL_MODES)?;
    let rows: Vec<serde_json::Value> = results
        .iter()
        .map(|(mode, o)| {
            serde_json::json!({
                "mode": mode,
                "hole_rmse": o.report.hole_rmse,
                "psnr_db": o.report.psnr_db,
                "miou": o.report.miou,
            })
        })
        .collect();
    for (mode, o) in &results {
        info!("{mode:?}: hole rmse {:?}, miou {:.4}", o.report.hole_rmse.and_then(|h| h.hole), o.report.miou);
    }
    write(&out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, scene, seed } => gen(&out, scene.as_deref(), seed),
        Command::Config { dataset, encoder } => {
            print!("{}", default_config(&dataset, encoder).to_toml()?);
            Ok(())
        }
        Command::Train {
            config,
            dataset,
            encoder,
            out,
            resume,
        } => train(resolve_config(config.as_deref(), &dataset, encoder)?, &out, resume),
        Command::Eval { run, out } => eval(&run, out.as_deref()),
        Command::Export {
            run,
            out,
            step,
            views,
            format,
        } => export(&run, out.as_deref(), step, views, format),
        Command::Ablate { config, dataset, out } => {
            run_ablation(resolve_config(config.as_deref(), &dataset, EncoderKind::Hash)?, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
