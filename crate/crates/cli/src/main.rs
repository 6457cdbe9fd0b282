use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bal_core::config::{Ablation, RunConfig, CONFIG_KEYS};
use bal_core::datagen::{self, Dataset, GenerateOptions};
use bal_core::diffopt::{self, Checkpoint, TrainOptions, FINAL_CHECKPOINT};
use bal_core::metrics::{self, format_psnr, Aggregate, EvalReport};
use bal_core::renderer::{render_sharp, Camera, CameraSpec};
use bal_core::Error;
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::Serialize;

/// Exit codes.
const OK: u8 = 0;
const CHECK_FAILED: u8 = 1;
const USAGE: u8 = 2;
const IO: u8 = 3;

#[derive(Parser)]
#[command(name = "bal", version, about = "Blur-aware articulated Gaussian avatar reconstruction", after_help = CONFIG_KEYS)]
struct Cli {
    /// Cap on worker threads; 1 reproduces multi-threaded results exactly.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a blurry multi-view dataset.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Also dump every synthesis sub-frame next to its blurry frame.
        #[arg(long)]
        subframe_dumps: bool,
    },
    /// Optimize an avatar against a dataset's blurry frames.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's ablation preset.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many iterations have run in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Render sharp images from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Camera id from the dataset manifest, or from the checkpoint's rig.
        #[arg(long, conflicts_with = "camera_spec")]
        camera: Option<String>,
        /// Camera description as JSON.
        #[arg(long)]
        camera_spec: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated normalized exposure times.
        #[arg(long, value_delimiter = ',', conflicts_with = "grid")]
        timesteps: Vec<f64>,
        /// Evenly spaced times per frame, endpoints included.
        #[arg(long)]
        grid: Option<usize>,
        /// Restrict to these frames.
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Write a raw .f32 image next to every PNG.
        #[arg(long)]
        float_dump: bool,
    },
    /// Score a checkpoint on the held-out sharp cameras.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-image records as CSV next to the report.
        #[arg(long)]
        csv: bool,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        /// JSON report path.
        #[arg(long, default_value = "gradcheck.json")]
        out: PathBuf,
    },
    /// Generate one dataset per exposure, optionally training and scoring each.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Train the full model and the blur-naive baseline per exposure.
        #[arg(long)]
        train: bool,
    },
}

enum Failure {
    Check(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        IO
    } else if matches!(e, Error::NonFinite { .. }) {
        CHECK_FAILED
    } else {
        USAGE
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Error> {
    let mut cfg = match &arg.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.into(),
            source,
        })?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn describe(label: &str, a: &Option<Aggregate>) -> String {
    match a {
        Some(a) => format!("{label} psnr={} ssim={:.6} n={}", format_psnr(a.psnr), a.ssim, a.count),
        None => format!("{label} n=0"),
    }
}

fn print_aggregates(r: &EvalReport) {
    println!("{}", describe("overall", &r.overall));
    println!("{}", describe("middle", &r.middle));
    println!("{}", describe("non_middle", &r.non_middle));
}

fn generate(config: &ConfigArg, out: &Path, subframe_dumps: bool) -> CmdResult {
    let cfg = load_config(config)?;
    let m = datagen::generate_with(&cfg, out, GenerateOptions { subframe_dumps })?;
    eprintln!(
        "wrote {} cameras x {} frames to {}",
        m.cameras.len(),
        m.frame_count,
        out.display()
    );
    Ok(())
}

fn train(
    config: &ConfigArg,
    dataset: &Path,
    out: &Path,
    ablation: Option<&str>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> CmdResult {
    let resume = resume.map(Checkpoint::load).transpose()?;
    let mut cfg = match (&config.config, &resume) {
        (None, Some(ck)) => ck.config.clone(),
        _ => load_config(config)?,
    };
    if let Some(name) = ablation {
        cfg.ablation = Ablation::parse(name).ok_or_else(|| {
            let known: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!(
                "unknown ablation {name:?}; expected one of {}",
                known.join(", ")
            ))
        })?;
    }
    let data = Dataset::load(dataset)?;
    let outcome = diffopt::train(
        &data,
        &cfg,
        TrainOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            stop_after,
        },
    )?;
    let last = outcome.log.last();
    eprintln!(
        "trained to iteration {} ({} Gaussians, last loss {})",
        outcome.checkpoint.iteration,
        last.map_or(0, |e| e.gaussians),
        last.map_or("n/a".into(), |e| format!("{:.6}", e.l_pho)),
    );
    if outcome.checkpoint.iteration == cfg.effective().train.iterations {
        eprintln!("final checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
    }
    Ok(())
}

fn resolve_camera(
    id: Option<&str>,
    spec: Option<&Path>,
    dataset: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(String, Camera), Error> {
    if let Some(p) = spec {
        let text = std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.into(), source })?;
        let spec: CameraSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let name = p
            .file_stem()
            .map_or("camera".into(), |s| s.to_string_lossy().into_owned());
        return Ok((name, spec.to_camera()?));
    }
    let id = id.ok_or_else(|| Error::Config("render needs --camera or --camera-spec".into()))?;
    let found = match dataset {
        Some(d) => datagen::Manifest::load(d)?
            .camera(id)
            .map(|c| c.camera.to_camera())
            .transpose()?,
        None => datagen::rig_cameras(&cfg.rig)
            .into_iter()
            .find(|(c, _)| c == id)
            .map(|(_, cam)| cam),
    };
    found
        .map(|cam| (id.to_string(), cam))
        .ok_or_else(|| Error::Config(format!("unknown camera id {id:?}")))
}

#[allow(clippy::too_many_arguments)]
fn render(
    checkpoint: &Path,
    camera: Option<&str>,
    camera_spec: Option<&Path>,
    dataset: Option<&Path>,
    timesteps: &[f64],
    grid: Option<usize>,
    frames: &[usize],
    out: &Path,
    float_dump: bool,
) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let (cam_id, cam) = resolve_camera(camera, camera_spec, dataset, &ck.config)?;
    let times: Vec<f64> = match grid {
        Some(0) => return Err(Error::Config("--grid must be at least 1".into()).into()),
        Some(1) => vec![0.5],
        Some(g) => (0..g).map(|i| i as f64 / (g - 1) as f64).collect(),
        None if timesteps.is_empty() => vec![0.5],
        None => timesteps.to_vec(),
    };
    if let Some(s) = times.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Config(format!("timestep {s} outside [0, 1]")).into());
    }
    let n = model.bank.frames();
    let frames: Vec<usize> = if frames.is_empty() {
        (0..n).collect()
    } else {
        frames.to_vec()
    };
    if let Some(f) = frames.iter().find(|f| **f >= n) {
        return Err(Error::Config(format!("frame {f} out of range (checkpoint has {n})")).into());
    }
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.into(),
        source,
    })?;
    let bg = Vector3::from(ck.config.model.background);
    let mut count = 0;
    for &frame in &frames {
        for (k, &s) in times.iter().enumerate() {
            let img = render_sharp(&model.avatar, &model.bank, &model.net, frame, s, &cam, &bg)?;
            let stem = format!("{cam_id}_f{frame:03}_s{k:03}");
            img.write_png(&out.join(format!("{stem}.png")))?;
            if float_dump {
                img.write_f32(&out.join(format!("{stem}.f32")))?;
            }
            count += 1;
        }
    }
    eprintln!("rendered {count} images to {}", out.display());
    Ok(())
}

fn evaluate(checkpoint: &Path, dataset: &Path, out: &Path, csv: bool) -> CmdResult {
    let data = Dataset::load(dataset)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let report = metrics::evaluate(&model, &data, &ck.config, ck.iteration, &ck.config.eval.timesteps)?;
    ensure_parent(out)?;
    report.save(out)?;
    if csv {
        report.write_csv(&out.with_extension("csv"))?;
    }
    print_aggregates(&report);
    eprintln!("report written to {}", out.display());
    Ok(())
}

fn gradcheck(config: &ConfigArg, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let report = diffopt::gradcheck(&cfg)?;
    write_json(out, &report)?;
    for (g, s) in &report.per_group {
        eprintln!(
            "{:>10}: {:>3} samples, max rel err {:.3e}",
            g.name(),
            s.count,
            s.max_rel_err
        );
    }
    println!(
        "max_rel_err={:.6e} median_rel_err={:.6e} samples={} passed={}",
        report.max_rel_err,
        report.median_rel_err,
        report.samples.len(),
        report.passed
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed; see {}", out.display())))
    }
}

#[derive(Serialize)]
struct SweepRow {
    exposure: f64,
    dataset: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    full: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    blur_naive: Option<Aggregate>,
}

fn sweep(config: &ConfigArg, out: &Path, with_training: bool) -> CmdResult {
    let cfg = load_config(config)?;
    let sets = datagen::blur_magnitude_sweep(&cfg, &cfg.sweep.exposures, out)?;
    let mut rows = Vec::new();
    for (tau, dir, _) in sets {
        let mut row = SweepRow {
            exposure: tau,
            dataset: dir.clone(),
            full: None,
            blur_naive: None,
        };
        if with_training {
            let data = Dataset::load(&dir)?;
            for ablation in [Ablation::None, Ablation::BlurNaive] {
                let mut c = cfg.clone();
                c.data.exposure = tau;
                c.ablation = ablation;
                let run_dir = dir.join(format!("run_{}", ablation.name()));
                let outcome = diffopt::train(
                    &data,
                    &c,
                    TrainOptions {
                        out_dir: Some(run_dir.clone()),
                        ..Default::default()
                    },
                )?;
                let model = outcome.checkpoint.model()?;
                let report = metrics::evaluate(&model, &data, &c, outcome.checkpoint.iteration, &[0.5])?;
                report.save(&run_dir.join("eval.json"))?;
                eprintln!("tau {tau}: {}", describe(ablation.name(), &report.middle));
                match ablation {
                    Ablation::None => row.full = report.middle,
                    _ => row.blur_naive = report.middle,
                }
            }
        }
        rows.push(row);
    }
    write_json(&out.join("sweep.json"), &rows)?;
    println!("{}", serde_json::to_string(&rows).expect("serializable"));
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate {
            config,
            out,
            subframe_dumps,
        } => generate(&config, &out, subframe_dumps),
        Command::Train {
            config,
            dataset,
            out,
            ablation,
            resume,
            stop_after,
        } => train(
            &config,
            &dataset,
            &out,
            ablation.as_deref(),
            resume.as_deref(),
            stop_after,
        ),
        Command::Render {
            checkpoint,
            camera,
            camera_spec,
            dataset,
            timesteps,
            grid,
            frames,
            out,
            float_dump,
        } => render(
            &checkpoint,
            camera.as_deref(),
            camera_spec.as_deref(),
            dataset.as_deref(),
            &timesteps,
            grid,
            &frames,
            &out,
            float_dump,
        ),
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
            csv,
        } => evaluate(&checkpoint, &dataset, &out, csv),
        Command::Gradcheck { config, out } => gradcheck(&config, &out),
        Command::Sweep { config, out, train } => sweep(&config, &out, train),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(USAGE);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::from(OK),
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(CHECK_FAILED)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
