use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::adam::{rates_at, Adam};
use super::checkpoint::Checkpoint;
use super::density::{density_control, is_density_step, DensityStats};
use super::model::Model;
use super::pipeline::{loss_and_grad, Settings, Target};
use crate::config::{rng_for, streams, RunConfig};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::metrics::union_crop;
use crate::renderer::BBox;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub camera: String,
    pub frame: usize,
    pub l_pho: f64,
    pub l1: f64,
    pub l_reg: f64,
    pub gaussians: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and logs; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Stop after this many total iterations (for split runs).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.json")
}

pub fn settings_for(cfg: &RunConfig, background: Vector3<f64>) -> Settings {
    let eff = cfg.effective();
    Settings {
        subframes: eff.model.subframes,
        lambda_reg: eff.model.lambda_reg,
        background,
    }
}

struct Logs {
    metrics: Option<std::fs::File>,
    timing: Option<std::fs::File>,
}

impl Logs {
    fn open(dir: Option<&Path>, append: bool) -> Result<Logs> {
        let Some(dir) = dir else {
            return Ok(Logs {
                metrics: None,
                timing: None,
            });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))
        };
        Ok(Logs {
            metrics: Some(open(METRICS_LOG)?),
            timing: Some(open(TIMING_LOG)?),
        })
    }

    fn write(&mut self, dir: Option<&Path>, entry: &LogEntry, seconds: f64) -> Result<()> {
        let err = |name: &str, e| Error::io(dir.map(|d| d.join(name)).unwrap_or_default(), e);
        if let Some(f) = self.metrics.as_mut() {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            writeln!(f, "{line}").map_err(|e| err(METRICS_LOG, e))?;
        }
        if let Some(f) = self.timing.as_mut() {
            writeln!(f, "{{\"iteration\":{},\"wall_seconds\":{seconds}}}", entry.iteration)
                .map_err(|e| err(TIMING_LOG, e))?;
        }
        Ok(())
    }
}

/// Fails before iteration 0 when the dataset cannot drive training.
fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.train.is_empty() {
        return Err(Error::Dataset("dataset has no training cameras".into()));
    }
    let n = dataset.manifest.frame_count;
    if n == 0 || dataset.coarse_poses.len() != n {
        return Err(Error::Dataset("dataset frames and coarse poses disagree".into()));
    }
    for v in &dataset.train {
        if v.images.len() != n {
            return Err(Error::Dataset(format!("camera {} is missing frames", v.id)));
        }
        if v.images
            .iter()
            .any(|i| i.width != v.camera.width || i.height != v.camera.height)
        {
            return Err(Error::Dataset(format!(
                "camera {} images do not match its resolution",
                v.id
            )));
        }
    }
    Ok(())
}

/// Optimizes the model against the dataset's blurry frames.
pub fn train(dataset: &Dataset, cfg: &RunConfig, options: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let eff = cfg.effective();
    let (mut model, mut adam, mut stats, start) = match &options.resume {
        Some(ck) => {
            if ck.config != *cfg {
                return Err(Error::Config(
                    "resume checkpoint was written with a different config".into(),
                ));
            }
            let model = ck.model()?;
            let adam = ck.adam(&model)?;
            if ck.density.grad_sum.len() != model.gaussian_count() {
                return Err(Error::Parameter("checkpoint density statistics do not match".into()));
            }
            (model, adam, ck.density.clone(), ck.iteration)
        }
        None => {
            let mut rng = rng_for(cfg.seed, streams::INIT);
            let model = Model::initialize(dataset.skeleton.clone(), &dataset.coarse_poses, cfg, &mut rng)?;
            let adam = Adam::new(&model);
            let stats = DensityStats::new(model.gaussian_count());
            (model, adam, stats, 0)
        }
    };
    if model.bank.frames() != dataset.manifest.frame_count {
        return Err(Error::Dataset("model frame count differs from the dataset".into()));
    }
    let total = eff.train.iterations;
    let stop = options.stop_after.unwrap_or(total).min(total);
    let settings = settings_for(cfg, dataset.background());
    let dir = options.out_dir.as_deref();
    let mut logs = Logs::open(dir, start > 0)?;
    let bg = dataset.background();
    let crops: Vec<Vec<Option<BBox>>> = dataset
        .train
        .iter()
        .map(|v| {
            v.images
                .iter()
                .map(|img| {
                    eff.train
                        .crop_to_subject
                        .then(|| union_crop(img, img, &bg, eff.train.crop_padding))
                })
                .collect()
        })
        .collect();
    let cams = dataset.train.len();
    let pairs = cams * dataset.manifest.frame_count;
    let clock = Instant::now();
    let mut log = Vec::new();

    for it in start..stop {
        let pair = it % pairs;
        let (frame, cam) = (pair / cams, pair % cams);
        let view = &dataset.train[cam];
        let target = Target {
            camera_id: &view.id,
            camera: &view.camera,
            frame,
            image: &view.images[frame],
            crop: crops[cam][frame],
        };
        let eval = loss_and_grad(&model, &target, &settings, None)?;
        stats.accumulate(&eval.mean2d_grad, &eval.visible);
        adam.step(&mut model, &eval.grads, &rates_at(&eff.train.learning_rates, it, total));
        if is_density_step(&eff.density, it) {
            let mut rng = rng_for(cfg.seed, streams::DENSITY_BASE + it as u64);
            let out = density_control(&mut model, &mut adam, &mut stats, &eff.density, &mut rng);
            log::debug!(
                "iteration {}: density {:?}, {} Gaussians",
                it + 1,
                out,
                model.gaussian_count()
            );
        }
        let entry = LogEntry {
            iteration: it + 1,
            camera: view.id.clone(),
            frame,
            l_pho: eval.report.total,
            l1: eval.report.l1,
            l_reg: eval.report.l_reg,
            gaussians: model.gaussian_count(),
        };
        logs.write(dir, &entry, clock.elapsed().as_secs_f64())?;
        if (it + 1) % 100 == 0 {
            log::info!(
                "iteration {} loss {:.6} ({} Gaussians)",
                it + 1,
                entry.l_pho,
                entry.gaussians
            );
        }
        log.push(entry);
        let every = eff.train.checkpoint_every;
        if let Some(d) = dir {
            if every > 0 && (it + 1) % every == 0 && it + 1 < stop {
                Checkpoint::capture(&model, &adam, &stats, cfg, it + 1).save(&d.join(checkpoint_name(it + 1)))?;
            }
        }
    }
    let checkpoint = Checkpoint::capture(&model, &adam, &stats, cfg, stop.max(start));
    if let Some(d) = dir {
        checkpoint.save(&d.join(checkpoint_name(checkpoint.iteration)))?;
        if checkpoint.iteration == total {
            checkpoint.save(&d.join(FINAL_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome { checkpoint, log })
}
