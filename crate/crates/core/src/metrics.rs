//! Image fidelity metrics and the held-out evaluation protocol.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{reference_image, Dataset};
use crate::diffopt::{Checkpoint, Model};
use crate::error::{Error, Result};
use crate::renderer::{render_sharp, BBox, Image};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_sizes(a: &Image, b: &Image) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]; `inf` when equal.
pub fn psnr(a: &Image, b: &Image, crop: Option<&BBox>) -> Result<f64> {
    check_sizes(a, b)?;
    let bb = crop.copied().unwrap_or_else(|| BBox::full(a));
    let mut sum = 0.0;
    for y in bb.y0..bb.y1 {
        for x in bb.x0..bb.x1 {
            let i = 3 * (y * a.width + x);
            for c in 0..3 {
                let d = a.data[i + c] - b.data[i + c];
                sum += d * d;
            }
        }
    }
    let mse = sum / (3 * bb.area()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn luminance(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity of the luminance channels over every full
/// 11x11 window position.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_sizes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let (la, lb) = (luminance(a), luminance(b));
    let g = gaussian_window();
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                for (dx, gx) in g.iter().enumerate() {
                    let k = gy * gx;
                    let i = (y0 + dy) * w + x0 + dx;
                    let (va, vb) = (la[i], lb[i]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn foreground_bounds(img: &Image, background: &Vector3<f64>, acc: &mut Option<(usize, usize, usize, usize)>) {
    for y in 0..img.height {
        for x in 0..img.width {
            if img.pixel(x, y) != *background {
                let b = acc.get_or_insert((x, y, x, y));
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x);
                b.3 = b.3.max(y);
            }
        }
    }
}

fn grow(lo: usize, hi: usize, min: usize, limit: usize) -> (usize, usize) {
    if hi - lo >= min || limit < min {
        return (lo, hi);
    }
    let missing = min - (hi - lo);
    let lo = lo.saturating_sub(missing.div_ceil(2));
    let hi = (lo + min).min(limit);
    (hi - min, hi)
}

/// Union bounding box of non-background pixels of both images, padded and
/// grown to fit an SSIM window. The full image when both are empty.
pub fn union_crop(a: &Image, b: &Image, background: &Vector3<f64>, padding: usize) -> BBox {
    let mut acc = None;
    foreground_bounds(a, background, &mut acc);
    foreground_bounds(b, background, &mut acc);
    let Some((x0, y0, x1, y1)) = acc else {
        return BBox::full(a);
    };
    let x0 = x0.saturating_sub(padding);
    let y0 = y0.saturating_sub(padding);
    let x1 = (x1 + 1 + padding).min(a.width);
    let y1 = (y1 + 1 + padding).min(a.height);
    let (x0, x1) = grow(x0, x1, SSIM_WINDOW, a.width);
    let (y0, y1) = grow(y0, y1, SSIM_WINDOW, a.height);
    BBox { x0, y0, x1, y1 }
}

mod inf_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            "inf".serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

/// Formats a PSNR value for humans, `inf` for exact matches.
pub fn format_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub camera: String,
    pub frame: usize,
    pub s: f64,
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub ssim: f64,
    /// Reserved; always null.
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub ssim: f64,
}

impl Aggregate {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Option<Aggregate> {
        let (mut count, mut p, mut s) = (0, 0.0, 0.0);
        for r in records {
            count += 1;
            p += r.psnr;
            s += r.ssim;
        }
        (count > 0).then(|| Aggregate {
            count,
            psnr: p / count as f64,
            ssim: s / count as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepAggregate {
    pub s: f64,
    #[serde(flatten)]
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub iteration: usize,
    pub timesteps: Vec<f64>,
    pub records: Vec<EvalRecord>,
    pub overall: Option<Aggregate>,
    pub middle: Option<Aggregate>,
    pub non_middle: Option<Aggregate>,
    pub per_timestep: Vec<TimestepAggregate>,
}

pub fn is_middle(s: f64) -> bool {
    s == 0.5
}

impl EvalReport {
    pub fn from_records(config: RunConfig, iteration: usize, timesteps: Vec<f64>, records: Vec<EvalRecord>) -> Self {
        let per_timestep = timesteps
            .iter()
            .filter_map(|&s| {
                Aggregate::of(records.iter().filter(|r| r.s == s)).map(|aggregate| TimestepAggregate { s, aggregate })
            })
            .collect();
        Self {
            overall: Aggregate::of(&records),
            middle: Aggregate::of(records.iter().filter(|r| is_middle(r.s))),
            non_middle: Aggregate::of(records.iter().filter(|r| !is_middle(r.s))),
            per_timestep,
            config,
            iteration,
            timesteps,
            records,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("camera,frame,s,psnr,ssim\n");
        for r in &self.records {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.camera,
                r.frame,
                r.s,
                format_psnr(r.psnr),
                r.ssim
            ));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Renders `model` on every held-out camera and frame at each timestep and
/// compares against ground truth inside the union crop.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    config: &RunConfig,
    iteration: usize,
    timesteps: &[f64],
) -> Result<EvalReport> {
    if let Some(s) = timesteps.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Parameter(format!("timestep {s} outside [0, 1]")));
    }
    if model.avatar.skeleton != dataset.skeleton {
        return Err(Error::Parameter(
            "checkpoint skeleton differs from the dataset skeleton".into(),
        ));
    }
    if model.bank.frames() != dataset.manifest.frame_count {
        return Err(Error::Parameter(
            "checkpoint frame count differs from the dataset".into(),
        ));
    }
    let cams = dataset.eval_cameras()?;
    let needs_gt = timesteps.iter().any(|s| !is_middle(*s));
    let gt = if needs_gt {
        Some(Checkpoint::load(&dataset.root.join(&dataset.manifest.gt_checkpoint))?.model()?)
    } else {
        None
    };
    let bg = dataset.background();
    let m = &dataset.manifest;
    let mut jobs = Vec::new();
    for (id, cam) in &cams {
        for frame in 0..m.frame_count {
            for &s in timesteps {
                jobs.push((id, cam, frame, s));
            }
        }
    }
    let padding = config.eval.crop_padding;
    let records = jobs
        .par_iter()
        .map(|&(id, cam, frame, s)| {
            let truth = if is_middle(s) {
                dataset.image(id, frame)?
            } else {
                let gt = gt.as_ref().expect("loaded when needed");
                reference_image(gt, &m.motion, m.exposure, &bg, cam, frame, s)?
            };
            let rendered = render_sharp(&model.avatar, &model.bank, &model.net, frame, s, cam, &bg)?.quantize_f32();
            let crop = union_crop(&truth, &rendered, &bg, padding);
            Ok(EvalRecord {
                camera: id.clone(),
                frame,
                s,
                psnr: psnr(&rendered, &truth, Some(&crop))?,
                ssim: ssim(&rendered.crop(&crop), &truth.crop(&crop))?,
                lpips: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(
        config.clone(),
        iteration,
        timesteps.to_vec(),
        records,
    ))
}
