//! Image quality metrics and evaluation reports.
//!
//! Conventions: PSNR is computed over all RGB samples jointly and capped at
//! [`PSNR_CAP`]; SSIM is computed on BT.601 luma with an 11x11 Gaussian
//! window (sigma 1.5), averaged over every fully contained window position.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeVector;
use crate::classifier::Classifier;
use crate::data::{TrainingSample, HR_SIZE};
use crate::error::{Error, Result};
use crate::features::{extract_images, FeatureExtractor};
use crate::generator::Generator;
use crate::image::Image;
use crate::resample::upsample;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const CONVENTIONS: &str =
    "PSNR over RGB jointly, peak 1, capped at 100 dB; SSIM on BT.601 luma, 11x11 Gaussian window (sigma 1.5), valid windows";

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical images score [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    same_size(a, b)?;
    let mse = (&a.pixels() - &b.pixels()).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub fn luma(img: &Image) -> Array2<f64> {
    let p = img.pixels();
    p.map_axis(Axis(2), |c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
}

fn gaussian_window() -> Array1<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w = Array1::from_shape_fn(SSIM_WINDOW, |i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s = w.sum();
    w / s
}

/// Separable 'valid' filtering of `x` with the 1-D kernel `k` on both axes.
fn filter_valid(x: &Array2<f64>, k: &Array1<f64>) -> Array2<f64> {
    let n = k.len();
    let (h, w) = x.dim();
    let rows: Array2<f64> = Array2::from_shape_fn((h, w + 1 - n), |(i, j)| (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(i, j)| (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean structural similarity on luma with peak 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let (x, y) = (luma(a), luma(b));
    let k = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k) - &mx * &mx;
    let syy = filter_valid(&(&y * &y), &k) - &my * &my;
    let sxy = filter_valid(&(&x * &y), &k) - &mx * &my;
    let num = (&mx * &my * 2.0 + c1) * (&sxy * 2.0 + c2);
    let den = (&mx * &mx + &my * &my + c1) * (&sxx + &syy + c2);
    Ok((num / den).mean().expect("non-empty"))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Shape("feature vector has zero norm".into()));
    }
    Ok(dot / (na * nb))
}

/// Cosine similarity of identity features; inputs smaller than 128x128 are
/// bilinearly upsampled first.
pub fn feature_cosine(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let lift = |i: &Image| if i.height() == HR_SIZE && i.width() == HR_SIZE { i.clone() } else { upsample(i, HR_SIZE) };
    let f = extract_images(extractor, &[lift(a), lift(b)])?;
    cosine(&f[0], &f[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    Classifier,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub cos_lr_gt: Option<f64>,
    pub cos_sr_gt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub attribute_source: Option<AttributeSource>,
    pub conventions: String,
    pub rows: Vec<EvalRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_cos_lr_gt: Option<f64>,
    pub mean_cos_sr_gt: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    fn from_rows(method: &str, source: Option<AttributeSource>, rows: Vec<EvalRow>) -> Self {
        let opt_mean = |f: fn(&EvalRow) -> Option<f64>| rows.iter().map(f).collect::<Option<Vec<_>>>().map(|v| mean(v.into_iter()));
        Self {
            method: method.to_string(),
            attribute_source: source,
            conventions: CONVENTIONS.to_string(),
            mean_psnr_db: mean(rows.iter().map(|r| r.psnr_db)),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)),
            mean_cos_lr_gt: opt_mean(|r| r.cos_lr_gt),
            mean_cos_sr_gt: opt_mean(|r| r.cos_sr_gt),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("id,psnr_db,ssim,cos_lr_gt,cos_sr_gt\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.id, r.psnr_db, r.ssim, opt(r.cos_lr_gt), opt(r.cos_sr_gt)).expect("String write");
        }
        out
    }
}

const EVAL_CHUNK: usize = 8;

fn score(
    samples: &[TrainingSample],
    extractor: Option<&dyn FeatureExtractor>,
    mut sr: impl FnMut(&[TrainingSample]) -> Result<Vec<Image>>,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let outputs = sr(chunk)?;
        let cos = match extractor {
            Some(e) => {
                let gt: Vec<Image> = chunk.iter().map(|s| s.hr().clone()).collect();
                let lr: Vec<Image> = chunk.iter().map(|s| upsample(&s.lr, HR_SIZE)).collect();
                let (fg, fl, fs) = (extract_images(e, &gt)?, extract_images(e, &lr)?, extract_images(e, &outputs)?);
                (0..chunk.len())
                    .map(|i| Ok((Some(cosine(&fl[i], &fg[i])?), Some(cosine(&fs[i], &fg[i])?))))
                    .collect::<Result<Vec<_>>>()?
            }
            None => vec![(None, None); chunk.len()],
        };
        for ((s, out), (cos_lr_gt, cos_sr_gt)) in chunk.iter().zip(&outputs).zip(cos) {
            rows.push(EvalRow {
                id: s.id.clone(),
                psnr_db: psnr(out, s.hr(), 1.0)?,
                ssim: ssim(out, s.hr())?,
                cos_lr_gt,
                cos_sr_gt,
            });
        }
    }
    Ok(rows)
}

/// Scores the generator's 128x128 output on every sample, conditioning on
/// ground-truth or classifier-predicted attributes.
pub fn evaluate(
    generator: &Generator,
    classifier: &Classifier,
    stage: usize,
    samples: &[TrainingSample],
    source: AttributeSource,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<EvalReport> {
    if stage != 3 {
        return Err(Error::InvalidStage(stage).context_eval());
    }
    let rows = score(samples, extractor, |chunk| {
        let lr: Vec<Image> = chunk.iter().map(|s| s.lr.clone()).collect();
        let attrs: Vec<AttributeVector> = match source {
            AttributeSource::GroundTruth => chunk.iter().map(|s| s.attributes).collect(),
            AttributeSource::Classifier => classifier.classify_batch(&lr)?,
        };
        Ok(generator.hallucinate(&lr, &attrs, 3)?.pop().expect("stage 3 output"))
    })?;
    Ok(EvalReport::from_rows("generator", Some(source), rows))
}

/// Scores plain bilinear 16 -> 128 upsampling.
pub fn bilinear_baseline(samples: &[TrainingSample], extractor: Option<&dyn FeatureExtractor>) -> Result<EvalReport> {
    let rows = score(samples, extractor, |chunk| Ok(chunk.iter().map(|s| upsample(&s.lr, HR_SIZE)).collect()))?;
    Ok(EvalReport::from_rows("bilinear", None, rows))
}

impl Error {
    fn context_eval(self) -> Error {
        match self {
            Error::InvalidStage(s) => Error::Config(format!(
                "evaluation is defined at 128x128 and needs a stage-3 checkpoint; this one is at stage {s}"
            )),
            other => other,
        }
    }
}
