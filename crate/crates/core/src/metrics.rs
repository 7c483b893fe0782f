//! ℓ1, ℓ2 and pSNR between completed images and ground truth.
//!
//! Intensities are normalized to [0, 1] by dividing levels by `K − 1`, and
//! every pixel of the image counts, visible or not. Visible pixels of an
//! inpainting match the truth exactly, so the scores are diluted by the
//! visible fraction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{CoreError, Result};
use crate::maskgen::Mask;
use crate::model::ModelParams;
use crate::parallel::par_map;
use crate::sampling::{derive_seed, sample_batch};

/// pSNR shown for identical images.
pub const PSNR_DISPLAY_CAP: f64 = 99.0;

fn normalized_diffs<'a>(pred: &'a Image, truth: &'a Image) -> Result<impl Iterator<Item = f64> + 'a> {
    let s = truth.signature();
    s.expect(&pred.signature())?;
    let scale = 1.0 / (s.levels - 1) as f64;
    Ok(pred
        .pixels()
        .iter()
        .zip(truth.pixels())
        .map(move |(&a, &b)| (a as f64 - b as f64) * scale))
}

fn mse(pred: &Image, truth: &Image) -> Result<f64> {
    let n = truth.pixels().len() as f64;
    Ok(normalized_diffs(pred, truth)?.map(|d| d * d).sum::<f64>() / n)
}

/// Mean absolute normalized difference, in percent.
pub fn l1(pred: &Image, truth: &Image) -> Result<f64> {
    let n = truth.pixels().len() as f64;
    Ok(100.0 * normalized_diffs(pred, truth)?.map(f64::abs).sum::<f64>() / n)
}

/// Root-mean-square normalized difference, in percent.
pub fn l2(pred: &Image, truth: &Image) -> Result<f64> {
    Ok(100.0 * mse(pred, truth)?.sqrt())
}

/// `10·log10(1 / MSE)` in dB with peak 1; infinite for identical images.
pub fn psnr(pred: &Image, truth: &Image) -> Result<f64> {
    let m = mse(pred, truth)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// pSNR as displayed and aggregated: infinity becomes [`PSNR_DISPLAY_CAP`].
pub fn psnr_display(db: f64) -> f64 {
    db.min(PSNR_DISPLAY_CAP)
}

/// Scores of one completion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub l1: f64,
    pub l2: f64,
    /// Capped at [`PSNR_DISPLAY_CAP`].
    pub psnr: f64,
    pub psnr_infinite: bool,
}

impl Scores {
    pub fn compute(pred: &Image, truth: &Image) -> Result<Self> {
        let p = psnr(pred, truth)?;
        Ok(Self {
            l1: l1(pred, truth)?,
            l2: l2(pred, truth)?,
            psnr: psnr_display(p),
            psnr_infinite: p.is_infinite(),
        })
    }
}

/// Scores of one image: mean over its samples and the best sample per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub index: usize,
    pub samples: usize,
    pub hidden_pixels: usize,
    pub mean: Scores,
    pub best: Scores,
}

impl ImageScores {
    pub fn from_samples(index: usize, hidden_pixels: usize, samples: &[Scores]) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::invalid("samples_per_image", "must be at least 1"));
        }
        let n = samples.len() as f64;
        let avg = |f: fn(&Scores) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let min = |f: fn(&Scores) -> f64| samples.iter().map(f).fold(f64::INFINITY, f64::min);
        let best_psnr = samples.iter().map(|s| s.psnr).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            index,
            samples: samples.len(),
            hidden_pixels,
            mean: Scores {
                l1: avg(|s| s.l1),
                l2: avg(|s| s.l2),
                psnr: avg(|s| s.psnr),
                psnr_infinite: samples.iter().all(|s| s.psnr_infinite),
            },
            best: Scores {
                l1: min(|s| s.l1),
                l2: min(|s| s.l2),
                psnr: best_psnr,
                psnr_infinite: samples.iter().any(|s| s.psnr_infinite),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub samples_per_image: usize,
    pub images: Vec<ImageScores>,
    /// Means over images of the per-image mean scores.
    pub mean: Scores,
    /// Means over images of the per-image best scores.
    pub best: Scores,
}

impl EvalReport {
    pub fn from_images(seed: u64, samples_per_image: usize, images: Vec<ImageScores>) -> Result<Self> {
        if images.is_empty() {
            return Err(CoreError::invalid("images", "at least one image is required"));
        }
        let n = images.len() as f64;
        let agg = |pick: fn(&ImageScores) -> &Scores| Scores {
            l1: images.iter().map(|i| pick(i).l1).sum::<f64>() / n,
            l2: images.iter().map(|i| pick(i).l2).sum::<f64>() / n,
            psnr: images.iter().map(|i| pick(i).psnr).sum::<f64>() / n,
            psnr_infinite: images.iter().all(|i| pick(i).psnr_infinite),
        };
        let (mean, best) = (agg(|i| &i.mean), agg(|i| &i.best));
        Ok(Self {
            seed,
            samples_per_image,
            images,
            mean,
            best,
        })
    }

    /// One row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,samples,hidden_pixels,l1_mean,l1_best,l2_mean,l2_best,psnr_mean,psnr_best\n");
        for i in &self.images {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                i.index, i.samples, i.hidden_pixels, i.mean.l1, i.best.l1, i.mean.l2, i.best.l2, i.mean.psnr, i.best.psnr
            );
        }
        out
    }
}

/// Seed for image `index` of an evaluation, and for sample `j` of it.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Scores `samples_per_image` completions from `sampler` for each
/// (image, mask) pair, in parallel over images. `sampler` receives the
/// ground truth, its mask and one seed per sample.
pub fn evaluate_with<F>(
    images: &[Image],
    masks: &[Mask],
    samples_per_image: usize,
    seed: u64,
    threads: usize,
    sampler: F,
) -> Result<EvalReport>
where
    F: Fn(&Image, &Mask, &[u64]) -> Result<Vec<Image>> + Sync,
{
    if images.len() != masks.len() {
        return Err(CoreError::invalid(
            "masks",
            format!("{} masks for {} images", masks.len(), images.len()),
        ));
    }
    if samples_per_image == 0 {
        return Err(CoreError::invalid("samples_per_image", "must be at least 1"));
    }
    let pairs: Vec<(&Image, &Mask)> = images.iter().zip(masks).collect();
    let rows = par_map(&pairs, threads, |i, &(truth, mask)| {
        let root = image_seed(seed, i);
        let seeds: Vec<u64> = (0..samples_per_image as u64).map(|j| derive_seed(root, j)).collect();
        let completions = sampler(truth, mask, &seeds)?;
        let scores = completions
            .iter()
            .map(|c| Scores::compute(c, truth))
            .collect::<Result<Vec<_>>>()?;
        ImageScores::from_samples(i, mask.hidden_count(), &scores)
    })?;
    EvalReport::from_images(seed, samples_per_image, rows)
}

/// [`evaluate_with`] using the model's sampler at temperature 1.
pub fn evaluate(
    params: &ModelParams,
    images: &[Image],
    masks: &[Mask],
    samples_per_image: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    evaluate_with(images, masks, samples_per_image, seed, threads, |truth, mask, seeds| {
        Ok(sample_batch(params, truth, mask, seeds, 1.0)?
            .into_iter()
            .map(|r| r.image)
            .collect())
    })
}
