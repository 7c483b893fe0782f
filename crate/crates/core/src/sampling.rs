//! Constrained sequential sampling and exact inpainting likelihoods.
//!
//! Conditional logits are computed once per (source, mask). Pixels are then
//! visited in raster order: visible pixels are copied from the source, hidden
//! ones are drawn from the softmax of the combined logits. The prior's
//! vertical features are computed once per row and its row-local part is
//! re-evaluated on the updated image before every hidden pixel. All channels
//! of a pixel are drawn from the same evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use pccnn_numerics::log_softmax;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_image, Image};
use crate::error::{CoreError, Result};
use crate::maskgen::{apply_mask, Mask};
use crate::model::{crop_rows, images_tensor, LogitGrid, ModelParams, RowContext};
use crate::parallel::par_map;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub image: Image,
    /// Natural-log probability of each value, `H × W × C`; 0 where visible.
    pub log_probs: Vec<f64>,
    /// Sum of `log_probs` over hidden pixels.
    pub total_log_likelihood: f64,
    pub mask: Mask,
    pub seed: u64,
}

/// What is written next to each sample image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub seed: u64,
    pub total_log_likelihood: f64,
    pub mask_digest: String,
    pub per_pixel_mean_log_likelihood: f64,
}

impl SampleResult {
    /// Mean log-likelihood per hidden value (0 when nothing is hidden).
    pub fn per_pixel_mean(&self) -> f64 {
        let n = self.mask.hidden_count() * self.image.signature().channels;
        if n == 0 {
            0.0
        } else {
            self.total_log_likelihood / n as f64
        }
    }

    pub fn sidecar(&self) -> SampleSidecar {
        SampleSidecar {
            seed: self.seed,
            total_log_likelihood: self.total_log_likelihood,
            mask_digest: self.mask.digest(),
            per_pixel_mean_log_likelihood: self.per_pixel_mean(),
        }
    }

    /// Writes `<stem>.pgm` (single channel) or `<stem>.png` plus `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let ext = if self.image.signature().channels == 1 { "pgm" } else { "png" };
        let path = dir.join(format!("{stem}.{ext}"));
        write_image(&path, &self.image)?;
        let side = dir.join(format!("{stem}.json"));
        fs::write(&side, serde_json::to_vec_pretty(&self.sidecar())?).map_err(|e| CoreError::io(&side, e))?;
        Ok(path)
    }
}

/// Independent per-index seed derived from a root seed.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(index);
    rng.next_u64()
}

fn check_inputs(params: &ModelParams, source: &Image, mask: &Mask) -> Result<()> {
    params.signature().expect(&source.signature())?;
    mask.matches(&source.signature())
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(CoreError::invalid("temperature", format!("{temperature} must be finite and > 0")))
    }
}

/// The source with hidden pixels blanked to level 0.
fn blank_hidden(source: &Image, mask: &Mask) -> Image {
    let s = source.signature();
    let mut im = source.clone();
    for p in mask.hidden_positions() {
        for c in 0..s.channels {
            im.set(p / s.width, p % s.width, c, 0);
        }
    }
    im
}

pub fn sample_inpainting(
    params: &ModelParams,
    source: &Image,
    mask: &Mask,
    seed: u64,
    temperature: f64,
) -> Result<SampleResult> {
    Ok(sample_batch(params, source, mask, &[seed], temperature)?.remove(0))
}

/// One sample per seed, all sharing the conditional logits and evaluated as
/// a batch. Each result equals what [`sample_inpainting`] gives for its seed.
pub fn sample_batch(
    params: &ModelParams,
    source: &Image,
    mask: &Mask,
    seeds: &[u64],
    temperature: f64,
) -> Result<Vec<SampleResult>> {
    check_inputs(params, source, mask)?;
    check_temperature(temperature)?;
    let s = source.signature();
    let (k, plane) = (s.levels, s.pixels());
    let n = seeds.len();
    let cond = params.cond_forward(&[&apply_mask(source, mask)?])?;
    let start = blank_hidden(source, mask);
    let mut images = vec![start.clone(); n];
    let mut input = images_tensor(s, &vec![&start; n])?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&sd| ChaCha8Rng::seed_from_u64(sd)).collect();
    let mut log_probs = vec![vec![0.0f64; s.values()]; n];
    let scale = 1.0 / (k - 1) as f32;
    let mut context: Option<RowContext> = None;
    for &p in &mask.hidden_positions() {
        let (y, x) = (p / s.width, p % s.width);
        // Rows above `y` are final once the first hidden pixel of `y` is reached.
        if !matches!(&context, Some(c) if c.row == y) {
            context = Some(params.prior_row_context(&input, y)?);
        }
        let row = params.prior_row_from_context(context.as_ref().unwrap(), &crop_rows(&input, y, y + 1))?;
        for b in 0..n {
            for c in 0..s.channels {
                let logits: Vec<f64> = (0..k)
                    .map(|lv| {
                        let ch = c * k + lv;
                        let prior = row.data()[(b * s.channels * k + ch) * s.width + x];
                        let cnd = cond.logits.data()[ch * plane + p];
                        (prior + cnd) as f64
                    })
                    .collect();
                let level = draw(&logits, temperature, &mut rngs[b]);
                log_probs[b][p * s.channels + c] = log_softmax(&logits)[level];
                images[b].set(y, x, c, level as u8);
                input.data_mut()[((b * s.channels + c) * s.height + y) * s.width + x] = level as f32 * scale;
            }
        }
    }
    Ok(images
        .into_iter()
        .zip(log_probs)
        .zip(seeds)
        .map(|((image, lp), &seed)| SampleResult {
            total_log_likelihood: lp.iter().sum(),
            image,
            log_probs: lp,
            mask: mask.clone(),
            seed,
        })
        .collect())
}

/// [`sample_batch`] with the seeds split across up to `threads` workers.
/// Results are in seed order and identical to a single batch.
pub fn sample_parallel(
    params: &ModelParams,
    source: &Image,
    mask: &Mask,
    seeds: &[u64],
    temperature: f64,
    threads: usize,
) -> Result<Vec<SampleResult>> {
    let threads = threads.clamp(1, seeds.len().max(1));
    let chunks: Vec<&[u64]> = seeds.chunks(seeds.len().div_ceil(threads).max(1)).collect();
    let parts = par_map(&chunks, threads, |_, chunk| sample_batch(params, source, mask, chunk, temperature))?;
    Ok(parts.into_iter().flatten().collect())
}

/// Inverse-CDF draw from `softmax(logits / temperature)`.
fn draw(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let logp = log_softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (lv, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return lv;
        }
    }
    // Rounding left `acc` just below 1: fall back to the last level with mass.
    logp.iter().rposition(|lp| lp.is_finite()).unwrap_or(0)
}

fn check_agrees(completed: &Image, source: &Image, mask: &Mask, what: &str) -> Result<()> {
    let s = source.signature();
    s.expect(&completed.signature())?;
    for p in 0..s.pixels() {
        if mask.bits()[p] == 1 {
            for c in 0..s.channels {
                let (y, x) = (p / s.width, p % s.width);
                if completed.get(y, x, c) != source.get(y, x, c) {
                    return Err(CoreError::invalid(
                        "completed",
                        format!("{what} differs from the source at visible pixel ({y}, {x}) channel {c}"),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Combined logits for each completion, teacher-forced through the prior.
fn teacher_forced(params: &ModelParams, completed: &[&Image], source: &Image, mask: &Mask) -> Result<(LogitGrid, LogitGrid)> {
    let prior = params.prior_forward(completed)?;
    let cond = params.cond_forward(&[&apply_mask(source, mask)?])?;
    Ok((prior, cond))
}

/// Sum over hidden pixels of the log-probability of `completed`'s values.
pub fn log_likelihood(params: &ModelParams, completed: &Image, source: &Image, mask: &Mask) -> Result<f64> {
    Ok(log_likelihood_batch(params, &[completed], source, mask)?[0])
}

pub fn log_likelihood_batch(params: &ModelParams, completed: &[&Image], source: &Image, mask: &Mask) -> Result<Vec<f64>> {
    check_inputs(params, source, mask)?;
    for im in completed {
        check_agrees(im, source, mask, "completion")?;
    }
    if completed.is_empty() {
        return Ok(Vec::new());
    }
    let (prior, cond) = teacher_forced(params, completed, source, mask)?;
    let s = source.signature();
    let hidden = mask.hidden_positions();
    Ok(completed
        .iter()
        .enumerate()
        .map(|(b, im)| {
            let mut total = 0.0;
            for &p in &hidden {
                let (y, x) = (p / s.width, p % s.width);
                for c in 0..s.channels {
                    let pr = prior.levels_at(b, y, x, c);
                    let cd = cond.levels_at(0, y, x, c);
                    let logits: Vec<f64> = pr.iter().zip(&cd).map(|(a, b)| (a + b) as f64).collect();
                    total += log_softmax(&logits)[im.get(y, x, c) as usize];
                }
            }
            total
        })
        .collect())
}

/// Probability of level 1 per pixel for a binary model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    /// Mean binary entropy (nats) over the pixels hidden by `mask`; pixels
    /// whose value is already fixed carry probability 0 or 1 and contribute 0.
    pub fn mean_entropy(&self, mask: &Mask) -> f64 {
        let hidden = mask.hidden_positions();
        if hidden.is_empty() {
            return 0.0;
        }
        let h = |p: f64| {
            if p <= 0.0 || p >= 1.0 {
                0.0
            } else {
                -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
            }
        };
        hidden.iter().map(|&i| h(self.values[i])).sum::<f64>() / hidden.len() as f64
    }

    /// Grayscale rendering: probability 1 is white.
    pub fn to_8bit(&self) -> Vec<u8> {
        self.values.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// One teacher-forced pass over `partial`.
///
/// Visible pixels (per `mask`) and pixels marked in `sampled` carry their
/// value in `partial`; every other hidden pixel gets `softmax(combined)[1]`,
/// computed with the not-yet-sampled hidden pixels blanked to 0.
pub fn probability_map(params: &ModelParams, partial: &Image, mask: &Mask, sampled: Option<&Mask>) -> Result<ProbabilityMap> {
    let s = params.signature();
    if s.levels != 2 || s.channels != 1 {
        return Err(CoreError::invalid(
            "model",
            format!("probability maps need a binary single-channel model, not {s}"),
        ));
    }
    check_inputs(params, partial, mask)?;
    let fixed = |p: usize| mask.bits()[p] == 1 || sampled.is_some_and(|m| m.bits()[p] == 1);
    if let Some(m) = sampled {
        m.matches(&s)?;
    }
    let mut forced = partial.clone();
    for p in 0..s.pixels() {
        if !fixed(p) {
            forced.set(p / s.width, p % s.width, 0, 0);
        }
    }
    let prior = params.prior_forward(&[&forced])?;
    let cond = params.cond_forward(&[&apply_mask(partial, mask)?])?;
    let values = (0..s.pixels())
        .map(|p| {
            let (y, x) = (p / s.width, p % s.width);
            if fixed(p) {
                partial.get(y, x, 0) as f64
            } else {
                let pr = prior.levels_at(0, y, x, 0);
                let cd = cond.levels_at(0, y, x, 0);
                let logits = [(pr[0] + cd[0]) as f64, (pr[1] + cd[1]) as f64];
                log_softmax(&logits)[1].exp()
            }
        })
        .collect();
    Ok(ProbabilityMap {
        height: s.height,
        width: s.width,
        values,
    })
}

/// Samples one completion and records the probability map after every
/// `stride`-th sampled pixel and after the last one, so at most one frame per
/// hidden pixel. The map before any sampling is [`probability_map`] with
/// nothing marked as sampled.
pub fn probability_progression(
    params: &ModelParams,
    source: &Image,
    mask: &Mask,
    seed: u64,
    stride: usize,
) -> Result<(SampleResult, Vec<ProbabilityMap>)> {
    if stride == 0 {
        return Err(CoreError::invalid("stride", "must be at least 1"));
    }
    let sample = sample_inpainting(params, source, mask, seed, 1.0)?;
    let hidden = mask.hidden_positions();
    let mut sampled = Mask::all_hidden(mask.height(), mask.width());
    let mut partial = blank_hidden(source, mask);
    let mut maps = Vec::with_capacity(hidden.len().div_ceil(stride));
    let w = mask.width();
    for (i, &p) in hidden.iter().enumerate() {
        partial.set(p / w, p % w, 0, sample.image.get(p / w, p % w, 0));
        sampled.set(p / w, p % w, true);
        if (i + 1) % stride == 0 || i + 1 == hidden.len() {
            maps.push(probability_map(params, &partial, mask, Some(&sampled))?);
        }
    }
    Ok((sample, maps))
}

/// Indices sorted by log-likelihood, highest first; ties keep index order.
pub fn rank_by_likelihood(log_likelihoods: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..log_likelihoods.len()).collect();
    order.sort_by(|&a, &b| log_likelihoods[b].total_cmp(&log_likelihoods[a]).then(a.cmp(&b)));
    order
}

/// Tolerance below which a sample is not counted as more likely than the
/// ground truth (teacher-forced and sampled totals differ by float noise).
pub const RANK_TIE_TOLERANCE: f64 = 1e-5;

/// 1-based rank of the ground truth among itself and the samples: one plus
/// the number of samples strictly more likely.
pub fn ground_truth_rank(sample_log_likelihoods: &[f64], ground_truth: f64) -> usize {
    1 + sample_log_likelihoods
        .iter()
        .filter(|&&l| l > ground_truth + RANK_TIE_TOLERANCE)
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Sample indices, most likely first.
    pub order: Vec<usize>,
    pub log_likelihoods: Vec<f64>,
    pub ground_truth_log_likelihood: Option<f64>,
    pub ground_truth_rank: Option<usize>,
}

/// Orders samples of one (source, mask) by likelihood and, given the ground
/// truth, reports its rank among the `n + 1` candidates.
pub fn rank_inpaintings(params: &ModelParams, results: &[SampleResult], ground_truth: Option<&Image>) -> Result<Ranking> {
    let Some(first) = results.first() else {
        return Err(CoreError::invalid("results", "nothing to rank"));
    };
    for (i, r) in results.iter().enumerate() {
        if r.mask != first.mask {
            return Err(CoreError::invalid("results", format!("sample {i} uses a different mask")));
        }
        check_agrees(&r.image, &first.image, &first.mask, "sample")?;
    }
    let lls: Vec<f64> = results.iter().map(|r| r.total_log_likelihood).collect();
    let (gt_ll, gt_rank) = match ground_truth {
        Some(gt) => {
            check_agrees(gt, &first.image, &first.mask, "ground truth")?;
            let ll = log_likelihood(params, gt, &first.image, &first.mask)?;
            (Some(ll), Some(ground_truth_rank(&lls, ll)))
        }
        None => (None, None),
    };
    Ok(Ranking {
        order: rank_by_likelihood(&lls),
        log_likelihoods: lls,
        ground_truth_log_likelihood: gt_ll,
        ground_truth_rank: gt_rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_orders_descending_with_stable_ties() {
        assert_eq!(rank_by_likelihood(&[-3.0, -1.0, -2.0, -1.0]), vec![1, 3, 2, 0]);
        assert_eq!(rank_by_likelihood(&[-0.5]), vec![0]);
    }

    #[test]
    fn ground_truth_rank_bounds() {
        let samples = [-10.0; 8];
        assert_eq!(ground_truth_rank(&samples, -1.0), 1);
        assert_eq!(ground_truth_rank(&samples, -20.0), 9);
        assert_eq!(ground_truth_rank(&samples, -10.0), 1);
    }

    #[test]
    fn draw_respects_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(draw(&[-1e30, 0.0, -1e30], 1.0, &mut rng), 1);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let a: Vec<u64> = (0..8).map(|i| derive_seed(1, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 8);
        assert_eq!(derive_seed(1, 3), a[3]);
    }
}
