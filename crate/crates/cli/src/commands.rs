use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use pccnn_core::data::{
    celeba_pipeline, load_dataset, read_8bit, read_image, save_dataset_dir, write_8bit, Dataset, Image, Signature,
    CELEBA_RAW_HEIGHT, CELEBA_RAW_WIDTH,
};
use pccnn_core::maskgen::{generate_mask, generate_masks, HalfSide, Mask, MaskGenParams, MaskSet, MASK_MAGIC};
use pccnn_core::metrics::{evaluate, image_seed};
use pccnn_core::model::{ArchitectureConfig, ModelParams, Preset};
use pccnn_core::parallel::{par_map, worker_threads};
use pccnn_core::sampling::{
    derive_seed, ground_truth_rank, log_likelihood, probability_map, probability_progression, rank_inpaintings,
    sample_batch, sample_parallel,
};
use pccnn_core::training::{file_sha256, load_checkpoint, save_checkpoint, train as run_training, TrainConfig};
use serde::Serialize;

use crate::manifest::{sibling, write_json, Manifest};
use crate::{
    EvalArgs, GenMasksArgs, MaskArgs, MaskSpec, PrepCelebaArgs, PresetArg, ProbmapArgs, RankArgs, SampleArgs,
    TrainArgs, UsageError,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model(path: &Path) -> Result<(ModelParams, String)> {
    let ckpt = load_checkpoint(path)?;
    Ok((ckpt.params, file_sha256(path)?))
}

/// The mask named by `--mask` or `--mask-spec`, sized for `signature`.
fn resolve_mask(args: &MaskArgs, signature: Signature, seed: u64) -> Result<Mask> {
    let (h, w) = (signature.height, signature.width);
    let mask = match (&args.mask, args.mask_spec) {
        (Some(path), _) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            if bytes.starts_with(MASK_MAGIC) {
                let set = MaskSet::decode(&bytes).with_context(|| path.display().to_string())?;
                set.masks.get(args.mask_index).cloned().ok_or_else(|| {
                    usage(format!("--mask-index {} but {} holds {} masks", args.mask_index, path.display(), set.len()))
                })?
            } else {
                Mask::read_image(path)?
            }
        }
        (None, Some(MaskSpec::Top)) => Mask::half(h, w, HalfSide::Top),
        (None, Some(MaskSpec::Bottom)) => Mask::half(h, w, HalfSide::Bottom),
        (None, Some(MaskSpec::Left)) => Mask::half(h, w, HalfSide::Left),
        (None, Some(MaskSpec::Right)) => Mask::half(h, w, HalfSide::Right),
        (None, Some(MaskSpec::Blob)) => generate_mask(h, w, &MaskGenParams::default(), seed)?,
        (None, None) => return Err(usage("one of --mask or --mask-spec is required")),
    };
    mask.matches(&signature)?;
    Ok(mask)
}

/// The first `count` images of a dataset, in the checkpoint's signature.
fn load_images(path: &Path, signature: Signature, count: usize) -> Result<Vec<Image>> {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let data = load_dataset(path, signature.levels == 2)?;
    signature.expect(&data.signature())?;
    Ok(data.take(count).images().to_vec())
}

/// One mask per image: cycled from a mask file or drawn from `seed`.
fn masks_for(count: usize, file: Option<&Path>, signature: Signature, seed: u64) -> Result<Vec<Mask>> {
    match file {
        Some(path) => {
            let set = MaskSet::load(path)?;
            if set.is_empty() {
                return Err(usage(format!("{} holds no masks", path.display())));
            }
            if let Some(m) = set.masks.first() {
                m.matches(&signature)?;
            }
            Ok((0..count).map(|i| set.masks[i % set.len()].clone()).collect())
        }
        None => Ok(generate_masks(count, signature.height, signature.width, &MaskGenParams::default(), seed)?.masks),
    }
}

pub fn gen_masks(a: &GenMasksArgs) -> Result<()> {
    let params = MaskGenParams {
        max_num_blobs: a.max_blobs,
        iter_min: a.iter_min,
        iter_max: a.iter_max,
    };
    let mut set = generate_masks(a.count, a.height, a.width, &params, a.seed)?;
    if a.invert {
        set = set.inverted();
    }
    set.save(&a.out)?;
    let mean_visible = set.masks.iter().map(|m| m.visible_count()).sum::<usize>() as f64 / set.len() as f64;
    let mut m = Manifest::new("gen-masks", a, Some(a.seed));
    m.output(&a.out);
    m.extra = Some(serde_json::json!({ "mean_visible_pixels": mean_visible, "sha256": file_sha256(&a.out)? }));
    m.write(&sibling(&a.out, ".manifest.json"))?;
    println!("wrote {} masks to {} (mean visible {mean_visible:.1} px)", set.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let preset = match a.preset {
        PresetArg::Mnist => Preset::Mnist,
        PresetArg::MnistSmall => Preset::MnistSmall,
        PresetArg::Celeba => Preset::Celeba,
    };
    let config = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        alpha: a.alpha,
        batch_size: a.batch,
        micro_batch: a.micro_batch,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        aux_on_all_pixels: a.aux_all_pixels,
        mask_dataset: Some(a.masks.display().to_string()),
    };
    config.validate()?;
    let init = match &a.init {
        Some(path) => load_checkpoint(path)?.params,
        None => ModelParams::init(&ArchitectureConfig::preset(preset), a.seed)?,
    };
    let signature = init.signature();
    let mut data: Dataset = load_dataset(&a.data, signature.levels == 2)?;
    signature.expect(&data.signature())?;
    if let Some(n) = a.limit {
        data = data.take(n);
    }
    let masks = MaskSet::load(&a.masks)?;
    let log_path = sibling(&a.out, ".log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let outcome = run_training(init, &data, &masks, &config, |record, params| {
        eprintln!(
            "epoch {}: joint {:.4} aux {:.4} ({:.3} bits/dim, {:.0} s)",
            record.epoch, record.mean_joint, record.mean_aux, record.bits_per_dim, record.wall_seconds
        );
        let line = serde_json::to_string(record)?;
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        if config.checkpoint_every > 0 && record.epoch % config.checkpoint_every == 0 {
            save_checkpoint(params, Some(&config), &a.out)?;
        }
        Ok(())
    })?;
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    save_checkpoint(&outcome.params, Some(&config), &a.out)?;
    let digest = file_sha256(&a.out)?;
    let mut m = Manifest::new("train", a, Some(a.seed)).checkpoint(&a.out, digest.clone());
    m.output(&a.out);
    m.output(&log_path);
    m.extra = Some(serde_json::json!({
        "architecture": outcome.params.config(),
        "train_config": config,
        "images": data.len(),
        "data_sha256": data_digest(&a.data)?,
        "masks_sha256": file_sha256(&a.masks)?,
        "final": outcome.records.last(),
    }));
    m.write(&sibling(&a.out, ".manifest.json"))?;
    println!("wrote {} (sha256 {digest})", a.out.display());
    Ok(())
}

fn data_digest(path: &Path) -> Result<Option<String>> {
    Ok(if path.is_file() { Some(file_sha256(path)?) } else { None })
}

#[derive(Serialize)]
struct RankedSample {
    rank: usize,
    file: String,
    seed: u64,
    total_log_likelihood: f64,
    per_pixel_mean_log_likelihood: f64,
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    if a.num == 0 {
        bail!(usage("--num must be at least 1"));
    }
    let (params, digest) = load_model(&a.ckpt)?;
    let signature = params.signature();
    let image = read_image(&a.image, signature)?;
    let mask = resolve_mask(&a.mask, signature, a.seed)?;
    let seeds: Vec<u64> = (0..a.num as u64).map(|j| derive_seed(a.seed, j)).collect();
    let results = sample_parallel(&params, &image, &mask, &seeds, a.temperature, worker_threads())?;
    let ranking = rank_inpaintings(&params, &results, None)?;
    ensure_dir(&a.out_dir)?;
    let mut m = Manifest::new("sample", a, Some(a.seed)).checkpoint(&a.ckpt, digest);
    let mask_path = a.out_dir.join("mask.pgm");
    mask.write_image(&mask_path)?;
    m.output(&mask_path);
    let mut entries = Vec::with_capacity(results.len());
    for (rank, &i) in ranking.order.iter().enumerate() {
        let r = &results[i];
        let path = r.save(&a.out_dir, &format!("sample-{rank:02}"))?;
        println!("{:>3} {} log-likelihood {:.4}", rank + 1, path.display(), r.total_log_likelihood);
        entries.push(RankedSample {
            rank: rank + 1,
            file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            seed: r.seed,
            total_log_likelihood: r.total_log_likelihood,
            per_pixel_mean_log_likelihood: r.per_pixel_mean(),
        });
        m.output(&path);
    }
    let ranking_path = a.out_dir.join("ranking.json");
    write_json(
        &ranking_path,
        &serde_json::json!({
            "mask_digest": mask.digest(),
            "hidden_pixels": mask.hidden_count(),
            "temperature": a.temperature,
            "samples": entries,
        }),
    )?;
    m.output(&ranking_path);
    m.write(&a.out_dir.join("manifest.json"))
}

#[derive(Serialize)]
struct RankReport {
    images: usize,
    samples_per_image: usize,
    seed: u64,
    mean_rank: f64,
    chance_rank: f64,
    ranked_first: usize,
    ranks: Vec<usize>,
    ground_truth_log_likelihoods: Vec<f64>,
}

pub fn rank(a: &RankArgs) -> Result<()> {
    if a.samples == 0 {
        bail!(usage("--samples must be at least 1"));
    }
    let (params, digest) = load_model(&a.ckpt)?;
    let signature = params.signature();
    let images = load_images(&a.data, signature, a.count)?;
    let masks = masks_for(images.len(), a.masks.as_deref(), signature, a.seed)?;
    let pairs: Vec<(&Image, &Mask)> = images.iter().zip(&masks).collect();
    let rows = par_map(&pairs, worker_threads(), |i, &(truth, mask)| -> pccnn_core::Result<(usize, f64)> {
        let root = image_seed(a.seed, i);
        let seeds: Vec<u64> = (0..a.samples as u64).map(|j| derive_seed(root, j)).collect();
        let lls: Vec<f64> = sample_batch(&params, truth, mask, &seeds, 1.0)?
            .iter()
            .map(|s| s.total_log_likelihood)
            .collect();
        let gt = log_likelihood(&params, truth, truth, mask)?;
        Ok((ground_truth_rank(&lls, gt), gt))
    })?;
    let ranks: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let report = RankReport {
        images: ranks.len(),
        samples_per_image: a.samples,
        seed: a.seed,
        mean_rank: ranks.iter().sum::<usize>() as f64 / ranks.len() as f64,
        chance_rank: (a.samples + 2) as f64 / 2.0,
        ranked_first: ranks.iter().filter(|&&r| r == 1).count(),
        ground_truth_log_likelihoods: rows.iter().map(|r| r.1).collect(),
        ranks,
    };
    write_json(&a.out, &report)?;
    let mut m = Manifest::new("rank", a, Some(a.seed)).checkpoint(&a.ckpt, digest);
    m.output(&a.out);
    m.write(&sibling(&a.out, ".manifest.json"))?;
    println!(
        "mean ground-truth rank {:.3} over {} images (chance {:.1}, first {} times)",
        report.mean_rank, report.images, report.chance_rank, report.ranked_first
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (params, digest) = load_model(&a.ckpt)?;
    let signature = params.signature();
    let images = load_images(&a.data, signature, a.count)?;
    let masks = masks_for(images.len(), a.masks.as_deref(), signature, a.seed)?;
    let report = evaluate(&params, &images, &masks, a.samples, a.seed, worker_threads())?;
    write_json(&a.out, &report)?;
    let mut m = Manifest::new("eval", a, Some(a.seed)).checkpoint(&a.ckpt, digest);
    m.output(&a.out);
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
        m.output(csv);
    }
    m.write(&sibling(&a.out, ".manifest.json"))?;
    println!(
        "l1 {:.2}% (best {:.2}%), l2 {:.2}% (best {:.2}%), pSNR {:.2} dB (best {:.2} dB) over {} images",
        report.mean.l1,
        report.best.l1,
        report.mean.l2,
        report.best.l2,
        report.mean.psnr,
        report.best.psnr,
        report.images.len()
    );
    Ok(())
}

pub fn probmap(a: &ProbmapArgs) -> Result<()> {
    let (params, digest) = load_model(&a.ckpt)?;
    let signature = params.signature();
    let image = read_image(&a.image, signature)?;
    let mask = resolve_mask(&a.mask, signature, a.seed)?;
    let initial = probability_map(&params, &image, &mask, None)?;
    let (sample, frames) = probability_progression(&params, &image, &mask, a.seed, a.stride)?;
    ensure_dir(&a.out_dir)?;
    let mut m = Manifest::new("probmap", a, Some(a.seed)).checkpoint(&a.ckpt, digest);
    let (h, w) = (signature.height, signature.width);
    let initial_path = a.out_dir.join("initial.pgm");
    write_8bit(&initial_path, h, w, 1, &initial.to_8bit())?;
    m.output(&initial_path);
    let mut index = Vec::with_capacity(frames.len());
    let hidden = mask.hidden_count();
    for (i, frame) in frames.iter().enumerate() {
        let path = a.out_dir.join(format!("frame-{i:04}.pgm"));
        write_8bit(&path, h, w, 1, &frame.to_8bit())?;
        index.push(serde_json::json!({
            "file": path.file_name().unwrap_or_default().to_string_lossy(),
            "sampled_pixels": ((i + 1) * a.stride).min(hidden),
            "mean_entropy": frame.mean_entropy(&mask),
        }));
    }
    let sample_path = sample.save(&a.out_dir, "sample")?;
    m.output(&sample_path);
    let index_path = a.out_dir.join("probmap.json");
    write_json(
        &index_path,
        &serde_json::json!({
            "hidden_pixels": hidden,
            "stride": a.stride,
            "initial_mean_entropy": initial.mean_entropy(&mask),
            "frames": index,
        }),
    )?;
    m.output(&index_path);
    m.extra = Some(serde_json::json!({ "frames": frames.len() }));
    m.write(&a.out_dir.join("manifest.json"))?;
    println!("wrote {} frames to {}", frames.len(), a.out_dir.display());
    Ok(())
}

pub fn prep_celeba(a: &PrepCelebaArgs) -> Result<()> {
    let mut files: Vec<_> = fs::read_dir(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        })
        .collect();
    files.sort();
    if let Some(n) = a.limit {
        files.truncate(n);
    }
    if files.is_empty() {
        bail!(usage(format!("no .jpg or .png files in {}", a.input.display())));
    }
    let raw_sig = Signature::new(CELEBA_RAW_HEIGHT, CELEBA_RAW_WIDTH, 3, 256)?;
    let images = par_map(&files, worker_threads(), |_, path| -> Result<Image> {
        let (h, w, c, values) = read_8bit(path)?;
        if (h, w, c) != (raw_sig.height, raw_sig.width, 3) {
            bail!(usage(format!("{}: {h}x{w}x{c}, expected {raw_sig}", path.display())));
        }
        Ok(celeba_pipeline(&Image::new(raw_sig, values)?)?)
    })?;
    let data = Dataset::new(Signature::CELEBA, images, None)?;
    save_dataset_dir(&data, &a.out)?;
    let mut m = Manifest::new("prep-celeba", a, None);
    m.output(&a.out);
    m.write(&a.out.join("prep.manifest.json"))?;
    println!("wrote {} images to {}", data.len(), a.out.display());
    Ok(())
}
