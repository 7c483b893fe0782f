//! Likelihood training over images and masks, plus the checkpoint format.
//!
//! The objective for an image and mask is the mean negative log-likelihood
//! of the hidden pixels under the combined logits (the joint term) plus `α`
//! times the same quantity under the conditional logits alone (the auxiliary
//! term). Batches average the per-image values over images with at least one
//! hidden pixel.

use std::fs;
use std::path::Path;
use std::time::Instant;

use pccnn_numerics::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Image, Signature};
use crate::error::{CoreError, Result};
use crate::maskgen::{apply_mask, Mask, MaskSet};
use crate::model::{cond_tensor, images_tensor, ArchitectureConfig, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub batch_size: usize,
    /// Images per forward/backward pass; gradients are accumulated up to
    /// `batch_size`. Does not change the result beyond float rounding.
    pub micro_batch: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Apply the auxiliary term to every pixel instead of hidden ones only.
    pub aux_on_all_pixels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dataset: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 4e-4,
            alpha: 1.0,
            batch_size: 64,
            micro_batch: 8,
            seed: 0,
            checkpoint_every: 0,
            aux_on_all_pixels: false,
            mask_dataset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::invalid("epochs", "must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CoreError::invalid("alpha", format!("{} must be finite and >= 0", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::invalid("lr", format!("{} must be finite and > 0", self.lr)));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(CoreError::invalid("batch_size", "batch sizes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub joint: f64,
    pub aux: f64,
}

/// One epoch of telemetry, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub mean_joint: f64,
    pub mean_aux: f64,
    pub mean_total: f64,
    /// `mean_joint / ln 2`.
    pub bits_per_dim: f64,
    pub images: usize,
    pub steps: usize,
    pub wall_seconds: f64,
}

/// Targets (`N × C × H × W`) and per-target weights for a batch.
struct Supervision {
    targets: Vec<usize>,
    joint_weights: Vec<f32>,
    aux_weights: Vec<f32>,
    /// Images with at least one hidden pixel.
    joint_images: usize,
    /// Images contributing to the auxiliary term.
    aux_images: usize,
}

fn supervision(signature: Signature, images: &[&Image], masks: &[&Mask], aux_all: bool) -> Supervision {
    let (c, plane) = (signature.channels, signature.pixels());
    let per_image = c * plane;
    let mut s = Supervision {
        targets: Vec::with_capacity(images.len() * per_image),
        joint_weights: Vec::with_capacity(images.len() * per_image),
        aux_weights: Vec::with_capacity(images.len() * per_image),
        joint_images: 0,
        aux_images: 0,
    };
    for (im, m) in images.iter().zip(masks) {
        let hidden = m.hidden_count();
        let w = if hidden > 0 { 1.0 / (hidden * c) as f32 } else { 0.0 };
        s.joint_images += usize::from(hidden > 0);
        s.aux_images += usize::from(aux_all || hidden > 0);
        for ch in 0..c {
            for p in 0..plane {
                s.targets.push(im.pixels()[p * c + ch] as usize);
                let hidden_here = m.bits()[p] == 0;
                s.joint_weights.push(if hidden_here { w } else { 0.0 });
                s.aux_weights.push(if aux_all {
                    1.0 / per_image as f32
                } else if hidden_here {
                    w
                } else {
                    0.0
                });
            }
        }
    }
    s
}

/// Loss graph for one micro-batch. Returned terms are already scaled by the
/// micro-batch's share of the full batch.
struct BatchLoss {
    params: Vec<Var>,
    total: Var,
    joint: f64,
    aux: f64,
}

#[allow(clippy::too_many_arguments)]
fn record_loss<'a>(
    g: &mut Graph<'a, f32>,
    params: &'a ModelParams,
    images: &[&Image],
    masks: &[&Mask],
    alpha: f64,
    aux_all: bool,
    batch_shares: (usize, usize),
    trainable: bool,
) -> Result<BatchLoss> {
    let sig = params.signature();
    let conds = images
        .iter()
        .zip(masks)
        .map(|(im, m)| apply_mask(im, m))
        .collect::<Result<Vec<_>>>()?;
    let bound = params.bind(g, trainable);
    let x = g.constant(images_tensor(sig, images)?);
    let cin = g.constant(cond_tensor(sig, &conds.iter().collect::<Vec<_>>())?);
    let prior = params.prior_graph(g, &bound, x)?;
    let cond = params.cond_graph(g, &bound, cin)?;
    let combined = g.add(prior, cond)?;
    let sup = supervision(sig, images, masks, aux_all);
    let k = sig.levels;
    let joint = g.softmax_cross_entropy(combined, k, sup.targets.clone(), sup.joint_weights)?;
    let aux = g.softmax_cross_entropy(cond, k, sup.targets, sup.aux_weights)?;
    let (joint_total, aux_total) = batch_shares;
    let share = |part: usize, whole: usize| if whole == 0 { 0.0 } else { part as f32 / whole as f32 };
    let joint = g.scale(joint, share(sup.joint_images, joint_total));
    let aux = g.scale(aux, share(sup.aux_images, aux_total));
    let weighted_aux = g.scale(aux, alpha as f32);
    let total = g.add(joint, weighted_aux)?;
    Ok(BatchLoss {
        params: bound.vars().to_vec(),
        total,
        joint: g.value(joint).data()[0] as f64,
        aux: g.value(aux).data()[0] as f64,
    })
}

/// Loss terms for a single image and mask.
pub fn loss(params: &ModelParams, image: &Image, mask: &Mask, alpha: f64) -> Result<LossTerms> {
    loss_with(params, image, mask, alpha, false)
}

pub fn loss_with(params: &ModelParams, image: &Image, mask: &Mask, alpha: f64, aux_on_all_pixels: bool) -> Result<LossTerms> {
    params.signature().expect(&image.signature())?;
    mask.matches(&image.signature())?;
    let mut g = Graph::new();
    let shares = (usize::from(mask.hidden_count() > 0), usize::from(aux_on_all_pixels || mask.hidden_count() > 0));
    let l = record_loss(&mut g, params, &[image], &[mask], alpha, aux_on_all_pixels, shares, false)?;
    let total = g.value(l.total).data()[0] as f64;
    Ok(LossTerms {
        total,
        joint: l.joint,
        aux: l.aux,
    })
}

/// Gradient of the batch loss with respect to every parameter, in storage
/// order, together with the loss terms.
pub fn batch_gradients(
    params: &ModelParams,
    images: &[&Image],
    masks: &[&Mask],
    alpha: f64,
    aux_on_all_pixels: bool,
    micro_batch: usize,
) -> Result<(LossTerms, Vec<Tensor<f32>>)> {
    let sig = params.signature();
    for (im, m) in images.iter().zip(masks) {
        sig.expect(&im.signature())?;
        m.matches(&sig)?;
    }
    let joint_images = masks.iter().filter(|m| m.hidden_count() > 0).count();
    let aux_images = if aux_on_all_pixels { masks.len() } else { joint_images };
    let mut grads: Vec<Tensor<f32>> = params.tensors().iter().map(Tensor::zeros_like).collect();
    let mut terms = LossTerms {
        total: 0.0,
        joint: 0.0,
        aux: 0.0,
    };
    for (ims, ms) in images.chunks(micro_batch.max(1)).zip(masks.chunks(micro_batch.max(1))) {
        let mut g = Graph::new();
        let l = record_loss(&mut g, params, ims, ms, alpha, aux_on_all_pixels, (joint_images, aux_images), true)?;
        let total = g.value(l.total).data()[0] as f64;
        if !total.is_finite() {
            return Err(CoreError::NonFinite { what: "loss", batch: 0 });
        }
        terms.total += total;
        terms.joint += l.joint;
        terms.aux += l.aux;
        let mb = g.grad(l.total, &l.params)?;
        for (acc, gr) in grads.iter_mut().zip(&mb) {
            acc.axpy(1.0, gr)?;
        }
    }
    Ok((terms, grads))
}

/// Everything [`train`] produces.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<TrainRecord>,
}

/// Mini-batch Adam over `data`, one mask per image drawn uniformly from
/// `masks`. `on_epoch` sees each record and the parameters after that epoch.
pub fn train(
    initial: ModelParams,
    data: &Dataset,
    masks: &MaskSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let sig = initial.signature();
    sig.expect(&data.signature())?;
    if data.is_empty() {
        return Err(CoreError::invalid("data", "training set is empty"));
    }
    if masks.is_empty() || (masks.height, masks.width) != (sig.height, sig.width) {
        return Err(CoreError::Size(format!(
            "mask dataset is {}x{} with {} masks, images are {}x{}",
            masks.height,
            masks.width,
            masks.len(),
            sig.height,
            sig.width
        )));
    }
    let mut params = initial;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        params.tensors(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut batch_index = 0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut joint_sum, mut aux_sum, mut joint_n, mut aux_n, mut steps) = (0.0, 0.0, 0usize, 0usize, 0);
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&Image> = chunk.iter().map(|&i| &data.images()[i]).collect();
            let batch_masks: Vec<&Mask> = chunk.iter().map(|_| &masks.masks[rng.random_range(0..masks.len())]).collect();
            let (terms, grads) = batch_gradients(
                &params,
                &images,
                &batch_masks,
                config.alpha,
                config.aux_on_all_pixels,
                config.micro_batch,
            )
            .map_err(|e| match e {
                CoreError::NonFinite { what, .. } => CoreError::NonFinite {
                    what,
                    batch: batch_index,
                },
                other => other,
            })?;
            batch_index += 1;
            let jn = batch_masks.iter().filter(|m| m.hidden_count() > 0).count();
            let an = if config.aux_on_all_pixels { batch_masks.len() } else { jn };
            joint_sum += terms.joint * jn as f64;
            aux_sum += terms.aux * an as f64;
            joint_n += jn;
            aux_n += an;
            if jn == 0 && an == 0 {
                continue;
            }
            adam.step(params.tensors_mut(), &grads)?;
            steps += 1;
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let (mean_joint, mean_aux) = (mean(joint_sum, joint_n), mean(aux_sum, aux_n));
        let record = TrainRecord {
            epoch,
            mean_joint,
            mean_aux,
            mean_total: mean_joint + config.alpha * mean_aux,
            bits_per_dim: mean_joint / std::f64::consts::LN_2,
            images: data.len(),
            steps,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &params)?;
        records.push(record);
    }
    Ok(TrainOutcome { params, records })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCCN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub train_config: Option<TrainConfig>,
}

pub fn encode_checkpoint(params: &ModelParams, train_config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let length = (t.len() * 4) as u64;
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length,
            };
            offset += length;
            e
        })
        .collect();
    let header = CheckpointHeader {
        architecture: params.config().clone(),
        train_config: train_config.cloned(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt_err = |offset: usize, detail: String| CoreError::Format {
        what: "checkpoint",
        offset: offset as u64,
        detail,
    };
    let need = |have: usize, want: usize, what: &'static str| {
        if have < want {
            Err(CoreError::Truncated {
                what,
                offset: have as u64,
                missing: (want - have) as u64,
            })
        } else {
            Ok(())
        }
    };
    need(bytes.len(), 12, "checkpoint header")?;
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt_err(0, format!("expected magic \"PCCN\", found {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(4, format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(bytes.len(), 12 + json_len, "checkpoint manifest")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..12 + json_len]).map_err(|e| fmt_err(12, format!("manifest: {e}")))?;
    let blobs = &bytes[12 + json_len..];
    let mut expected_offset = 0u64;
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let elements: usize = e.shape.iter().product();
        if e.dtype != "f32" || e.offset != expected_offset || e.length != (elements * 4) as u64 {
            return Err(fmt_err(
                12,
                format!(
                    "manifest entry {} (dtype {}, offset {}, length {}) disagrees with its shape {:?}",
                    e.name, e.dtype, e.offset, e.length, e.shape
                ),
            ));
        }
        expected_offset += e.length;
        let end = (e.offset + e.length) as usize;
        if blobs.len() < end {
            return Err(CoreError::Truncated {
                what: "checkpoint tensor data",
                offset: bytes.len() as u64,
                missing: (12 + json_len + (header_total(&header) as usize)).saturating_sub(bytes.len()) as u64,
            });
        }
        let data = blobs[e.offset as usize..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((e.name.clone(), Tensor::from_vec(e.shape.clone(), data)?));
    }
    if blobs.len() as u64 != expected_offset {
        return Err(fmt_err(
            12 + json_len + expected_offset as usize,
            format!("{} bytes beyond the manifest's tensor data", blobs.len() as u64 - expected_offset),
        ));
    }
    let params = ModelParams::from_tensors(header.architecture, named)?;
    Ok(Checkpoint {
        params,
        train_config: header.train_config,
    })
}

fn header_total(h: &CheckpointHeader) -> u64 {
    h.tensors.iter().map(|e| e.length).sum()
}

pub fn save_checkpoint(params: &ModelParams, train_config: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, train_config)?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        CoreError::Io { .. } => e,
        other => CoreError::Codec(format!("{}: {other}", path.display())),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CoreError::io(path, e))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn tiny() -> ArchitectureConfig {
        ArchitectureConfig {
            signature: Signature::new(3, 3, 1, 2).unwrap(),
            prior_blocks: 1,
            prior_filters: 4,
            prior_kernel: 3,
            cond_blocks: 1,
            cond_filters: 4,
            cond_kernel: 3,
            head_hidden: None,
        }
    }

    #[test]
    fn checkpoint_round_trip_mnist_preset() {
        let p = ModelParams::init(&ArchitectureConfig::preset(Preset::Mnist), 11).unwrap();
        let bytes = encode_checkpoint(&p, Some(&TrainConfig::default())).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.train_config, Some(TrainConfig::default()));
    }

    #[test]
    fn truncated_checkpoint_names_missing_bytes() {
        let p = ModelParams::init(&tiny(), 1).unwrap();
        let bytes = encode_checkpoint(&p, None).unwrap();
        match decode_checkpoint(&bytes[..bytes.len() - 10]).unwrap_err() {
            CoreError::Truncated { missing, .. } => assert_eq!(missing, 10),
            e => panic!("unexpected {e}"),
        }
        match decode_checkpoint(&bytes[..7]).unwrap_err() {
            CoreError::Truncated { missing, .. } => assert_eq!(missing, 5),
            e => panic!("unexpected {e}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).unwrap_err().to_string().contains("beyond"));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn supervision_weights_hidden_only() {
        let sig = Signature::new(1, 3, 1, 2).unwrap();
        let im = Image::new(sig, vec![1, 0, 1]).unwrap();
        let m = Mask::new(1, 3, vec![1, 0, 0]).unwrap();
        let s = supervision(sig, &[&im], &[&m], false);
        assert_eq!(s.targets, vec![1, 0, 1]);
        assert_eq!(s.joint_weights, vec![0.0, 0.5, 0.5]);
        assert_eq!(s.aux_weights, s.joint_weights);
        let all = supervision(sig, &[&im], &[&m], true);
        assert!(all.aux_weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-7));
    }
}
