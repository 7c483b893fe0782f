//! Visibility masks: random blob generation, the mask-dataset file, and the
//! conditioning-network input built from an image and a mask.
//!
//! A mask bit of 1 marks a visible (constrained) pixel, 0 a hidden one.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Image, Signature};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::invalid("mask", format!("{height}x{width} has a zero dimension")));
        }
        if bits.len() != height * width {
            return Err(CoreError::Size(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(CoreError::invalid("mask", format!("value {} at index {i} is not 0 or 1", bits[i])));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, visible: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![u8::from(visible); height * width],
        }
    }

    pub fn all_visible(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    pub fn all_hidden(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_visible(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, visible: bool) {
        self.bits[y * self.width + x] = u8::from(visible);
    }

    pub fn visible_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn hidden_count(&self) -> usize {
        self.bits.len() - self.visible_count()
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// Raster indices of hidden pixels, in visiting order.
    pub fn hidden_positions(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i] == 0).collect()
    }

    pub fn matches(&self, signature: &Signature) -> Result<()> {
        if (self.height, self.width) == (signature.height, signature.width) {
            Ok(())
        } else {
            Err(CoreError::Size(format!(
                "mask is {}x{}, images are {}x{}",
                self.height, self.width, signature.height, signature.width
            )))
        }
    }

    /// Hex SHA-256 over `height (u16 LE) ‖ width (u16 LE) ‖ bits`.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u16).to_le_bytes());
        h.update((self.width as u16).to_le_bytes());
        h.update(&self.bits);
        hex::encode(h.finalize())
    }

    /// One of the regular half-image occlusions. The named half stays visible.
    pub fn half(height: usize, width: usize, side: HalfSide) -> Mask {
        let mut m = Mask::all_hidden(height, width);
        for y in 0..height {
            for x in 0..width {
                let visible = match side {
                    HalfSide::Top => y < height / 2,
                    HalfSide::Bottom => y >= height / 2,
                    HalfSide::Left => x < width / 2,
                    HalfSide::Right => x >= width / 2,
                };
                m.set(y, x, visible);
            }
        }
        m
    }

    /// Reads a mask from an image file: values ≥ 128 are visible.
    pub fn read_image(path: &Path) -> Result<Mask> {
        let (h, w, c, values) = crate::data::read_8bit(path)?;
        let bits = values.chunks_exact(c).map(|p| u8::from(p[0] >= 128)).collect();
        Mask::new(h, w, bits)
    }

    /// Writes visible pixels as white (255) and hidden ones as black.
    pub fn write_image(&self, path: &Path) -> Result<()> {
        let values: Vec<u8> = self.bits.iter().map(|&b| b * 255).collect();
        crate::data::write_8bit(path, self.height, self.width, 1, &values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HalfSide {
    Top,
    Bottom,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGenParams {
    pub max_num_blobs: usize,
    pub iter_min: usize,
    pub iter_max: usize,
}

impl Default for MaskGenParams {
    fn default() -> Self {
        Self {
            max_num_blobs: 4,
            iter_min: 2,
            iter_max: 7,
        }
    }
}

impl MaskGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_num_blobs == 0 {
            return Err(CoreError::invalid("max_num_blobs", "must be at least 1"));
        }
        if self.iter_min == 0 || self.iter_min > self.iter_max {
            return Err(CoreError::invalid(
                "iter_min",
                format!("need 1 <= iter_min ({}) <= iter_max ({})", self.iter_min, self.iter_max),
            ));
        }
        Ok(())
    }
}

/// What one generation drew, for statistics.
#[derive(Clone, Debug)]
pub struct BlobTrace {
    pub num_blobs: usize,
    pub iterations: Vec<usize>,
}

/// Random-blob growth: pick blob centers, then repeatedly set each in-bounds
/// 4-neighbour of every frontier cell with probability 1/2, the newly set
/// cells forming the next frontier (duplicates allowed).
pub fn generate_mask_with<R: Rng>(h: usize, w: usize, params: &MaskGenParams, rng: &mut R) -> (Mask, BlobTrace) {
    let mut mask = Mask::all_hidden(h, w);
    let num_blobs = rng.random_range(1..=params.max_num_blobs);
    let mut trace = BlobTrace {
        num_blobs,
        iterations: Vec::with_capacity(num_blobs),
    };
    for _ in 0..num_blobs {
        let num_iters = rng.random_range(params.iter_min..=params.iter_max);
        trace.iterations.push(num_iters);
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        mask.set(y0, x0, true);
        let mut frontier = vec![(y0, x0)];
        for _ in 0..num_iters {
            let mut next = Vec::new();
            for &(y, x) in &frontier {
                for (ny, nx) in neighbors(y, x, h, w) {
                    let p: f64 = rng.random();
                    if p > 0.5 {
                        mask.set(ny, nx, true);
                        next.push((ny, nx));
                    }
                }
            }
            frontier = next;
        }
    }
    (mask, trace)
}

fn neighbors(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (y > 0).then(|| (y - 1, x));
    let down = (y + 1 < h).then_some((y + 1, x));
    let left = (x > 0).then(|| (y, x - 1));
    let right = (x + 1 < w).then_some((y, x + 1));
    [up, down, left, right].into_iter().flatten()
}

pub fn mask_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn generate_mask(h: usize, w: usize, params: &MaskGenParams, seed: u64) -> Result<Mask> {
    if h == 0 || w == 0 {
        return Err(CoreError::invalid("size", format!("{h}x{w} has a zero dimension")));
    }
    params.validate()?;
    Ok(generate_mask_with(h, w, params, &mut mask_rng(seed)).0)
}

/// `count` masks, mask `i` drawn from stream `i` of the root seed.
pub fn generate_masks(count: usize, h: usize, w: usize, params: &MaskGenParams, seed: u64) -> Result<MaskSet> {
    Ok(generate_masks_traced(count, h, w, params, seed)?.0)
}

pub fn generate_masks_traced(
    count: usize,
    h: usize,
    w: usize,
    params: &MaskGenParams,
    seed: u64,
) -> Result<(MaskSet, Vec<BlobTrace>)> {
    if count == 0 {
        return Err(CoreError::invalid("count", "must be at least 1"));
    }
    if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(CoreError::invalid("size", format!("{h}x{w} outside 1..=65535")));
    }
    params.validate()?;
    let mut masks = Vec::with_capacity(count);
    let mut traces = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = mask_rng(seed);
        rng.set_stream(i as u64);
        let (m, t) = generate_mask_with(h, w, params, &mut rng);
        masks.push(m);
        traces.push(t);
    }
    Ok((MaskSet { height: h, width: w, masks }, traces))
}

pub const MASK_MAGIC: &[u8; 4] = b"PCMK";
pub const MASK_VERSION: u32 = 1;
const MASK_HEADER: usize = 4 + 4 + 4 + 2 + 2;

/// A collection of same-sized masks, stored in `PCMK` files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Mask>,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn inverted(&self) -> MaskSet {
        MaskSet {
            height: self.height,
            width: self.width,
            masks: self.masks.iter().map(Mask::inverted).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MASK_HEADER + self.len() * self.height * self.width);
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.masks.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        for m in &self.masks {
            out.extend_from_slice(&m.bits);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<MaskSet> {
        let fmt_err = |offset: usize, detail: String| CoreError::Format {
            what: "mask dataset",
            offset: offset as u64,
            detail,
        };
        if bytes.len() < MASK_HEADER {
            return Err(CoreError::Truncated {
                what: "mask dataset header",
                offset: bytes.len() as u64,
                missing: (MASK_HEADER - bytes.len()) as u64,
            });
        }
        if &bytes[..4] != MASK_MAGIC {
            return Err(fmt_err(0, format!("expected magic \"PCMK\", found {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MASK_VERSION {
            return Err(fmt_err(4, format!("unsupported version {version} (expected {MASK_VERSION})")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let height = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        let width = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
        if height == 0 || width == 0 {
            return Err(fmt_err(12, format!("zero mask size {height}x{width}")));
        }
        let need = count * height * width;
        let body = &bytes[MASK_HEADER..];
        if body.len() < need {
            return Err(CoreError::Truncated {
                what: "mask dataset",
                offset: bytes.len() as u64,
                missing: (need - body.len()) as u64,
            });
        }
        if body.len() > need {
            return Err(fmt_err(MASK_HEADER + need, format!("{} trailing bytes", body.len() - need)));
        }
        let masks = body
            .chunks_exact(height * width)
            .enumerate()
            .map(|(i, chunk)| {
                if let Some(j) = chunk.iter().position(|&b| b > 1) {
                    return Err(fmt_err(
                        MASK_HEADER + i * height * width + j,
                        format!("mask byte {} is not 0 or 1", chunk[j]),
                    ));
                }
                Ok(Mask {
                    height,
                    width,
                    bits: chunk.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskSet { height, width, masks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MaskSet> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        MaskSet::decode(&bytes).map_err(|e| CoreError::Codec(format!("{}: {e}", path.display())))
    }
}

/// Masked image channels followed by the mask, laid out `(C + 1) × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningInput {
    pub signature: Signature,
    pub data: Vec<f32>,
}

impl ConditioningInput {
    pub fn channels(&self) -> usize {
        self.signature.channels + 1
    }

    pub fn get(&self, y: usize, x: usize, channel: usize) -> f32 {
        let s = self.signature;
        self.data[(channel * s.height + y) * s.width + x]
    }
}

/// Scales the image to `[0, 1]`, zeroes hidden pixels, and appends the mask.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<ConditioningInput> {
    let s = image.signature();
    mask.matches(&s)?;
    let plane = s.pixels();
    let mut data = image.scaled_chw();
    for c in 0..s.channels {
        for (v, &b) in data[c * plane..(c + 1) * plane].iter_mut().zip(&mask.bits) {
            *v *= b as f32;
        }
    }
    data.extend(mask.bits.iter().map(|&b| b as f32));
    Ok(ConditioningInput { signature: s, data })
}
