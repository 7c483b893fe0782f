//! Images, datasets, and the on-disk formats they travel in.
//!
//! Pixels are stored as discrete levels in `[0, K-1]`, row-major with the
//! channel index fastest (`H × W × C`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Shape and quantization shared by every image a model handles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: usize,
}

impl Signature {
    pub const MNIST: Signature = Signature {
        height: 28,
        width: 28,
        channels: 1,
        levels: 2,
    };
    pub const CELEBA: Signature = Signature {
        height: 32,
        width: 32,
        channels: 3,
        levels: 32,
    };

    pub fn new(height: usize, width: usize, channels: usize, levels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(CoreError::invalid("signature", format!("{height}x{width}x{channels} has a zero dimension")));
        }
        if !(2..=256).contains(&levels) {
            return Err(CoreError::invalid("signature", format!("levels {levels} outside 2..=256")));
        }
        Ok(Self {
            height,
            width,
            channels,
            levels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Number of stored values, `H · W · C`.
    pub fn values(&self) -> usize {
        self.pixels() * self.channels
    }

    pub fn same_grid(&self, other: &Signature) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn expect(&self, found: &Signature) -> Result<()> {
        if self == found {
            Ok(())
        } else {
            Err(CoreError::Signature {
                expected: self.to_string(),
                found: found.to_string(),
            })
        }
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{} K={}", self.height, self.width, self.channels, self.levels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Image {
    signature: Signature,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(signature: Signature, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != signature.values() {
            return Err(CoreError::Size(format!(
                "{signature} needs {} values, got {}",
                signature.values(),
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|&v| v as usize >= signature.levels) {
            return Err(CoreError::invalid(
                "pixels",
                format!("value {} at index {i} is outside [0, {}]", pixels[i], signature.levels - 1),
            ));
        }
        Ok(Self { signature, pixels })
    }

    pub fn zeros(signature: Signature) -> Self {
        Self {
            signature,
            pixels: vec![0; signature.values()],
        }
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.signature.width + x) * self.signature.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[self.index(y, x, c)]
    }

    /// Panics if `level` is not a valid level for this image.
    pub fn set(&mut self, y: usize, x: usize, c: usize, level: u8) {
        assert!((level as usize) < self.signature.levels, "level {level} out of range");
        let i = self.index(y, x, c);
        self.pixels[i] = level;
    }

    /// Intensities as `level / (K − 1)`, laid out `C × H × W`.
    pub fn scaled_chw(&self) -> Vec<f32> {
        let s = self.signature;
        let scale = 1.0 / (s.levels - 1) as f32;
        let mut out = vec![0.0; s.values()];
        for p in 0..s.pixels() {
            for c in 0..s.channels {
                out[c * s.pixels() + p] = self.pixels[p * s.channels + c] as f32 * scale;
            }
        }
        out
    }

    /// Levels expanded to 8 bits: `round(l · 255 / (K − 1))`, clamped into
    /// the range that [`quantize`] maps back to `l`.
    pub fn to_8bit(&self) -> Vec<u8> {
        let k = self.signature.levels;
        self.pixels.iter().map(|&l| expand(l, k)).collect()
    }

    /// Quantizes 8-bit values to `K` levels with `⌊v · K / 256⌋`.
    ///
    /// For `K = 2` this is the `v / 255 > 0.5` threshold, for `K = 32` it is
    /// `⌊v / 8⌋`, and for `K = 256` it is the identity.
    pub fn from_8bit(height: usize, width: usize, channels: usize, levels: usize, values: &[u8]) -> Result<Self> {
        let signature = Signature::new(height, width, channels, levels)?;
        let pixels = values.iter().map(|&v| quantize(v, levels)).collect();
        Image::new(signature, pixels)
    }
}

pub fn quantize(v: u8, levels: usize) -> u8 {
    ((v as usize * levels) / 256) as u8
}

/// 8-bit value for level `l` of `levels`; inverse of [`quantize`].
pub fn expand(l: u8, levels: usize) -> u8 {
    let (l, k) = (l as usize, levels);
    let nearest = (l * 255 * 2 + (k - 1)) / (2 * (k - 1));
    let lo = (l * 256).div_ceil(k);
    let hi = ((l + 1) * 256).div_ceil(k) - 1;
    nearest.clamp(lo, hi) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An ordered, homogeneous collection of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    signature: Signature,
    images: Vec<Image>,
    labels: Option<Vec<u8>>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(signature: Signature, images: Vec<Image>, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(i) = images.iter().position(|im| im.signature != signature) {
            return Err(CoreError::Signature {
                expected: signature.to_string(),
                found: format!("{} (image {i})", images[i].signature),
            });
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(CoreError::Size(format!("{} labels for {} images", l.len(), images.len())));
            }
        }
        Ok(Self {
            signature,
            images,
            labels,
            split: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` images (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            signature: self.signature,
            images: self.images[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            split: self.split,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if available < n {
            return Err(CoreError::Truncated {
                what: self.what,
                offset: self.offset as u64,
                missing: (n - available) as u64,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CoreError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Decodes an IDX image file into 8-bit grayscale images (`K = 256`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let mut r = Reader {
        bytes,
        offset: 0,
        what: "IDX image file",
    };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CoreError::Format {
            what: "IDX image file",
            offset: 0,
            detail: format!("expected magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let n = r.u32_be()? as usize;
    let h = r.u32_be()? as usize;
    let w = r.u32_be()? as usize;
    let total = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v <= isize::MAX as usize)
        .ok_or(CoreError::Format {
            what: "IDX image file",
            offset: 4,
            detail: format!("dimensions {n} x {h} x {w} overflow"),
        })?;
    if h == 0 || w == 0 {
        return Err(CoreError::Format {
            what: "IDX image file",
            offset: 8,
            detail: format!("zero image dimension {h} x {w}"),
        });
    }
    let body = r.take(total)?;
    if r.offset != bytes.len() {
        return Err(CoreError::Format {
            what: "IDX image file",
            offset: r.offset as u64,
            detail: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    let signature = Signature::new(h, w, 1, 256)?;
    Ok(body
        .chunks_exact(h * w)
        .map(|chunk| Image {
            signature,
            pixels: chunk.to_vec(),
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader {
        bytes,
        offset: 0,
        what: "IDX label file",
    };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CoreError::Format {
            what: "IDX label file",
            offset: 0,
            detail: format!("expected magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let n = r.u32_be()? as usize;
    let body = r.take(n)?;
    if r.offset != bytes.len() {
        return Err(CoreError::Format {
            what: "IDX label file",
            offset: r.offset as u64,
            detail: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    Ok(body.to_vec())
}

/// Loads an IDX image file, and optionally its labels, as `K = 256` grayscale.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let with_path = |e: CoreError, p: &Path| match e {
        CoreError::Io { .. } => e,
        other => CoreError::Codec(format!("{}: {other}", p.display())),
    };
    let images = parse_idx_images(&read_file(images_path)?).map_err(|e| with_path(e, images_path))?;
    let labels = match labels_path {
        Some(p) => Some(parse_idx_labels(&read_file(p)?).map_err(|e| with_path(e, p))?),
        None => None,
    };
    let signature = match images.first() {
        Some(im) => im.signature,
        None => Signature::new(1, 1, 1, 256)?,
    };
    Dataset::new(signature, images, labels)
}

/// Serializes single-channel 8-bit images to the IDX image format.
pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let signature = images.first().map(|i| i.signature);
    let (h, w) = signature.map(|s| (s.height, s.width)).unwrap_or((0, 0));
    if let Some(s) = signature {
        if s.channels != 1 || s.levels != 256 {
            return Err(CoreError::invalid("images", format!("IDX holds 8-bit grayscale, not {s}")));
        }
    }
    let mut out = Vec::with_capacity(16 + images.len() * h * w);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        if Some(im.signature) != signature {
            return Err(CoreError::Size("IDX images must share one signature".into()));
        }
        out.extend_from_slice(&im.pixels);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// 8-bit grayscale to two levels: 1 iff `v / 255 > 0.5`.
pub fn binarize(dataset: &Dataset) -> Result<Dataset> {
    let s = dataset.signature;
    if s.levels != 256 {
        return Err(CoreError::invalid("dataset", format!("binarize expects 8-bit input, got {s}")));
    }
    let signature = Signature { levels: 2, ..s };
    let images = dataset
        .images
        .iter()
        .map(|im| Image {
            signature,
            pixels: im.pixels.iter().map(|&v| u8::from(v as f64 / 255.0 > 0.5)).collect(),
        })
        .collect();
    Ok(Dataset {
        signature,
        images,
        labels: dataset.labels.clone(),
        split: dataset.split,
    })
}

pub const CELEBA_RAW_HEIGHT: usize = 218;
pub const CELEBA_RAW_WIDTH: usize = 178;
pub const CELEBA_CROP: usize = 89;

/// Centered 89×89 crop, area resize to 32×32, then 5-bit quantization.
///
/// `raw` is an 8-bit `218 × 178 × 3` image (`K = 256`).
pub fn celeba_pipeline(raw: &Image) -> Result<Image> {
    let s = raw.signature;
    if (s.height, s.width, s.channels, s.levels) != (CELEBA_RAW_HEIGHT, CELEBA_RAW_WIDTH, 3, 256) {
        return Err(CoreError::Signature {
            expected: format!("{CELEBA_RAW_HEIGHT}x{CELEBA_RAW_WIDTH}x3 K=256"),
            found: s.to_string(),
        });
    }
    let top = (CELEBA_RAW_HEIGHT - CELEBA_CROP) / 2;
    let left = (CELEBA_RAW_WIDTH - CELEBA_CROP) / 2;
    let out = Signature::CELEBA;
    let rows = area_weights(CELEBA_CROP, out.height);
    let cols = area_weights(CELEBA_CROP, out.width);
    let mut pixels = Vec::with_capacity(out.values());
    for row_w in &rows {
        for col_w in &cols {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for &(y, wy) in row_w {
                    for &(x, wx) in col_w {
                        acc += wy * wx * raw.get(top + y, left + x, c) as f64;
                    }
                }
                let v = acc.round().clamp(0.0, 255.0) as u8;
                pixels.push(v / 8);
            }
        }
    }
    Image::new(out, pixels)
}

/// For each output cell, the source cells it overlaps and their normalized
/// overlap fractions.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let (lo, hi) = (j as f64 * scale, (j + 1) as f64 * scale);
            let mut cells = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((i, overlap / scale));
                }
                i += 1;
            }
            cells
        })
        .collect()
}

/// Parses a binary PGM (`P5`), returning `(height, width, 8-bit values)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let fmt_err = |offset: usize, detail: &str| CoreError::Format {
        what: "PGM file",
        offset: offset as u64,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fmt_err(0, "expected magic P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err(start, "expected a decimal header field"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fmt_err(pos, "expected whitespace after maxval")),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(fmt_err(3, "zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt_err(pos, "maxval must be in 1..=255"));
    }
    let need = w.checked_mul(h).ok_or_else(|| fmt_err(3, "dimension overflow"))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() < need {
        return Err(CoreError::Truncated {
            what: "PGM file",
            offset: pos as u64,
            missing: (need - body.len()) as u64,
        });
    }
    let values = body[..need]
        .iter()
        .map(|&v| ((v as usize).min(maxval) * 255 / maxval) as u8)
        .collect();
    Ok((h, w, values))
}

pub fn encode_pgm(height: usize, width: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Reads an 8-bit image (`.pgm` or anything the PNG/JPEG codecs accept) as
/// `(height, width, channels, values)`. Grayscale stays single-channel.
pub fn read_8bit(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    if bytes.starts_with(b"P5") {
        let (h, w, v) = parse_pgm(&bytes).map_err(|e| CoreError::Codec(format!("{}: {e}", path.display())))?;
        return Ok((h, w, 1, v));
    }
    let decoded =
        image::load_from_memory(&bytes).map_err(|e| CoreError::Codec(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if decoded.color().has_color() {
        Ok((h, w, 3, decoded.to_rgb8().into_raw()))
    } else {
        Ok((h, w, 1, decoded.to_luma8().into_raw()))
    }
}

/// Reads an image file and quantizes it to `signature`. Grayscale files are
/// replicated into three channels when the signature asks for colour.
pub fn read_image(path: &Path, signature: Signature) -> Result<Image> {
    let (h, w, c, values) = read_8bit(path)?;
    if (h, w) != (signature.height, signature.width) {
        return Err(CoreError::Signature {
            expected: signature.to_string(),
            found: format!("{h}x{w}x{c} ({})", path.display()),
        });
    }
    let values = match (c, signature.channels) {
        (a, b) if a == b => values,
        (1, 3) => values.iter().flat_map(|&v| [v, v, v]).collect(),
        (3, 1) => values
            .chunks_exact(3)
            .map(|p| ((p[0] as u32 * 299 + p[1] as u32 * 587 + p[2] as u32 * 114 + 500) / 1000) as u8)
            .collect(),
        _ => {
            return Err(CoreError::Signature {
                expected: signature.to_string(),
                found: format!("{h}x{w}x{c}"),
            })
        }
    };
    Image::from_8bit(h, w, signature.channels, signature.levels, &values)
}

/// Writes `.pgm` for single-channel images; other extensions go through PNG.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let s = img.signature;
    let values = img.to_8bit();
    write_8bit(path, s.height, s.width, s.channels, &values)
}

pub fn write_8bit(path: &Path, height: usize, width: usize, channels: usize, values: &[u8]) -> Result<()> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        if channels != 1 {
            return Err(CoreError::invalid("path", "PGM output needs a single-channel image"));
        }
        return write_file(path, &encode_pgm(height, width, values));
    }
    let color = match channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(CoreError::invalid("image", format!("{c} channels cannot be written as PNG"))),
    };
    image::save_buffer_with_format(path, values, width as u32, height as u32, color, image::ImageFormat::Png)
        .map_err(|e| CoreError::Codec(format!("{}: {e}", path.display())))
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub signature: Signature,
    pub split: Option<Split>,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

/// Writes one image file per entry (PGM for grayscale, PNG for colour) plus
/// `manifest.json`.
pub fn save_dataset_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let ext = if dataset.signature.channels == 1 { "pgm" } else { "png" };
    let mut files = Vec::with_capacity(dataset.len());
    for (i, im) in dataset.images.iter().enumerate() {
        let name = format!("{i:06}.{ext}");
        write_image(&dir.join(&name), im)?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        signature: dataset.signature,
        split: dataset.split,
        files,
        labels: dataset.labels.clone(),
    };
    write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_slice(&read_file(&manifest_path)?)?;
    let images = manifest
        .files
        .iter()
        .map(|f| read_image(&dir.join(f), manifest.signature))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(manifest.signature, images, manifest.labels)?;
    ds.split = manifest.split;
    Ok(ds)
}

/// Resolves a dataset argument: a directory with `manifest.json`, or an IDX
/// image file (labels picked up from a sibling `*-labels-idx1-ubyte` file
/// when present). IDX input is binarized when `binary` is set.
pub fn load_dataset(path: &Path, binary: bool) -> Result<Dataset> {
    if path.is_dir() {
        return load_dataset_dir(path);
    }
    let labels = sibling_labels(path).filter(|p| p.exists());
    let raw = load_idx(path, labels.as_deref())?;
    if binary {
        binarize(&raw)
    } else {
        Ok(raw)
    }
}

fn sibling_labels(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    name.contains("-images-idx3-ubyte")
        .then(|| path.with_file_name(name.replace("-images-idx3-ubyte", "-labels-idx1-ubyte")))
}
