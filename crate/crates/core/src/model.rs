//! The two networks and their fusion.
//!
//! The prior is a two-stack gated network: the vertical stack at `(r, c)`
//! sees only rows above `r`, the horizontal stack sees only raster positions
//! before `(r, c)`. The conditioning network is an unmasked residual stack
//! over the masked image plus the mask. Their logits are added once, at the
//! output.
//!
//! Logit tensors are `N × (C·K) × H × W`; channel `c·K + k` holds level `k`
//! of image channel `c`.

use std::collections::HashMap;
use std::fmt;

use pccnn_numerics::{ConvGeometry, Graph, TapMask, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Signature};
use crate::error::{CoreError, Result};
use crate::maskgen::ConditioningInput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Mnist,
    MnistSmall,
    Celeba,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Mnist, Preset::MnistSmall, Preset::Celeba];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mnist => "mnist",
            Preset::MnistSmall => "mnist-small",
            Preset::Celeba => "celeba",
        }
    }

    pub fn parse(name: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub signature: Signature,
    /// Gated blocks after the restricted first block.
    pub prior_blocks: usize,
    pub prior_filters: usize,
    pub prior_kernel: usize,
    pub cond_blocks: usize,
    pub cond_filters: usize,
    pub cond_kernel: usize,
    /// Width of the rectified 1×1 layer before the prior's output layer.
    pub head_hidden: Option<usize>,
}

impl ArchitectureConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Mnist => Self {
                signature: Signature::MNIST,
                prior_blocks: 14,
                prior_filters: 32,
                prior_kernel: 5,
                cond_blocks: 15,
                cond_filters: 32,
                cond_kernel: 5,
                head_hidden: None,
            },
            Preset::MnistSmall => Self {
                prior_blocks: 5,
                cond_blocks: 6,
                ..Self::preset(Preset::Mnist)
            },
            Preset::Celeba => Self {
                signature: Signature::CELEBA,
                prior_blocks: 16,
                prior_filters: 66,
                prior_kernel: 5,
                cond_blocks: 17,
                cond_filters: 66,
                cond_kernel: 5,
                head_hidden: Some(1023),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, k) in [("prior_kernel", self.prior_kernel), ("cond_kernel", self.cond_kernel)] {
            if k % 2 == 0 || k < 3 {
                return Err(CoreError::invalid(field, format!("kernel size {k} must be odd and at least 3")));
            }
        }
        if self.prior_filters == 0 || self.cond_filters == 0 || self.cond_blocks == 0 {
            return Err(CoreError::invalid("architecture", "filter and block counts must be positive"));
        }
        if self.head_hidden == Some(0) {
            return Err(CoreError::invalid("head_hidden", "must be positive when present"));
        }
        Signature::new(
            self.signature.height,
            self.signature.width,
            self.signature.channels,
            self.signature.levels,
        )?;
        Ok(())
    }

    /// `C · K`, the logits per pixel.
    pub fn logits_per_pixel(&self) -> usize {
        self.signature.channels * self.signature.levels
    }

    /// Rows above the current one that can influence the prior's output there.
    pub fn prior_reach_rows(&self) -> usize {
        (self.prior_kernel / 2) * (self.prior_blocks + 1)
    }

    /// Name, shape, and active taps of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.signature.channels;
        let ck = self.logits_per_pixel();
        let (f, k) = (self.prior_filters, self.prior_kernel);
        let mut specs = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, kh: usize, kw: usize, taps: Option<TapMask>| {
            specs.push(ParamSpec::weight(format!("{name}.weight"), cout, cin, kh, kw, taps));
            specs.push(ParamSpec::bias(format!("{name}.bias"), cout));
        };
        for b in 0..=self.prior_blocks {
            let cin = if b == 0 { c } else { f };
            let restricted = b == 0;
            conv(format!("prior.block{b}.vert"), 2 * f, cin, k, k, Some(vertical_taps(k, restricted)));
            conv(format!("prior.block{b}.horiz"), 2 * f, cin, 1, k, Some(horizontal_taps(k, restricted)));
            conv(format!("prior.block{b}.v2h"), 2 * f, 2 * f, 1, 1, None);
            conv(format!("prior.block{b}.hout"), f, f, 1, 1, None);
        }
        match self.head_hidden {
            Some(hidden) => {
                conv("prior.head_hidden".into(), hidden, f, 1, 1, None);
                conv("prior.head".into(), ck, hidden, 1, 1, None);
            }
            None => conv("prior.head".into(), ck, f, 1, 1, None),
        }
        let (g, kc) = (self.cond_filters, self.cond_kernel);
        for b in 0..self.cond_blocks {
            let cin = if b == 0 { c + 1 } else { g };
            conv(format!("cond.block{b}.conv1"), g, cin, kc, kc, None);
            conv(format!("cond.block{b}.conv2"), g, g, kc, kc, None);
            if cin != g {
                conv(format!("cond.block{b}.skip"), g, cin, 1, 1, None);
            }
        }
        conv("cond.head".into(), ck, g, 1, 1, None);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Vertical-stack taps: rows strictly above the centre for the restricted
/// block, rows up to and including the centre afterwards.
pub fn vertical_taps(k: usize, restricted: bool) -> TapMask {
    let c = k / 2;
    TapMask::from_fn(k, k, |y, _| if restricted { y < c } else { y <= c })
}

/// Horizontal-stack taps on a `1 × k` kernel: columns strictly left of the
/// centre for the restricted block, up to and including it afterwards.
pub fn horizontal_taps(k: usize, restricted: bool) -> TapMask {
    let c = k / 2;
    TapMask::from_fn(1, k, |_, x| if restricted { x < c } else { x <= c })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Kernel taps that may be non-zero (`None`: all of them).
    pub taps: Option<TapMask>,
    pub fan_in: usize,
}

impl ParamSpec {
    fn weight(name: String, cout: usize, cin: usize, kh: usize, kw: usize, taps: Option<TapMask>) -> Self {
        let active = taps.as_ref().map_or(kh * kw, TapMask::count);
        Self {
            name,
            shape: vec![cout, cin, kh, kw],
            taps,
            fan_in: cin * active,
        }
    }

    fn bias(name: String, cout: usize) -> Self {
        Self {
            name,
            shape: vec![cout],
            taps: None,
            fan_in: 0,
        }
    }
}

/// Named parameter tensors instantiating an [`ArchitectureConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ArchitectureConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Fan-in scaled uniform initialization, `U(±1/√fan_in)`, where the fan-in
    /// counts only active taps. Biases use the fan-in of their layer's weight.
    /// Masked taps start (and stay) at zero.
    pub fn init(config: &ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = config.param_specs();
        let mut tensors = Vec::with_capacity(specs.len());
        let mut last_fan_in = 1;
        for spec in &specs {
            let fan_in = if spec.fan_in > 0 { spec.fan_in } else { last_fan_in };
            last_fan_in = fan_in;
            let bound = 1.0 / (fan_in as f32).sqrt();
            let n: usize = spec.shape.iter().product();
            let mut data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            if let Some(taps) = &spec.taps {
                let (kh, kw) = taps.kernel_size();
                for (i, v) in data.iter_mut().enumerate() {
                    let t = i % (kh * kw);
                    if !taps.is_active(t / kw, t % kw) {
                        *v = 0.0;
                    }
                }
            }
            tensors.push(Tensor::from_vec(spec.shape.clone(), data)?);
        }
        Self::from_tensors(config.clone(), specs.into_iter().map(|s| s.name).zip(tensors).collect())
    }

    /// Builds from named tensors, checking names and shapes against `config`.
    pub fn from_tensors(config: ArchitectureConfig, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(CoreError::Size(format!(
                "architecture has {} tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(CoreError::Size(format!(
                    "expected tensor {} {:?}, got {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn signature(&self) -> Signature {
        self.config.signature
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `g`, differentiable when `trainable`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, f32>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param_ref(t) } else { g.constant_ref(t) })
            .collect();
        Bound { vars }
    }

    /// Prior logits for a batch of images.
    pub fn prior_forward(&self, images: &[&Image]) -> Result<LogitGrid> {
        let input = images_tensor(self.signature(), images)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input);
        let out = self.prior_graph(&mut g, &bound, x)?;
        Ok(LogitGrid::new(LogitFlavor::Prior, self.signature(), g.value(out).clone()))
    }

    /// Conditional logits for a batch of conditioning inputs.
    pub fn cond_forward(&self, inputs: &[&ConditioningInput]) -> Result<LogitGrid> {
        let input = cond_tensor(self.signature(), inputs)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input);
        let out = self.cond_graph(&mut g, &bound, x)?;
        Ok(LogitGrid::new(LogitFlavor::Conditional, self.signature(), g.value(out).clone()))
    }

    /// Prior logits of row `row` only, as `N × (C·K) × 1 × W`.
    ///
    /// Equals the corresponding row of a full forward pass.
    pub fn prior_row_logits(&self, input: &Tensor<f32>, row: usize) -> Result<Tensor<f32>> {
        let ctx = self.prior_row_context(input, row)?;
        self.prior_row_from_context(&ctx, &crop_rows(input, row, row + 1))
    }

    /// Vertical-stack features of row `row`.
    ///
    /// They depend only on rows strictly above `row`, so they stay valid while
    /// pixels of `row` itself change. The prior's reach upward is
    /// [`ArchitectureConfig::prior_reach_rows`], so only that band is computed.
    pub fn prior_row_context(&self, input: &Tensor<f32>, row: usize) -> Result<RowContext> {
        let s = self.signature();
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != s.channels || shape[2] != s.height || shape[3] != s.width {
            return Err(CoreError::Signature {
                expected: s.to_string(),
                found: format!("{shape:?}"),
            });
        }
        if row >= s.height {
            return Err(CoreError::invalid("row", format!("{row} outside 0..{}", s.height)));
        }
        let start = row.saturating_sub(self.config.prior_reach_rows());
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(crop_rows(input, start, row + 1));
        let v_pre = self.prior_vertical(&mut g, &bound, x)?;
        let last = row - start;
        Ok(RowContext {
            row,
            v_pre: v_pre.into_iter().map(|v| crop_rows(g.value(v), last, last + 1)).collect(),
        })
    }

    /// Prior logits of the context's row given that row's input values,
    /// `N × C × 1 × W`.
    pub fn prior_row_from_context(&self, ctx: &RowContext, row_input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(row_input.clone());
        let v_pre: Vec<Var> = ctx.v_pre.iter().map(|t| g.constant_ref(t)).collect();
        let out = self.prior_horizontal(&mut g, &bound, x, &v_pre)?;
        Ok(g.value(out).clone())
    }

    /// Prior network on an `N × C × H × W` input of scaled intensities.
    pub fn prior_graph<'a>(&self, g: &mut Graph<'a, f32>, bound: &Bound, x: Var) -> Result<Var> {
        let v_pre = self.prior_vertical(g, bound, x)?;
        self.prior_horizontal(g, bound, x, &v_pre)
    }

    /// Pre-activation vertical features of every block.
    fn prior_vertical<'a>(&self, g: &mut Graph<'a, f32>, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (f, k) = (cfg.prior_filters, cfg.prior_kernel);
        let mut p = bound.cursor();
        let mut v = x;
        let mut out = Vec::with_capacity(cfg.prior_blocks + 1);
        for b in 0..=cfg.prior_blocks {
            let vert = ConvGeometry::same(k, k).with_taps(vertical_taps(k, b == 0));
            let v_pre = g.conv2d(v, p.next(), Some(p.next()), &vert)?;
            p.skip(6);
            v = gate(g, v_pre, f)?;
            out.push(v_pre);
        }
        Ok(out)
    }

    /// Horizontal stack and head; every operation is local to a row.
    fn prior_horizontal<'a>(&self, g: &mut Graph<'a, f32>, bound: &Bound, x: Var, v_pre: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let (f, k) = (cfg.prior_filters, cfg.prior_kernel);
        let mut p = bound.cursor();
        let mut h = x;
        for (b, &vp) in v_pre.iter().enumerate() {
            let restricted = b == 0;
            p.skip(2);
            let horiz = ConvGeometry::padded(0, k / 2).with_taps(horizontal_taps(k, restricted));
            let h_conv = g.conv2d(h, p.next(), Some(p.next()), &horiz)?;
            let v2h = g.conv2d(vp, p.next(), Some(p.next()), &ConvGeometry::default())?;
            let h_pre = g.add(h_conv, v2h)?;
            let h_gated = gate(g, h_pre, f)?;
            let mut h_out = g.conv2d(h_gated, p.next(), Some(p.next()), &ConvGeometry::default())?;
            if !restricted {
                h_out = g.add(h_out, h)?;
            }
            h = h_out;
        }
        let mut out = h;
        if cfg.head_hidden.is_some() {
            let hidden = g.conv2d(out, p.next(), Some(p.next()), &ConvGeometry::default())?;
            out = g.relu(hidden);
        }
        let logits = g.conv2d(out, p.next(), Some(p.next()), &ConvGeometry::default())?;
        Ok(logits)
    }

    /// Conditioning network on an `N × (C+1) × H × W` input.
    pub fn cond_graph<'a>(&self, g: &mut Graph<'a, f32>, bound: &Bound, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let mut p = bound.cursor_at(self.cond_offset());
        let same = ConvGeometry::same(cfg.cond_kernel, cfg.cond_kernel);
        let mut a = x;
        for b in 0..cfg.cond_blocks {
            let cin = if b == 0 { cfg.signature.channels + 1 } else { cfg.cond_filters };
            let y = g.conv2d(a, p.next(), Some(p.next()), &same)?;
            let y = g.relu(y);
            let y = g.conv2d(y, p.next(), Some(p.next()), &same)?;
            let skip = if cin != cfg.cond_filters {
                g.conv2d(a, p.next(), Some(p.next()), &ConvGeometry::default())?
            } else {
                a
            };
            let sum = g.add(y, skip)?;
            a = g.relu(sum);
        }
        Ok(g.conv2d(a, p.next(), Some(p.next()), &ConvGeometry::default())?)
    }

    fn cond_offset(&self) -> usize {
        self.index["cond.block0.conv1.weight"]
    }
}

fn gate(g: &mut Graph<'_, f32>, pre: Var, f: usize) -> Result<Var> {
    let a = g.narrow_channels(pre, 0, f)?;
    let b = g.narrow_channels(pre, f, f)?;
    let t = g.tanh(a);
    let s = g.sigmoid(b);
    Ok(g.mul(t, s)?)
}

/// Parameter handles on one graph, in storage order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn cursor(&self) -> Cursor<'_> {
        self.cursor_at(0)
    }

    fn cursor_at(&self, at: usize) -> Cursor<'_> {
        Cursor { vars: &self.vars, at }
    }
}

struct Cursor<'b> {
    vars: &'b [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }

    fn skip(&mut self, n: usize) {
        self.at += n;
    }
}

/// Cached vertical-stack features for one row; see
/// [`ModelParams::prior_row_context`].
#[derive(Clone, Debug)]
pub struct RowContext {
    pub row: usize,
    v_pre: Vec<Tensor<f32>>,
}

/// Rows `start..end` of an NCHW tensor.
pub fn crop_rows(t: &Tensor<f32>, start: usize, end: usize) -> Tensor<f32> {
    let s = t.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let rows = end - start;
    let mut data = Vec::with_capacity(nc * rows * w);
    for plane in 0..nc {
        let base = plane * h * w;
        data.extend_from_slice(&t.data()[base + start * w..base + end * w]);
    }
    Tensor::from_vec(vec![s[0], s[1], rows, w], data).expect("crop within bounds")
}

/// Stacks images into `N × C × H × W` scaled intensities.
pub fn images_tensor(signature: Signature, images: &[&Image]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * signature.values());
    for im in images {
        signature.expect(&im.signature())?;
        data.extend(im.scaled_chw());
    }
    Ok(Tensor::from_vec(
        vec![images.len(), signature.channels, signature.height, signature.width],
        data,
    )?)
}

pub fn cond_tensor(signature: Signature, inputs: &[&ConditioningInput]) -> Result<Tensor<f32>> {
    let c = signature.channels + 1;
    let mut data = Vec::with_capacity(inputs.len() * c * signature.pixels());
    for ci in inputs {
        signature.expect(&ci.signature)?;
        data.extend_from_slice(&ci.data);
    }
    Ok(Tensor::from_vec(vec![inputs.len(), c, signature.height, signature.width], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitFlavor {
    Prior,
    Conditional,
    Combined,
}

/// Per-pixel, per-channel, per-level unnormalized log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrid {
    pub flavor: LogitFlavor,
    pub signature: Signature,
    /// `N × (C·K) × H × W`.
    pub logits: Tensor<f32>,
}

impl LogitGrid {
    pub fn new(flavor: LogitFlavor, signature: Signature, logits: Tensor<f32>) -> Self {
        Self {
            flavor,
            signature,
            logits,
        }
    }

    pub fn batch(&self) -> usize {
        self.logits.shape()[0]
    }

    /// The `K` logits of channel `c` at `(y, x)` in batch entry `n`.
    pub fn levels_at(&self, n: usize, y: usize, x: usize, c: usize) -> Vec<f32> {
        let s = self.signature;
        let plane = s.pixels();
        let base = (n * s.channels * s.levels + c * s.levels) * plane + y * s.width + x;
        (0..s.levels).map(|k| self.logits.data()[base + k * plane]).collect()
    }
}

/// Elementwise sum of prior and conditional logits.
pub fn combine(prior: &LogitGrid, cond: &LogitGrid) -> Result<LogitGrid> {
    if prior.signature != cond.signature || prior.logits.shape() != cond.logits.shape() {
        return Err(CoreError::Size(format!(
            "cannot combine logits {:?} ({}) and {:?} ({})",
            prior.logits.shape(),
            prior.signature,
            cond.logits.shape(),
            cond.signature
        )));
    }
    let mut logits = prior.logits.clone();
    logits.axpy(1.0, &cond.logits)?;
    Ok(LogitGrid::new(LogitFlavor::Combined, prior.signature, logits))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskType {
    /// Excludes the centre tap.
    A,
    /// Includes the centre tap.
    B,
}

/// Raster-causal taps of a `k × k` kernel.
pub fn raster_taps(k: usize, mask_type: MaskType) -> TapMask {
    let c = k / 2;
    TapMask::from_fn(k, k, |y, x| {
        y < c
            || (y == c
                && match mask_type {
                    MaskType::A => x < c,
                    MaskType::B => x <= c,
                })
    })
}

/// Same-size convolution restricted to raster-causal taps.
pub fn masked_conv(
    input: &Tensor<f32>,
    weights: &Tensor<f32>,
    bias: Option<&Tensor<f32>>,
    mask_type: MaskType,
) -> Result<Tensor<f32>> {
    let ws = weights.shape();
    if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(CoreError::invalid(
            "kernel",
            format!("masked convolution needs a square odd kernel, got {ws:?}"),
        ));
    }
    let k = ws[2];
    let taps = raster_taps(k, mask_type);
    if taps.count() == 0 {
        // Nothing is read: every output is its channel's bias.
        let is = input.shape();
        let plane = is[2] * is[3];
        let mut out = Tensor::zeros(&[is[0], ws[0], is[2], is[3]])?;
        if let Some(b) = bias {
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = b.data()[(i / plane) % ws[0]];
            }
        }
        return Ok(out);
    }
    Ok(pccnn_numerics::conv2d(
        input,
        weights,
        bias,
        &ConvGeometry::same(k, k).with_taps(taps),
    )?)
}
