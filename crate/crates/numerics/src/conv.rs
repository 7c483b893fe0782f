//! 2-D cross-correlation over NCHW tensors with optional tap masking.
//!
//! A [`TapMask`] selects which kernel positions participate. Masked taps are
//! never read in the forward pass and receive zero gradient, so masked
//! (causal) convolutions cost only as much as their active taps. The kernel
//! is not flipped.

use crate::{Element, NumericsError, Result, Tensor};

/// Boolean selection of kernel taps, row-major over a `kh × kw` window.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TapMask {
    kh: usize,
    kw: usize,
    active: Vec<bool>,
}

impl TapMask {
    pub fn full(kh: usize, kw: usize) -> Self {
        Self::from_fn(kh, kw, |_, _| true)
    }

    pub fn from_fn(kh: usize, kw: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let active = (0..kh)
            .flat_map(|y| (0..kw).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self { kh, kw, active }
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn is_active(&self, ky: usize, kx: usize) -> bool {
        self.active[ky * self.kw + kx]
    }

    /// Active (row, column) kernel positions in row-major order.
    pub fn active_taps(&self) -> Vec<(usize, usize)> {
        (0..self.kh)
            .flat_map(|y| (0..self.kw).map(move |x| (y, x)))
            .filter(|&(y, x)| self.is_active(y, x))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Zero padding and tap selection for [`conv2d`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct ConvGeometry {
    pub pad_h: usize,
    pub pad_w: usize,
    /// `None` means every tap is active.
    pub taps: Option<TapMask>,
}

impl ConvGeometry {
    pub fn padded(pad_h: usize, pad_w: usize) -> Self {
        Self {
            pad_h,
            pad_w,
            taps: None,
        }
    }

    /// Same-size padding for an odd `kh × kw` kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self::padded(kh / 2, kw / 2)
    }

    pub fn with_taps(mut self, taps: TapMask) -> Self {
        self.taps = Some(taps);
        self
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvPlan {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    taps: Vec<(usize, usize)>,
}

impl ConvPlan {
    pub(crate) fn new(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        geom: &ConvGeometry,
    ) -> Result<Self> {
        let mismatch = || NumericsError::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        };
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(mismatch());
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        if let Some(b) = bias {
            if b != [cout] {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv2d bias",
                    left: b.to_vec(),
                    right: kernel.to_vec(),
                });
            }
        }
        let taps = match &geom.taps {
            Some(mask) => {
                if mask.kernel_size() != (kh, kw) {
                    return Err(NumericsError::Invalid(format!(
                        "conv2d: tap mask {:?} does not fit kernel {kernel:?}",
                        mask.kernel_size()
                    )));
                }
                mask.active_taps()
            }
            None => TapMask::full(kh, kw).active_taps(),
        };
        let ho = (h + 2 * geom.pad_h + 1).checked_sub(kh).filter(|&v| v > 0);
        let wo = (w + 2 * geom.pad_w + 1).checked_sub(kw).filter(|&v| v > 0);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(mismatch());
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ph: geom.pad_h,
            pw: geom.pad_w,
            ho,
            wo,
            taps,
        })
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    fn rows(&self) -> usize {
        self.cin * self.taps.len()
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1 unpadded convolution reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.ph == 0 && self.pw == 0 && self.taps.len() == 1
    }

    /// Range of output columns whose input column `ox + kx - pw` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(kx);
        let hi = (self.w + self.pw).saturating_sub(kx).min(self.wo);
        (lo.min(hi), hi)
    }

    fn gather_kernel<T: Element>(&self, kernel: &[T]) -> Vec<T> {
        let t = self.taps.len();
        let mut out = Vec::with_capacity(self.cout * self.rows());
        for co in 0..self.cout {
            for ci in 0..self.cin {
                let base = (co * self.cin + ci) * self.kh * self.kw;
                out.extend(self.taps[..t].iter().map(|&(ky, kx)| kernel[base + ky * self.kw + kx]));
            }
        }
        out
    }

    fn scatter_kernel<T: Element>(&self, gathered: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cout * self.cin * self.kh * self.kw];
        let t = self.taps.len();
        for co in 0..self.cout {
            for ci in 0..self.cin {
                let base = (co * self.cin + ci) * self.kh * self.kw;
                let src = (co * self.cin + ci) * t;
                for (j, &(ky, kx)) in self.taps.iter().enumerate() {
                    out[base + ky * self.kw + kx] = gathered[src + j];
                }
            }
        }
        out
    }

    fn im2col<T: Element>(&self, image: &[T], col: &mut [T]) {
        let p = self.out_pixels();
        for ci in 0..self.cin {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = &mut col[(ci * self.taps.len() + t) * p..][..p];
                let (lo, hi) = self.valid_cols(kx);
                for oy in 0..self.ho {
                    let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                    let iy = (oy + ky).wrapping_sub(self.ph);
                    if iy >= self.h || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let ix0 = lo + kx - self.pw;
                    dst[lo..hi].copy_from_slice(&plane[iy * self.w + ix0..iy * self.w + ix0 + (hi - lo)]);
                }
            }
        }
    }

    fn col2im_add<T: Element>(&self, col: &[T], image: &mut [T]) {
        let p = self.out_pixels();
        for ci in 0..self.cin {
            let plane = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = &col[(ci * self.taps.len() + t) * p..][..p];
                let (lo, hi) = self.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..self.ho {
                    let iy = (oy + ky).wrapping_sub(self.ph);
                    if iy >= self.h {
                        continue;
                    }
                    let ix0 = lo + kx - self.pw;
                    let dst = &mut plane[iy * self.w + ix0..iy * self.w + ix0 + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(&row[oy * self.wo + lo..oy * self.wo + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }

    pub(crate) fn forward<T: Element>(
        &self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Tensor<T> {
        let p = self.out_pixels();
        let rows = self.rows();
        let in_plane = self.cin * self.h * self.w;
        let weights = self.gather_kernel(kernel.data());
        let mut out = vec![T::zero(); self.n * self.cout * p];
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        for img in 0..self.n {
            let x = &input.data()[img * in_plane..(img + 1) * in_plane];
            let y = &mut out[img * self.cout * p..(img + 1) * self.cout * p];
            if let Some(b) = bias {
                for (co, chunk) in y.chunks_mut(p).enumerate() {
                    chunk.fill(b.data()[co]);
                }
            }
            let cols: &[T] = if self.is_pointwise() {
                x
            } else {
                self.im2col(x, &mut col);
                &col
            };
            T::gemm(
                self.cout,
                rows,
                p,
                T::one(),
                &weights,
                (rows as isize, 1),
                cols,
                (p as isize, 1),
                T::one(),
                y,
                (p as isize, 1),
            );
        }
        Tensor::from_parts_unchecked(self.output_shape(), out)
    }

    /// Returns (d input, d kernel, d bias), each only when requested.
    pub(crate) fn backward<T: Element>(
        &self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        grad_out: &Tensor<T>,
        want: (bool, bool, bool),
    ) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
        let (want_input, want_kernel, want_bias) = want;
        let p = self.out_pixels();
        let rows = self.rows();
        let in_plane = self.cin * self.h * self.w;
        let weights = self.gather_kernel(kernel.data());
        let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
        let mut d_weights = want_kernel.then(|| vec![T::zero(); self.cout * rows]);
        let mut d_bias = want_bias.then(|| vec![T::zero(); self.cout]);
        let mut col = vec![T::zero(); if self.is_pointwise() { 0 } else { rows * p }];
        let mut d_col = vec![T::zero(); if want_input { rows * p } else { 0 }];

        for img in 0..self.n {
            let g = &grad_out.data()[img * self.cout * p..(img + 1) * self.cout * p];
            if let Some(db) = d_bias.as_mut() {
                for (co, chunk) in g.chunks(p).enumerate() {
                    db[co] += chunk.iter().copied().sum::<T>();
                }
            }
            let x = &input.data()[img * in_plane..(img + 1) * in_plane];
            if let Some(dw) = d_weights.as_mut() {
                let cols: &[T] = if self.is_pointwise() {
                    x
                } else {
                    self.im2col(x, &mut col);
                    &col
                };
                // dW[co, r] += Σ_p g[co, p] · col[r, p]
                T::gemm(
                    self.cout,
                    p,
                    rows,
                    T::one(),
                    g,
                    (p as isize, 1),
                    cols,
                    (1, p as isize),
                    T::one(),
                    dw,
                    (rows as isize, 1),
                );
            }
            if let Some(dx) = d_input.as_mut() {
                let dx = &mut dx[img * in_plane..(img + 1) * in_plane];
                // dcol[r, p] = Σ_co W[co, r] · g[co, p]
                if self.is_pointwise() {
                    T::gemm(
                        rows,
                        self.cout,
                        p,
                        T::one(),
                        &weights,
                        (1, rows as isize),
                        g,
                        (p as isize, 1),
                        T::one(),
                        dx,
                        (p as isize, 1),
                    );
                } else {
                    T::gemm(
                        rows,
                        self.cout,
                        p,
                        T::one(),
                        &weights,
                        (1, rows as isize),
                        g,
                        (p as isize, 1),
                        T::zero(),
                        &mut d_col,
                        (p as isize, 1),
                    );
                    self.col2im_add(&d_col, dx);
                }
            }
        }
        (
            d_input.map(|d| Tensor::from_parts_unchecked(input.shape().to_vec(), d)),
            d_weights.map(|d| Tensor::from_parts_unchecked(kernel.shape().to_vec(), self.scatter_kernel(&d))),
            d_bias.map(|d| Tensor::from_parts_unchecked(vec![self.cout], d)),
        )
    }
}

/// Cross-correlation of an `N×Cin×H×W` input with a `Cout×Cin×kh×kw` kernel
/// plus an optional per-output-channel bias.
///
/// Output spatial size is `H + 2·pad_h − kh + 1` by `W + 2·pad_w − kw + 1`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new(input.shape(), kernel.shape(), bias.map(|b| b.shape()), geom)?;
    Ok(plan.forward(input, kernel, bias))
}
