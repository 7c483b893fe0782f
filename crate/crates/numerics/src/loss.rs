//! Softmax over discrete intensity levels.
//!
//! Logit tensors are laid out `N × (C·K) × H × W`: the `K` level logits of
//! image channel `c` occupy channels `c·K .. (c+1)·K`. Targets and weights are
//! indexed `N × C × H × W`.

use crate::{Element, NumericsError, Result, Tensor};

/// Log-softmax of a single logit vector, computed with the max shift.
pub fn log_softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

#[derive(Clone, Debug)]
pub(crate) struct LevelLayout {
    pub n: usize,
    pub channels: usize,
    pub levels: usize,
    pub pixels: usize,
}

impl LevelLayout {
    pub(crate) fn new(shape: &[usize], levels: usize) -> Result<Self> {
        if shape.len() != 4 || levels < 2 || shape[1] % levels != 0 {
            return Err(NumericsError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected N x (C*K) x H x W logits with K = {levels}"),
            });
        }
        Ok(Self {
            n: shape[0],
            channels: shape[1] / levels,
            levels,
            pixels: shape[2] * shape[3],
        })
    }

    pub(crate) fn targets(&self) -> usize {
        self.n * self.channels * self.pixels
    }

    /// Offset of level 0 for target index `t` (stride between levels is `pixels`).
    pub(crate) fn base(&self, t: usize) -> usize {
        let p = t % self.pixels;
        let nc = t / self.pixels;
        nc * self.levels * self.pixels + p
    }
}

/// Forward pass result kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct CrossEntropyForward<T> {
    pub loss: T,
    pub probs: Vec<T>,
    pub weight_sum: T,
}

pub(crate) fn cross_entropy_forward<T: Element>(
    logits: &Tensor<T>,
    layout: &LevelLayout,
    targets: &[usize],
    weights: &[T],
) -> Result<CrossEntropyForward<T>> {
    let count = layout.targets();
    if targets.len() != count || weights.len() != count {
        return Err(NumericsError::ShapeMismatch {
            op: "softmax_cross_entropy targets",
            left: logits.shape().to_vec(),
            right: vec![targets.len(), weights.len()],
        });
    }
    if let Some((index, &level)) = targets.iter().enumerate().find(|(_, &l)| l >= layout.levels) {
        return Err(NumericsError::TargetOutOfRange {
            index,
            level,
            levels: layout.levels,
        });
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= T::zero())) {
        return Err(NumericsError::Invalid(format!(
            "softmax_cross_entropy: weight {w} is negative or NaN"
        )));
    }
    let data = logits.data();
    let mut probs = vec![T::zero(); data.len()];
    let mut total = T::zero();
    let mut weight_sum = T::zero();
    let mut buf = vec![T::zero(); layout.levels];
    for t in 0..count {
        let base = layout.base(t);
        for (k, b) in buf.iter_mut().enumerate() {
            *b = data[base + k * layout.pixels];
        }
        let logp = log_softmax(&buf);
        for (k, lp) in logp.iter().enumerate() {
            probs[base + k * layout.pixels] = lp.exp();
        }
        let w = weights[t];
        if w > T::zero() {
            total += -w * logp[targets[t]];
            weight_sum += w;
        }
    }
    let loss = if weight_sum > T::zero() {
        total / weight_sum
    } else {
        T::zero()
    };
    Ok(CrossEntropyForward {
        loss,
        probs,
        weight_sum,
    })
}

pub(crate) fn cross_entropy_backward<T: Element>(
    forward: &CrossEntropyForward<T>,
    layout: &LevelLayout,
    targets: &[usize],
    weights: &[T],
    upstream: T,
) -> Vec<T> {
    let mut grad = vec![T::zero(); forward.probs.len()];
    if forward.weight_sum <= T::zero() {
        return grad;
    }
    let scale = upstream / forward.weight_sum;
    for t in 0..layout.targets() {
        let w = weights[t];
        if w <= T::zero() {
            continue;
        }
        let base = layout.base(t);
        for k in 0..layout.levels {
            let idx = base + k * layout.pixels;
            let indicator = if k == targets[t] { T::one() } else { T::zero() };
            grad[idx] = scale * w * (forward.probs[idx] - indicator);
        }
    }
    grad
}

/// `Σ w · (−log softmax(logits)[target]) / Σ w`, or 0 when every weight is 0.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    levels: usize,
    targets: &[usize],
    weights: &[T],
) -> Result<T> {
    let layout = LevelLayout::new(logits.shape(), levels)?;
    Ok(cross_entropy_forward(logits, &layout, targets, weights)?.loss)
}
