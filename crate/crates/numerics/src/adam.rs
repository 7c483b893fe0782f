use crate::{Element, NumericsError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
///
/// Holds one first- and second-moment accumulator per parameter tensor, in
/// the order the parameters are passed to [`Adam::step`].
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Element> Adam<T> {
    pub fn new<'p>(config: AdamConfig, params: impl IntoIterator<Item = &'p Tensor<T>>) -> Self {
        let first_moment: Vec<_> = params.into_iter().map(Tensor::zeros_like).collect();
        let second_moment = first_moment.clone();
        Self {
            config,
            first_moment,
            second_moment,
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len(), grads.len()],
                right: vec![self.first_moment.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            p.expect_same_shape("adam_step", g)?;
            p.expect_same_shape("adam_step", m)?;
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_m_b1, one_m_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let (bias1, bias2) = (T::from_f64_lossy(bias1), T::from_f64_lossy(bias2));
        let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.eps));

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_m_b1 * gi;
                *vi = b2 * *vi + one_m_b2 * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_never_moves_parameters() {
        let start = Tensor::<f32>::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut params = vec![start.clone()];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let zero = vec![start.zeros_like()];
        for _ in 0..50 {
            adam.step(&mut params, &zero).unwrap();
        }
        assert_eq!(params[0], start);
        assert_eq!(adam.steps(), 50);
    }

    #[test]
    fn first_step_closed_form() {
        let g = 0.25f64;
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::scalar(1.0f64)];
        let mut adam = Adam::new(cfg, &params);
        adam.step(&mut params, &[Tensor::scalar(g)]).unwrap();
        // bias-corrected moments are g and g² on the first step
        let expected = 1.0 - cfg.lr * g / ((g * g).sqrt() + cfg.eps);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert!((1.0 - params[0].data()[0] - cfg.lr).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let bad = vec![Tensor::<f32>::zeros(&[3]).unwrap()];
        assert!(adam.step(&mut params, &bad).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
