//! Central finite differences, the reference that analytic gradients are
//! checked against. Only forward evaluations are used here.

use crate::{Element, Tensor};

/// `∂f/∂inputs` by central differences with step `h`, one element at a time.
pub fn central_difference<T, F>(f: F, inputs: &[Tensor<T>], h: T) -> Vec<Tensor<T>>
where
    T: Element,
    F: Fn(&[Tensor<T>]) -> T,
{
    let two = T::one() + T::one();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = inputs[t].zeros_like();
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work);
            work[t].data_mut()[i] = orig - h;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (two * h);
        }
        out.push(grad);
    }
    out
}

/// Max-norm relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn relative_error<T: Element>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error: shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max);
    let scale = a.max_abs().as_f64().max(b.max_abs().as_f64()).max(floor);
    diff / scale
}
