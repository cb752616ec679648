use super::Tensor;

/// Central finite differences of a scalar function.
///
/// The step actually taken is measured after rounding `x ± eps` to `f32`,
/// so the quotient is not biased by representation error in the step.
pub fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f32) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let plus = orig + eps;
        let minus = orig - eps;
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = ((fp - fm) / (plus as f64 - minus as f64)) as f32;
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x as f64 - y as f64).powi(2);
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    let denom = na.max(nb).sqrt();
    if denom < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[5], |i| i as f32 * 0.3 - 1.0);
        let g = numeric_grad(|t| t.sum(), &x, 1e-3);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn square() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let g = numeric_grad(|t| (t.data()[0] as f64).powi(2), &x, 1e-3);
        assert!((g.data()[0] - 6.0).abs() < 1e-5);
    }
}
