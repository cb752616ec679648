use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_out` through where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

/// Cross-channel local response normalization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    pub size: usize,
    pub k: f32,
    pub alpha: f32,
    pub beta: f32,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            size: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "lrn size must be odd and positive, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Per-position denominators `s_c = k + (alpha/size)·Σ_window x²`.
fn lrn_scale(input: &Tensor, p: &LrnParams) -> Result<(Vec<f32>, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("lrn")?;
    let half = p.size / 2;
    let hw = h * w;
    let x = input.data();
    let coeff = p.alpha / p.size as f32;
    let mut scale = vec![0.0f32; x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            let dst = &mut scale[base + ch * hw..][..hw];
            for j in lo..=hi {
                let src = &x[base + j * hw..][..hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v * v;
                }
            }
            dst.iter_mut().for_each(|d| *d = p.k + coeff * *d);
        }
    }
    Ok((scale, n, c, hw))
}

/// `y_c = x_c / (k + (alpha/size)·Σ_{|j−c|≤size/2} x_j²)^beta`.
pub fn lrn(input: &Tensor, p: &LrnParams) -> Result<Tensor> {
    p.validate()?;
    let (scale, ..) = lrn_scale(input, p)?;
    let data = input
        .data()
        .iter()
        .zip(&scale)
        .map(|(&x, &s)| x * s.powf(-p.beta))
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

pub fn lrn_backward(input: &Tensor, grad_out: &Tensor, p: &LrnParams) -> Result<Tensor> {
    p.validate()?;
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "lrn_backward",
            format!("{:?} vs {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let (scale, n, c, hw) = lrn_scale(input, p)?;
    let x = input.data();
    let g = grad_out.data();
    let half = p.size / 2;
    // t_c = g_c · x_c · s_c^(−beta−1)
    let t: Vec<f32> = (0..x.len())
        .map(|i| g[i] * x[i] * scale[i].powf(-p.beta - 1.0))
        .collect();
    let coeff = 2.0 * p.alpha * p.beta / p.size as f32;
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            let dst = &mut out[base + ch * hw..][..hw];
            for j in lo..=hi {
                let src = &t[base + j * hw..][..hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            for (k, d) in dst.iter_mut().enumerate() {
                let i = base + ch * hw + k;
                *d = g[i] * scale[i].powf(-p.beta) - coeff * x[i] * *d;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}
