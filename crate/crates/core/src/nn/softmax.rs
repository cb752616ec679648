use super::Tensor;
use crate::error::{Error, Result};

/// Max-subtracted two-class softmax in 64-bit.
pub fn softmax_pair(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    (ea / z, eb / z)
}

/// Softmax over a trailing axis of extent 2.
pub fn softmax2(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().last() != Some(&2) {
        return Err(Error::shape(
            "softmax2",
            format!("class dimension must be 2, shape is {:?}", logits.shape()),
        ));
    }
    let mut data = Vec::with_capacity(logits.len());
    for pair in logits.data().chunks_exact(2) {
        let (p0, p1) = softmax_pair(pair[0] as f64, pair[1] as f64);
        data.push(p0 as f32);
        data.push(p1 as f32);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), data))
}

/// Gradient w.r.t. logits given probabilities and the gradient w.r.t. them.
pub fn softmax2_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    if probs.shape() != grad_probs.shape() || probs.shape().last() != Some(&2) {
        return Err(Error::shape(
            "softmax2_backward",
            format!("{:?} vs {:?}", probs.shape(), grad_probs.shape()),
        ));
    }
    let mut data = Vec::with_capacity(probs.len());
    for (p, g) in probs
        .data()
        .chunks_exact(2)
        .zip(grad_probs.data().chunks_exact(2))
    {
        let dot = p[0] * g[0] + p[1] * g[1];
        data.push(p[0] * (g[0] - dot));
        data.push(p[1] * (g[1] - dot));
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), data))
}
