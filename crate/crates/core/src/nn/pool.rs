use super::Tensor;
use crate::error::{Error, Result};

/// Max-pool output together with the flat input index of each window's
/// maximum (first occurrence in row-major order on ties).
#[derive(Clone, Debug)]
pub struct MaxPoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

pub fn maxpool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<MaxPoolOutput> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "maxpool2d kernel and stride must be positive".into(),
        ));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("kernel {kernel} larger than spatial extent {h}x{w}"),
        ));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for idx in row..row + kernel {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::from_parts(vec![n, c, oh, ow], out),
        argmax,
    })
}

/// Routes each output gradient to the recorded argmax of its window.
pub fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!(
                "{} argmax entries vs {} gradients",
                argmax.len(),
                grad_out.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

/// Per-channel spatial mean of a `C×H×W` tensor.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3("global_avg_pool")?;
    let hw = h * w;
    let data = input
        .data()
        .chunks_exact(hw)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Ok(Tensor::from_parts(vec![c], data))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("expected 3-d shape, got {input_shape:?}"),
        ));
    };
    if grad_out.len() != c {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("{} gradients for {c} channels", grad_out.len()),
        ));
    }
    let inv = 1.0 / (h * w) as f32;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, h * w))
        .collect();
    Ok(Tensor::from_parts(input_shape.to_vec(), data))
}
