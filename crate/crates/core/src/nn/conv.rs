use super::gemm::sgemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Stride, dilation and zero padding (rows, cols) of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: (usize, usize),
}

impl Conv2dParams {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding: (padding, padding),
        }
    }

    pub fn with_padding(mut self, rows: usize, cols: usize) -> Self {
        self.padding = (rows, cols);
        self
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self::new(1, 1, 0)
    }
}

/// `floor((input + 2·pad − dilation·(k−1) − 1)/stride) + 1`, or `None` if
/// the kernel does not fit.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry(input: &Tensor, kernel: &Tensor, p: Conv2dParams) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, kcin, kh, kw) = kernel.dims4(OP)?;
    if kcin != cin {
        return Err(Error::shape(
            OP,
            format!("input channels {cin} != kernel input channels {kcin}"),
        ));
    }
    if p.stride == 0 || p.dilation == 0 {
        return Err(Error::InvalidArgument(
            "conv2d stride and dilation must be positive".into(),
        ));
    }
    let oh = conv_output_extent(h, kh, p.stride, p.dilation, p.padding.0)
        .ok_or_else(|| Error::shape(OP, format!("height {h} too small for kernel height {kh}")))?;
    let ow = conv_output_extent(w, kw, p.stride, p.dilation, p.padding.1)
        .ok_or_else(|| Error::shape(OP, format!("width {w} too small for kernel width {kw}")))?;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Lays patches out as a `(Cin·Kh·Kw) × (N·H'·W')` matrix.
fn im2col(input: &[f32], g: &Geometry, p: Conv2dParams) -> Vec<f32> {
    let cols_n = g.n * g.positions();
    let mut cols = vec![0.0f32; g.rows() * cols_n];
    let (ph, pw) = (p.padding.0 as isize, p.padding.1 as isize);
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.n {
                    let plane = &input[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * p.stride + ki * p.dilation) as isize - ph;
                        let dst = &mut dst_row[b * g.positions() + oy * g.ow..][..g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * p.stride + kj * p.dilation) as isize - pw;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &Geometry, p: Conv2dParams) -> Vec<f32> {
    let cols_n = g.n * g.positions();
    let mut out = vec![0.0f32; g.n * g.cin * g.h * g.w];
    let (ph, pw) = (p.padding.0 as isize, p.padding.1 as isize);
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.n {
                    let plane = &mut out[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * p.stride + ki * p.dilation) as isize - ph;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[b * g.positions() + oy * g.ow..][..g.ow];
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * p.stride + kj * p.dilation) as isize - pw;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of an `N×Cin×H×W` input with a `Cout×Cin×Kh×Kw` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, p: Conv2dParams) -> Result<Tensor> {
    let g = geometry(input, kernel, p)?;
    if bias.len() != g.cout {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != output channels {}", bias.len(), g.cout),
        ));
    }
    let cols = im2col(input.data(), &g, p);
    let np = g.n * g.positions();
    let mut mat = vec![0.0f32; g.cout * np];
    sgemm(
        g.cout,
        g.rows(),
        np,
        kernel.data(),
        false,
        &cols,
        false,
        0.0,
        &mut mat,
    );

    // Cout × (N·P) -> N × Cout × P
    let pos = g.positions();
    let mut out = vec![0.0f32; g.n * g.cout * pos];
    for co in 0..g.cout {
        let b_co = bias.data()[co];
        for b in 0..g.n {
            let src = &mat[co * np + b * pos..][..pos];
            let dst = &mut out[(b * g.cout + co) * pos..][..pos];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b_co;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out))
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Gradients of a scalar loss w.r.t. input, kernel and bias given the
/// gradient w.r.t. the convolution output.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    p: Conv2dParams,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let g = geometry(input, kernel, p)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} != output [{}, {}, {}, {}]",
                grad_out.shape(),
                g.n,
                g.cout,
                g.oh,
                g.ow
            ),
        ));
    }
    let pos = g.positions();
    let np = g.n * pos;
    let mut gmat = vec![0.0f32; g.cout * np];
    for b in 0..g.n {
        for co in 0..g.cout {
            let src = &grad_out.data()[(b * g.cout + co) * pos..][..pos];
            gmat[co * np + b * pos..][..pos].copy_from_slice(src);
        }
    }
    let bias: Vec<f32> = (0..g.cout)
        .map(|co| {
            gmat[co * np..(co + 1) * np]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>() as f32
        })
        .collect();

    let cols = im2col(input.data(), &g, p);
    let mut gk = vec![0.0f32; g.cout * g.rows()];
    sgemm(
        g.cout,
        np,
        g.rows(),
        &gmat,
        false,
        &cols,
        true,
        0.0,
        &mut gk,
    );

    let mut gcols = vec![0.0f32; g.rows() * np];
    sgemm(
        g.rows(),
        g.cout,
        np,
        kernel.data(),
        true,
        &gmat,
        false,
        0.0,
        &mut gcols,
    );
    let gin = col2im(&gcols, &g, p);

    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gin),
        kernel: Tensor::from_parts(kernel.shape().to_vec(), gk),
        bias: Tensor::from_parts(vec![g.cout], bias),
    })
}
