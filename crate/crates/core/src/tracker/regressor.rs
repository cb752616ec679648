use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sampling::BBox;

/// Fewest candidates accepted for fitting.
pub const MIN_REGRESSION_SAMPLES: usize = 32;

/// `(dx, dy, dlog w, dlog h)` taking `from` to `to`, with offsets in units
/// of `from`'s extents.
pub fn box_transform(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [
        (tx - fx) / from.w,
        (ty - fy) / from.h,
        (to.w / from.w).ln(),
        (to.h / from.h).ln(),
    ]
}

/// Inverse of [`box_transform`].
pub fn apply_transform(b: &BBox, d: [f64; 4]) -> BBox {
    let (cx, cy) = b.center();
    BBox::from_center(
        cx + d[0] * b.w,
        cy + d[1] * b.h,
        b.w * d[2].exp(),
        b.h * d[3].exp(),
    )
}

/// Linear map from a flattened RoI feature to the four box-transform
/// targets, fitted by ridge regression without intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegressor {
    /// Row-major `dim × 4`.
    weights: Vec<f64>,
    dim: usize,
    pub lambda: f64,
}

impl BoxRegressor {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim * 4],
            dim,
            lambda: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn predict(&self, feature: &Tensor) -> Result<[f64; 4]> {
        if feature.len() != self.dim {
            return Err(Error::shape(
                "box regressor",
                format!(
                    "feature of {} values, regressor expects {}",
                    feature.len(),
                    self.dim
                ),
            ));
        }
        let mut out = [0.0f64; 4];
        for (i, &v) in feature.data().iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += v as f64 * self.weights[i * 4 + j];
            }
        }
        Ok(out)
    }
}

/// Fits `W = argmin ‖XW − Y‖² + λ‖W‖²` where rows of `X` are the flattened
/// candidate features and rows of `Y` the transforms candidate → `gt`.
/// Solves in whichever of the primal (`d×d`) or dual (`n×n`) systems is
/// smaller.
pub fn train_box_regressor(
    features: &[Tensor],
    boxes: &[BBox],
    gt: &BBox,
    lambda: f64,
) -> Result<BoxRegressor> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge lambda must be positive, got {lambda}"
        )));
    }
    if features.len() != boxes.len() {
        return Err(Error::shape(
            "train_box_regressor",
            format!("{} features vs {} boxes", features.len(), boxes.len()),
        ));
    }
    let n = features.len();
    if n < MIN_REGRESSION_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "box regressor needs at least {MIN_REGRESSION_SAMPLES} candidates, got {n}"
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::shape(
            "train_box_regressor",
            "features differ in size",
        ));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i].data()[j] as f64);
    let y = DMatrix::from_fn(n, 4, |i, j| box_transform(&boxes[i], gt)[j]);
    let singular = || Error::Tracking("box regressor system is not positive definite".into());
    let w = if d <= n {
        let a = x.tr_mul(&x) + DMatrix::identity(d, d) * lambda;
        let chol = a.cholesky().ok_or_else(singular)?;
        chol.solve(&x.tr_mul(&y))
    } else {
        let a = &x * x.transpose() + DMatrix::identity(n, n) * lambda;
        let chol = a.cholesky().ok_or_else(singular)?;
        x.tr_mul(&chol.solve(&y))
    };
    let mut weights = Vec::with_capacity(d * 4);
    for i in 0..d {
        for j in 0..4 {
            weights.push(w[(i, j)]);
        }
    }
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box regressor weights"));
    }
    Ok(BoxRegressor {
        weights,
        dim: d,
        lambda,
    })
}

/// Refines `b` by the predicted transform.
pub fn apply_regressor(reg: &BoxRegressor, feature: &Tensor, b: &BBox) -> Result<BBox> {
    Ok(apply_transform(b, reg.predict(feature)?))
}
