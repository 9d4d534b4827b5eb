use crate::error::{Error, Result};
use crate::resample::bicubic_resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Antialiased Catmull-Rom downscale by an integer `factor`, clamped to [0, 1].
///
/// Works on any `(n, c, H, W)` tensor with `H` and `W` divisible by `factor`.
pub fn bicubic_downsample<T: Scalar>(hr: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = hr.shape();
    if factor == 0 {
        return Err(Error::invalid("bicubic_downsample", "factor must be at least 1"));
    }
    if s.h % factor != 0 || s.w % factor != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(
            "bicubic_downsample",
            format!("image {}×{} is not divisible by factor {factor}", s.h, s.w),
        ));
    }
    let lr = bicubic_resize(hr, s.h / factor, s.w / factor);
    Ok(lr.map(|v| v.max(T::zero()).min(T::one())))
}
