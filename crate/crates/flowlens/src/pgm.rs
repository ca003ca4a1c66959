//! 8-bit binary PGM previews.

use std::path::Path;

use flowlens_core::{Real, Tensor};

use crate::error::{CliError, Result};
use crate::fsutil;

/// Maps `[lo, hi]` linearly onto `[0, 255]`, clamping outside values.
pub fn encode<T: Real>(image: &Tensor<T>, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => {
            return Err(CliError::Data(format!(
                "cannot preview a tensor of shape {s:?}"
            )))
        }
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| {
        let u = ((v.f64() - lo) / span).clamp(0.0, 1.0);
        if u.is_nan() {
            0
        } else {
            (u * 255.0).round() as u8
        }
    }));
    Ok(out)
}

pub fn write<T: Real>(path: &Path, image: &Tensor<T>, lo: f64, hi: f64) -> Result<()> {
    fsutil::write_atomic(path, &encode(image, lo, hi)?)
}
