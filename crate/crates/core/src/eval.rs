//! Image similarity metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `f64::INFINITY` when the volumes are identical.
    pub psnr: f64,
}

fn pairs<'a>(a: &'a Volume, b: &'a Volume) -> Result<impl Iterator<Item = f64> + 'a> {
    if a.grid.dims != b.grid.dims {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.grid.dims, b.grid.dims)));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| *x as f64 - *y as f64))
}

pub fn mae(a: &Volume, b: &Volume) -> Result<f64> {
    Ok(pairs(a, b)?.map(f64::abs).sum::<f64>() / a.data.len() as f64)
}

pub fn rmse(a: &Volume, b: &Volume) -> Result<f64> {
    Ok((pairs(a, b)?.map(|d| d * d).sum::<f64>() / a.data.len() as f64).sqrt())
}

/// `20·log10(range / RMSE)`.
pub fn psnr_from(rmse: f64, range: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (range / rmse).log10()
    }
}

/// Metrics of `pred` against `reference`; the PSNR range defaults to the
/// reference's intensity range.
pub fn compare(pred: &Volume, reference: &Volume, range: Option<f64>) -> Result<Metrics> {
    let range = range.unwrap_or_else(|| {
        let (lo, hi) = reference.min_max();
        (hi - lo) as f64
    });
    if !(range > 0.0) {
        return Err(Error::invalid("PSNR range must be positive"));
    }
    let r = rmse(pred, reference)?;
    Ok(Metrics { mae: mae(pred, reference)?, rmse: r, psnr: psnr_from(r, range) })
}
