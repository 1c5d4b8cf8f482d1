//! Image quality metrics.

use crate::error::Result;
use crate::math::pairwise_sum;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// PSNR of two `[0, 1]` buffers of equal length.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    psnr_from_mse(pairwise_sum(&sq) / a.len().max(1) as f64)
}

/// PSNR restricted to pixels where `mask` is set (RGB interleaved images).
/// `None` when the mask is empty.
pub fn masked_psnr(a: &[f64], b: &[f64], mask: &[bool]) -> Option<f64> {
    let (mse, n) = masked_mse(a, b, mask);
    (n > 0).then(|| psnr_from_mse(mse))
}

/// Mean squared error over masked pixels and the pixel count.
pub fn masked_mse(a: &[f64], b: &[f64], mask: &[bool]) -> (f64, usize) {
    assert_eq!(a.len(), mask.len() * 3);
    let mut sq = Vec::new();
    for (p, &m) in mask.iter().enumerate() {
        if m {
            for ch in 0..3 {
                let d = a[3 * p + ch] - b[3 * p + ch];
                sq.push(d * d);
            }
        }
    }
    let n = sq.len() / 3;
    if n == 0 {
        return (0.0, 0);
    }
    (pairwise_sum(&sq) / sq.len() as f64, n)
}

pub fn psnr_of_mse(mse: f64) -> f64 {
    psnr_from_mse(mse)
}

pub fn ssim_value(width: usize, height: usize, a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(crate::ssim::ssim(width, height, a, b, false)?.0)
}
