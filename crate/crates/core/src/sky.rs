//! Equirectangular sky lookup. World frame is z-up; longitude 0 looks
//! along +y.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::types::SkyTexture;

/// Four bilinear taps into a sky texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkyTaps {
    pub texel: [usize; 4],
    pub weight: [f64; 4],
}

impl SkyTaps {
    pub fn new(width: usize, height: usize, dir: &Vector3<f64>) -> Self {
        let lon = dir.x.atan2(dir.y);
        let lat = dir.z.clamp(-1.0, 1.0).asin();
        let u = (lon / (2.0 * PI) + 0.5) * width as f64 - 0.5;
        let v = ((0.5 - lat / PI) * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
        let u0f = u.floor();
        let fu = u - u0f;
        let u0 = (u0f as i64).rem_euclid(width as i64) as usize;
        let u1 = (u0 + 1) % width;
        let v0 = v.floor() as usize;
        let v1 = (v0 + 1).min(height - 1);
        let fv = v - v0 as f64;
        Self {
            texel: [v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1],
            weight: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        }
    }

    pub fn sample(&self, sky: &SkyTexture) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (t, w) in self.texel.iter().zip(&self.weight) {
            for ch in 0..3 {
                c[ch] += w * sky.texels[t * 3 + ch];
            }
        }
        c
    }

    /// Adds `grad_rgb` back onto the texels this lookup read.
    pub fn accumulate(&self, grad_rgb: &[f64; 3], grad_texels: &mut [f64]) {
        for (t, w) in self.texel.iter().zip(&self.weight) {
            for ch in 0..3 {
                grad_texels[t * 3 + ch] += w * grad_rgb[ch];
            }
        }
    }
}

/// Texel center direction, the inverse of the lookup above.
pub fn texel_direction(width: usize, height: usize, col: usize, row: usize) -> Vector3<f64> {
    let lon = ((col as f64 + 0.5) / width as f64 - 0.5) * 2.0 * PI;
    let lat = (0.5 - (row as f64 + 0.5) / height as f64) * PI;
    Vector3::new(lat.cos() * lon.sin(), lat.cos() * lon.cos(), lat.sin())
}
