//! Structural similarity over interleaved RGB buffers with an 11×11
//! Gaussian window (σ = 1.5), evaluated on fully-contained windows only.

use crate::error::{Error, Result};
use crate::math::pairwise_sum;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable window filter; output is `(h - 10) × (w - 10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let row = &src[y * w + x..y * w + x + WINDOW];
            horiz[y * ow + x] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of `filter_valid`.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut horiz = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (j, kv) in k.iter().enumerate() {
                horiz[(y + j) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = horiz[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn channel(data: &[f64], ch: usize) -> Vec<f64> {
    data.iter().skip(ch).step_by(3).copied().collect()
}

fn check(width: usize, height: usize, a: &[f64], b: &[f64]) -> Result<()> {
    if width < WINDOW || height < WINDOW {
        return Err(Error::config(format!(
            "image {width}x{height} smaller than the {WINDOW}x{WINDOW} SSIM window"
        )));
    }
    let n = width * height * 3;
    for got in [a.len(), b.len()] {
        if got != n {
            return Err(Error::Dimension { context: "ssim image", expected: n, got });
        }
    }
    Ok(())
}

/// Mean SSIM of `x` against `y` and, if requested, its gradient with
/// respect to `x`.
pub fn ssim(
    width: usize,
    height: usize,
    x: &[f64],
    y: &[f64],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check(width, height, x, y)?;
    let k = kernel();
    let windows = (width - WINDOW + 1) * (height - WINDOW + 1);
    let norm = 1.0 / (3 * windows) as f64;
    let mut sums = Vec::with_capacity(3);
    let mut grad = want_grad.then(|| vec![0.0; x.len()]);
    for ch in 0..3 {
        let xc = channel(x, ch);
        let yc = channel(y, ch);
        let xx: Vec<f64> = xc.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yc.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&xc, width, height, &k);
        let my = filter_valid(&yc, width, height, &k);
        let exx = filter_valid(&xx, width, height, &k);
        let eyy = filter_valid(&yy, width, height, &k);
        let exy = filter_valid(&xy, width, height, &k);
        let mut s = vec![0.0; windows];
        let mut d_mx = vec![0.0; windows];
        let mut d_exx = vec![0.0; windows];
        let mut d_exy = vec![0.0; windows];
        for p in 0..windows {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = exx[p] - ux * ux;
            let syy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = sxx + syy + C2;
            let v = a1 * a2 / (b1 * b2);
            s[p] = v;
            if want_grad {
                d_mx[p] = (2.0 * uy * a2 - 2.0 * uy * a1) / (b1 * b2) - v * (2.0 * ux / b1 - 2.0 * ux / b2);
                d_exx[p] = -v / b2;
                d_exy[p] = 2.0 * a1 / (b1 * b2);
            }
        }
        sums.push(pairwise_sum(&s));
        if let Some(g) = grad.as_mut() {
            let gm = filter_valid_adjoint(&d_mx, width, height, &k);
            let gxx = filter_valid_adjoint(&d_exx, width, height, &k);
            let gxy = filter_valid_adjoint(&d_exy, width, height, &k);
            for i in 0..width * height {
                g[i * 3 + ch] = norm * (gm[i] + 2.0 * xc[i] * gxx[i] + yc[i] * gxy[i]);
            }
        }
    }
    Ok((pairwise_sum(&sums) * norm, grad))
}
