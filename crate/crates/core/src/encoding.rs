//! Sinusoidal lifting of scalars and the layout of the deformation MLP input.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[sin(2⁰πt), cos(2⁰πt), …, sin(2^(L-1)πt), cos(2^(L-1)πt)]`.
pub fn positional_encode(t: f64, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands);
    for k in 0..bands {
        let w = (1u64 << k) as f64 * PI;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Derivative of `positional_encode` with respect to its scalar argument,
/// contracted with the upstream gradient.
pub fn positional_encode_backward(t: f64, bands: usize, grad: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..bands {
        let w = (1u64 << k) as f64 * PI;
        acc += grad[2 * k] * w * (w * t).cos() - grad[2 * k + 1] * w * (w * t).sin();
    }
    acc
}

/// Which features are concatenated into the MLP input, in order:
/// raw μ, γ(μ) per axis (if `encode_mu`), raw t (if `raw_t`), γ(t), e.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputLayout {
    pub bands: usize,
    pub embed_dim: usize,
    pub encode_mu: bool,
    pub raw_t: bool,
}

impl Default for InputLayout {
    fn default() -> Self {
        Self {
            bands: 8,
            embed_dim: 8,
            encode_mu: false,
            raw_t: true,
        }
    }
}

impl InputLayout {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::config("positional encoding needs at least one band"));
        }
        if self.bands > 30 {
            return Err(Error::config("positional encoding band count too large"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        3 + if self.encode_mu { 3 * 2 * self.bands } else { 0 }
            + usize::from(self.raw_t)
            + 2 * self.bands
            + self.embed_dim
    }

    fn embed_offset(&self) -> usize {
        self.input_dim() - self.embed_dim
    }

    /// Assembles the feature vector for one Gaussian at time `t`. A missing
    /// embedding is treated as zeros.
    pub fn build(&self, mu: &Vector3<f64>, t: f64, embed: Option<&[f64]>) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.input_dim());
        h.extend_from_slice(mu.as_slice());
        if self.encode_mu {
            for axis in 0..3 {
                h.extend(positional_encode(mu[axis], self.bands));
            }
        }
        if self.raw_t {
            h.push(t);
        }
        h.extend(positional_encode(t, self.bands));
        match embed {
            Some(e) => h.extend_from_slice(&e[..self.embed_dim]),
            None => h.extend(std::iter::repeat(0.0).take(self.embed_dim)),
        }
        h
    }

    /// Splits an input gradient into (dμ, de).
    pub fn backward(&self, mu: &Vector3<f64>, grad_h: &[f64]) -> (Vector3<f64>, Vec<f64>) {
        let mut g_mu = Vector3::new(grad_h[0], grad_h[1], grad_h[2]);
        if self.encode_mu {
            let span = 2 * self.bands;
            for axis in 0..3 {
                let start = 3 + axis * span;
                g_mu[axis] +=
                    positional_encode_backward(mu[axis], self.bands, &grad_h[start..start + span]);
            }
        }
        let off = self.embed_offset();
        (g_mu, grad_h[off..off + self.embed_dim].to_vec())
    }
}
