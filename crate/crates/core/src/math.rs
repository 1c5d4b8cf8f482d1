//! Small numeric helpers shared by the forward and backward passes.

use nalgebra::{Matrix3, Vector3};

/// Quaternions are stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Normalizes `q`. A zero quaternion maps to the identity.
pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n == 0.0 || !n.is_finite() {
        return IDENTITY_QUAT;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Backward of `quat_normalize`: `(I - n nᵀ) g / |q|`.
pub fn quat_normalize_backward(q: &Quat, grad_out: &Quat) -> Quat {
    let len = quat_norm(q);
    if len == 0.0 {
        return [0.0; 4];
    }
    let n = [q[0] / len, q[1] / len, q[2] / len, q[3] / len];
    let dot = n[0] * grad_out[0] + n[1] * grad_out[1] + n[2] * grad_out[2] + n[3] * grad_out[3];
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = (grad_out[k] - dot * n[k]) / len;
    }
    g
}

/// Rotation matrix of a unit quaternion. The polynomial form is used as-is,
/// so callers must normalize first.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back onto the quaternion
/// components of `quat_to_matrix`.
pub fn quat_to_matrix_backward(q: &Quat, grad_r: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let g = grad_r;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of softmax with respect to its logits, given the output `p`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Pairwise (tree) summation in a fixed order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Real spherical-harmonic basis for the given degree (0 or 1), evaluated at
/// a unit direction. Degree 0 uses a unit constant so the coefficients are
/// plain RGB.
pub fn sh_basis(degree: usize, dir: &Vector3<f64>) -> Vec<f64> {
    let mut b = vec![1.0];
    if degree >= 1 {
        b.push(-SH_C1 * dir.y);
        b.push(SH_C1 * dir.z);
        b.push(-SH_C1 * dir.x);
    }
    b
}

/// Gradient of the degree-1 basis with respect to the direction, contracted
/// with per-basis upstream gradients.
pub fn sh_basis_backward(degree: usize, grad_basis: &[f64]) -> Vector3<f64> {
    if degree == 0 {
        return Vector3::zeros();
    }
    Vector3::new(
        -SH_C1 * grad_basis[3],
        -SH_C1 * grad_basis[1],
        SH_C1 * grad_basis[2],
    )
}

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Symmetric 3×3 as a column-major helper for serialization and checks.
pub fn is_symmetric(m: &Matrix3<f64>, tol: f64) -> bool {
    (0..3).all(|i| (0..3).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_is_idempotent() {
        let q = [0.3, -1.2, 0.7, 2.0];
        let a = quat_normalize(&q);
        let b = quat_normalize(&a);
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let q = quat_normalize(&[0.4, 0.1, -0.8, 0.3]);
        let r = quat_to_matrix(&q);
        let e = r * r.transpose() - Matrix3::identity();
        assert!(e.abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = [0.4, 0.1, -0.8, 0.3];
        let g = Matrix3::new(0.3, -0.1, 0.5, 0.2, 0.9, -0.4, 0.7, 0.05, -0.6);
        let analytic = quat_to_matrix_backward(&q, &g);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fp = quat_to_matrix(&qp).component_mul(&g).sum();
            let fm = quat_to_matrix(&qm).component_mul(&g).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8, "k={k} fd={fd} an={}", analytic[k]);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }
}
