//! EWA projection of deformed 3D Gaussians to screen-space splats.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::deform::{DeformedGaussian, DeformedGrad};
use crate::math::{sh_basis, sh_basis_backward, softmax, softmax_backward};
use crate::types::{Camera, Gaussian};

/// Added to the diagonal of every projected covariance (pixels²).
pub const COV2D_EPS: f64 = 0.3;
/// Splats are evaluated out to this many standard deviations.
pub const SIGMA_EXTENT: f64 = 3.0;
/// Slack on screen-space bounds so binning never drops a pixel the
/// per-pixel cutoff would keep.
pub const BOUND_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    /// Upper triangle `[a, b, c]` of `[[a, b], [b, c]]`.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub sem_prob: Vec<f64>,
    pub opacity: f64,
    pub source_idx: usize,
}

impl Splat2D {
    /// Inverse covariance, upper triangle.
    pub fn conic(&self) -> [f64; 3] {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }

    /// Axis-aligned bounds `[xmin, xmax, ymin, ymax]` of the cutoff ellipse.
    pub fn bounds(&self) -> [f64; 4] {
        let rx = SIGMA_EXTENT * self.cov2d[0].sqrt() + BOUND_SLACK;
        let ry = SIGMA_EXTENT * self.cov2d[2].sqrt() + BOUND_SLACK;
        [self.mean2d.x - rx, self.mean2d.x + rx, self.mean2d.y - ry, self.mean2d.y + ry]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2DGrad {
    pub mean2d: Vector2<f64>,
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub sem_prob: Vec<f64>,
    pub opacity: f64,
}

impl Splat2DGrad {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            mean2d: Vector2::zeros(),
            cov2d: [0.0; 3],
            depth: 0.0,
            color: [0.0; 3],
            sem_prob: vec![0.0; num_classes],
            opacity: 0.0,
        }
    }

    pub fn add_assign(&mut self, o: &Splat2DGrad) {
        self.mean2d += o.mean2d;
        for k in 0..3 {
            self.cov2d[k] += o.cov2d[k];
            self.color[k] += o.color[k];
        }
        self.depth += o.depth;
        for (a, b) in self.sem_prob.iter_mut().zip(&o.sem_prob) {
            *a += b;
        }
        self.opacity += o.opacity;
    }
}

fn view_dir(mu: &Vector3<f64>, cam: &Camera) -> (Vector3<f64>, f64) {
    let v = mu - cam.center();
    let n = v.norm();
    (v / n, n)
}

fn jacobian(p: &Vector3<f64>, cam: &Camera) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    )
}

/// Projects one Gaussian. Returns `None` when it is outside the depth range
/// or its cutoff ellipse misses the image.
pub fn project(d: &DeformedGaussian, src: &Gaussian, cam: &Camera, sh_degree: usize) -> Option<Splat2D> {
    let p = cam.to_camera(&d.mu_t);
    if !(p.z > cam.near && p.z < cam.far) {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    let t = jacobian(&p, cam) * cam.rotation;
    let c = t * d.cov_t * t.transpose();
    let cov2d = [c[(0, 0)] + COV2D_EPS, 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)] + COV2D_EPS];

    let color = if sh_degree == 0 {
        [src.color[0], src.color[1], src.color[2]]
    } else {
        let (dir, _) = view_dir(&d.mu_t, cam);
        let basis = sh_basis(sh_degree, &dir);
        let mut rgb = [0.0; 3];
        for (b, w) in basis.iter().enumerate() {
            for ch in 0..3 {
                rgb[ch] += w * src.color[3 * b + ch];
            }
        }
        rgb
    };

    let splat = Splat2D {
        mean2d,
        cov2d,
        depth: p.z,
        color,
        sem_prob: softmax(&src.sem_logits),
        opacity: d.alpha_t,
        source_idx: d.source_idx,
    };
    let [x0, x1, y0, y1] = splat.bounds();
    if x1 < 0.0 || x0 > (cam.width - 1) as f64 || y1 < 0.0 || y0 > (cam.height - 1) as f64 {
        return None;
    }
    Some(splat)
}

/// Gradients of one projection, split by destination.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectGrad {
    pub deformed: DeformedGrad,
    pub color: Vec<f64>,
    pub sem_logits: Vec<f64>,
}

pub fn project_backward(
    d: &DeformedGaussian,
    src: &Gaussian,
    cam: &Camera,
    sh_degree: usize,
    g: &Splat2DGrad,
) -> ProjectGrad {
    let w = cam.rotation;
    let p = cam.to_camera(&d.mu_t);
    let (x, y, z) = (p.x, p.y, p.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let j = jacobian(&p, cam);
    let t = j * w;

    let g2 = Matrix2::new(g.cov2d[0], 0.5 * g.cov2d[1], 0.5 * g.cov2d[1], g.cov2d[2]);
    let g_sigma: Matrix3<f64> = t.transpose() * g2 * t;
    let g_t = 2.0 * g2 * t * d.cov_t;
    let g_j = g_t * w.transpose();

    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_p = Vector3::new(
        g.mean2d.x * fx / z,
        g.mean2d.y * fy / z,
        -g.mean2d.x * fx * x / z2 - g.mean2d.y * fy * y / z2 + g.depth,
    );
    g_p.x += g_j[(0, 2)] * (-fx / z2);
    g_p.y += g_j[(1, 2)] * (-fy / z2);
    g_p.z += g_j[(0, 0)] * (-fx / z2)
        + g_j[(0, 2)] * (2.0 * fx * x / z3)
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(1, 2)] * (2.0 * fy * y / z3);
    let mut g_mu = w.transpose() * g_p;

    let ncoef = src.color.len() / 3;
    let mut g_color = vec![0.0; src.color.len()];
    if sh_degree == 0 {
        g_color[..3].copy_from_slice(&g.color);
    } else {
        let (dir, len) = view_dir(&d.mu_t, cam);
        let basis = sh_basis(sh_degree, &dir);
        let mut g_basis = vec![0.0; ncoef];
        for b in 0..ncoef {
            for ch in 0..3 {
                g_color[3 * b + ch] = basis[b] * g.color[ch];
                g_basis[b] += src.color[3 * b + ch] * g.color[ch];
            }
        }
        let g_dir = sh_basis_backward(sh_degree, &g_basis);
        g_mu += (g_dir - dir * dir.dot(&g_dir)) / len;
    }

    ProjectGrad {
        deformed: DeformedGrad {
            mu_t: g_mu,
            alpha_t: g.opacity,
            cov_t: g_sigma,
            ..Default::default()
        },
        color: g_color,
        sem_logits: softmax_backward(&softmax(&src.sem_logits), &g.sem_prob),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::covariance;
    use crate::math::IDENTITY_QUAT;

    pub(crate) fn camera() -> Camera {
        Camera {
            fx: 50.0,
            fy: 55.0,
            cx: 32.0,
            cy: 30.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width: 64,
            height: 64,
            near: 0.1,
            far: 100.0,
        }
    }

    fn gaussian(mu: Vector3<f64>, sigma: f64) -> (DeformedGaussian, Gaussian) {
        let scale = Vector3::repeat(sigma);
        let src = Gaussian {
            mu,
            rot: IDENTITY_QUAT,
            scale,
            opacity: 0.7,
            color: vec![0.2, 0.4, 0.6],
            sem_logits: vec![0.0; 6],
            time_embed: None,
        };
        let d = DeformedGaussian {
            mu_t: mu,
            alpha_t: 0.7,
            rot_t: IDENTITY_QUAT,
            scale_t: scale,
            cov_t: covariance(&IDENTITY_QUAT, &scale),
            source_idx: 0,
        };
        (d, src)
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        let cam = camera();
        let (d, s) = gaussian(Vector3::new(0.0, 0.0, 5.0), 0.1);
        let sp = project(&d, &s, &cam, 0).unwrap();
        assert_eq!(sp.mean2d, Vector2::new(32.0, 30.0));
        assert_eq!(sp.depth, 5.0);
        let sum: f64 = sp.sem_prob.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let cam = camera();
        let (sigma, depth) = (0.2, 4.0);
        let (d, s) = gaussian(Vector3::new(0.0, 0.0, depth), sigma);
        let sp = project(&d, &s, &cam, 0).unwrap();
        let want_a = (cam.fx * sigma / depth).powi(2) + COV2D_EPS;
        let want_c = (cam.fy * sigma / depth).powi(2) + COV2D_EPS;
        assert!((sp.cov2d[0] - want_a).abs() < 1e-12);
        assert!(sp.cov2d[1].abs() < 1e-12);
        assert!((sp.cov2d[2] - want_c).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_and_offscreen_are_culled() {
        let cam = camera();
        let (d, s) = gaussian(Vector3::new(0.0, 0.0, -2.0), 0.1);
        assert!(project(&d, &s, &cam, 0).is_none());
        let (d, s) = gaussian(Vector3::new(50.0, 0.0, 2.0), 0.01);
        assert!(project(&d, &s, &cam, 0).is_none());
        let (d, s) = gaussian(Vector3::new(0.0, 0.0, 150.0), 0.01);
        assert!(project(&d, &s, &cam, 0).is_none());
    }
}
