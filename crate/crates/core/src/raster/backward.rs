//! Analytic gradients of the rasterizer.
//!
//! `render_backward` recomputes the forward per-pixel state per tile (depth
//! order, termination point) and propagates a pixel-space cotangent through
//! compositing, the Mip filter (including the determinant-ratio scale),
//! perspective projection, and covariance construction, down to every
//! unfrozen primitive's parameters. Tile results are merged in fixed tile
//! order, so output is identical for any thread count.

use super::{
    bin_splats, prepare_splats, splat_alpha_at, ProjectionState, RasterConfig, Splat2D, ALPHA_MAX,
};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::parallel::map_indexed;
use crate::scene::{covariance_of, GaussianScene};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub d_center: Vector3<f64>,
    pub d_log_scale: Vector3<f64>,
    pub d_rotation: [f64; 4],
    pub d_opacity_logit: f64,
    pub d_color: Vector3<f64>,
}

impl PrimitiveGrad {
    pub fn is_zero(&self) -> bool {
        self.d_center == Vector3::zeros()
            && self.d_log_scale == Vector3::zeros()
            && self.d_rotation == [0.0; 4]
            && self.d_opacity_logit == 0.0
            && self.d_color == Vector3::zeros()
    }
}

/// Gradients aligned with scene primitive indices; frozen primitives hold
/// exact zeros.
#[derive(Debug, Clone)]
pub struct SceneGradients {
    pub per_primitive: Vec<PrimitiveGrad>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            per_primitive: vec![PrimitiveGrad::default(); n],
        }
    }
}

/// Per-splat screen-space gradient accumulator.
#[derive(Clone)]
struct SplatGrad2D {
    d_color: Vector3<f64>,
    d_mean2d: Vector2<f64>,
    d_cov2d: Matrix2<f64>,
    d_kappa: f64,
    d_opacity: f64,
}

impl Default for SplatGrad2D {
    fn default() -> Self {
        Self {
            d_color: Vector3::zeros(),
            d_mean2d: Vector2::zeros(),
            d_cov2d: Matrix2::zeros(),
            d_kappa: 0.0,
            d_opacity: 0.0,
        }
    }
}

struct Contribution {
    bin_pos: usize,
    alpha: f64,
    gaussian: f64,
    clamped: bool,
    t_before: f64,
}

pub fn render_backward(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
    d_pixels: &ImageBuffer,
) -> Result<SceneGradients> {
    render_backward_impl(scene, cam, cfg, d_pixels, crate::parallel::parallel_enabled())
}

/// Sequential variant with identical output.
pub fn render_backward_seq(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
    d_pixels: &ImageBuffer,
) -> Result<SceneGradients> {
    render_backward_impl(scene, cam, cfg, d_pixels, false)
}

fn render_backward_impl(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
    d_pixels: &ImageBuffer,
    parallel: bool,
) -> Result<SceneGradients> {
    let (width, height) = cam.resolution;
    if d_pixels.width != width || d_pixels.height != height {
        return Err(Error::ShapeMismatch {
            expected: format!("{width}x{height}"),
            got: format!("{}x{}", d_pixels.width, d_pixels.height),
        });
    }

    let (splats, states) = prepare_splats(scene, cam, cfg);
    let grid = bin_splats(&splats, width, height, cfg);
    let bg = scene.background_color;

    // Phase 1: per-tile screen-space gradients, one slot per bin entry.
    let tile_grads: Vec<Vec<SplatGrad2D>> = map_indexed(grid.bins.len(), parallel, |tile| {
        let tx = tile % grid.tiles_x;
        let ty = tile / grid.tiles_x;
        let x0 = tx * grid.tile_size;
        let y0 = ty * grid.tile_size;
        let x1 = (x0 + grid.tile_size).min(width);
        let y1 = (y0 + grid.tile_size).min(height);
        let bin = &grid.bins[tile];
        let mut grads = vec![SplatGrad2D::default(); bin.len()];
        let mut contribs: Vec<Contribution> = Vec::with_capacity(bin.len());

        for y in y0..y1 {
            for x in x0..x1 {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let w = Vector3::from(d_pixels.get(x, y));
                if w == Vector3::zeros() {
                    continue;
                }

                // Forward replay for this pixel.
                contribs.clear();
                let mut transmittance = 1.0;
                for (pos, &si) in bin.iter().enumerate() {
                    let splat = &splats[si as usize];
                    if let Some((alpha, gaussian)) = splat_alpha_at(splat, px, py, cfg) {
                        contribs.push(Contribution {
                            bin_pos: pos,
                            alpha,
                            gaussian,
                            clamped: alpha >= ALPHA_MAX,
                            t_before: transmittance,
                        });
                        transmittance *= 1.0 - alpha;
                        if transmittance < cfg.transmittance_floor {
                            break;
                        }
                    }
                }
                let t_end = transmittance;

                // Reverse sweep with suffix color sums.
                let mut suffix = Vector3::zeros();
                for c in contribs.iter().rev() {
                    let splat = &splats[bin[c.bin_pos] as usize];
                    let grad = &mut grads[c.bin_pos];

                    grad.d_color += w * (c.alpha * c.t_before);

                    let d_alpha = w.dot(&splat.color) * c.t_before
                        - w.dot(&(suffix + bg * t_end)) / (1.0 - c.alpha);
                    suffix += splat.color * (c.alpha * c.t_before);

                    if c.clamped {
                        continue;
                    }
                    let g = c.gaussian;
                    grad.d_opacity += d_alpha * splat.mip_scale * g;
                    grad.d_kappa += d_alpha * splat.opacity * g;
                    let d_power = d_alpha * splat.opacity * splat.mip_scale * g;

                    let d = Vector2::new(px - splat.mean2d.x, py - splat.mean2d.y);
                    let m = splat.cov2d;
                    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
                    let minv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
                    let md = minv * d;
                    grad.d_mean2d += md * d_power;
                    grad.d_cov2d += (md * md.transpose()) * (0.5 * d_power);
                }
            }
        }
        grads
    });

    // Phase 2: merge tiles in fixed order into per-splat accumulators.
    let mut splat_grads = vec![SplatGrad2D::default(); splats.len()];
    for (tile, grads) in tile_grads.into_iter().enumerate() {
        let bin = &grid.bins[tile];
        for (pos, g) in grads.into_iter().enumerate() {
            let si = bin[pos] as usize;
            let acc = &mut splat_grads[si];
            acc.d_color += g.d_color;
            acc.d_mean2d += g.d_mean2d;
            acc.d_cov2d += g.d_cov2d;
            acc.d_kappa += g.d_kappa;
            acc.d_opacity += g.d_opacity;
        }
    }

    // Phase 3: chain screen-space gradients to primitive parameters.
    let per_splat: Vec<(usize, PrimitiveGrad)> = map_indexed(splats.len(), parallel, |k| {
        let splat = &splats[k];
        let src = splat.source_index;
        if scene.primitives[src].frozen {
            return (src, PrimitiveGrad::default());
        }
        (
            src,
            chain_to_primitive(scene, cam, cfg, splat, &states[k], &splat_grads[k]),
        )
    });

    let mut out = SceneGradients::zeros(scene.len());
    for (src, g) in per_splat {
        let acc = &mut out.per_primitive[src];
        acc.d_center += g.d_center;
        acc.d_log_scale += g.d_log_scale;
        for i in 0..4 {
            acc.d_rotation[i] += g.d_rotation[i];
        }
        acc.d_opacity_logit += g.d_opacity_logit;
        acc.d_color += g.d_color;
    }
    Ok(out)
}

fn chain_to_primitive(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
    splat: &Splat2D,
    state: &ProjectionState,
    g2d: &SplatGrad2D,
) -> PrimitiveGrad {
    let prim = &scene.primitives[splat.source_index];
    let mut out = PrimitiveGrad {
        d_color: g2d.d_color,
        ..PrimitiveGrad::default()
    };

    // Opacity chain through the sigmoid.
    let op = splat.opacity;
    out.d_opacity_logit = g2d.d_opacity * op * (1.0 - op);

    // Gradient wrt the unfiltered screen covariance A. The filtered
    // covariance contributes identically (F = A + tau^2 I); the mip scale
    // adds kappa/2 (A^-1 - F^-1).
    let a = state.cov2d_raw;
    let mut d_a = g2d.d_cov2d;
    let tau2 = cfg.mip_tau * cfg.mip_tau;
    if tau2 > 0.0 && g2d.d_kappa != 0.0 {
        let det_a = a.determinant();
        if det_a > 1e-12 {
            let f = a + Matrix2::identity() * tau2;
            let a_inv = a.try_inverse().unwrap();
            let f_inv = f.try_inverse().unwrap();
            d_a += (a_inv - f_inv) * (g2d.d_kappa * splat.mip_scale * 0.5);
        }
    }
    d_a = 0.5 * (d_a + d_a.transpose());

    // A = U Sigma U^T with U = J R_cam.
    let rot_cam = cam.rotation();
    let view = state.view;
    let (fx, fy) = cam.focal;
    let j = super::projection_jacobian(&view, fx, fy);
    let u = j * rot_cam;
    let cov3d = covariance_of(prim);

    let d_sigma = u.transpose() * d_a * u;
    let d_u = (d_a + d_a.transpose()) * u * cov3d;
    let d_j = d_u * rot_cam.transpose();

    // View-space gradient from the projected mean and from J's dependence
    // on the view position.
    let invz = 1.0 / view.z;
    let invz2 = invz * invz;
    let invz3 = invz2 * invz;
    let mut d_view = Vector3::new(
        g2d.d_mean2d.x * fx * invz,
        g2d.d_mean2d.y * fy * invz,
        -(g2d.d_mean2d.x * fx * view.x + g2d.d_mean2d.y * fy * view.y) * invz2,
    );
    d_view.x += d_j[(0, 2)] * (-fx * invz2);
    d_view.y += d_j[(1, 2)] * (-fy * invz2);
    d_view.z += d_j[(0, 0)] * (-fx * invz2)
        + d_j[(0, 2)] * (2.0 * fx * view.x * invz3)
        + d_j[(1, 1)] * (-fy * invz2)
        + d_j[(1, 2)] * (2.0 * fy * view.y * invz3);
    out.d_center = rot_cam.transpose() * d_view;

    // Sigma = R D R^T with D = diag(exp(2 s)).
    let g3 = 0.5 * (d_sigma + d_sigma.transpose());
    let r = prim.rotation_matrix();
    let lambda = Vector3::new(
        (2.0 * prim.log_scale.x).exp(),
        (2.0 * prim.log_scale.y).exp(),
        (2.0 * prim.log_scale.z).exp(),
    );
    let rt_g_r = r.transpose() * g3 * r;
    out.d_log_scale = Vector3::new(
        rt_g_r[(0, 0)] * 2.0 * lambda.x,
        rt_g_r[(1, 1)] * 2.0 * lambda.y,
        rt_g_r[(2, 2)] * 2.0 * lambda.z,
    );

    let d_rot = 2.0 * g3 * r * Matrix3::from_diagonal(&lambda);
    out.d_rotation = quat_grad_from_rotation_grad(&prim.rotation, &d_rot);
    out
}

/// Chains a rotation-matrix cotangent to the raw quaternion, including the
/// normalization used when building the matrix.
fn quat_grad_from_rotation_grad(q_raw: &[f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let norm = (q_raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let q = [
        q_raw[0] / norm,
        q_raw[1] / norm,
        q_raw[2] / norm,
        q_raw[3] / norm,
    ];
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let inner = |m: &Matrix3<f64>| -> f64 { d_rot.component_mul(m).sum() };
    let d_unit = [inner(&dr_dw), inner(&dr_dx), inner(&dr_dy), inner(&dr_dz)];
    // Through q_hat = q / |q|: project out the radial component.
    let dot: f64 = d_unit.iter().zip(&q).map(|(a, b)| a * b).sum();
    [
        (d_unit[0] - dot * q[0]) / norm,
        (d_unit[1] - dot * q[1]) / norm,
        (d_unit[2] - dot * q[2]) / norm,
        (d_unit[3] - dot * q[3]) / norm,
    ]
}
