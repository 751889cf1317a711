//! Software rasterizer for Gaussian scenes.
//!
//! Forward path: project each primitive to a screen-space 2D Gaussian with
//! the local affine (Jacobian) approximation of perspective, apply the 2D
//! Mip covariance floor, sort front-to-back, and alpha-composite per pixel.
//! The tiled renderer and the brute-force per-pixel reference perform the
//! same arithmetic in the same order per pixel, so they agree exactly;
//! tiling only skips splats whose support cannot touch a pixel.
//!
//! The backward path ([`render_backward`]) produces exact gradients of a
//! pixel-space objective with respect to every unfrozen primitive.

mod backward;

pub use backward::{render_backward, render_backward_seq, PrimitiveGrad, SceneGradients};

use crate::camera::Camera;
use crate::image::ImageBuffer;
use crate::parallel::map_indexed;
use crate::scene::{covariance_of, GaussianScene};
use nalgebra::{Matrix2, Vector2, Vector3};

/// Near-plane cull distance in world units.
pub const NEAR_PLANE: f64 = 0.01;

/// Effective alpha ceiling; keeps `1 - alpha` away from zero in the
/// backward pass.
pub const ALPHA_MAX: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct RasterConfig {
    /// 2D Mip filter radius tau in pixels.
    pub mip_tau: f64,
    pub tile_size: usize,
    /// Contributions with effective alpha below this are skipped.
    pub alpha_cutoff: f64,
    /// Per-pixel compositing stops once transmittance falls below this.
    pub transmittance_floor: f64,
    /// Support ellipse radius in standard deviations.
    pub gaussian_support_sigmas: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            mip_tau: 0.3,
            tile_size: 16,
            alpha_cutoff: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            gaussian_support_sigmas: 3.0,
        }
    }
}

/// A projected Gaussian ready for compositing.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    /// Mip-filtered screen covariance (pixels^2).
    pub cov2d: Matrix2<f64>,
    /// View-space z.
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Determinant-ratio normalization of the Mip filter, in (0, 1].
    pub mip_scale: f64,
    pub source_index: usize,
}

/// Projection byproducts the backward pass reuses.
#[derive(Debug, Clone)]
pub(crate) struct ProjectionState {
    /// Unfiltered screen covariance.
    pub cov2d_raw: Matrix2<f64>,
    /// View-space position.
    pub view: Vector3<f64>,
}

pub fn project_gaussian(
    g: &crate::scene::GaussianPrimitive,
    cam: &Camera,
    cfg: &RasterConfig,
) -> Option<Splat2D> {
    project_gaussian_with_state(g, cam, cfg, usize::MAX).map(|(s, _)| s)
}

pub(crate) fn project_gaussian_with_state(
    g: &crate::scene::GaussianPrimitive,
    cam: &Camera,
    cfg: &RasterConfig,
    source_index: usize,
) -> Option<(Splat2D, ProjectionState)> {
    let rot = cam.rotation();
    let view = rot * g.center + cam.translation();
    if view.z <= NEAR_PLANE {
        return None;
    }
    let (fx, fy) = cam.focal;
    let (cx, cy) = cam.principal_point;
    let invz = 1.0 / view.z;
    let mean2d = Vector2::new(fx * view.x * invz + cx, fy * view.y * invz + cy);

    let j = projection_jacobian(&view, fx, fy);
    let u = j * rot;
    let cov3d = covariance_of(g);
    let a = u * cov3d * u.transpose();
    let a = Matrix2::new(a[(0, 0)], 0.5 * (a[(0, 1)] + a[(1, 0)]), 0.5 * (a[(0, 1)] + a[(1, 0)]), a[(1, 1)]);

    let tau2 = cfg.mip_tau * cfg.mip_tau;
    let (cov2d, mip_scale) = if tau2 > 0.0 {
        let filtered = a + Matrix2::identity() * tau2;
        let det_a = a.determinant().max(0.0);
        let det_f = filtered.determinant();
        (filtered, (det_a / det_f).sqrt())
    } else {
        (a, 1.0)
    };

    // Conservative screen-rect cull on the support ellipse's bounding box.
    let s = cfg.gaussian_support_sigmas;
    let rx = s * cov2d[(0, 0)].max(0.0).sqrt();
    let ry = s * cov2d[(1, 1)].max(0.0).sqrt();
    let (w, h) = (cam.resolution.0 as f64, cam.resolution.1 as f64);
    if mean2d.x + rx < 0.0 || mean2d.x - rx > w || mean2d.y + ry < 0.0 || mean2d.y - ry > h {
        return None;
    }

    let splat = Splat2D {
        mean2d,
        cov2d,
        depth: view.z,
        opacity: g.opacity(),
        color: g.color,
        mip_scale,
        source_index,
    };
    Some((splat, ProjectionState { cov2d_raw: a, view }))
}

pub(crate) fn projection_jacobian(view: &Vector3<f64>, fx: f64, fy: f64) -> nalgebra::Matrix2x3<f64> {
    let invz = 1.0 / view.z;
    let invz2 = invz * invz;
    nalgebra::Matrix2x3::new(
        fx * invz,
        0.0,
        -fx * view.x * invz2,
        0.0,
        fy * invz,
        -fy * view.y * invz2,
    )
}

/// Projects, culls, and depth-sorts a whole scene. Ties in depth break by
/// primitive index so compositing order is deterministic.
pub(crate) fn prepare_splats(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
) -> (Vec<Splat2D>, Vec<ProjectionState>) {
    let mut splats = Vec::new();
    let mut states = Vec::new();
    for (i, g) in scene.primitives.iter().enumerate() {
        if let Some((s, st)) = project_gaussian_with_state(g, cam, cfg, i) {
            splats.push(s);
            states.push(st);
        }
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].source_index.cmp(&splats[b].source_index))
    });
    let splats_sorted: Vec<Splat2D> = order.iter().map(|&i| splats[i].clone()).collect();
    let states_sorted: Vec<ProjectionState> = order.iter().map(|&i| states[i].clone()).collect();
    (splats_sorted, states_sorted)
}

/// Per-splat, per-pixel contribution. `None` when outside the support
/// ellipse or below the alpha cutoff; identical in every render path.
#[inline]
pub(crate) fn splat_alpha_at(
    splat: &Splat2D,
    px: f64,
    py: f64,
    cfg: &RasterConfig,
) -> Option<(f64, f64)> {
    let d = Vector2::new(px - splat.mean2d.x, py - splat.mean2d.y);
    let m = splat.cov2d;
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det <= 0.0 {
        return None;
    }
    let inv_det = 1.0 / det;
    // q = d^T Sigma^-1 d
    let q = inv_det
        * (m[(1, 1)] * d.x * d.x - 2.0 * m[(0, 1)] * d.x * d.y + m[(0, 0)] * d.y * d.y);
    let s = cfg.gaussian_support_sigmas;
    if q > s * s {
        return None;
    }
    let g = (-0.5 * q).exp();
    let alpha = (splat.opacity * splat.mip_scale * g).min(ALPHA_MAX);
    if alpha < cfg.alpha_cutoff {
        return None;
    }
    Some((alpha, g))
}

#[inline]
pub(crate) fn composite_pixel(
    splats: &[Splat2D],
    indices: Option<&[u32]>,
    px: f64,
    py: f64,
    background: &Vector3<f64>,
    cfg: &RasterConfig,
) -> Vector3<f64> {
    let mut color = Vector3::zeros();
    let mut transmittance = 1.0;
    let n = indices.map_or(splats.len(), |ix| ix.len());
    for k in 0..n {
        let splat = match indices {
            Some(ix) => &splats[ix[k] as usize],
            None => &splats[k],
        };
        if let Some((alpha, _)) = splat_alpha_at(splat, px, py, cfg) {
            color += splat.color * (transmittance * alpha);
            transmittance *= 1.0 - alpha;
            if transmittance < cfg.transmittance_floor {
                break;
            }
        }
    }
    color + background * transmittance
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    /// Splat indices per tile, in global depth order.
    pub bins: Vec<Vec<u32>>,
}

pub(crate) fn bin_splats(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> TileGrid {
    let ts = cfg.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    let s = cfg.gaussian_support_sigmas;
    for (k, splat) in splats.iter().enumerate() {
        let rx = s * splat.cov2d[(0, 0)].max(0.0).sqrt();
        let ry = s * splat.cov2d[(1, 1)].max(0.0).sqrt();
        let x0 = ((splat.mean2d.x - rx).floor().max(0.0) as usize).min(width.saturating_sub(1)) / ts;
        let x1 = ((splat.mean2d.x + rx).ceil().max(0.0) as usize).min(width.saturating_sub(1)) / ts;
        let y0 = ((splat.mean2d.y - ry).floor().max(0.0) as usize).min(height.saturating_sub(1)) / ts;
        let y1 = ((splat.mean2d.y + ry).ceil().max(0.0) as usize).min(height.saturating_sub(1)) / ts;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    TileGrid {
        tiles_x,
        tiles_y,
        tile_size: ts,
        bins,
    }
}

/// Tiled, depth-ordered alpha compositing of the scene through `cam`.
pub fn render(scene: &GaussianScene, cam: &Camera, cfg: &RasterConfig) -> ImageBuffer {
    render_impl(scene, cam, cfg, crate::parallel::parallel_enabled())
}

/// Sequential variant of [`render`]; identical output, used by benchmarks
/// and determinism checks.
pub fn render_seq(scene: &GaussianScene, cam: &Camera, cfg: &RasterConfig) -> ImageBuffer {
    render_impl(scene, cam, cfg, false)
}

fn render_impl(scene: &GaussianScene, cam: &Camera, cfg: &RasterConfig, parallel: bool) -> ImageBuffer {
    let (width, height) = cam.resolution;
    let (splats, _) = prepare_splats(scene, cam, cfg);
    let grid = bin_splats(&splats, width, height, cfg);
    let bg = scene.background_color;

    let tiles = map_indexed(grid.bins.len(), parallel, |tile| {
        let tx = tile % grid.tiles_x;
        let ty = tile / grid.tiles_x;
        let x0 = tx * grid.tile_size;
        let y0 = ty * grid.tile_size;
        let x1 = (x0 + grid.tile_size).min(width);
        let y1 = (y0 + grid.tile_size).min(height);
        let bin = &grid.bins[tile];
        let mut block = vec![0.0f64; (x1 - x0) * (y1 - y0) * 3];
        for y in y0..y1 {
            for x in x0..x1 {
                let c = composite_pixel(
                    &splats,
                    Some(bin),
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    &bg,
                    cfg,
                );
                let o = ((y - y0) * (x1 - x0) + (x - x0)) * 3;
                block[o] = c.x;
                block[o + 1] = c.y;
                block[o + 2] = c.z;
            }
        }
        block
    });

    let mut img = ImageBuffer::new(width, height);
    for (tile, block) in tiles.iter().enumerate() {
        let tx = tile % grid.tiles_x;
        let ty = tile / grid.tiles_x;
        let x0 = tx * grid.tile_size;
        let y0 = ty * grid.tile_size;
        let x1 = (x0 + grid.tile_size).min(width);
        let y1 = (y0 + grid.tile_size).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let o = ((y - y0) * (x1 - x0) + (x - x0)) * 3;
                img.set(x, y, [block[o], block[o + 1], block[o + 2]]);
            }
        }
    }
    img
}

/// Brute-force per-pixel reference renderer: every pixel visits every
/// projected splat in depth order, no tiling. The arithmetic per pixel is
/// identical to [`render`]; this is the oracle the tiled path is checked
/// against.
pub fn render_reference(scene: &GaussianScene, cam: &Camera, cfg: &RasterConfig) -> ImageBuffer {
    let (width, height) = cam.resolution;
    let (splats, _) = prepare_splats(scene, cam, cfg);
    let bg = scene.background_color;
    let mut img = ImageBuffer::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let c = composite_pixel(&splats, None, x as f64 + 0.5, y as f64 + 0.5, &bg, cfg);
            img.set(x, y, [c.x, c.y, c.z]);
        }
    }
    img
}

/// Deterministic test scenes shared by unit, integration, and bench code.
pub fn random_scene(n: usize, seed: u64) -> (GaussianScene, Camera) {
    let mut rng = crate::rng::stream(seed, &[0x5ce]);
    let mut prims = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = crate::scene::GaussianPrimitive {
            center: Vector3::new(
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
            ),
            log_scale: Vector3::new(
                rng.uniform(-3.2, -1.6),
                rng.uniform(-3.2, -1.6),
                rng.uniform(-3.2, -1.6),
            ),
            rotation: [rng.normal(), rng.normal(), rng.normal(), rng.normal()],
            opacity_logit: rng.uniform(-1.5, 1.5),
            color: Vector3::new(rng.uniform01(), rng.uniform01(), rng.uniform01()),
            frozen: false,
        };
        p.normalize_rotation();
        prims.push(p);
    }
    let mut scene = GaussianScene::new(prims);
    scene.background_color = Vector3::new(0.1, 0.12, 0.15);
    let cam = Camera::look_at(
        Vector3::new(0.4, -0.3, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        (70.0, 70.0),
        (32.0, 32.0),
        (64, 64),
    );
    (scene, cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{logit, GaussianPrimitive};

    fn on_axis_setup(s: f64, d: f64, f: f64, tau: f64) -> (GaussianPrimitive, Camera, RasterConfig) {
        let g = GaussianPrimitive {
            center: Vector3::new(0.0, 0.0, d),
            log_scale: Vector3::new(s.ln(), s.ln(), s.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: Vector3::new(1.0, 1.0, 1.0),
            frozen: false,
        };
        // Identity pose: camera at origin looking down +z.
        let cam = Camera {
            world_to_view: nalgebra::Matrix4::identity(),
            focal: (f, f),
            principal_point: (32.0, 32.0),
            resolution: (64, 64),
        };
        let cfg = RasterConfig {
            mip_tau: tau,
            ..RasterConfig::default()
        };
        (g, cam, cfg)
    }

    #[test]
    fn on_axis_isotropic_projection_matches_formula() {
        let (s, d, f, tau) = (0.05, 2.0, 64.0, 0.3);
        let (g, cam, cfg) = on_axis_setup(s, d, f, tau);
        let splat = project_gaussian(&g, &cam, &cfg).unwrap();
        let expect = (f * s / d) * (f * s / d) + tau * tau;
        assert!((splat.cov2d[(0, 0)] - expect).abs() < 1e-9);
        assert!((splat.cov2d[(1, 1)] - expect).abs() < 1e-9);
        assert!(splat.cov2d[(0, 1)].abs() < 1e-9);
        assert!((splat.depth - d).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let (g, cam, cfg) = on_axis_setup(0.05, -1.0, 64.0, 0.3);
        assert!(project_gaussian(&g, &cam, &cfg).is_none());
    }

    #[test]
    fn zero_tau_means_unfiltered_and_unit_mip_scale() {
        let (s, d, f) = (0.05, 2.0, 64.0);
        let (g, cam, cfg) = on_axis_setup(s, d, f, 0.0);
        let splat = project_gaussian(&g, &cam, &cfg).unwrap();
        assert_eq!(splat.mip_scale, 1.0);
        let expect = (f * s / d) * (f * s / d);
        assert!((splat.cov2d[(0, 0)] - expect).abs() < 1e-9);
    }

    #[test]
    fn mip_scale_never_exceeds_one() {
        let (scene, cam) = random_scene(60, 9);
        let cfg = RasterConfig::default();
        for (i, g) in scene.primitives.iter().enumerate() {
            if let Some(s) = project_gaussian(g, &cam, &cfg) {
                assert!(s.mip_scale <= 1.0 + 1e-12, "splat {i}: {}", s.mip_scale);
                assert!(s.mip_scale > 0.0);
            }
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let mut scene = GaussianScene::new(vec![]);
        scene.background_color = Vector3::new(0.2, 0.4, 0.6);
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            (64.0, 64.0),
            (32.0, 32.0),
            (64, 64),
        );
        let img = render(&scene, &cam, &RasterConfig::default());
        for p in img.pixels.chunks_exact(3) {
            assert_eq!(p, [0.2, 0.4, 0.6]);
        }
    }

    #[test]
    fn single_splat_peak_color() {
        // Opaque splat centered exactly on a pixel center.
        let mut g = GaussianPrimitive {
            center: Vector3::new(0.0, 0.0, 2.0),
            log_scale: Vector3::new(-2.5, -2.5, -2.5),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(0.95),
            color: Vector3::new(0.9, 0.1, 0.3),
            frozen: false,
        };
        g.normalize_rotation();
        let scene = GaussianScene::new(vec![g.clone()]);
        let cam = Camera {
            world_to_view: nalgebra::Matrix4::identity(),
            focal: (64.0, 64.0),
            principal_point: (32.5, 32.5),
            resolution: (64, 64),
        };
        let cfg = RasterConfig::default();
        let splat = project_gaussian(&g, &cam, &cfg).unwrap();
        // Peak effective alpha at the exact center pixel.
        let peak_alpha = (0.95 * splat.mip_scale).min(ALPHA_MAX);
        let img = render(&scene, &cam, &cfg);
        let got = img.get(32, 32);
        let expect = [0.9 * peak_alpha, 0.1 * peak_alpha, 0.3 * peak_alpha];
        for (a, b) in got.iter().zip(expect) {
            assert!(
                (a - b).abs() <= cfg.alpha_cutoff,
                "got {got:?}, expected {expect:?}"
            );
        }
        let reference = render_reference(&scene, &cam, &cfg);
        assert_eq!(img.pixels, reference.pixels);
    }

    #[test]
    fn front_opaque_splat_hides_back_splat() {
        let front = GaussianPrimitive {
            center: Vector3::new(0.0, 0.0, 1.5),
            log_scale: Vector3::new(-2.0, -2.0, -2.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 12.0, // effectively opaque, alpha clamps at 0.999
            color: Vector3::new(1.0, 0.0, 0.0),
            frozen: false,
        };
        let back = GaussianPrimitive {
            color: Vector3::new(0.0, 1.0, 0.0),
            center: Vector3::new(0.0, 0.0, 3.0),
            ..front.clone()
        };
        let scene = GaussianScene::new(vec![back, front]); // order in scene is back-first
        let cam = Camera {
            world_to_view: nalgebra::Matrix4::identity(),
            focal: (64.0, 64.0),
            principal_point: (32.5, 32.5),
            resolution: (64, 64),
        };
        let cfg = RasterConfig {
            mip_tau: 0.0,
            ..RasterConfig::default()
        };
        let img = render(&scene, &cam, &cfg);
        let center = img.get(32, 32);
        // Front (red) contributes 0.999, green at most 0.001.
        assert!(center[0] > 0.99);
        assert!(center[1] < 2e-3);
        let reference = render_reference(&scene, &cam, &cfg);
        assert_eq!(img.pixels, reference.pixels);
    }

    #[test]
    fn tiled_matches_reference_on_random_scenes() {
        for seed in 0..5 {
            let (scene, cam) = random_scene(150, seed);
            let cfg = RasterConfig::default();
            let tiled = render(&scene, &cam, &cfg);
            let reference = render_reference(&scene, &cam, &cfg);
            let max_diff = tiled
                .pixels
                .iter()
                .zip(&reference.pixels)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= 1e-5, "seed {seed}: max diff {max_diff}");
        }
    }

    #[test]
    fn parallel_and_sequential_renders_are_bit_identical() {
        let (scene, cam) = random_scene(120, 42);
        let cfg = RasterConfig::default();
        let a = render(&scene, &cam, &cfg);
        let b = render_seq(&scene, &cam, &cfg);
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn rendered_values_stay_in_unit_range() {
        for seed in 0..3 {
            let (scene, cam) = random_scene(120, seed + 100);
            let img = render(&scene, &cam, &RasterConfig::default());
            assert!(img
                .pixels
                .iter()
                .all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }
}
