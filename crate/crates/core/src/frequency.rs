//! Nyquist-statistic carrier selection, covariance regularization, and
//! watermark-carrier densification.
//!
//! Each primitive's maximal sampling frequency is the largest `f_c / d_c`
//! over the cameras that observe it, with `d_c` the Euclidean distance from
//! the primitive center to the camera center. Primitives in the lowest
//! quartile of that statistic, seen from enough views, become carriers:
//! their covariance is widened by an isotropic term `lambda / nu_hat^2`,
//! opacity is rescaled by the determinant ratio, and fresh unfrozen children
//! are sampled from the widened distribution while everything original is
//! frozen.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write_str;
use crate::raster::NEAR_PLANE;
use crate::rng::stream;
use crate::scene::{covariance_of, logit, GaussianPrimitive, GaussianScene};
use nalgebra::{Matrix3, Vector3};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PrimitiveFrequency {
    /// Max sampling frequency over observing views; `None` when unobserved.
    pub nu_hat: Option<f64>,
    pub visible_count: usize,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct FrequencyReport {
    pub per_primitive: Vec<PrimitiveFrequency>,
    pub n_views: usize,
}

#[derive(Debug, Clone)]
pub struct RegularizeConfig {
    /// Filter strength; the added isotropic variance is `lambda / nu_hat^2`.
    pub lambda: f64,
    /// Selection percentile of the frequency statistic (nearest rank).
    pub percentile: f64,
    /// Minimum fraction of views a carrier must be visible in.
    pub min_view_fraction: f64,
    /// Children sampled per carrier.
    pub spawn_count: usize,
}

impl Default for RegularizeConfig {
    fn default() -> Self {
        Self {
            // lambda = s^2 with smoothing scale s = 0.2.
            lambda: 0.04,
            percentile: 25.0,
            min_view_fraction: 1.0 / 3.0,
            spawn_count: 1,
        }
    }
}

/// Computes the per-primitive frequency statistic over the camera set.
///
/// A camera observes a primitive when the projected center lands inside the
/// image rectangle with view depth beyond the near plane.
pub fn compute_sampling_frequencies(
    scene: &GaussianScene,
    cameras: &[Camera],
) -> Result<FrequencyReport> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("need at least one camera".into()));
    }
    let per_primitive = scene
        .primitives
        .iter()
        .map(|g| {
            let mut nu_hat: Option<f64> = None;
            let mut visible = 0usize;
            for cam in cameras {
                let v = cam.to_view(&g.center);
                if v.z <= NEAR_PLANE {
                    continue;
                }
                let u = cam.focal.0 * v.x / v.z + cam.principal_point.0;
                let w = cam.focal.1 * v.y / v.z + cam.principal_point.1;
                let (width, height) = (cam.resolution.0 as f64, cam.resolution.1 as f64);
                if u < 0.0 || u >= width || w < 0.0 || w >= height {
                    continue;
                }
                visible += 1;
                let dist = (g.center - cam.center()).norm();
                let nu = cam.focal.0 / dist;
                nu_hat = Some(nu_hat.map_or(nu, |m: f64| m.max(nu)));
            }
            PrimitiveFrequency {
                nu_hat,
                visible_count: visible,
                selected: false,
            }
        })
        .collect();
    Ok(FrequencyReport {
        per_primitive,
        n_views: cameras.len(),
    })
}

/// Nearest-rank percentile of a non-empty sorted slice.
fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Selects carrier indices: statistic at or below the percentile threshold
/// and visibility in at least `ceil(n_views * min_view_fraction)` views.
/// An empty selection is a legal outcome.
pub fn select_carriers(
    report: &FrequencyReport,
    n_views: usize,
    cfg: &RegularizeConfig,
) -> BTreeSet<usize> {
    let mut defined: Vec<f64> = report
        .per_primitive
        .iter()
        .filter_map(|p| p.nu_hat)
        .collect();
    if defined.is_empty() {
        return BTreeSet::new();
    }
    defined.sort_by(f64::total_cmp);
    let threshold = nearest_rank(&defined, cfg.percentile);
    let min_views = (n_views as f64 * cfg.min_view_fraction).ceil() as usize;
    report
        .per_primitive
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            p.nu_hat.is_some_and(|nu| nu <= threshold) && p.visible_count >= min_views
        })
        .map(|(i, _)| i)
        .collect()
}

/// Marks `selected` on a report from a carrier set.
pub fn mark_selected(report: &mut FrequencyReport, carriers: &BTreeSet<usize>) {
    for (i, p) in report.per_primitive.iter_mut().enumerate() {
        p.selected = carriers.contains(&i);
    }
}

/// CSV dump: `index,nu_hat,visible_count,selected`.
pub fn write_frequency_csv(path: &Path, report: &FrequencyReport) -> Result<()> {
    let mut s = String::from("index,nu_hat,visible_count,selected\n");
    for (i, p) in report.per_primitive.iter().enumerate() {
        let nu = p.nu_hat.map_or(String::new(), |v| format!("{v}"));
        s.push_str(&format!("{},{},{},{}\n", i, nu, p.visible_count, p.selected));
    }
    atomic_write_str(path, &s)
}

/// Widens the covariance by `lambda / nu_hat^2 * I` and rescales opacity by
/// the determinant-ratio factor `kappa = sqrt(det Sigma / det Sigma_reg)`.
///
/// Realized through the eigendecomposition: each eigenvalue gains the
/// isotropic term, log scales and rotation are rebuilt from the shifted
/// spectrum.
pub fn regularize_covariance(
    g: &GaussianPrimitive,
    nu_hat: f64,
    lambda: f64,
) -> Result<(GaussianPrimitive, f64)> {
    if nu_hat <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "nu_hat must be positive, got {nu_hat}"
        )));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok((g.clone(), 1.0));
    }
    let add = lambda / (nu_hat * nu_hat);
    let sigma = covariance_of(g);
    let eig = sigma.symmetric_eigen();

    let mut kappa_sq = 1.0;
    let mut new_log_scale = Vector3::zeros();
    for i in 0..3 {
        let old = eig.eigenvalues[i].max(0.0);
        let new = old + add;
        kappa_sq *= old / new;
        new_log_scale[i] = 0.5 * new.ln();
    }
    let kappa = kappa_sq.sqrt();

    let mut basis = eig.eigenvectors;
    if basis.determinant() < 0.0 {
        for r in 0..3 {
            basis[(r, 2)] = -basis[(r, 2)];
        }
    }
    let rotation = quat_from_rotation(&basis);

    let alpha = (g.opacity() * kappa).clamp(1e-4, 1.0 - 1e-4);
    let mut out = g.clone();
    out.log_scale = new_log_scale;
    out.rotation = rotation;
    out.opacity_logit = logit(alpha);
    Ok((out, kappa))
}

fn quat_from_rotation(r: &Matrix3<f64>) -> [f64; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let mut q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
    for v in q.iter_mut() {
        *v /= n;
    }
    q
}

#[derive(Debug, Clone)]
pub struct DensifyResult {
    pub scene: GaussianScene,
    /// Indices of the spawned (unfrozen) children in the new scene.
    pub spawned: Vec<usize>,
    /// Set when the carrier set was empty: everything is frozen and no
    /// children exist.
    pub no_carriers: bool,
}

/// Freezes every existing primitive and appends `spawn_count` children per
/// carrier, each centered on a draw from the carrier's (already
/// regularized) distribution, all other fields copied from the parent.
///
/// The sampler is keyed on `(seed, parent index, child index)`, so the
/// result is independent of iteration order.
pub fn densify(
    scene: &GaussianScene,
    carriers: &BTreeSet<usize>,
    cfg: &RegularizeConfig,
    seed: u64,
) -> DensifyResult {
    let mut out = scene.clone();
    for p in &mut out.primitives {
        p.frozen = true;
    }
    let mut spawned = Vec::with_capacity(carriers.len() * cfg.spawn_count);
    for &parent_idx in carriers {
        let parent = scene.primitives[parent_idx].clone();
        let sigma = covariance_of(&parent);
        let eig = sigma.symmetric_eigen();
        for child in 0..cfg.spawn_count {
            let mut rng = stream(seed, &[0xd6, parent_idx as u64, child as u64]);
            let z = Vector3::new(rng.normal(), rng.normal(), rng.normal());
            let mut offset = Vector3::zeros();
            for i in 0..3 {
                let col = eig.eigenvectors.column(i);
                offset += col * (eig.eigenvalues[i].max(0.0).sqrt() * z[i]);
            }
            let mut c = parent.clone();
            c.center = parent.center + offset;
            c.frozen = false;
            spawned.push(out.primitives.len());
            out.primitives.push(c);
        }
    }
    DensifyResult {
        scene: out,
        no_carriers: carriers.is_empty(),
        spawned,
    }
}
