//! Pinhole camera, pose interpolation, and the camera text format.

use crate::error::{Error, Result};
use crate::fsutil::atomic_write_str;
use nalgebra::{Matrix3, Matrix4, Vector3};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Rigid world-to-view transform; the upper-left 3x3 block is a rotation.
    pub world_to_view: Matrix4<f64>,
    /// (fx, fy) in pixels.
    pub focal: (f64, f64),
    /// (cx, cy) in pixels.
    pub principal_point: (f64, f64),
    /// (width, height).
    pub resolution: (usize, usize),
}

impl Camera {
    /// Builds a camera looking from `eye` toward `target` with `up` hint.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: (f64, f64),
        principal_point: (f64, f64),
        resolution: (usize, usize),
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Rows of R map world axes onto camera (right, down, forward).
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -r * eye;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self {
            world_to_view: m,
            focal,
            principal_point,
            resolution,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_view.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_view.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.translation()
    }

    /// World point to view space.
    pub fn to_view(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let dev = (r.transpose() * r - Matrix3::identity()).norm();
        if dev > 1e-5 {
            return Err(Error::Validation(format!(
                "world_to_view rotation block not orthonormal (deviation {dev:.2e})"
            )));
        }
        if self.focal.0 <= 0.0 || self.focal.1 <= 0.0 {
            return Err(Error::Validation("focal must be positive".into()));
        }
        Ok(())
    }

    pub fn fov_x(&self) -> f64 {
        2.0 * (self.resolution.0 as f64 / (2.0 * self.focal.0)).atan()
    }

    pub fn fov_y(&self) -> f64 {
        2.0 * (self.resolution.1 as f64 / (2.0 * self.focal.1)).atan()
    }

    /// Angle in radians between the optical axes of two cameras.
    pub fn viewing_angle_to(&self, other: &Camera) -> f64 {
        let a = self.rotation().row(2).transpose();
        let b = other.rotation().row(2).transpose();
        a.dot(&b).clamp(-1.0, 1.0).acos()
    }
}

/// Nearest rotation matrix (polar factor) with det +1.
fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        for i in 0..3 {
            u2[(i, 2)] = -u2[(i, 2)];
        }
        r = u2 * vt;
    }
    r
}

/// Linear interpolation of camera center, pose matrix, and field of view.
///
/// The interpolated rotation block is repaired to the nearest rotation via
/// polar decomposition so the result stays rigid. Endpoints return exact
/// copies.
pub fn interpolate_cameras(a: &Camera, b: &Camera, t: f64) -> Result<Camera> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "interpolation t = {t} outside [0, 1]"
        )));
    }
    if a.resolution != b.resolution {
        return Err(Error::InvalidArgument(format!(
            "camera resolutions differ: {:?} vs {:?}",
            a.resolution, b.resolution
        )));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }

    let r_lerp = a.rotation() * (1.0 - t) + b.rotation() * t;
    let r = polar_rotation(&r_lerp);
    let center = a.center() * (1.0 - t) + b.center() * t;
    let trans = -r * center;

    let (w, h) = (a.resolution.0 as f64, a.resolution.1 as f64);
    let fov_x = a.fov_x() * (1.0 - t) + b.fov_x() * t;
    let fov_y = a.fov_y() * (1.0 - t) + b.fov_y() * t;
    let fx = w / (2.0 * (fov_x / 2.0).tan());
    let fy = h / (2.0 * (fov_y / 2.0).tan());
    let cx = a.principal_point.0 * (1.0 - t) + b.principal_point.0 * t;
    let cy = a.principal_point.1 * (1.0 - t) + b.principal_point.1 * t;

    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
    Ok(Camera {
        world_to_view: m,
        focal: (fx, fy),
        principal_point: (cx, cy),
        resolution: a.resolution,
    })
}

/// Interpolation slots between consecutive camera pairs.
///
/// Pairs are numbered 1..=n-1; pair `i` joins cameras `i-1` and `i`
/// (zero-based). For each pair, `k` interior parameters `t = j/(k+1)`,
/// `j = 1..=k`, excluding both endpoints. Total count `(n-1)*k`.
pub fn interpolation_schedule(n_cameras: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    if n_cameras < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 cameras, got {n_cameras}"
        )));
    }
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut out = Vec::with_capacity((n_cameras - 1) * k);
    for pair in 1..n_cameras {
        for j in 1..=k {
            out.push((pair, j as f64 / (k + 1) as f64));
        }
    }
    Ok(out)
}

/// Writes cameras in the text block format: per camera the keys
/// `fx fy cx cy width height` followed by `world_to_view` and 16 reals
/// row-major; blocks separated by blank lines.
pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let mut s = String::new();
    for cam in cameras {
        s.push_str(&format!("fx {}\n", cam.focal.0));
        s.push_str(&format!("fy {}\n", cam.focal.1));
        s.push_str(&format!("cx {}\n", cam.principal_point.0));
        s.push_str(&format!("cy {}\n", cam.principal_point.1));
        s.push_str(&format!("width {}\n", cam.resolution.0));
        s.push_str(&format!("height {}\n", cam.resolution.1));
        s.push_str("world_to_view\n");
        for r in 0..4 {
            let row: Vec<String> = (0..4)
                .map(|c| format!("{}", cam.world_to_view[(r, c)]))
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s.push('\n');
    }
    atomic_write_str(path, &s)
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    parse_cameras(&std::fs::read_to_string(path)?)
}

pub fn parse_cameras(text: &str) -> Result<Vec<Camera>> {
    let mut cameras = Vec::new();
    let mut tokens = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .peekable();

    while tokens.peek().is_some() {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut width = None;
        let mut height = None;
        let mut m = None;
        let mut saw_any = false;
        while let Some(&key) = tokens.peek() {
            match key {
                "fx" | "fy" | "cx" | "cy" => {
                    tokens.next();
                    let v: f64 = next_num(&mut tokens, key)?;
                    match key {
                        "fx" => fx = Some(v),
                        "fy" => fy = Some(v),
                        "cx" => cx = Some(v),
                        _ => cy = Some(v),
                    }
                    saw_any = true;
                }
                "width" | "height" => {
                    tokens.next();
                    let v: f64 = next_num(&mut tokens, key)?;
                    if key == "width" {
                        width = Some(v as usize);
                    } else {
                        height = Some(v as usize);
                    }
                    saw_any = true;
                }
                "world_to_view" => {
                    tokens.next();
                    let mut mat = Matrix4::zeros();
                    for r in 0..4 {
                        for c in 0..4 {
                            mat[(r, c)] = next_num(&mut tokens, "world_to_view")?;
                        }
                    }
                    m = Some(mat);
                    saw_any = true;
                }
                _ => {
                    if saw_any {
                        break;
                    }
                    return Err(Error::Parse(format!("unexpected token '{key}'")));
                }
            }
            if fx.is_some()
                && fy.is_some()
                && cx.is_some()
                && cy.is_some()
                && width.is_some()
                && height.is_some()
                && m.is_some()
            {
                break;
            }
        }
        let cam = Camera {
            world_to_view: m.ok_or_else(|| missing("world_to_view"))?,
            focal: (fx.ok_or_else(|| missing("fx"))?, fy.ok_or_else(|| missing("fy"))?),
            principal_point: (
                cx.ok_or_else(|| missing("cx"))?,
                cy.ok_or_else(|| missing("cy"))?,
            ),
            resolution: (
                width.ok_or_else(|| missing("width"))?,
                height.ok_or_else(|| missing("height"))?,
            ),
        };
        cam.validate()?;
        cameras.push(cam);
    }
    Ok(cameras)
}

fn missing(key: &str) -> Error {
    Error::Parse(format!("camera block missing key '{key}'"))
}

fn next_num<'a>(
    tokens: &mut impl Iterator<Item = &'a str>,
    key: &str,
) -> Result<f64> {
    let tok = tokens
        .next()
        .ok_or_else(|| Error::Parse(format!("missing value for '{key}'")))?;
    tok.parse()
        .map_err(|_| Error::Parse(format!("bad number '{tok}' for '{key}'")))
}
