//! Gaussian scene container, covariance construction, and binary scene I/O.

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use nalgebra::{Matrix3, Vector3};
use std::path::Path;

pub const SCENE_MAGIC: &[u8; 4] = b"GSWM";
pub const SCENE_VERSION: u32 = 1;

/// One anisotropic 3D Gaussian.
///
/// The covariance is parameterized as `R * diag(exp(2 * log_scale)) * R^T`
/// with `R` built from the unit quaternion (w, x, y, z). `frozen` excludes
/// a primitive from optimization; it still renders and occludes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Unit quaternion, (w, x, y, z).
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
    pub frozen: bool,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn normalize_rotation(&mut self) {
        let q = &mut self.rotation;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n > 0.0 {
            for v in q.iter_mut() {
                *v /= n;
            }
        } else {
            *q = [1.0, 0.0, 0.0, 0.0];
        }
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let n = (self.rotation.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let [w, x, y, z] = if n > 0.0 {
            [
                self.rotation[0] / n,
                self.rotation[1] / n,
                self.rotation[2] / n,
                self.rotation[3] / n,
            ]
        } else {
            [1.0, 0.0, 0.0, 0.0]
        };
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

    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// `R * diag(exp(2 * log_scale)) * R^T`; symmetric positive definite for
/// finite inputs.
pub fn covariance_of(g: &GaussianPrimitive) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let d = Matrix3::from_diagonal(&Vector3::new(
        (2.0 * g.log_scale.x).exp(),
        (2.0 * g.log_scale.y).exp(),
        (2.0 * g.log_scale.z).exp(),
    ));
    let m = r * d * r.transpose();
    // Symmetrize away the last-ulp asymmetry from the triple product.
    0.5 * (m + m.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub background_color: Vector3<f64>,
}

impl GaussianScene {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            primitives,
            background_color: Vector3::zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn unfrozen_indices(&self) -> Vec<usize> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.frozen)
            .map(|(i, _)| i)
            .collect()
    }

    /// Serialized byte image; also the unit for byte-identity checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.primitives.len() * 57);
        out.extend_from_slice(SCENE_MAGIC);
        out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.primitives.len() as u32).to_le_bytes());
        for c in self.background_color.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        for p in &self.primitives {
            for v in p.center.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in p.log_scale.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in &p.rotation {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.extend_from_slice(&(p.opacity_logit as f32).to_le_bytes());
            for v in p.color.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.push(u8::from(p.frozen));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != SCENE_MAGIC {
            return Err(Error::BadMagic { expected: "GSWM" });
        }
        let version = r.u32()?;
        if version != SCENE_VERSION {
            return Err(Error::VersionMismatch {
                expected: SCENE_VERSION,
                found: version,
            });
        }
        let count = r.u32()? as usize;
        let background_color = Vector3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
        let mut primitives = Vec::with_capacity(count);
        for i in 0..count {
            let p = GaussianPrimitive {
                center: Vector3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64),
                log_scale: Vector3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64),
                rotation: [
                    r.f32()? as f64,
                    r.f32()? as f64,
                    r.f32()? as f64,
                    r.f32()? as f64,
                ],
                opacity_logit: r.f32()? as f64,
                color: Vector3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64),
                frozen: r.u8()? != 0,
            };
            if !p.is_finite() {
                return Err(Error::Validation(format!(
                    "record {i}: non-finite field"
                )));
            }
            primitives.push(p);
        }
        Ok(Self {
            primitives,
            background_color,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    pub(crate) fn axis_angle_quat(axis: [f64; 3], angle: f64) -> [f64; 4] {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
        [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
    }

    fn prim(center: [f64; 3], log_scale: [f64; 3], rotation: [f64; 4]) -> GaussianPrimitive {
        // Field values chosen exactly representable in f32 so file
        // round-trips compare bit-identical.
        GaussianPrimitive {
            center: Vector3::from(center),
            log_scale: Vector3::from(log_scale),
            rotation,
            opacity_logit: 0.25,
            color: Vector3::new(0.5, 0.25, 0.75),
            frozen: false,
        }
    }

    #[test]
    fn covariance_identity_case() {
        let g = prim([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        let c = covariance_of(&g);
        assert!((c - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn covariance_axis_aligned_case() {
        let g = prim([0.0; 3], [2f64.ln(), 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
        let c = covariance_of(&g);
        let expect = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((c - expect).norm() < 1e-12);
    }

    #[test]
    fn covariance_rotated_matches_direct_quaternion_oracle() {
        // 90 degrees about z sends the x-stretched ellipsoid to y-stretched.
        let q = axis_angle_quat([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let g = prim([0.0; 3], [2f64.ln(), 0.0, 0.0], q);
        let c = covariance_of(&g);
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((c - expect).norm() < 1e-9, "{c}");

        // Independent oracle: build R by rotating basis vectors and multiply.
        let r = g.rotation_matrix();
        let d = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        let oracle = r * d * r.transpose();
        assert!((c - oracle).norm() < 1e-9);
    }

    #[test]
    fn covariance_is_symmetric_and_positive_definite() {
        let mut rng = stream(3, &[0]);
        for _ in 0..50 {
            let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
            let mut g = prim(
                [rng.normal(), rng.normal(), rng.normal()],
                [
                    rng.uniform(-2.0, 1.0),
                    rng.uniform(-2.0, 1.0),
                    rng.uniform(-2.0, 1.0),
                ],
                q,
            );
            g.normalize_rotation();
            let c = covariance_of(&g);
            assert!((c - c.transpose()).norm() < 1e-7);
            let eig = c.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
        }
    }

    #[test]
    fn covariance_eigenvalues_equal_exp_two_log_scale() {
        let mut rng = stream(4, &[0]);
        for _ in 0..25 {
            let mut g = prim(
                [0.0; 3],
                [
                    rng.uniform(-1.5, 1.0),
                    rng.uniform(-1.5, 1.0),
                    rng.uniform(-1.5, 1.0),
                ],
                [rng.normal(), rng.normal(), rng.normal(), rng.normal()],
            );
            g.normalize_rotation();
            let mut expect: Vec<f64> = g
                .log_scale
                .iter()
                .map(|s| (2.0 * s).exp())
                .collect();
            let mut got: Vec<f64> = covariance_of(&g)
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .collect();
            expect.sort_by(f64::total_cmp);
            got.sort_by(f64::total_cmp);
            for (e, g) in expect.iter().zip(&got) {
                assert!((e - g).abs() < 1e-6 * e.max(1.0), "{expect:?} vs {got:?}");
            }
        }
    }

    #[test]
    fn scene_roundtrip_identical() {
        let mut rng = stream(5, &[0]);
        let prims: Vec<GaussianPrimitive> = (0..20)
            .map(|i| {
                let mut p = prim(
                    [
                        rng.normal() as f32 as f64,
                        rng.normal() as f32 as f64,
                        rng.normal() as f32 as f64,
                    ],
                    [
                        rng.uniform(-2.0, 0.0) as f32 as f64,
                        rng.uniform(-2.0, 0.0) as f32 as f64,
                        rng.uniform(-2.0, 0.0) as f32 as f64,
                    ],
                    [1.0, 0.0, 0.0, 0.0],
                );
                p.frozen = i % 3 == 0;
                p.opacity_logit = rng.normal() as f32 as f64;
                p
            })
            .collect();
        let mut scene = GaussianScene::new(prims);
        scene.background_color = Vector3::new(0.25, 0.5, 0.75);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.gswm");
        scene.save(&p).unwrap();
        let back = GaussianScene::load(&p).unwrap();
        assert_eq!(scene, back);
        // Frozen partition preserved.
        assert_eq!(scene.unfrozen_indices(), back.unfrozen_indices());
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let scene = GaussianScene::new(vec![]);
        let mut bytes = scene.to_bytes();
        bytes[0] = b'X';
        match GaussianScene::from_bytes(&bytes) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_version_error() {
        let scene = GaussianScene::new(vec![]);
        let mut bytes = scene.to_bytes();
        bytes[4] = 9;
        match GaussianScene::from_bytes(&bytes) {
            Err(Error::VersionMismatch { found: 9, .. }) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_record_is_truncation_error() {
        let scene = GaussianScene::new(vec![prim([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0, 0.0])]);
        let bytes = scene.to_bytes();
        match GaussianScene::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Truncated(_)) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn nan_center_is_validation_error_naming_record() {
        let good = prim([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        let mut bad = good.clone();
        bad.center.x = f64::NAN;
        let scene = GaussianScene::new(vec![good, bad]);
        match GaussianScene::from_bytes(&scene.to_bytes()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("record 1"), "{msg}"),
            other => panic!("expected Validation, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn roundtrip_bit_faithful(
            cx in -100f32..100.0, cy in -100f32..100.0, cz in -100f32..100.0,
            s0 in -4f32..2.0, s1 in -4f32..2.0, s2 in -4f32..2.0,
            op in -8f32..8.0, frozen in proptest::bool::ANY,
        ) {
            let mut p = prim(
                [cx as f64, cy as f64, cz as f64],
                [s0 as f64, s1 as f64, s2 as f64],
                [1.0, 0.0, 0.0, 0.0],
            );
            p.opacity_logit = op as f64;
            p.frozen = frozen;
            let scene = GaussianScene::new(vec![p]);
            let back = GaussianScene::from_bytes(&scene.to_bytes()).unwrap();
            prop_assert_eq!(scene.to_bytes(), back.to_bytes());
            prop_assert_eq!(scene, back);
        }
    }
}
