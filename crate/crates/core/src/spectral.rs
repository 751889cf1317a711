//! Ring-band spectral analysis: FFT energy per radial frequency band and
//! per-band retention between an original and an edited image.
//!
//! The luminance plane is mean-removed (DC excluded everywhere), Fourier
//! transformed, and each bin is assigned to the low, mid, or high band by
//! its centered radius normalized to half the image diagonal. Energies use
//! the `|X|^2 / (W*H)` normalization so the three bands plus DC sum to the
//! spatial-domain energy exactly (Parseval).

use crate::error::{Error, Result};
use crate::fsutil::atomic_write_str;
use crate::image::ImageBuffer;
use crate::metrics;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct BandSpec {
    /// Low/mid boundary as a fraction of the Nyquist radius.
    pub low_cut: f64,
    /// Mid/high boundary as a fraction of the Nyquist radius.
    pub high_cut: f64,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self {
            low_cut: 1.0 / 6.0,
            high_cut: 0.5,
        }
    }
}

impl BandSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_cut > 0.0 && self.low_cut < self.high_cut && self.high_cut <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "band cuts must satisfy 0 < low < high <= 1, got {} and {}",
                self.low_cut, self.high_cut
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BandEnergies {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
    /// Residual DC energy after mean removal (numerically ~0).
    pub dc: f64,
    /// Spatial-domain energy of the mean-removed luminance plane.
    pub spatial: f64,
}

/// 2D FFT of the mean-removed luminance plane; bins summed into radial
/// bands. Every non-DC bin lands in exactly one band.
pub fn band_energy(img: &ImageBuffer, spec: &BandSpec) -> Result<BandEnergies> {
    spec.validate()?;
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let (w, h) = (img.width, img.height);
    let mut lum = img.luminance();
    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
    lum.iter_mut().for_each(|v| *v -= mean);
    let spatial: f64 = lum.iter().map(|v| v * v).sum();

    let spectrum = fft2d(&lum, w, h);

    let half_diag = (((w / 2) * (w / 2) + (h / 2) * (h / 2)) as f64).sqrt();
    let mut out = BandEnergies {
        spatial,
        ..BandEnergies::default()
    };
    let norm = 1.0 / (w * h) as f64;
    for ky in 0..h {
        for kx in 0..w {
            let e = spectrum[ky * w + kx].norm_sqr() * norm;
            if kx == 0 && ky == 0 {
                out.dc += e;
                continue;
            }
            let fx = centered(kx, w);
            let fy = centered(ky, h);
            let r = ((fx * fx + fy * fy) as f64).sqrt() / half_diag;
            if r < spec.low_cut {
                out.low += e;
            } else if r < spec.high_cut {
                out.mid += e;
            } else {
                out.high += e;
            }
        }
    }
    Ok(out)
}

fn centered(k: usize, n: usize) -> i64 {
    let k = k as i64;
    let n = n as i64;
    if k <= n / 2 {
        k
    } else {
        k - n
    }
}

fn fft2d(values: &[f64], w: usize, h: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut data: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    data
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub original: BandEnergies,
    pub edited: BandEnergies,
    pub low_retention: f64,
    pub mid_retention: f64,
    pub high_retention: f64,
    pub ssim: f64,
    pub mse: f64,
}

fn retention(edited: f64, original: f64) -> f64 {
    if original <= 0.0 {
        if edited <= 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        edited / original
    }
}

/// Per-band energy retention of `edited` against `original`, plus SSIM and
/// MSE between the two.
pub fn energy_retention(
    original: &ImageBuffer,
    edited: &ImageBuffer,
    spec: &BandSpec,
) -> Result<EnergyReport> {
    original.require_same_shape(edited)?;
    let eo = band_energy(original, spec)?;
    let ee = band_energy(edited, spec)?;
    Ok(EnergyReport {
        low_retention: retention(ee.low, eo.low),
        mid_retention: retention(ee.mid, eo.mid),
        high_retention: retention(ee.high, eo.high),
        ssim: metrics::ssim(original, edited)?,
        mse: metrics::mse(original, edited)?,
        original: eo,
        edited: ee,
    })
}

#[derive(Debug, Clone)]
pub struct FingerprintRow {
    pub attack: String,
    pub report: EnergyReport,
}

/// One retention row per attacked image, sorted by high-band retention
/// ascending (strongest low-pass behavior first).
pub fn fingerprint_report(
    original: &ImageBuffer,
    attacked: &[(String, ImageBuffer)],
    spec: &BandSpec,
) -> Result<Vec<FingerprintRow>> {
    let mut rows = Vec::with_capacity(attacked.len());
    for (name, img) in attacked {
        rows.push(FingerprintRow {
            attack: name.clone(),
            report: energy_retention(original, img, spec)?,
        });
    }
    rows.sort_by(|a, b| {
        a.report
            .high_retention
            .total_cmp(&b.report.high_retention)
            .then(a.attack.cmp(&b.attack))
    });
    Ok(rows)
}

pub fn fingerprint_csv(rows: &[FingerprintRow]) -> String {
    let mut s = String::from("attack,low_retention,mid_retention,high_retention,ssim,mse\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.attack,
            r.report.low_retention,
            r.report.mid_retention,
            r.report.high_retention,
            r.report.ssim,
            r.report.mse
        ));
    }
    s
}

pub fn write_fingerprint_csv(path: &Path, rows: &[FingerprintRow]) -> Result<()> {
    atomic_write_str(path, &fingerprint_csv(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn constant_image_has_no_band_energy() {
        let img = ImageBuffer::filled(32, 32, [0.7, 0.7, 0.7]);
        let e = band_energy(&img, &BandSpec::default()).unwrap();
        assert!(e.low.abs() < 1e-18);
        assert!(e.mid.abs() < 1e-18);
        assert!(e.high.abs() < 1e-18);
    }

    #[test]
    fn low_frequency_sinusoid_lands_in_low_band() {
        // One cycle across the image: radius 1/half_diag, far below 1/6.
        let img = ImageBuffer::from_fn(64, 64, |x, _| {
            let v = 0.5 + 0.4 * (std::f64::consts::TAU * x as f64 / 64.0).sin();
            [v, v, v]
        });
        let e = band_energy(&img, &BandSpec::default()).unwrap();
        assert!(e.low > 1e-3);
        assert!(e.mid < e.low * 1e-9);
        assert!(e.high < e.low * 1e-9);
    }

    #[test]
    fn high_frequency_checkerboard_lands_in_high_band() {
        let img = ImageBuffer::from_fn(32, 32, |x, y| {
            let v = ((x + y) % 2) as f64;
            [v, v, v]
        });
        let e = band_energy(&img, &BandSpec::default()).unwrap();
        assert!(e.high > 1e-3);
        assert!(e.low < e.high * 1e-9);
    }

    /// Direct O(N^4) DFT oracle.
    fn band_energy_naive(img: &ImageBuffer, spec: &BandSpec) -> BandEnergies {
        let (w, h) = (img.width, img.height);
        let mut lum = img.luminance();
        let mean = lum.iter().sum::<f64>() / lum.len() as f64;
        lum.iter_mut().for_each(|v| *v -= mean);
        let spatial: f64 = lum.iter().map(|v| v * v).sum();
        let half_diag = (((w / 2) * (w / 2) + (h / 2) * (h / 2)) as f64).sqrt();
        let mut out = BandEnergies {
            spatial,
            ..BandEnergies::default()
        };
        for ky in 0..h {
            for kx in 0..w {
                let mut re = 0.0;
                let mut im = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let phase = -std::f64::consts::TAU
                            * (kx as f64 * x as f64 / w as f64 + ky as f64 * y as f64 / h as f64);
                        re += lum[y * w + x] * phase.cos();
                        im += lum[y * w + x] * phase.sin();
                    }
                }
                let e = (re * re + im * im) / (w * h) as f64;
                if kx == 0 && ky == 0 {
                    out.dc += e;
                    continue;
                }
                let fx = super::centered(kx, w);
                let fy = super::centered(ky, h);
                let r = ((fx * fx + fy * fy) as f64).sqrt() / half_diag;
                if r < spec.low_cut {
                    out.low += e;
                } else if r < spec.high_cut {
                    out.mid += e;
                } else {
                    out.high += e;
                }
            }
        }
        out
    }

    #[test]
    fn fft_band_energy_matches_naive_dft_oracle() {
        let mut rng = stream(5, &[1]);
        let img = ImageBuffer {
            width: 32,
            height: 32,
            pixels: (0..32 * 32 * 3).map(|_| rng.uniform01()).collect(),
        };
        let spec = BandSpec::default();
        let fast = band_energy(&img, &spec).unwrap();
        let slow = band_energy_naive(&img, &spec);
        for (a, b) in [
            (fast.low, slow.low),
            (fast.mid, slow.mid),
            (fast.high, slow.high),
        ] {
            let rel = (a - b).abs() / b.abs().max(1e-12);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn parseval_consistency() {
        let mut rng = stream(6, &[2]);
        for (w, h) in [(32usize, 32usize), (33, 17), (40, 24)] {
            let img = ImageBuffer {
                width: w,
                height: h,
                pixels: (0..w * h * 3).map(|_| rng.uniform01()).collect(),
            };
            let e = band_energy(&img, &BandSpec::default()).unwrap();
            let freq_total = e.low + e.mid + e.high + e.dc;
            let rel = (freq_total - e.spatial).abs() / e.spatial.max(1e-12);
            assert!(rel < 1e-5, "{w}x{h}: {freq_total} vs {}", e.spatial);
        }
    }

    #[test]
    fn identity_edit_retains_everything() {
        let mut rng = stream(7, &[3]);
        let img = ImageBuffer {
            width: 24,
            height: 24,
            pixels: (0..24 * 24 * 3).map(|_| rng.uniform01()).collect(),
        };
        let r = energy_retention(&img, &img, &BandSpec::default()).unwrap();
        assert_eq!(r.low_retention, 1.0);
        assert_eq!(r.mid_retention, 1.0);
        assert_eq!(r.high_retention, 1.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn zero_edit_retains_nothing() {
        let mut rng = stream(8, &[4]);
        let img = ImageBuffer {
            width: 24,
            height: 24,
            pixels: (0..24 * 24 * 3).map(|_| rng.uniform01()).collect(),
        };
        let zero = ImageBuffer::new(24, 24);
        let r = energy_retention(&img, &zero, &BandSpec::default()).unwrap();
        assert_eq!(r.low_retention, 0.0);
        assert_eq!(r.mid_retention, 0.0);
        assert_eq!(r.high_retention, 0.0);
    }

    #[test]
    fn band_masks_partition_all_bins() {
        // Every non-DC bin belongs to exactly one band by construction of
        // the if/else chain; check totals match a per-bin count.
        let (w, h) = (20usize, 14usize);
        let spec = BandSpec::default();
        let half_diag = (((w / 2) * (w / 2) + (h / 2) * (h / 2)) as f64).sqrt();
        let mut counts = [0usize; 3];
        for ky in 0..h {
            for kx in 0..w {
                if kx == 0 && ky == 0 {
                    continue;
                }
                let fx = super::centered(kx, w);
                let fy = super::centered(ky, h);
                let r = ((fx * fx + fy * fy) as f64).sqrt() / half_diag;
                if r < spec.low_cut {
                    counts[0] += 1;
                } else if r < spec.high_cut {
                    counts[1] += 1;
                } else {
                    counts[2] += 1;
                }
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), w * h - 1);
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn single_row_fingerprint_equals_energy_retention() {
        let mut rng = stream(9, &[5]);
        let img = ImageBuffer {
            width: 24,
            height: 24,
            pixels: (0..24 * 24 * 3).map(|_| rng.uniform01()).collect(),
        };
        let edited = crate::attack::gaussian_blur(&img, 1.0, 3);
        let spec = BandSpec::default();
        let rows =
            fingerprint_report(&img, &[("blur".into(), edited.clone())], &spec).unwrap();
        let direct = energy_retention(&img, &edited, &spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].report.low_retention, direct.low_retention);
        assert_eq!(rows[0].report.high_retention, direct.high_retention);
    }
}
