//! Image quality metrics: MSE on the 0-255 scale, PSNR, and Gaussian-window
//! SSIM.

use crate::error::Result;
use crate::image::ImageBuffer;

/// Mean squared error on values scaled to 0..255.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.require_same_shape(b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| {
            let d = (x - y) * 255.0;
            d * d
        })
        .sum();
    Ok(sum / a.pixels.len() as f64)
}

pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(255^2 / mse)`, capped for near-identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        return PSNR_CAP;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window_weights() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -r..=r {
        for x in -r..=r {
            w.push((-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Mean SSIM over valid 11x11 windows, averaged across RGB channels, with
/// unit data range. Images smaller than the window fall back to one global
/// uniform window.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.require_same_shape(b)?;
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let (w, h) = (a.width, a.height);

    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        // Single window over everything, uniform weights.
        let mut total = 0.0;
        for ch in 0..3 {
            let xs: Vec<f64> = a.pixels.iter().skip(ch).step_by(3).copied().collect();
            let ys: Vec<f64> = b.pixels.iter().skip(ch).step_by(3).copied().collect();
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
            let cov = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum::<f64>()
                / n;
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        return Ok(total / 3.0);
    }

    let weights = ssim_window_weights();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            for ch in 0..3 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut wi = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wv = weights[wi];
                        wi += 1;
                        let x = a.pixels[a.idx(cx + dx - r, cy + dy - r) + ch];
                        let y = b.pixels[b.idx(cx + dx - r, cy + dy - r) + ch];
                        mx += wv * x;
                        my += wv * y;
                        sxx += wv * x * x;
                        syy += wv * y * y;
                        sxy += wv * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn identical_images_cap_psnr_and_unit_ssim() {
        let img = ImageBuffer::from_fn(32, 32, |x, y| {
            [x as f64 / 32.0, y as f64 / 32.0, 0.5]
        });
        assert_eq!(mse(&img, &img).unwrap(), 0.0);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_vs_white_closed_form() {
        let a = ImageBuffer::filled(16, 16, [0.0; 3]);
        let b = ImageBuffer::filled(16, 16, [1.0; 3]);
        let m = mse(&a, &b).unwrap();
        assert!((m - 255.0 * 255.0).abs() < 1e-9);
        assert!(psnr(&a, &b).unwrap().abs() < 1e-9);
    }

    #[test]
    fn psnr_mse_identity_holds() {
        let mut rng = stream(4, &[0]);
        let a = ImageBuffer {
            width: 24,
            height: 24,
            pixels: (0..24 * 24 * 3).map(|_| rng.uniform01()).collect(),
        };
        let b = ImageBuffer {
            width: 24,
            height: 24,
            pixels: (0..24 * 24 * 3).map(|_| rng.uniform01()).collect(),
        };
        let m = mse(&a, &b).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 10.0 * (255.0f64 * 255.0 / m).log10()).abs() < 1e-12);
    }

    /// Direct windowed-formula oracle at a few window positions.
    #[test]
    fn ssim_matches_direct_window_oracle_and_checkerboard_behavior() {
        let checker = ImageBuffer::from_fn(32, 32, |x, y| {
            let v = ((x / 2 + y / 2) % 2) as f64;
            [v, v, v]
        });
        let inverse = ImageBuffer::from_fn(32, 32, |x, y| {
            let v = 1.0 - ((x / 2 + y / 2) % 2) as f64;
            [v, v, v]
        });
        let s = ssim(&checker, &inverse).unwrap();
        // Anti-correlated structure drives SSIM strongly negative.
        assert!(s < -0.5, "ssim {s}");

        // Oracle: recompute one channel at one window center by the formula.
        let weights = ssim_window_weights();
        let (cx, cy) = (16usize, 16usize);
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut wi = 0;
        for dy in 0..11 {
            for dx in 0..11 {
                let wv = weights[wi];
                wi += 1;
                let x = checker.get(cx + dx - 5, cy + dy - 5)[0];
                let y = inverse.get(cx + dx - 5, cy + dy - 5)[0];
                mx += wv * x;
                my += wv * y;
                sxx += wv * x * x;
                syy += wv * y * y;
                sxy += wv * x * y;
            }
        }
        let c1 = 0.01f64 * 0.01;
        let c2 = 0.03f64 * 0.03;
        let oracle = (2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2)
            / ((mx * mx + my * my + c1) * (sxx - mx * mx + syy - my * my + c2));
        assert!(oracle < 0.0);
        assert!((-1.2..=1.0).contains(&oracle));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = ImageBuffer::new(8, 8);
        let b = ImageBuffer::new(9, 8);
        assert!(mse(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
