//! In-process JPEG approximation: 8x8 block DCT per channel in YCbCr with
//! the standard quantization tables scaled by quality, then dequantize and
//! invert. No entropy coding and no chroma subsampling; the information
//! loss of quantization is the point. Edges pad by replication.

use crate::image::ImageBuffer;

#[rustfmt::skip]
const LUMA_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0,  24.0,  40.0,  51.0,  61.0,
    12.0, 12.0, 14.0, 19.0,  26.0,  58.0,  60.0,  55.0,
    14.0, 13.0, 16.0, 24.0,  40.0,  57.0,  69.0,  56.0,
    14.0, 17.0, 22.0, 29.0,  51.0,  87.0,  80.0,  62.0,
    18.0, 22.0, 37.0, 56.0,  68.0, 109.0, 103.0,  77.0,
    24.0, 35.0, 55.0, 64.0,  81.0, 104.0, 113.0,  92.0,
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0,
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0,  99.0,
];

#[rustfmt::skip]
const CHROMA_TABLE: [f64; 64] = [
    17.0, 18.0, 24.0, 47.0, 99.0, 99.0, 99.0, 99.0,
    18.0, 21.0, 26.0, 66.0, 99.0, 99.0, 99.0, 99.0,
    24.0, 26.0, 56.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    47.0, 66.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
];

/// Quality-scaled table per the common (Q < 50 => 5000/Q, else 200 - 2Q)
/// rule, entries clamped to [1, 255].
fn scaled_table(base: &[f64; 64], quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for i in 0..64 {
        out[i] = ((base[i] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// Orthonormal 8x8 DCT-II basis: `basis[k][n]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for k in 0..8 {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for n in 0..8 {
            b[k][n] = a * (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / 8.0).cos();
        }
    }
    b
}

fn rgb_to_ycbcr(p: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = p;
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5,
        0.5 * r - 0.418688 * g - 0.081312 * b + 0.5,
    ]
}

fn ycbcr_to_rgb(p: [f64; 3]) -> [f64; 3] {
    let [y, cb, cr] = [p[0], p[1] - 0.5, p[2] - 0.5];
    [
        y + 1.402 * cr,
        y - 0.344136 * cb - 0.714136 * cr,
        y + 1.772 * cb,
    ]
}

pub fn jpeg_proxy(img: &ImageBuffer, quality: f64) -> ImageBuffer {
    let (w, h) = (img.width, img.height);
    let pw = w.div_ceil(8) * 8;
    let ph = h.div_ceil(8) * 8;
    let basis = dct_basis();
    let tables = [
        scaled_table(&LUMA_TABLE, quality),
        scaled_table(&CHROMA_TABLE, quality),
        scaled_table(&CHROMA_TABLE, quality),
    ];

    // Channel planes on the 0..255 scale, padded by edge replication.
    let mut planes = vec![vec![0.0f64; pw * ph]; 3];
    for y in 0..ph {
        for x in 0..pw {
            let ycc = rgb_to_ycbcr(img.get(x.min(w - 1), y.min(h - 1)));
            for c in 0..3 {
                planes[c][y * pw + x] = ycc[c] * 255.0;
            }
        }
    }

    for (c, plane) in planes.iter_mut().enumerate() {
        let table = &tables[c];
        let mut block = [[0.0f64; 8]; 8];
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        block[y][x] = plane[(by + y) * pw + bx + x] - 128.0;
                    }
                }
                // D = C B C^T, quantize, B' = C^T D' C.
                let mut tmp = [[0.0f64; 8]; 8];
                for k in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for n in 0..8 {
                            acc += basis[k][n] * block[n][x];
                        }
                        tmp[k][x] = acc;
                    }
                }
                let mut coeff = [[0.0f64; 8]; 8];
                for k in 0..8 {
                    for l in 0..8 {
                        let mut acc = 0.0;
                        for n in 0..8 {
                            acc += tmp[k][n] * basis[l][n];
                        }
                        let q = table[k * 8 + l];
                        coeff[k][l] = (acc / q).round() * q;
                    }
                }
                for n in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += basis[k][n] * coeff[k][x];
                        }
                        tmp[n][x] = acc;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for l in 0..8 {
                            acc += tmp[y][l] * basis[l][x];
                        }
                        plane[(by + y) * pw + bx + x] = acc + 128.0;
                    }
                }
            }
        }
    }

    let mut out = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let ycc = [
                planes[0][y * pw + x] / 255.0,
                planes[1][y * pw + x] / 255.0,
                planes[2][y * pw + x] / 255.0,
            ];
            let rgb = ycbcr_to_rgb(ycc);
            out.set(x, y, [
                rgb[0].clamp(0.0, 1.0),
                rgb[1].clamp(0.0, 1.0),
                rgb[2].clamp(0.0, 1.0),
            ]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn constant_image_survives_quantization() {
        // A flat block has only a DC coefficient; quantization keeps it
        // close.
        let img = ImageBuffer::filled(16, 16, [0.5, 0.5, 0.5]);
        let out = jpeg_proxy(&img, 50.0);
        for (a, b) in img.pixels.iter().zip(&out.pixels) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn lower_quality_distorts_more() {
        let mut rng = stream(1, &[9]);
        let img = ImageBuffer {
            width: 32,
            height: 32,
            pixels: (0..32 * 32 * 3).map(|_| rng.uniform01()).collect(),
        };
        let mse = |q: f64| -> f64 {
            let out = jpeg_proxy(&img, q);
            out.pixels
                .iter()
                .zip(&img.pixels)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / img.pixels.len() as f64
        };
        let high = mse(90.0);
        let low = mse(10.0);
        assert!(low > high * 1.5, "q90 {high:.5} vs q10 {low:.5}");
    }

    #[test]
    fn output_dimensions_preserved_for_non_multiple_of_8() {
        let img = ImageBuffer::filled(13, 9, [0.3, 0.7, 0.2]);
        let out = jpeg_proxy(&img, 50.0);
        assert_eq!((out.width, out.height), (13, 9));
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let b = dct_basis();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..8).map(|n| b[i][n] * b[j][n]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }
}
