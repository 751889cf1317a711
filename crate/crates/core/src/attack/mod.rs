//! Seeded surrogate/evaluation distortions and their composition.
//!
//! Every attack is a pure function of `(spec, input)`: random draws come
//! from a stream keyed on the spec's seed, so outputs are byte-identical
//! across runs and thread counts, and the backward pass can recompute any
//! warp it needs. Intensity resolves through a five-level ladder anchored
//! at the published level-3 values, or through an explicit parameter
//! override.
//!
//! Gradient paths: blur, brightness, contrast, and noise are linear (with
//! clamp masks); rotation and resized-crop transpose their bilinear warps;
//! erasing masks; the JPEG proxy and elastic warp use straight-through
//! identity.

mod jpeg;

pub use jpeg::jpeg_proxy;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::{stream, DetRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Blur,
    Brightness,
    Contrast,
    JpegProxy,
    Noise,
    Erasing,
    ResizedCrop,
    Rotation,
    Elastic,
}

pub const ALL_KINDS: [AttackKind; 9] = [
    AttackKind::Blur,
    AttackKind::Brightness,
    AttackKind::Contrast,
    AttackKind::JpegProxy,
    AttackKind::Noise,
    AttackKind::Erasing,
    AttackKind::ResizedCrop,
    AttackKind::Rotation,
    AttackKind::Elastic,
];

/// Geometry-stage kinds (the `G` of the composed pipeline).
pub const GEOMETRY_KINDS: [AttackKind; 4] = [
    AttackKind::Elastic,
    AttackKind::Erasing,
    AttackKind::Rotation,
    AttackKind::ResizedCrop,
];

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Blur => "blur",
            AttackKind::Brightness => "brightness",
            AttackKind::Contrast => "contrast",
            AttackKind::JpegProxy => "jpeg_proxy",
            AttackKind::Noise => "noise",
            AttackKind::Erasing => "erasing",
            AttackKind::ResizedCrop => "resized_crop",
            AttackKind::Rotation => "rotation",
            AttackKind::Elastic => "elastic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attack kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intensity {
    /// Ladder level 1..=5, weak to strong.
    Level(u8),
    /// Explicit parameter override (kind-specific meaning, see [`ladder`]).
    Param(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub intensity: Intensity,
    pub seed: u64,
}

impl AttackSpec {
    pub fn level(kind: AttackKind, level: u8, seed: u64) -> Self {
        Self {
            kind,
            intensity: Intensity::Level(level),
            seed,
        }
    }

    pub fn param(kind: AttackKind, param: f64, seed: u64) -> Self {
        Self {
            kind,
            intensity: Intensity::Param(param),
            seed,
        }
    }

    pub fn resolve(&self) -> Result<f64> {
        match self.intensity {
            Intensity::Param(p) => Ok(p),
            Intensity::Level(l) => ladder(self.kind, l),
        }
    }
}

/// Linear five-level ladders anchored so level 3 equals the published
/// medium-intensity parameters. Parameter meanings: blur = kernel radius
/// (sigma is radius / 3), brightness/contrast = factor, jpeg = quality,
/// noise = sigma, erasing / resized-crop = area fraction, rotation = max
/// angle in degrees, elastic = displacement magnitude in pixels.
pub fn ladder(kind: AttackKind, level: u8) -> Result<f64> {
    if !(1..=5).contains(&level) {
        return Err(Error::InvalidArgument(format!(
            "attack level {level} outside 1..=5"
        )));
    }
    let i = (level - 1) as usize;
    Ok(match kind {
        AttackKind::Blur => [2.0, 6.0, 10.0, 14.0, 18.0][i],
        AttackKind::Brightness => [1.1, 1.3, 1.5, 1.7, 1.9][i],
        AttackKind::Contrast => [1.1, 1.3, 1.5, 1.7, 1.9][i],
        AttackKind::JpegProxy => [90.0, 70.0, 50.0, 30.0, 10.0][i],
        AttackKind::Noise => [0.01, 0.03, 0.05, 0.07, 0.09][i],
        AttackKind::Erasing => [0.025, 0.075, 0.125, 0.175, 0.225][i],
        AttackKind::ResizedCrop => [0.95, 0.85, 0.75, 0.65, 0.55][i],
        AttackKind::Rotation => [4.5, 13.5, 22.5, 31.5, 40.5][i],
        AttackKind::Elastic => [2.0, 4.0, 6.0, 8.0, 10.0][i],
    })
}

pub const ELASTIC_FIELD_SIGMA: f64 = 8.0;

pub fn apply(spec: &AttackSpec, img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let p = spec.resolve()?;
    Ok(match spec.kind {
        AttackKind::Blur => gaussian_blur(img, p / 3.0, p.round().max(1.0) as usize),
        AttackKind::Brightness => map_clamp(img, |v| v * p),
        AttackKind::Contrast => map_clamp(img, |v| (v - 0.5) * p + 0.5),
        AttackKind::JpegProxy => jpeg_proxy(img, p),
        AttackKind::Noise => {
            let mut rng = stream(spec.seed, &[tag(spec.kind)]);
            let mut out = img.clone();
            for v in &mut out.pixels {
                *v = (*v + p * rng.normal()).clamp(0.0, 1.0);
            }
            out
        }
        AttackKind::Erasing => {
            let (rx, ry, rw, rh) = erase_rect(spec, img.width, img.height, p);
            let mut out = img.clone();
            for y in ry..ry + rh {
                for x in rx..rx + rw {
                    out.set(x, y, [0.0, 0.0, 0.0]);
                }
            }
            out
        }
        AttackKind::ResizedCrop => {
            let crop = crop_window(spec, img.width, img.height, p);
            resize_from_window(img, crop)
        }
        AttackKind::Rotation => {
            let angle = rotation_angle(spec, p);
            rotate_bilinear(img, angle)
        }
        AttackKind::Elastic => {
            let (dx, dy) = elastic_field(spec, img.width, img.height, p);
            warp_bilinear(img, |x, y| {
                let i = y as usize * img.width + x as usize;
                (x + dx[i], y + dy[i])
            })
        }
    })
}

/// Gradient of `apply` with respect to its input image. `original` must be
/// the exact input the forward pass saw (clamp masks and warps are
/// recomputed from it and the spec).
pub fn apply_backward(
    spec: &AttackSpec,
    original: &ImageBuffer,
    d_out: &ImageBuffer,
) -> Result<ImageBuffer> {
    original.require_same_shape(d_out)?;
    let p = spec.resolve()?;
    Ok(match spec.kind {
        AttackKind::Blur => gaussian_blur_adjoint(d_out, p / 3.0, p.round().max(1.0) as usize),
        AttackKind::Brightness => {
            let mut d = ImageBuffer::new(original.width, original.height);
            for i in 0..d.pixels.len() {
                let pre = original.pixels[i] * p;
                if (0.0..=1.0).contains(&pre) {
                    d.pixels[i] = d_out.pixels[i] * p;
                }
            }
            d
        }
        AttackKind::Contrast => {
            let mut d = ImageBuffer::new(original.width, original.height);
            for i in 0..d.pixels.len() {
                let pre = (original.pixels[i] - 0.5) * p + 0.5;
                if (0.0..=1.0).contains(&pre) {
                    d.pixels[i] = d_out.pixels[i] * p;
                }
            }
            d
        }
        AttackKind::Noise => {
            let mut rng = stream(spec.seed, &[tag(spec.kind)]);
            let mut d = ImageBuffer::new(original.width, original.height);
            for i in 0..d.pixels.len() {
                let pre = original.pixels[i] + p * rng.normal();
                if (0.0..=1.0).contains(&pre) {
                    d.pixels[i] = d_out.pixels[i];
                }
            }
            d
        }
        AttackKind::Erasing => {
            let (rx, ry, rw, rh) = erase_rect(spec, original.width, original.height, p);
            let mut d = d_out.clone();
            for y in ry..ry + rh {
                for x in rx..rx + rw {
                    d.set(x, y, [0.0, 0.0, 0.0]);
                }
            }
            d
        }
        AttackKind::ResizedCrop => {
            let crop = crop_window(spec, original.width, original.height, p);
            resize_from_window_adjoint(original, crop, d_out)
        }
        AttackKind::Rotation => {
            let angle = rotation_angle(spec, p);
            rotate_bilinear_adjoint(original, angle, d_out)
        }
        // Straight-through: quantization and the smoothed warp are treated
        // as identity for gradient purposes.
        AttackKind::JpegProxy | AttackKind::Elastic => d_out.clone(),
    })
}

/// Composed augmentation: the frequency stage applies first, then the
/// geometry stage.
#[derive(Debug, Clone, Default)]
pub struct AttackPipeline {
    pub frequency_stage: Vec<AttackSpec>,
    pub geometry_stage: Vec<AttackSpec>,
}

impl AttackPipeline {
    pub fn specs(&self) -> impl Iterator<Item = &AttackSpec> {
        self.frequency_stage.iter().chain(self.geometry_stage.iter())
    }
}

pub fn apply_pipeline(pipeline: &AttackPipeline, img: &ImageBuffer) -> Result<ImageBuffer> {
    let mut out = img.clone();
    for spec in pipeline.specs() {
        out = apply(spec, &out)?;
    }
    Ok(out)
}

/// Forward pass through a pipeline that keeps each stage input, then the
/// matching backward pass.
pub fn apply_pipeline_tape(
    pipeline: &AttackPipeline,
    img: &ImageBuffer,
) -> Result<(ImageBuffer, Vec<ImageBuffer>)> {
    let mut inputs = Vec::new();
    let mut cur = img.clone();
    for spec in pipeline.specs() {
        inputs.push(cur.clone());
        cur = apply(spec, &cur)?;
    }
    Ok((cur, inputs))
}

pub fn pipeline_backward(
    pipeline: &AttackPipeline,
    inputs: &[ImageBuffer],
    d_out: &ImageBuffer,
) -> Result<ImageBuffer> {
    let specs: Vec<&AttackSpec> = pipeline.specs().collect();
    assert_eq!(specs.len(), inputs.len());
    let mut d = d_out.clone();
    for (spec, input) in specs.iter().zip(inputs).rev() {
        d = apply_backward(spec, input, &d)?;
    }
    Ok(d)
}

fn tag(kind: AttackKind) -> u64 {
    kind.name().bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64))
}

fn map_clamp(img: &ImageBuffer, f: impl Fn(f64) -> f64) -> ImageBuffer {
    let mut out = img.clone();
    for v in &mut out.pixels {
        *v = f(*v).clamp(0.0, 1.0);
    }
    out
}

/// Mirror (reflect-101) index fold into `[0, n)`.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let sigma = sigma.max(1e-6);
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian convolution with reflect padding.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64, radius: usize) -> ImageBuffer {
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let (w, h) = (img.width, img.height);
    // Horizontal.
    let mut tmp = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, &kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - r, w);
                let p = img.get(sx, y);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            tmp.set(x, y, acc);
        }
    }
    // Vertical.
    let mut out = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - r, h);
                let p = tmp.get(x, sy);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Adjoint of [`gaussian_blur`]: scatters through the same reflected taps,
/// vertical stage first.
pub fn gaussian_blur_adjoint(d_out: &ImageBuffer, sigma: f64, radius: usize) -> ImageBuffer {
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let (w, h) = (d_out.width, d_out.height);
    let mut d_tmp = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let g = d_out.get(x, y);
            for (ki, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - r, h);
                let i = d_tmp.idx(x, sy);
                for c in 0..3 {
                    d_tmp.pixels[i + c] += kv * g[c];
                }
            }
        }
    }
    let mut d_in = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let g = d_tmp.get(x, y);
            for (ki, &kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - r, w);
                let i = d_in.idx(sx, y);
                for c in 0..3 {
                    d_in.pixels[i + c] += kv * g[c];
                }
            }
        }
    }
    d_in
}

fn erase_rect(spec: &AttackSpec, w: usize, h: usize, area: f64) -> (usize, usize, usize, usize) {
    let mut rng = stream(spec.seed, &[tag(spec.kind)]);
    let frac = area.clamp(0.0, 1.0).sqrt();
    let rw = ((w as f64 * frac).round() as usize).clamp(1, w);
    let rh = ((h as f64 * frac).round() as usize).clamp(1, h);
    let rx = rng.below(w - rw + 1);
    let ry = rng.below(h - rh + 1);
    (rx, ry, rw, rh)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CropWindow {
    x0: f64,
    y0: f64,
    cw: f64,
    ch: f64,
}

fn crop_window(spec: &AttackSpec, w: usize, h: usize, area: f64) -> CropWindow {
    let mut rng = stream(spec.seed, &[tag(spec.kind)]);
    let aspect = rng.uniform(0.75, 4.0 / 3.0);
    let cw = (w as f64 * (area * aspect).sqrt()).min(w as f64);
    let ch = (h as f64 * (area / aspect).sqrt()).min(h as f64);
    let x0 = rng.uniform01() * (w as f64 - cw);
    let y0 = rng.uniform01() * (h as f64 - ch);
    CropWindow { x0, y0, cw, ch }
}

fn rotation_angle(spec: &AttackSpec, max_deg: f64) -> f64 {
    let mut rng = stream(spec.seed, &[tag(spec.kind)]);
    rng.uniform(-max_deg, max_deg).to_radians()
}

/// Bilinear sample with black fill outside the source rectangle; also
/// returns the four taps so adjoints can scatter.
#[inline]
fn bilinear_taps(w: usize, h: usize, sx: f64, sy: f64) -> Option<[(usize, usize, f64); 4]> {
    // Sampling in continuous pixel-center coordinates.
    if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
        return None;
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let clamp_x = |v: f64| (v.max(0.0) as usize).min(w - 1);
    let clamp_y = |v: f64| (v.max(0.0) as usize).min(h - 1);
    Some([
        (clamp_x(x0), clamp_y(y0), (1.0 - fx) * (1.0 - fy)),
        (clamp_x(x0 + 1.0), clamp_y(y0), fx * (1.0 - fy)),
        (clamp_x(x0), clamp_y(y0 + 1.0), (1.0 - fx) * fy),
        (clamp_x(x0 + 1.0), clamp_y(y0 + 1.0), fx * fy),
    ])
}

fn warp_bilinear(img: &ImageBuffer, src_of: impl Fn(f64, f64) -> (f64, f64)) -> ImageBuffer {
    let (w, h) = (img.width, img.height);
    let mut out = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src_of(x as f64, y as f64);
            if let Some(taps) = bilinear_taps(w, h, sx, sy) {
                let mut acc = [0.0; 3];
                for (tx, ty, tw) in taps {
                    let p = img.get(tx, ty);
                    for c in 0..3 {
                        acc[c] += tw * p[c];
                    }
                }
                out.set(x, y, acc);
            }
        }
    }
    out
}

fn warp_bilinear_adjoint(
    d_out: &ImageBuffer,
    src_of: impl Fn(f64, f64) -> (f64, f64),
) -> ImageBuffer {
    let (w, h) = (d_out.width, d_out.height);
    let mut d_in = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src_of(x as f64, y as f64);
            if let Some(taps) = bilinear_taps(w, h, sx, sy) {
                let g = d_out.get(x, y);
                for (tx, ty, tw) in taps {
                    let i = d_in.idx(tx, ty);
                    for c in 0..3 {
                        d_in.pixels[i + c] += tw * g[c];
                    }
                }
            }
        }
    }
    d_in
}

fn rotate_src(w: usize, h: usize, angle: f64) -> impl Fn(f64, f64) -> (f64, f64) {
    let cx = w as f64 / 2.0 - 0.5;
    let cy = h as f64 / 2.0 - 0.5;
    let (s, c) = angle.sin_cos();
    move |x, y| {
        let dx = x - cx;
        let dy = y - cy;
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    }
}

fn rotate_bilinear(img: &ImageBuffer, angle: f64) -> ImageBuffer {
    warp_bilinear(img, rotate_src(img.width, img.height, angle))
}

fn rotate_bilinear_adjoint(original: &ImageBuffer, angle: f64, d_out: &ImageBuffer) -> ImageBuffer {
    warp_bilinear_adjoint(d_out, rotate_src(original.width, original.height, angle))
}

fn crop_src(win: CropWindow, w: usize, h: usize) -> impl Fn(f64, f64) -> (f64, f64) {
    let sx = win.cw / w as f64;
    let sy = win.ch / h as f64;
    move |x, y| {
        (
            win.x0 + (x + 0.5) * sx - 0.5,
            win.y0 + (y + 0.5) * sy - 0.5,
        )
    }
}

fn resize_from_window(img: &ImageBuffer, win: CropWindow) -> ImageBuffer {
    warp_bilinear(img, crop_src(win, img.width, img.height))
}

fn resize_from_window_adjoint(
    original: &ImageBuffer,
    win: CropWindow,
    d_out: &ImageBuffer,
) -> ImageBuffer {
    warp_bilinear_adjoint(d_out, crop_src(win, original.width, original.height))
}

fn elastic_field(spec: &AttackSpec, w: usize, h: usize, magnitude: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream(spec.seed, &[tag(spec.kind)]);
    let smooth_norm = |rng: &mut DetRng| -> Vec<f64> {
        let raw = ImageBuffer {
            width: w,
            height: h,
            pixels: (0..w * h * 3).map(|_| rng.normal()).collect(),
        };
        let radius = (3.0 * ELASTIC_FIELD_SIGMA).ceil() as usize;
        let smooth = gaussian_blur(&raw, ELASTIC_FIELD_SIGMA, radius);
        // First channel, standardized, scaled to the magnitude.
        let vals: Vec<f64> = smooth.pixels.iter().step_by(3).copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-9);
        vals.iter().map(|v| (v - mean) / std * magnitude).collect()
    };
    let dx = smooth_norm(&mut rng);
    let dy = smooth_norm(&mut rng);
    (dx, dy)
}
