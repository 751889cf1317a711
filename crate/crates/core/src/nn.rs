//! Minimal convolutional building blocks with exact backward passes.
//!
//! Feature maps are `[channels][height][width]` contiguous f64. Kernels are
//! fixed 3x3 with zero padding 1 and stride 1 or 2. Stride-1 forward and
//! input-gradient kernels are written as shifted row AXPYs so the hot loops
//! vectorize; stride-2 layers are small and stay scalar.

use crate::image::ImageBuffer;
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    /// Image to 3-channel tensor.
    pub fn from_image(img: &ImageBuffer) -> Self {
        let mut t = Self::zeros(3, img.height, img.width);
        let hw = img.height * img.width;
        for i in 0..hw {
            t.data[i] = img.pixels[i * 3];
            t.data[hw + i] = img.pixels[i * 3 + 1];
            t.data[2 * hw + i] = img.pixels[i * 3 + 2];
        }
        t
    }

    /// First three channels back to an image.
    pub fn to_image(&self) -> ImageBuffer {
        assert!(self.c >= 3);
        let mut img = ImageBuffer::new(self.w, self.h);
        let hw = self.h * self.w;
        for i in 0..hw {
            img.pixels[i * 3] = self.data[i];
            img.pixels[i * 3 + 1] = self.data[hw + i];
            img.pixels[i * 3 + 2] = self.data[2 * hw + i];
        }
        img
    }
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// `[out_ch][in_ch][3][3]` flattened.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut DetRng) -> Self {
        // He-style init, rounded through f32 so weight files are exact.
        let scale = (2.0 / (in_ch as f64 * 9.0)).sqrt();
        let weights = (0..out_ch * in_ch * 9)
            .map(|_| (rng.normal() * scale) as f32 as f64)
            .collect();
        Self {
            in_ch,
            out_ch,
            stride,
            weights,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn weight(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((co * self.in_ch + ci) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        self.forward_impl(x, true)
    }

    /// Forward without bias: the linear map alone. Used when propagating
    /// through the adjoint graph for gradient penalties.
    pub fn forward_linear(&self, x: &Tensor3) -> Tensor3 {
        self.forward_impl(x, false)
    }

    fn forward_impl(&self, x: &Tensor3, with_bias: bool) -> Tensor3 {
        assert_eq!(x.c, self.in_ch);
        let (oh, ow) = (out_dim(x.h, self.stride), out_dim(x.w, self.stride));
        let mut out = Tensor3::zeros(self.out_ch, oh, ow);
        if self.stride == 1 {
            for co in 0..self.out_ch {
                if with_bias {
                    let b = self.bias[co];
                    out.plane_mut(co).iter_mut().for_each(|v| *v = b);
                }
                for ci in 0..self.in_ch {
                    let xin = x.plane(ci);
                    for ky in 0..3usize {
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < 1 || iy > x.h {
                                continue;
                            }
                            let iy = iy - 1;
                            let in_row = &xin[iy * x.w..iy * x.w + x.w];
                            let base = co * oh * ow + oy * ow;
                            for kx in 0..3usize {
                                let wv = self.weight(co, ci, ky, kx);
                                if wv == 0.0 {
                                    continue;
                                }
                                // out[ox] += w * in[ox + kx - 1]
                                let ox0 = if kx == 0 { 1 } else { 0 };
                                let ox1 = if kx == 2 { ow - 1 } else { ow };
                                let shift = kx as isize - 1;
                                let dst = &mut out.data[base + ox0..base + ox1];
                                let src_start = (ox0 as isize + shift) as usize;
                                let src = &in_row[src_start..src_start + (ox1 - ox0)];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        } else {
            for co in 0..self.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = if with_bias { self.bias[co] } else { 0.0 };
                        for ci in 0..self.in_ch {
                            let xin = x.plane(ci);
                            for ky in 0..3usize {
                                let iy = oy * self.stride + ky;
                                if iy < 1 || iy > x.h {
                                    continue;
                                }
                                let iy = iy - 1;
                                for kx in 0..3usize {
                                    let ix = ox * self.stride + kx;
                                    if ix < 1 || ix > x.w {
                                        continue;
                                    }
                                    acc += self.weight(co, ci, ky, kx) * xin[iy * x.w + ix - 1];
                                }
                            }
                        }
                        out.data[(co * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Input gradient; optionally accumulates weight and bias gradients.
    pub fn backward(
        &self,
        x: &Tensor3,
        d_out: &Tensor3,
        mut d_weights: Option<&mut [f64]>,
        mut d_bias: Option<&mut [f64]>,
    ) -> Tensor3 {
        assert_eq!(d_out.c, self.out_ch);
        let (oh, ow) = (d_out.h, d_out.w);
        let mut d_in = Tensor3::zeros(x.c, x.h, x.w);

        if let Some(db) = d_bias.as_deref_mut() {
            for co in 0..self.out_ch {
                db[co] += d_out.plane(co).iter().sum::<f64>();
            }
        }

        if self.stride == 1 {
            for co in 0..self.out_ch {
                let dplane = d_out.plane(co);
                for ci in 0..self.in_ch {
                    let xin = x.plane(ci);
                    for ky in 0..3usize {
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < 1 || iy > x.h {
                                continue;
                            }
                            let iy = iy - 1;
                            let drow = &dplane[oy * ow..oy * ow + ow];
                            for kx in 0..3usize {
                                let ox0 = if kx == 0 { 1 } else { 0 };
                                let ox1 = if kx == 2 { ow - 1 } else { ow };
                                if ox1 <= ox0 {
                                    continue;
                                }
                                let shift = kx as isize - 1;
                                let src_start = (ox0 as isize + shift) as usize;
                                let n = ox1 - ox0;
                                let wv = self.weight(co, ci, ky, kx);
                                if wv != 0.0 {
                                    let din_plane = d_in.plane_mut(ci);
                                    let dst = &mut din_plane
                                        [iy * x.w + src_start..iy * x.w + src_start + n];
                                    for (d, s) in dst.iter_mut().zip(&drow[ox0..ox1]) {
                                        *d += wv * s;
                                    }
                                }
                                if let Some(dw) = d_weights.as_deref_mut() {
                                    let xrow = &xin[iy * x.w + src_start..iy * x.w + src_start + n];
                                    let mut acc = 0.0;
                                    for (a, b) in xrow.iter().zip(&drow[ox0..ox1]) {
                                        acc += a * b;
                                    }
                                    dw[((co * self.in_ch + ci) * 3 + ky) * 3 + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        } else {
            for co in 0..self.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = d_out.data[(co * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ci in 0..self.in_ch {
                            for ky in 0..3usize {
                                let iy = oy * self.stride + ky;
                                if iy < 1 || iy > x.h {
                                    continue;
                                }
                                let iy = iy - 1;
                                for kx in 0..3usize {
                                    let ix = ox * self.stride + kx;
                                    if ix < 1 || ix > x.w {
                                        continue;
                                    }
                                    let ix = ix - 1;
                                    let wv = self.weight(co, ci, ky, kx);
                                    d_in.plane_mut(ci)[iy * x.w + ix] += wv * g;
                                    if let Some(dw) = d_weights.as_deref_mut() {
                                        dw[((co * self.in_ch + ci) * 3 + ky) * 3 + kx] +=
                                            x.plane(ci)[iy * x.w + ix] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// In-place leaky rectifier; returns the pre-activation copy needed for the
/// backward mask.
pub fn leaky_relu(x: &mut Tensor3) -> Tensor3 {
    let pre = x.clone();
    for v in &mut x.data {
        if *v <= 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
    pre
}

/// Elementwise mask multiply of the upstream gradient by the rectifier
/// derivative at the stored pre-activation.
pub fn leaky_relu_backward(pre: &Tensor3, d_out: &mut Tensor3) {
    for (v, p) in d_out.data.iter_mut().zip(&pre.data) {
        if *p <= 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Global mean pool: per-channel spatial average.
pub fn mean_pool(x: &Tensor3) -> Vec<f64> {
    let hw = (x.h * x.w) as f64;
    (0..x.c)
        .map(|c| x.plane(c).iter().sum::<f64>() / hw)
        .collect()
}

pub fn mean_pool_backward(x_shape: (usize, usize, usize), d_pool: &[f64]) -> Tensor3 {
    let (c, h, w) = x_shape;
    let mut d = Tensor3::zeros(c, h, w);
    let inv = 1.0 / (h * w) as f64;
    for ci in 0..c {
        let g = d_pool[ci] * inv;
        d.plane_mut(ci).iter_mut().for_each(|v| *v = g);
    }
    d
}

/// Dense affine map `y = W x + b` with `W` stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut DetRng) -> Self {
        let scale = (2.0 / in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim)
                .map(|_| (rng.normal() * scale) as f32 as f64)
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o]
            })
            .collect()
    }

    pub fn backward(
        &self,
        x: &[f64],
        d_out: &[f64],
        mut d_weights: Option<&mut [f64]>,
        d_bias: Option<&mut [f64]>,
    ) -> Vec<f64> {
        if let Some(db) = d_bias {
            for (o, g) in d_out.iter().enumerate() {
                db[o] += g;
            }
        }
        if let Some(dw) = d_weights.as_deref_mut() {
            for (o, g) in d_out.iter().enumerate() {
                for (i, v) in x.iter().enumerate() {
                    dw[o * self.in_dim + i] += g * v;
                }
            }
        }
        let mut d_in = vec![0.0; self.in_dim];
        for (o, g) in d_out.iter().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (i, w) in row.iter().enumerate() {
                d_in[i] += w * g;
            }
        }
        d_in
    }
}
