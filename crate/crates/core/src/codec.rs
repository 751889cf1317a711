//! 48-bit message, the convolutional decoder/encoder pair, BCE loss, and
//! detection statistics.

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::image::ImageBuffer;
use crate::nn::{
    leaky_relu, leaky_relu_backward, mean_pool, mean_pool_backward, Conv2d, Linear, Tensor3,
};
use crate::rng::stream;
use std::path::Path;

pub const MESSAGE_BITS: usize = 48;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"GSWD";
pub const WEIGHTS_VERSION: u32 = 1;

/// The 48-bit watermark payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageBits {
    bits: Vec<u8>,
}

impl MessageBits {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.len() != MESSAGE_BITS {
            return Err(Error::InvalidArgument(format!(
                "message must be {MESSAGE_BITS} bits, got {}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, &[0x3b17]);
        Self {
            bits: (0..MESSAGE_BITS).map(|_| (rng.next_u64() & 1) as u8).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// 12 hex characters, bit 0 is the most significant bit.
    pub fn to_hex(&self) -> String {
        let mut value: u64 = 0;
        for &b in &self.bits {
            value = (value << 1) | b as u64;
        }
        format!("{value:012x}")
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() != MESSAGE_BITS / 4 {
            return Err(Error::Parse(format!(
                "message must be {} hex chars, got {}",
                MESSAGE_BITS / 4,
                s.len()
            )));
        }
        let value = u64::from_str_radix(s, 16)
            .map_err(|_| Error::Parse(format!("invalid hex message '{s}'")))?;
        let bits = (0..MESSAGE_BITS)
            .map(|i| ((value >> (MESSAGE_BITS - 1 - i)) & 1) as u8)
            .collect();
        Ok(Self { bits })
    }

    /// Decodes logits under the `> 0` convention.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != MESSAGE_BITS {
            return Err(Error::InvalidArgument(format!(
                "expected {MESSAGE_BITS} logits, got {}",
                logits.len()
            )));
        }
        Ok(Self {
            bits: logits.iter().map(|&z| u8::from(z > 0.0)).collect(),
        })
    }
}

/// Fraction of matching bits.
pub fn bit_accuracy(decoded: &MessageBits, reference: &MessageBits) -> f64 {
    let matched = matched_bits(decoded, reference);
    matched as f64 / MESSAGE_BITS as f64
}

pub fn matched_bits(decoded: &MessageBits, reference: &MessageBits) -> usize {
    decoded
        .bits
        .iter()
        .zip(&reference.bits)
        .filter(|(a, b)| a == b)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionStats {
    pub bit_accuracy: f64,
    pub matched_bits: usize,
    pub detected: bool,
    pub threshold_bits: usize,
}

pub fn detection_stats(decoded: &MessageBits, reference: &MessageBits, threshold_bits: usize) -> DetectionStats {
    let matched = matched_bits(decoded, reference);
    DetectionStats {
        bit_accuracy: matched as f64 / MESSAGE_BITS as f64,
        matched_bits: matched,
        detected: matched >= threshold_bits,
        threshold_bits,
    }
}

/// Smallest k with `P(Binomial(n, 1/2) >= k) <= fpr`, by exact tail sums.
/// May return `n + 1` when even a perfect match is too likely.
pub fn detection_threshold(n_bits: usize, fpr: f64) -> usize {
    assert!(fpr > 0.0 && fpr < 1.0, "fpr must be in (0, 1)");
    // Tail numerators in exact integer arithmetic: sum_{i>=k} C(n, i).
    let n = n_bits as u64;
    let mut binom = vec![0u128; n_bits + 1];
    binom[0] = 1;
    for i in 1..=n_bits {
        binom[i] = binom[i - 1] * (n - i as u64 + 1) as u128 / i as u128;
    }
    let denom = 2f64.powi(n_bits as i32);
    let mut tail: u128 = 0;
    // Walk k from n down; the first k (from above) whose tail exceeds fpr
    // means k+1 is the answer.
    for k in (0..=n_bits).rev() {
        tail += binom[k];
        if tail as f64 / denom > fpr {
            return k + 1;
        }
    }
    0
}

/// Fraction of watermarked trials whose matched-bit count reached the
/// detection threshold.
pub fn tpr_at_fpr(trials: &[DetectionStats]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::InvalidArgument("no detection trials".into()));
    }
    Ok(trials.iter().filter(|t| t.detected).count() as f64 / trials.len() as f64)
}

/// Numerically stable mean binary cross-entropy over the 48 logits and its
/// gradient `(sigma(z) - y) / n`.
pub fn bce_loss(logits: &[f64], target: &MessageBits) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), MESSAGE_BITS);
    let n = MESSAGE_BITS as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; MESSAGE_BITS];
    for (i, (&z, &y)) in logits.iter().zip(target.bits()).enumerate() {
        let y = y as f64;
        // -[y ln s + (1-y) ln(1-s)] = max(z,0) - y z + ln(1 + e^{-|z|})
        loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
        grad[i] = (crate::scene::sigmoid(z) - y) / n;
    }
    (loss / n, grad)
}

/// Four stride-2 stages (16/32/64/64 channels), global mean pool, affine to
/// 48 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

pub const DECODER_MIN_SIDE: usize = 16;

impl DecoderModel {
    pub fn init(seed: u64) -> Self {
        let mut rng = stream(seed, &[0xdec0]);
        let convs = vec![
            Conv2d::new(3, 16, 2, &mut rng),
            Conv2d::new(16, 32, 2, &mut rng),
            Conv2d::new(32, 64, 2, &mut rng),
            Conv2d::new(64, 64, 2, &mut rng),
        ];
        let head = Linear::new(64, MESSAGE_BITS, &mut rng);
        Self { convs, head }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum::<usize>() + self.head.param_count()
    }
}

/// Activations stored by the decoder forward pass, consumed by backward.
pub struct DecoderTape {
    input: Tensor3,
    pre_acts: Vec<Tensor3>,
    acts: Vec<Tensor3>,
    pooled: Vec<f64>,
}

pub fn decoder_forward(model: &DecoderModel, img: &ImageBuffer) -> Result<Vec<f64>> {
    Ok(decoder_forward_tape(model, img)?.0)
}

pub fn decoder_forward_tape(
    model: &DecoderModel,
    img: &ImageBuffer,
) -> Result<(Vec<f64>, DecoderTape)> {
    if img.width < DECODER_MIN_SIDE || img.height < DECODER_MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "decoder input must be at least {DECODER_MIN_SIDE}x{DECODER_MIN_SIDE}, got {}x{}",
            img.width, img.height
        )));
    }
    let input = Tensor3::from_image(img);
    let mut acts = Vec::with_capacity(model.convs.len());
    let mut pre_acts = Vec::with_capacity(model.convs.len());
    let mut x = input.clone();
    for conv in &model.convs {
        let mut z = conv.forward(&x);
        let pre = leaky_relu(&mut z);
        pre_acts.push(pre);
        acts.push(z.clone());
        x = z;
    }
    let pooled = mean_pool(&x);
    let logits = model.head.forward(&pooled);
    Ok((
        logits,
        DecoderTape {
            input,
            pre_acts,
            acts,
            pooled,
        },
    ))
}

/// Weight and bias gradients aligned with the model layout.
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub conv_weights: Vec<Vec<f64>>,
    pub conv_bias: Vec<Vec<f64>>,
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl DecoderGrads {
    pub fn zeros(model: &DecoderModel) -> Self {
        Self {
            conv_weights: model.convs.iter().map(|c| vec![0.0; c.weights.len()]).collect(),
            conv_bias: model.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
            head_weights: vec![0.0; model.head.weights.len()],
            head_bias: vec![0.0; model.head.bias.len()],
        }
    }
}

/// Backpropagates `d_logits`. With `weight_grads = false` (frozen-decoder
/// mode) only the input-image gradient is produced.
pub fn decoder_backward(
    model: &DecoderModel,
    tape: &DecoderTape,
    d_logits: &[f64],
    weight_grads: bool,
) -> Result<(Option<DecoderGrads>, ImageBuffer)> {
    if d_logits.len() != MESSAGE_BITS {
        return Err(Error::ShapeMismatch {
            expected: format!("{MESSAGE_BITS} logits"),
            got: format!("{}", d_logits.len()),
        });
    }
    let mut grads = weight_grads.then(|| DecoderGrads::zeros(model));

    let d_pool = {
        let (dw, db) = match grads.as_mut() {
            Some(g) => (Some(g.head_weights.as_mut_slice()), Some(g.head_bias.as_mut_slice())),
            None => (None, None),
        };
        model.head.backward(&tape.pooled, d_logits, dw, db)
    };
    let last = tape.acts.last().unwrap();
    let mut d_x = mean_pool_backward((last.c, last.h, last.w), &d_pool);

    for li in (0..model.convs.len()).rev() {
        leaky_relu_backward(&tape.pre_acts[li], &mut d_x);
        let x_in = if li == 0 { &tape.input } else { &tape.acts[li - 1] };
        let (dw, db) = match grads.as_mut() {
            Some(g) => (
                Some(g.conv_weights[li].as_mut_slice()),
                Some(g.conv_bias[li].as_mut_slice()),
            ),
            None => (None, None),
        };
        d_x = model.convs[li].backward(x_in, &d_x, dw, db);
    }
    Ok((grads, d_x.to_image()))
}

/// Residual encoder used only to pretrain the decoder: three stride-1
/// stages (64/64/3) over the cover image concatenated with the message
/// broadcast to 48 planes; output residual is added to the cover and
/// clamped to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub convs: Vec<Conv2d>,
}

impl EncoderModel {
    pub fn init(seed: u64) -> Self {
        let mut rng = stream(seed, &[0xe2c0]);
        Self {
            convs: vec![
                Conv2d::new(3 + MESSAGE_BITS, 64, 1, &mut rng),
                Conv2d::new(64, 64, 1, &mut rng),
                Conv2d::new(64, 3, 1, &mut rng),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum()
    }
}

pub struct EncoderTape {
    input: Tensor3,
    pre_acts: Vec<Tensor3>,
    acts: Vec<Tensor3>,
    /// Mask of output positions inside (0, 1) after the clamp.
    pass_mask: Vec<bool>,
}

pub fn encoder_forward_tape(
    model: &EncoderModel,
    cover: &ImageBuffer,
    message: &MessageBits,
) -> (ImageBuffer, EncoderTape) {
    let (h, w) = (cover.height, cover.width);
    let mut input = Tensor3::zeros(3 + MESSAGE_BITS, h, w);
    let cover_t = Tensor3::from_image(cover);
    input.data[..3 * h * w].copy_from_slice(&cover_t.data);
    for (bi, &b) in message.bits().iter().enumerate() {
        if b == 1 {
            input.plane_mut(3 + bi).iter_mut().for_each(|v| *v = 1.0);
        }
    }

    let mut acts = Vec::new();
    let mut pre_acts = Vec::new();
    let mut x = input.clone();
    for (li, conv) in model.convs.iter().enumerate() {
        let mut z = conv.forward(&x);
        if li + 1 < model.convs.len() {
            let pre = leaky_relu(&mut z);
            pre_acts.push(pre);
        }
        acts.push(z.clone());
        x = z;
    }

    let mut marked = ImageBuffer::new(w, h);
    let mut pass_mask = vec![false; w * h * 3];
    let residual = x.to_image();
    for i in 0..marked.pixels.len() {
        let v = cover.pixels[i] + residual.pixels[i];
        pass_mask[i] = (0.0..=1.0).contains(&v);
        marked.pixels[i] = v.clamp(0.0, 1.0);
    }
    (
        marked,
        EncoderTape {
            input,
            pre_acts,
            acts,
            pass_mask,
        },
    )
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub conv_weights: Vec<Vec<f64>>,
    pub conv_bias: Vec<Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros(model: &EncoderModel) -> Self {
        Self {
            conv_weights: model.convs.iter().map(|c| vec![0.0; c.weights.len()]).collect(),
            conv_bias: model.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
        }
    }
}

/// Backpropagates a marked-image gradient to encoder weights. The clamp
/// passes gradient only where the pre-clamp value was inside [0, 1].
pub fn encoder_backward(
    model: &EncoderModel,
    tape: &EncoderTape,
    d_marked: &ImageBuffer,
    grads: &mut EncoderGrads,
) {
    let mut d_res = ImageBuffer::new(d_marked.width, d_marked.height);
    for i in 0..d_res.pixels.len() {
        if tape.pass_mask[i] {
            d_res.pixels[i] = d_marked.pixels[i];
        }
    }
    let mut d_x = Tensor3::from_image(&d_res);
    for li in (0..model.convs.len()).rev() {
        if li + 1 < model.convs.len() {
            leaky_relu_backward(&tape.pre_acts[li], &mut d_x);
        }
        let x_in = if li == 0 { &tape.input } else { &tape.acts[li - 1] };
        d_x = model.convs[li].backward(
            x_in,
            &d_x,
            Some(&mut grads.conv_weights[li]),
            Some(&mut grads.conv_bias[li]),
        );
    }
}

// ---- weight file format ----

const LAYER_CONV: u32 = 0;
const LAYER_LINEAR: u32 = 1;

fn push_conv(out: &mut Vec<u8>, c: &Conv2d) {
    out.extend_from_slice(&LAYER_CONV.to_le_bytes());
    out.extend_from_slice(&(c.in_ch as u32).to_le_bytes());
    out.extend_from_slice(&(c.out_ch as u32).to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    out.extend_from_slice(&(c.stride as u32).to_le_bytes());
    for v in c.weights.iter().chain(&c.bias) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn push_linear(out: &mut Vec<u8>, l: &Linear) {
    out.extend_from_slice(&LAYER_LINEAR.to_le_bytes());
    out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
    out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    for v in l.weights.iter().chain(&l.bias) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct WeightReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> WeightReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.buf.len() {
            return Err(Error::Truncated("weight file".into()));
        }
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.pos + 4 * n > self.buf.len() {
            return Err(Error::Truncated("weight file".into()));
        }
        let out = self.buf[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        self.pos += 4 * n;
        Ok(out)
    }

    fn conv(&mut self) -> Result<Conv2d> {
        let kind = self.u32()?;
        if kind != LAYER_CONV {
            return Err(Error::Validation(format!("expected conv layer, got kind {kind}")));
        }
        let in_ch = self.u32()? as usize;
        let out_ch = self.u32()? as usize;
        let ksize = self.u32()? as usize;
        let stride = self.u32()? as usize;
        if ksize != 3 {
            return Err(Error::Validation(format!("unsupported kernel size {ksize}")));
        }
        let weights = self.f32s(out_ch * in_ch * 9)?;
        let bias = self.f32s(out_ch)?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite weight".into()));
        }
        Ok(Conv2d {
            in_ch,
            out_ch,
            stride,
            weights,
            bias,
        })
    }

    fn linear(&mut self) -> Result<Linear> {
        let kind = self.u32()?;
        if kind != LAYER_LINEAR {
            return Err(Error::Validation(format!(
                "expected linear layer, got kind {kind}"
            )));
        }
        let in_dim = self.u32()? as usize;
        let out_dim = self.u32()? as usize;
        let _ = self.u32()?;
        let _ = self.u32()?;
        let weights = self.f32s(in_dim * out_dim)?;
        let bias = self.f32s(out_dim)?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite weight".into()));
        }
        Ok(Linear {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }
}

fn weights_header(layer_count: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&layer_count.to_le_bytes());
    out
}

fn check_header(r: &mut WeightReader) -> Result<u32> {
    if r.buf.len() < 4 || &r.buf[..4] != WEIGHTS_MAGIC {
        return Err(Error::BadMagic { expected: "GSWD" });
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::VersionMismatch {
            expected: WEIGHTS_VERSION,
            found: version,
        });
    }
    r.u32()
}

impl DecoderModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = weights_header(self.convs.len() as u32 + 1);
        for c in &self.convs {
            push_conv(&mut out, c);
        }
        push_linear(&mut out, &self.head);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = WeightReader { buf: bytes, pos: 0 };
        let layers = check_header(&mut r)? as usize;
        if layers < 2 {
            return Err(Error::Validation(format!("decoder needs >= 2 layers, got {layers}")));
        }
        let convs = (0..layers - 1).map(|_| r.conv()).collect::<Result<Vec<_>>>()?;
        let head = r.linear()?;
        Ok(Self { convs, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl EncoderModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = weights_header(self.convs.len() as u32);
        for c in &self.convs {
            push_conv(&mut out, c);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = WeightReader { buf: bytes, pos: 0 };
        let layers = check_header(&mut r)? as usize;
        let convs = (0..layers).map(|_| r.conv()).collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
