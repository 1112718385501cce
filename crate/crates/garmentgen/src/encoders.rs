//! Frozen-encoder stand-ins: latent codecs, hash-embedding text encoder,
//! color feature extractor, and nearest-neighbor mask resizing.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{GarmentError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{kaiming_conv, zeros1, Binder, ParamStore};
use crate::num::Scalar;
use crate::tensor::{FeatureRole, FeatureSequence, ImageTensor, Latent, LatentLayout, MaskTensor};

pub const LATENT_CHANNELS: usize = 4;
pub const DOWN_FACTOR: usize = 8;
/// Text/color token dimension.
pub const D_TEXT: usize = 64;
/// Number of color adapter tokens.
pub const N_COLOR_TOKENS: usize = 4;
/// Fixed color feature size: 4x4 grid RGB means + 4x4x4 RGB histogram.
pub const COLOR_FEATURE_DIM: usize = 48 + 64;
/// Maximum prompt length in whitespace tokens; longer prompts are truncated.
pub const MAX_PROMPT_TOKENS: usize = 77;

/// Image <-> 4-channel latent codec at 1/8 resolution.
#[derive(Debug, Clone)]
pub enum LatentCodec<T> {
    /// Deterministic: 8x8 space-to-depth followed by a fixed orthonormal
    /// projection. Zero-training fallback used by unit tests.
    Ortho(OrthoCodec<T>),
    /// Tiny convolutional autoencoder, pretrained on the synthetic corpus
    /// and then frozen.
    Conv(ConvCodec<T>),
}

impl<T: Scalar> LatentCodec<T> {
    pub fn encode(&self, img: &ImageTensor<T>) -> Result<Latent<T>> {
        match self {
            LatentCodec::Ortho(c) => c.encode(img),
            LatentCodec::Conv(c) => c.encode(img),
        }
    }

    pub fn decode(&self, z: &Latent<T>) -> Result<ImageTensor<T>> {
        match self {
            LatentCodec::Ortho(c) => c.decode(z),
            LatentCodec::Conv(c) => c.decode(z),
        }
    }
}

fn check_latent_decodable<T: Scalar>(z: &Latent<T>) -> Result<()> {
    match z.layout {
        LatentLayout::Garment | LatentLayout::Logo => Ok(()),
        other => Err(GarmentError::Contract(format!(
            "decode expects a garment or logo latent, got {other:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Orthonormal block codec
// ---------------------------------------------------------------------------

/// 8x8 space-to-depth plus a fixed semi-orthogonal projection to 4 channels.
///
/// The first three basis rows are the per-channel block means, so flat-color
/// blocks round-trip exactly; the fourth row is a seeded random direction in
/// their orthogonal complement. Latents are centered and scaled so [0,1]
/// images land in roughly [-1,1].
#[derive(Debug, Clone)]
pub struct OrthoCodec<T> {
    /// [4, 192] with orthonormal rows.
    proj: Array2<T>,
    pub seed: u64,
}

const BLOCK_LEN: usize = 3 * DOWN_FACTOR * DOWN_FACTOR;
const ORTHO_SCALE: f64 = 0.25;

impl<T: Scalar> OrthoCodec<T> {
    pub fn new(seed: u64) -> Self {
        let mut proj = Array2::<f64>::zeros((LATENT_CHANNELS, BLOCK_LEN));
        let per_chan = DOWN_FACTOR * DOWN_FACTOR;
        let inv = 1.0 / (per_chan as f64).sqrt();
        for c in 0..3 {
            for i in 0..per_chan {
                proj[[c, c * per_chan + i]] = inv;
            }
        }
        // Fourth row: random direction orthogonalized against the mean rows.
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut row: Vec<f64> = (0..BLOCK_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in 0..3 {
            let dot: f64 = (0..BLOCK_LEN).map(|i| row[i] * proj[[c, i]]).sum();
            for i in 0..BLOCK_LEN {
                row[i] -= dot * proj[[c, i]];
            }
        }
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, v) in row.iter().enumerate() {
            proj[[3, i]] = v / norm;
        }
        Self { proj: proj.mapv(T::from_f64), seed }
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h % DOWN_FACTOR != 0 || w % DOWN_FACTOR != 0 {
            return Err(GarmentError::Shape(format!(
                "image dims {h}x{w} not divisible by {DOWN_FACTOR}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, img: &ImageTensor<T>) -> Result<Latent<T>> {
        let (_, h, w) = img.data.dim();
        self.check_dims(h, w)?;
        let (lh, lw) = (h / DOWN_FACTOR, w / DOWN_FACTOR);
        let half = T::from_f64(0.5);
        let scale = T::from_f64(ORTHO_SCALE);
        let mut z = Array3::zeros((LATENT_CHANNELS, lh, lw));
        let mut block = [T::zero(); BLOCK_LEN];
        for by in 0..lh {
            for bx in 0..lw {
                let mut idx = 0;
                for c in 0..3 {
                    for dy in 0..DOWN_FACTOR {
                        for dx in 0..DOWN_FACTOR {
                            block[idx] =
                                img.data[[c, by * DOWN_FACTOR + dy, bx * DOWN_FACTOR + dx]] - half;
                            idx += 1;
                        }
                    }
                }
                for k in 0..LATENT_CHANNELS {
                    let mut acc = T::zero();
                    for i in 0..BLOCK_LEN {
                        acc += self.proj[[k, i]] * block[i];
                    }
                    z[[k, by, bx]] = acc * scale;
                }
            }
        }
        Latent::new(z, LatentLayout::Garment)
    }

    pub fn decode(&self, z: &Latent<T>) -> Result<ImageTensor<T>> {
        check_latent_decodable(z)?;
        let (_, lh, lw) = z.data.dim();
        let (h, w) = (lh * DOWN_FACTOR, lw * DOWN_FACTOR);
        let half = T::from_f64(0.5);
        let inv_scale = T::from_f64(1.0 / ORTHO_SCALE);
        let mut img = ImageTensor::zeros(h, w);
        for by in 0..lh {
            for bx in 0..lw {
                for c in 0..3 {
                    for dy in 0..DOWN_FACTOR {
                        for dx in 0..DOWN_FACTOR {
                            let i = (c * DOWN_FACTOR + dy) * DOWN_FACTOR + dx;
                            let mut acc = T::zero();
                            for k in 0..LATENT_CHANNELS {
                                acc += self.proj[[k, i]] * z.data[[k, by, bx]];
                            }
                            img.data[[c, by * DOWN_FACTOR + dy, bx * DOWN_FACTOR + dx]] =
                                acc * inv_scale + half;
                        }
                    }
                }
            }
        }
        img.clamp01();
        Ok(img)
    }
}

// ---------------------------------------------------------------------------
// Convolutional codec
// ---------------------------------------------------------------------------

/// Widths of the conv codec trunk.
const CODEC_WIDTHS: [usize; 3] = [16, 32, 48];

/// Tiny convolutional autoencoder; three stride-2 stages down, three
/// nearest-upsample stages back.
#[derive(Debug, Clone)]
pub struct ConvCodec<T> {
    pub params: ParamStore<T>,
}

impl<T: Scalar> ConvCodec<T> {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let [w1, w2, w3] = CODEC_WIDTHS;
        let mut conv = |p: &mut ParamStore<T>, name: &str, co: usize, ci: usize| {
            p.insert(&format!("{name}.w"), kaiming_conv(co, ci, 3, &mut rng), true);
            p.insert(&format!("{name}.b"), zeros1(co), true);
        };
        conv(&mut p, "codec.enc0", w1, 3);
        conv(&mut p, "codec.enc1", w2, w1);
        conv(&mut p, "codec.enc2", w3, w2);
        conv(&mut p, "codec.enc3", LATENT_CHANNELS, w3);
        conv(&mut p, "codec.dec0", w3, LATENT_CHANNELS);
        conv(&mut p, "codec.dec1", w2, w3);
        conv(&mut p, "codec.dec2", w1, w2);
        conv(&mut p, "codec.dec3", w1, w1);
        conv(&mut p, "codec.out", 3, w1);
        Self { params: p }
    }

    /// Graph-side encoder; used both for inference and codec pretraining.
    pub fn encode_graph(&self, b: &mut Binder<'_, '_, T>, img: Var) -> Var {
        let conv = |b: &mut Binder<'_, '_, T>, name: &str, x: Var, stride: usize| {
            let w = b.param(&format!("{name}.w"));
            let bias = b.param(&format!("{name}.b"));
            b.g.conv2d(x, w, bias, stride, 1)
        };
        let x = conv(b, "codec.enc0", img, 2);
        let x = b.g.silu(x);
        let x = conv(b, "codec.enc1", x, 2);
        let x = b.g.silu(x);
        let x = conv(b, "codec.enc2", x, 2);
        let x = b.g.silu(x);
        conv(b, "codec.enc3", x, 1)
    }

    pub fn decode_graph(&self, b: &mut Binder<'_, '_, T>, z: Var) -> Var {
        let conv = |b: &mut Binder<'_, '_, T>, name: &str, x: Var| {
            let w = b.param(&format!("{name}.w"));
            let bias = b.param(&format!("{name}.b"));
            b.g.conv2d(x, w, bias, 1, 1)
        };
        let x = conv(b, "codec.dec0", z);
        let x = b.g.silu(x);
        let x = b.g.upsample2x(x);
        let x = conv(b, "codec.dec1", x);
        let x = b.g.silu(x);
        let x = b.g.upsample2x(x);
        let x = conv(b, "codec.dec2", x);
        let x = b.g.silu(x);
        let x = b.g.upsample2x(x);
        let x = conv(b, "codec.dec3", x);
        let x = b.g.silu(x);
        conv(b, "codec.out", x)
    }

    pub fn encode(&self, img: &ImageTensor<T>) -> Result<Latent<T>> {
        let (_, h, w) = img.data.dim();
        if h % DOWN_FACTOR != 0 || w % DOWN_FACTOR != 0 {
            return Err(GarmentError::Shape(format!(
                "image dims {h}x{w} not divisible by {DOWN_FACTOR}"
            )));
        }
        let mut g: Graph<T> = Graph::new();
        let mut b = Binder::new(&mut g, &self.params, false);
        let img_var = b.g.leaf(img.data.clone().into_dyn(), false);
        let z = self.encode_graph(&mut b, img_var);
        let data = g
            .value(z)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        Latent::new(data, LatentLayout::Garment)
    }

    pub fn decode(&self, z: &Latent<T>) -> Result<ImageTensor<T>> {
        check_latent_decodable(z)?;
        let mut g: Graph<T> = Graph::new();
        let mut b = Binder::new(&mut g, &self.params, false);
        let z_var = b.g.leaf(z.data.clone().into_dyn(), false);
        let out = self.decode_graph(&mut b, z_var);
        let data = g
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let mut img = ImageTensor::new(data)?;
        img.clamp01();
        Ok(img)
    }
}

/// Peak signal-to-noise ratio between two same-shaped [0,1] images, in dB.
pub fn psnr<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> f64 {
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| {
            let d = x.to_f64_() - y.to_f64_();
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

/// Stable 64-bit FNV-1a hash; deliberately independent of std's hasher so
/// embeddings never change across toolchain releases.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn token_embedding<T: Scalar>(token: &str, vocab_seed: u64) -> Array1<T> {
    let mut rng = ChaCha12Rng::seed_from_u64(fnv1a64(token.as_bytes()) ^ vocab_seed);
    let scale = 1.0 / (D_TEXT as f64).sqrt();
    Array1::from_shape_fn(D_TEXT, |_| T::from_f64(f64::standard_normal(&mut rng) * scale))
}

/// Reserved null-prompt embedding used as the CFG unconditional text input.
pub fn null_text_embedding<T: Scalar>(vocab_seed: u64) -> FeatureSequence<T> {
    let row = token_embedding::<T>("", vocab_seed);
    let mut tokens = Array2::zeros((1, D_TEXT));
    tokens.row_mut(0).assign(&row);
    FeatureSequence { tokens, role: FeatureRole::Text }
}

/// Deterministic hash-embedding text encoder.
///
/// Tokens are lowercased whitespace splits; each maps to a fixed seeded
/// embedding row. The empty prompt yields the single null token. Prompts
/// beyond [`MAX_PROMPT_TOKENS`] tokens are truncated.
pub fn encode_text<T: Scalar>(prompt: &str, vocab_seed: u64) -> FeatureSequence<T> {
    let tokens: Vec<String> = prompt
        .split_whitespace()
        .take(MAX_PROMPT_TOKENS)
        .map(|t| t.to_lowercase())
        .collect();
    if tokens.is_empty() {
        return null_text_embedding(vocab_seed);
    }
    let mut out = Array2::zeros((tokens.len(), D_TEXT));
    for (i, tok) in tokens.iter().enumerate() {
        out.row_mut(i).assign(&token_embedding::<T>(tok, vocab_seed));
    }
    FeatureSequence { tokens: out, role: FeatureRole::Text }
}

// ---------------------------------------------------------------------------
// Color encoder
// ---------------------------------------------------------------------------

/// Fixed color descriptor: per-cell mean RGB over a 4x4 grid (48 values)
/// concatenated with a 4x4x4 RGB histogram (64 values).
pub fn color_fixed_feature<T: Scalar>(img: &ImageTensor<T>) -> Array1<T> {
    let (_, h, w) = img.data.dim();
    let mut feat = Array1::zeros(COLOR_FEATURE_DIM);
    // Grid means. Cell boundaries partition the image as evenly as possible.
    for gy in 0..4 {
        for gx in 0..4 {
            let y0 = gy * h / 4;
            let y1 = (gy + 1) * h / 4;
            let x0 = gx * w / 4;
            let x1 = (gx + 1) * w / 4;
            let n = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
            for c in 0..3 {
                let mut acc = T::zero();
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img.data[[c, y, x]];
                    }
                }
                feat[(gy * 4 + gx) * 3 + c] = acc / n;
            }
        }
    }
    // 4-bin-per-channel RGB histogram, normalized to sum 1.
    let bin = |v: T| -> usize { ((v.to_f64_() * 4.0) as usize).min(3) };
    let inv_n = T::from_f64(1.0 / (h * w) as f64);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            let idx = 48 + (bin(p[0]) * 4 + bin(p[1])) * 4 + bin(p[2]);
            feat[idx] += inv_n;
        }
    }
    feat
}

/// Color adapter: fixed descriptor projected by a trainable matrix to
/// `N_COLOR_TOKENS` x `D_TEXT` tokens.
pub fn encode_color<T: Scalar>(
    color_img: &ImageTensor<T>,
    proj: &Array2<T>,
) -> Result<FeatureSequence<T>> {
    if proj.nrows() != COLOR_FEATURE_DIM || proj.ncols() != N_COLOR_TOKENS * D_TEXT {
        return Err(GarmentError::Shape(format!(
            "color projection must be {}x{}, got {}x{}",
            COLOR_FEATURE_DIM,
            N_COLOR_TOKENS * D_TEXT,
            proj.nrows(),
            proj.ncols()
        )));
    }
    let feat = color_fixed_feature(color_img);
    let flat = feat.dot(proj);
    let tokens = flat
        .into_shape_with_order((N_COLOR_TOKENS, D_TEXT))
        .unwrap();
    Ok(FeatureSequence { tokens, role: FeatureRole::Color })
}

/// Graph-side color adapter for training: `feature [1,112] x proj`.
pub fn encode_color_graph<T: Scalar>(
    b: &mut Binder<'_, '_, T>,
    color_img: &ImageTensor<T>,
    proj_name: &str,
) -> Var {
    let feat = color_fixed_feature(color_img);
    let feat2 = feat.insert_axis(Axis(0)).into_dyn();
    let f = b.g.leaf(feat2, false);
    let proj = b.param(proj_name);
    let flat = b.g.matmul(f, proj);
    b.g.reshape(flat, &[N_COLOR_TOKENS, D_TEXT])
}

/// All-zero color tokens: the null color condition for CFG.
pub fn null_color_tokens<T: Scalar>() -> FeatureSequence<T> {
    FeatureSequence::zeros(N_COLOR_TOKENS, D_TEXT, FeatureRole::Color)
}

// ---------------------------------------------------------------------------
// Mask resize
// ---------------------------------------------------------------------------

/// Nearest-neighbor downscale of a pixel mask to latent resolution
/// (exactly source/8; anything else is a parameter error). Values stay
/// binary.
pub fn resize_mask_nearest<T: Scalar>(
    m: &MaskTensor<T>,
    h: usize,
    w: usize,
) -> Result<Latent<T>> {
    let (_, sh, sw) = m.data.dim();
    if sh != h * DOWN_FACTOR || sw != w * DOWN_FACTOR {
        return Err(GarmentError::Parameter(format!(
            "mask resize must be exactly 1/{DOWN_FACTOR}: {sh}x{sw} -> {h}x{w}"
        )));
    }
    let mut out = Array3::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            // Nearest source sample for an 8x downscale: the cell center.
            out[[0, y, x]] = m.data[[0, y * DOWN_FACTOR + DOWN_FACTOR / 2, x * DOWN_FACTOR + DOWN_FACTOR / 2]];
        }
    }
    Latent::new(out, LatentLayout::LatentMask)
}

/// Zero latent with the garment layout; the stage-I sampling start state
/// and the null logo condition share this shape.
pub fn zero_latent<T: Scalar>(h: usize, w: usize, layout: LatentLayout) -> Latent<T> {
    let c = match layout {
        LatentLayout::Stage2Input => 9,
        LatentLayout::LatentMask => 1,
        _ => LATENT_CHANNELS,
    };
    Latent { data: Array3::zeros((c, h, w)), layout }
}

/// Standard-normal latent from a seeded stream.
pub fn randn_latent<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    layout: LatentLayout,
    rng: &mut ChaCha12Rng,
) -> Latent<T> {
    let data = Array3::from_shape_fn((c, h, w), |_| T::standard_normal(rng));
    Latent { data, layout }
}

/// Image to dyn array helper for graph leaves.
pub fn image_to_dyn<T: Scalar>(img: &ImageTensor<T>) -> ArrayD<T> {
    img.data.clone().into_dyn()
}

/// Latent from a graph value.
pub fn latent_from_dyn<T: Scalar>(v: &ArrayD<T>, layout: LatentLayout) -> Latent<T> {
    let data = v.view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned();
    Latent { data, layout }
}
