//! Small vector-quantised autoencoder: images to token grids and back.
//!
//! Encoder: 3×3 conv, two stride-2 4×4 convs, 1×1 projection to the code
//! dimension (ReLU between). Decoder mirrors it with nearest-neighbour
//! upsampling. Latents snap to their nearest codebook vector; gradients pass
//! straight through the snap.

mod image;

pub use image::{render_mask, render_tokens, Image};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamW, ConvGeometry, ParamId, ParamSet, Scalar, Tape, Tensor, Var};

pub const DOWNSAMPLE: usize = 4;
const INIT_JITTER: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden_channels: usize,
    pub beta: f32,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            channels: 1,
            image_height: 32,
            image_width: 32,
            codebook_size: 64,
            code_dim: 16,
            hidden_channels: 32,
            beta: 0.25,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels {} (1 or 3 supported)", self.channels)));
        }
        if self.image_height % DOWNSAMPLE != 0 || self.image_width % DOWNSAMPLE != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config(format!(
                "image {}×{} not divisible by {DOWNSAMPLE}",
                self.image_height, self.image_width
            )));
        }
        if self.codebook_size < 2 || self.code_dim == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("codebook_size >= 2, code_dim and hidden_channels > 0 required".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        Ok(())
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / DOWNSAMPLE
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / DOWNSAMPLE
    }
}

/// Token indices on a 2-D grid. The value `K` marks a masked position in
/// sampler and training contexts; tokenizer output never contains it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOutput {
    pub indices: Vec<usize>,
    pub quantized: Vec<f32>,
    pub codebook_loss: f32,
    pub commitment_loss: f32,
}

/// Index of the nearest row of `codebook` (`K×d`); ties go to the lower
/// index.
pub fn nearest_code<T: Scalar>(latent: &[T], codebook: &[T], d: usize) -> usize {
    let mut best = (0, T::infinity());
    for (j, code) in codebook.chunks_exact(d).enumerate() {
        let dist = latent
            .iter()
            .zip(code)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best.0
}

/// Snaps each of the `n×d` latents to its nearest code. Both losses are the
/// mean squared latent-to-code distance; they differ only in which side
/// receives gradient during training.
pub fn quantize(latents: &[f32], codebook: &[f32], d: usize) -> Result<QuantizeOutput> {
    if d == 0 || latents.len() % d != 0 || codebook.len() % d != 0 || codebook.is_empty() {
        return Err(Error::Dimension {
            op: "quantize",
            left: vec![latents.len(), d],
            right: vec![codebook.len(), d],
        });
    }
    let indices: Vec<usize> = latents.chunks_exact(d).map(|z| nearest_code(z, codebook, d)).collect();
    let quantized: Vec<f32> = indices.iter().flat_map(|&i| codebook[i * d..(i + 1) * d].iter().copied()).collect();
    let se: f64 = latents
        .iter()
        .zip(&quantized)
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    let mse = (se / latents.len().max(1) as f64) as f32;
    Ok(QuantizeOutput {
        indices,
        quantized,
        codebook_loss: mse,
        commitment_loss: mse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLosses {
    pub recon: f32,
    pub codebook: f32,
    pub commitment: f32,
}

impl VqLosses {
    pub fn total(&self, beta: f32) -> f32 {
        self.recon + self.codebook + beta * self.commitment
    }
}

/// Codebook histogram and perplexity `exp(H)` of the empirical usage.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookUsage {
    pub counts: Vec<usize>,
    pub perplexity: f64,
}

pub fn codebook_usage(grids: &[TokenGrid], codebook_size: usize) -> Result<CodebookUsage> {
    let mut counts = vec![0usize; codebook_size];
    for g in grids {
        for &t in &g.tokens {
            *counts
                .get_mut(t)
                .ok_or_else(|| Error::InvalidToken(format!("token {t} outside [0, {codebook_size})")))? += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookUsage {
        counts,
        perplexity: entropy.exp(),
    })
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: [ConvIds; 4],
    codebook: ParamId,
    dec: [ConvIds; 4],
}

#[derive(Debug, Clone)]
pub struct VqAutoencoder {
    config: VqConfig,
    params: ParamSet,
    layout: Layout,
}

/// Intermediate values of one autoencoder pass on a tape.
pub struct VqPass {
    pub latents: Var,
    pub indices: Vec<usize>,
    pub quantized: Var,
    pub recon: Var,
    pub recon_loss: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    pub total: Var,
}

impl VqAutoencoder {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, d) = (config.channels, config.hidden_channels, config.code_dim);
        let mut ps = ParamSet::new();
        let mut conv = |ps: &mut ParamSet, name: &str, out: usize, fan_in: usize| {
            let std = (2.0 / fan_in as f32).sqrt();
            ConvIds {
                w: ps.add(format!("{name}.w"), Tensor::randn(vec![out, fan_in], std, &mut rng)),
                b: ps.add(format!("{name}.b"), Tensor::zeros(vec![out])),
            }
        };
        let enc = [
            conv(&mut ps, "enc.0", h, c * 9),
            conv(&mut ps, "enc.1", h, h * 16),
            conv(&mut ps, "enc.2", h, h * 16),
            conv(&mut ps, "enc.3", d, h),
        ];
        let dec = [
            conv(&mut ps, "dec.0", h, d),
            conv(&mut ps, "dec.1", h, h * 9),
            conv(&mut ps, "dec.2", h, h * 9),
            conv(&mut ps, "dec.3", c, h * 9),
        ];
        let codebook = ps.add("codebook", Tensor::randn(vec![config.codebook_size, d], 1.0, &mut rng));
        Ok(VqAutoencoder {
            config,
            params: ps,
            layout: Layout { enc, codebook, dec },
        })
    }

    pub fn from_tensors(config: VqConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_from(named)?;
        Ok(m)
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn codebook(&self) -> &[f32] {
        &self.params.get(self.layout.codebook).data
    }

    pub fn codebook_id(&self) -> ParamId {
        self.layout.codebook
    }

    /// Ids of the decoder weights and biases.
    pub fn decoder_ids(&self) -> Vec<ParamId> {
        self.layout.dec.iter().flat_map(|c| [c.w, c.b]).collect()
    }

    fn check_images(&self, images: &[Image]) -> Result<()> {
        let c = &self.config;
        if images.is_empty() {
            return Err(Error::Contract("empty image batch".into()));
        }
        for img in images {
            if img.height % DOWNSAMPLE != 0 || img.width % DOWNSAMPLE != 0 {
                return Err(Error::Shape(format!(
                    "image {}×{} not divisible by {DOWNSAMPLE}",
                    img.height, img.width
                )));
            }
            if (img.height, img.width, img.channels) != (c.image_height, c.image_width, c.channels) {
                return Err(Error::Shape(format!(
                    "image {}×{}×{} but tokenizer expects {}×{}×{}",
                    img.height, img.width, img.channels, c.image_height, c.image_width, c.channels
                )));
            }
        }
        Ok(())
    }

    fn geo(&self, batch: usize, in_ch: usize, out_ch: usize, size: (usize, usize), kernel: usize, stride: usize, pad: usize) -> ConvGeometry {
        ConvGeometry {
            batch,
            in_ch,
            out_ch,
            height: size.0,
            width: size.1,
            kernel,
            stride,
            pad,
        }
    }

    fn conv<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &[Var], ids: ConvIds, x: Var, geo: ConvGeometry) -> Result<Var> {
        tape.conv2d(x, p[ids.w.0], p[ids.b.0], geo)
    }

    /// Encoder output as `[B·h·w × d]` rows, grid positions in raster order.
    pub fn encode_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &[Var], images: &[Image]) -> Result<Var> {
        self.check_images(images)?;
        let c = self.config;
        let b = images.len();
        let (hh, ww) = (c.image_height, c.image_width);
        let hid = c.hidden_channels;
        let pixels: Vec<T> = images
            .iter()
            .flat_map(|i| i.to_chw())
            .map(|v| T::lit(v as f64))
            .collect();
        let x = tape.constant(vec![b, c.channels, hh, ww], pixels)?;
        let e = &self.layout.enc;
        let x = self.conv(tape, p, e[0], x, self.geo(b, c.channels, hid, (hh, ww), 3, 1, 1))?;
        let x = tape.relu(x);
        let x = self.conv(tape, p, e[1], x, self.geo(b, hid, hid, (hh, ww), 4, 2, 1))?;
        let x = tape.relu(x);
        let x = self.conv(tape, p, e[2], x, self.geo(b, hid, hid, (hh / 2, ww / 2), 4, 2, 1))?;
        let x = tape.relu(x);
        let (gh, gw) = (c.grid_height(), c.grid_width());
        let z = self.conv(tape, p, e[3], x, self.geo(b, hid, c.code_dim, (gh, gw), 1, 1, 0))?;
        tape.transpose(z, b, c.code_dim, gh * gw, vec![b * gh * gw, c.code_dim])
    }

    /// Decoder from `[B·h·w × d]` rows to `[B, c, H, W]` (unclamped).
    pub fn decode_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &[Var], q: Var, batch: usize) -> Result<Var> {
        let c = self.config;
        let (gh, gw) = (c.grid_height(), c.grid_width());
        let hid = c.hidden_channels;
        let x = tape.transpose(q, batch, gh * gw, c.code_dim, vec![batch, c.code_dim, gh, gw])?;
        let dl = &self.layout.dec;
        let x = self.conv(tape, p, dl[0], x, self.geo(batch, c.code_dim, hid, (gh, gw), 1, 1, 0))?;
        let x = tape.relu(x);
        let x = tape.upsample2(x)?;
        let x = self.conv(tape, p, dl[1], x, self.geo(batch, hid, hid, (gh * 2, gw * 2), 3, 1, 1))?;
        let x = tape.relu(x);
        let x = tape.upsample2(x)?;
        let x = self.conv(tape, p, dl[2], x, self.geo(batch, hid, hid, (gh * 4, gw * 4), 3, 1, 1))?;
        let x = tape.relu(x);
        self.conv(tape, p, dl[3], x, self.geo(batch, hid, c.channels, (gh * 4, gw * 4), 3, 1, 1))
    }

    /// Full training graph: encode, snap, decode, and the three losses.
    pub fn pass_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &[Var], images: &[Image]) -> Result<VqPass> {
        let d = self.config.code_dim;
        let latents = self.encode_on(tape, p, images)?;
        let cb = p[self.layout.codebook.0];
        let indices: Vec<usize> = tape
            .value(latents)
            .chunks_exact(d)
            .map(|z| nearest_code(z, tape.value(cb), d))
            .collect();
        let codes = tape.gather(cb, &indices)?;
        let code_vals = tape.value(codes).to_vec();
        let latent_vals = tape.value(latents).to_vec();
        let shape = tape.shape(latents).to_vec();
        let latents_sg = tape.constant(shape.clone(), latent_vals)?;
        let codes_sg = tape.constant(shape, code_vals.clone())?;
        let codebook_loss = tape.mse(codes, latents_sg)?;
        let commitment_loss = tape.mse(latents, codes_sg)?;
        let quantized = tape.straight_through(latents, code_vals)?;
        let recon = self.decode_on(tape, p, quantized, images.len())?;
        let target: Vec<T> = images
            .iter()
            .flat_map(|i| i.to_chw())
            .map(|v| T::lit(v as f64))
            .collect();
        let target = tape.constant(tape.shape(recon).to_vec(), target)?;
        let recon_loss = tape.mse(recon, target)?;
        let commit = tape.scale(commitment_loss, self.config.beta);
        let total = tape.add(recon_loss, codebook_loss)?;
        let total = tape.add(total, commit)?;
        Ok(VqPass {
            latents,
            indices,
            quantized,
            recon,
            recon_loss,
            codebook_loss,
            commitment_loss,
            total,
        })
    }

    /// Encoder outputs, `[B·h·w × d]` values.
    pub fn latents(&self, images: &[Image]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let z = self.encode_on(&mut tape, &p, images)?;
        Ok(tape.value(z).to_vec())
    }

    /// Replaces the codebook with encoder outputs drawn at random from
    /// `images`, nudging apart any duplicates.
    pub fn init_codebook(&mut self, images: &[Image], seed: u64) -> Result<()> {
        let d = self.config.code_dim;
        let k = self.config.codebook_size;
        let z = self.latents(images)?;
        let n = z.len() / d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = if n >= k {
            sample(&mut rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        };
        let mut cb: Vec<f32> = picks.iter().flat_map(|&i| z[i * d..(i + 1) * d].iter().copied()).collect();
        for j in 1..k {
            while (0..j).any(|i| cb[i * d..(i + 1) * d] == cb[j * d..(j + 1) * d]) {
                for v in &mut cb[j * d..(j + 1) * d] {
                    *v += INIT_JITTER * crate::numerics::standard_normal(&mut rng);
                }
            }
        }
        self.params.get_mut(self.layout.codebook).data = cb;
        Ok(())
    }

    /// One AdamW step on `recon + codebook + β·commitment`.
    pub fn train_step(&mut self, images: &[Image], opt: &mut AdamW) -> Result<VqLosses> {
        if images.is_empty() {
            return Err(Error::Contract("empty image batch".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let pass = self.pass_on(&mut tape, &p, images)?;
        tape.backward(pass.total)?;
        let losses = VqLosses {
            recon: tape.scalar(pass.recon_loss),
            codebook: tape.scalar(pass.codebook_loss),
            commitment: tape.scalar(pass.commitment_loss),
        };
        let grads = tape.into_param_grads();
        self.params.zero_grad();
        self.params.add_grads(grads);
        opt.step(&mut self.params)?;
        Ok(losses)
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Vec<TokenGrid>> {
        let d = self.config.code_dim;
        let z = self.latents(images)?;
        let q = quantize(&z, self.codebook(), d)?;
        let per = self.config.grid_height() * self.config.grid_width();
        Ok(q
            .indices
            .chunks_exact(per)
            .map(|t| TokenGrid {
                height: self.config.grid_height(),
                width: self.config.grid_width(),
                tokens: t.to_vec(),
            })
            .collect())
    }

    pub fn encode_image(&self, image: &Image) -> Result<TokenGrid> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Images for token grids, clamped to `[0,1]`.
    pub fn decode_batch(&self, grids: &[TokenGrid]) -> Result<Vec<Image>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.config;
        let k = c.codebook_size;
        let mut rows = Vec::with_capacity(grids.len() * c.grid_height() * c.grid_width());
        for g in grids {
            if (g.height, g.width) != (c.grid_height(), c.grid_width()) || g.tokens.len() != g.height * g.width {
                return Err(Error::Shape(format!(
                    "{}×{} grid but tokenizer decodes {}×{}",
                    g.height,
                    g.width,
                    c.grid_height(),
                    c.grid_width()
                )));
            }
            if let Some(&t) = g.tokens.iter().find(|&&t| t >= k) {
                return Err(Error::InvalidToken(if t == k {
                    "mask token in a grid passed to decode".into()
                } else {
                    format!("token {t} outside [0, {k})")
                }));
            }
            rows.extend_from_slice(&g.tokens);
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let q = tape.gather(p[self.layout.codebook.0], &rows)?;
        let x = self.decode_on(&mut tape, &p, q, grids.len())?;
        let per = c.channels * c.image_height * c.image_width;
        tape.value(x)
            .chunks_exact(per)
            .map(|chw| {
                let clamped: Vec<f32> = chw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                Image::from_chw(c.image_height, c.image_width, c.channels, &clamped)
            })
            .collect()
    }

    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<Image> {
        Ok(self.decode_batch(std::slice::from_ref(grid))?.remove(0))
    }
}
