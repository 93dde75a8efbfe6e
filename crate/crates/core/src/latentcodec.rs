//! Convolutional autoencoder between frames and diffusion latents.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use storyldm_autodiff::layers::Conv2d;
use storyldm_autodiff::optim::{Adam, AdamConfig};
use storyldm_autodiff::{Ctx, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub image_size: usize,
    /// Spatial downsampling factor, a power of two.
    pub factor: usize,
    pub latent_channels: usize,
    /// Hidden widths at full and at reduced resolution.
    pub widths: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            factor: 4,
            latent_channels: 4,
            widths: [32, 64],
            epochs: 5,
            batch_size: 16,
            lr: 2e-3,
        }
    }
}

impl CodecConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / self.factor
    }

    fn stages(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::Config(format!("factor {} must be a power of two ≥ 2", self.factor)));
        }
        if self.image_size % self.factor != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by factor {}",
                self.image_size, self.factor
            )));
        }
        if self.latent_channels == 0 || self.widths.contains(&0) || self.batch_size == 0 {
            return Err(Error::Config("codec widths and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_res: [Conv2d; 2],
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: [Conv2d; 2],
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

fn residual<'g>(cx: &Ctx<'g, f32>, convs: &[Conv2d; 2], h: Var<'g, f32>) -> Var<'g, f32> {
    let r = convs[0].forward(cx, h).silu();
    h.add(&convs[1].forward(cx, r).silu())
}

impl Layers {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore<f32>, cfg: &CodecConfig, rng: &mut R) -> Self {
        let [w0, w1] = cfg.widths;
        let n = cfg.stages();
        let enc_down = (0..n)
            .map(|i| {
                let cin = if i == 0 { w0 } else { w1 };
                Conv2d::new(store, &format!("codec.enc.down{i}"), cin, w1, 3, 2, 1, rng)
            })
            .collect();
        let dec_up = (0..n)
            .map(|i| {
                let cout = if i + 1 == n { w0 } else { w1 };
                Conv2d::same3(store, &format!("codec.dec.up{i}"), w1, cout, rng)
            })
            .collect();
        Self {
            enc_in: Conv2d::same3(store, "codec.enc.in", 3, w0, rng),
            enc_down,
            enc_res: [
                Conv2d::same3(store, "codec.enc.res0", w1, w1, rng),
                Conv2d::same3(store, "codec.enc.res1", w1, w1, rng),
            ],
            enc_out: Conv2d::same3(store, "codec.enc.out", w1, cfg.latent_channels, rng),
            dec_in: Conv2d::same3(store, "codec.dec.in", cfg.latent_channels, w1, rng),
            dec_res: [
                Conv2d::same3(store, "codec.dec.res0", w1, w1, rng),
                Conv2d::same3(store, "codec.dec.res1", w1, w1, rng),
            ],
            dec_up,
            dec_out: Conv2d::same3(store, "codec.dec.out", w0, 3, rng),
        }
    }

    fn encode<'g>(&self, cx: &Ctx<'g, f32>, x: Var<'g, f32>) -> Var<'g, f32> {
        let mut h = self.enc_in.forward(cx, x).silu();
        for conv in &self.enc_down {
            h = conv.forward(cx, h).silu();
        }
        h = residual(cx, &self.enc_res, h);
        self.enc_out.forward(cx, h)
    }

    fn decode<'g>(&self, cx: &Ctx<'g, f32>, z: Var<'g, f32>) -> Var<'g, f32> {
        let mut h = self.dec_in.forward(cx, z).silu();
        h = residual(cx, &self.dec_res, h);
        for conv in &self.dec_up {
            h = conv.forward(cx, h.upsample_nearest2x()).silu();
        }
        self.dec_out.forward(cx, h)
    }
}

/// Frozen encoder/decoder pair plus the latent scale.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub config: CodecConfig,
    pub params: ParamStore<f32>,
    /// Multiplies raw encoder output so train latents have unit std.
    pub scale: f64,
    layers: Layers,
}

/// Per-epoch mean reconstruction loss.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CodecTrainLog {
    pub epoch_loss: Vec<f64>,
}

pub fn images_to_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let chw: Vec<Tensor<f32>> = images.iter().map(|i| i.to_chw()).collect();
    Ok(Tensor::stack(&chw)?)
}

impl LatentCodec {
    /// Randomly initialised codec with unit scale.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layers = Layers::new(&mut store, &config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            config,
            params: store,
            scale: 1.0,
            layers,
        })
    }

    /// Rebuild from stored parameters.
    pub fn from_parts(config: CodecConfig, params: ParamStore<f32>, scale: f64) -> Result<Self> {
        let mut codec = Self::new(config, 0)?;
        for name in codec.params.names().map(str::to_string).collect::<Vec<_>>() {
            let p = params
                .get(&name)
                .ok_or_else(|| Error::Format(format!("codec parameter `{name}` missing")))?;
            if p.shape() != codec.params.get(&name).unwrap().shape() {
                return Err(Error::Format(format!("codec parameter `{name}` has wrong shape")));
            }
            codec.params.set(name, p.clone());
        }
        codec.scale = scale;
        Ok(codec)
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        let s = self.config.image_size;
        for img in images {
            if img.height != s || img.width != s {
                return Err(Error::Shape {
                    op: "LatentCodec::encode",
                    expected: vec![s, s, 3],
                    got: vec![img.height, img.width, 3],
                });
            }
        }
        Ok(())
    }

    /// Scaled latents `[B, c, h, w]`.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        self.check_images(images)?;
        if images.is_empty() {
            return Err(Error::Empty("encode batch"));
        }
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.params);
        let x = cx.constant(images_to_batch(images)?);
        let scale = self.scale as f32;
        Ok(self.layers.encode(&cx, x).to_tensor().map(|v| v * scale))
    }

    /// Decoded, clamped frames from scaled latents `[B, c, h, w]`.
    pub fn decode_batch(&self, latents: &Tensor<f32>) -> Result<Vec<Image>> {
        let (c, h) = (self.config.latent_channels, self.config.latent_size());
        if latents.rank() != 4 || latents.shape()[1..] != [c, h, h] {
            return Err(Error::Shape {
                op: "LatentCodec::decode",
                expected: vec![0, c, h, h],
                got: latents.shape().to_vec(),
            });
        }
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.params);
        let inv = (1.0 / self.scale) as f32;
        let z = cx.constant(latents.map(|v| v * inv));
        let out = self.layers.decode(&cx, z).to_tensor();
        (0..out.dim(0)).map(|i| Image::from_chw(&out.index0(i))).collect()
    }

    /// `[c, h, w]`
    pub fn encode(&self, image: &Image) -> Result<Tensor<f32>> {
        let z = self.encode_batch(&[image])?;
        Ok(z.index0(0))
    }

    pub fn decode(&self, latent: &Tensor<f32>) -> Result<Image> {
        let mut shape = vec![1];
        shape.extend_from_slice(latent.shape());
        Ok(self.decode_batch(&latent.reshape(&shape)?)?.remove(0))
    }

    /// Mean PSNR of decode(encode(x)) over `images`.
    pub fn reconstruction_psnr(&self, images: &[&Image]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in images.chunks(64) {
            let z = self.encode_batch(chunk)?;
            let rec = self.decode_batch(&z)?;
            for (a, b) in chunk.iter().zip(&rec) {
                total += crate::image::psnr(&a.data, &b.data).min(99.0);
            }
        }
        Ok(total / images.len().max(1) as f64)
    }

    /// Std of scaled latents over `images`.
    pub fn latent_std(&self, images: &[&Image]) -> Result<f64> {
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
        for chunk in images.chunks(64) {
            for &v in self.encode_batch(chunk)?.data() {
                s += v as f64;
                s2 += (v as f64).powi(2);
                n += 1;
            }
        }
        let mean = s / n.max(1) as f64;
        Ok((s2 / n.max(1) as f64 - mean * mean).max(0.0).sqrt())
    }

    /// Per-channel std of scaled latents.
    pub fn channel_std(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let c = self.config.latent_channels;
        let hw = self.config.latent_size().pow(2);
        let (mut s, mut s2, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
        for chunk in images.chunks(64) {
            let z = self.encode_batch(chunk)?;
            for (i, &v) in z.data().iter().enumerate() {
                let ch = (i / hw) % c;
                s[ch] += v as f64;
                s2[ch] += (v as f64).powi(2);
            }
            n += chunk.len() * hw;
        }
        Ok((0..c)
            .map(|k| {
                let m = s[k] / n as f64;
                (s2[k] / n as f64 - m * m).max(0.0).sqrt()
            })
            .collect())
    }
}

/// Train encoder and decoder with an L2 reconstruction loss, then set the
/// latent scale from the training images.
/// Cosine decay from `base` down to 5% of it.
pub(crate) fn cosine_lr(base: f64, progress: f64) -> f64 {
    let floor = 0.05 * base;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

pub fn train_codec(
    images: &[&Image],
    config: &CodecConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(LatentCodec, CodecTrainLog)> {
    if images.is_empty() {
        return Err(Error::Empty("codec training set"));
    }
    let mut codec = LatentCodec::new(config.clone(), seed)?;
    codec.check_images(images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = CodecTrainLog::default();
    let mut step = 0u64;
    let total = (config.epochs * images.len().div_ceil(config.batch_size)).max(1) as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let x = images_to_batch(&batch)?;
            let g = Graph::new();
            let cx = Ctx::new(&g, &codec.params);
            let xv = cx.constant(x);
            let rec = codec.layers.decode(&cx, codec.layers.encode(&cx, xv));
            let loss = rec.mse(&xv);
            let value = loss.value().item() as f64;
            step += 1;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: value,
                    last_good: None,
                });
            }
            let grads = g.param_grads(&g.backward(loss));
            adam.config.lr = cosine_lr(config.lr, (step - 1) as f64 / total);
            adam.step(&mut codec.params, &grads);
            sum += value * batch.len() as f64;
            count += batch.len();
        }
        let mean = sum / count as f64;
        log.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    let std = codec.latent_std(images)?;
    codec.scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    Ok((codec, log))
}
