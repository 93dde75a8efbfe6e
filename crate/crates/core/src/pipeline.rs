//! Joint text encoder + denoiser, the training loop, and autoregressive story sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use storyldm_autodiff::optim::{clip_grad_norm, Adam, AdamConfig, Ema};
use storyldm_autodiff::{Ctx, Graph, ParamStore, Tensor, Var};

use crate::attention::{MemoryEntry, MemoryView, VisualMemory, MEMORY_CAPACITY};
use crate::checkpoint::{
    archive_id, codec_from_tensors, codec_tensors, decode_archive, encode_archive, map_to_store, read_file,
    store_to_map, write_atomic, CodecHeader,
};
use crate::denoiser::{encoding_batch, memory_input, ConditioningBundle, MemoryInput, UNet, UNetConfig};
use crate::diffusion::{make_schedule, p_sample_step, q_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latentcodec::LatentCodec;
use crate::synthstory::StorySample;
use crate::textenc::{words, EncodedBatch, SentenceEncoding, TextEncoder, TextEncoderConfig, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, codec: &LatentCodec) -> Self {
        let text = TextEncoderConfig::new(vocab_size);
        Self {
            unet: UNetConfig {
                latent_channels: codec.config.latent_channels,
                latent_size: codec.config.latent_size(),
                text_dim: text.dim,
                ..Default::default()
            },
            text,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
        }
    }

    /// A few thousand parameters and 20 diffusion steps, for smoke tests.
    pub fn tiny(vocab_size: usize, codec: &LatentCodec) -> Self {
        let text = TextEncoderConfig {
            dim: 16,
            layers: 1,
            ..TextEncoderConfig::new(vocab_size)
        };
        Self {
            unet: UNetConfig {
                latent_channels: codec.config.latent_channels,
                latent_size: codec.config.latent_size(),
                base_channels: 8,
                channel_mults: vec![1, 2],
                time_dim: 16,
                text_dim: 16,
                memory_key_dim: 8,
                adapter_channels: 8,
                groups: 4,
                frame_slots: 4,
                diffusion_steps: 20,
                use_memory: true,
                use_frame_position: true,
            },
            text,
            beta_start: 1e-3,
            beta_end: 0.3,
        }
    }

    /// The memory-disabled conditional baseline.
    pub fn without_memory(mut self) -> Self {
        self.unet.use_memory = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.text.dim != self.unet.text_dim {
            return Err(Error::Config(format!(
                "text encoder width {} differs from denoiser text width {}",
                self.text.dim, self.unet.text_dim
            )));
        }
        Ok(())
    }
}

/// Text encoder and U-Net sharing one parameter store, plus the frozen codec.
#[derive(Clone, Debug)]
pub struct StoryModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub codec: Arc<LatentCodec>,
    params: ParamStore<f32>,
    id: OnceLock<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    config: ModelConfig,
    vocab: Vocabulary,
    codec: CodecHeader,
    train: Option<TrainHeader>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainHeader {
    config: TrainConfig,
    step: u64,
    adam: AdamConfig,
    adam_step: u64,
}

const MODEL_PREFIX: &str = "model/";
const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";
const EMA_PREFIX: &str = "ema/";

impl StoryModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, codec: Arc<LatentCodec>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.text.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "text encoder expects {} tokens, vocabulary has {}",
                config.text.vocab_size,
                vocab.len()
            )));
        }
        if config.unet.latent_channels != codec.config.latent_channels
            || config.unet.latent_size != codec.config.latent_size()
        {
            return Err(Error::Config("denoiser latent shape does not match the codec".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let text = TextEncoder::new(&mut params, "text", config.text, &mut rng);
        let unet = UNet::new(&mut params, "unet", config.unet.clone(), &mut rng)?;
        let schedule = make_schedule(config.unet.diffusion_steps, config.beta_start, config.beta_end)?;
        Ok(Self {
            config,
            vocab,
            text,
            unet,
            schedule,
            codec,
            params,
            id: OnceLock::new(),
        })
    }

    /// Rebuild around stored parameters; names and shapes must match exactly.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        codec: Arc<LatentCodec>,
        params: ParamStore<f32>,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocab, codec, 0)?;
        check_same_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        self.id = OnceLock::new();
        &mut self.params
    }

    pub fn uses_memory(&self) -> bool {
        self.config.unet.use_memory
    }

    /// Token ids for a sentence; empty sentences are rejected, unknown words map to UNK.
    pub fn tokenize(&self, sentence: &str) -> Result<Vec<usize>> {
        if words(sentence).is_empty() {
            return Err(Error::Empty("sentence"));
        }
        Ok(self.vocab.tokenize(sentence))
    }

    pub fn encode_sentence(&self, sentence: &str) -> Result<SentenceEncoding<f32>> {
        let ids = self.tokenize(sentence)?;
        self.text.encode(&self.params, &ids)
    }

    fn archive(&self, train: Option<(&TrainHeader, &Adam<f32>, Option<&Ema<f32>>)>) -> Result<Vec<u8>> {
        let mut map = BTreeMap::new();
        store_to_map(&self.params, MODEL_PREFIX, &mut map);
        let codec = codec_tensors(&self.codec, &mut map);
        let mut header = ModelHeader {
            kind: "model".into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            codec,
            train: None,
        };
        if let Some((h, adam, ema)) = train {
            let (_, first, second) = adam.state();
            for (k, v) in first {
                map.insert(format!("{ADAM_M_PREFIX}{k}"), v.clone());
            }
            for (k, v) in second {
                map.insert(format!("{ADAM_V_PREFIX}{k}"), v.clone());
            }
            if let Some(ema) = ema {
                store_to_map(&ema.shadow, EMA_PREFIX, &mut map);
            }
            header.kind = "train".into();
            header.train = Some(h.clone());
        }
        encode_archive(&header, &map)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.archive(None)
    }

    /// Loads model weights from either a model or a training checkpoint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (model, _, _) = Self::decode(bytes)?;
        Ok(model)
    }

    fn decode(bytes: &[u8]) -> Result<(Self, Option<TrainHeader>, BTreeMap<String, Tensor<f32>>)> {
        let (header, map): (ModelHeader, _) = decode_archive(bytes)?;
        if header.kind != "model" && header.kind != "train" {
            return Err(Error::Format(format!("expected a model archive, found `{}`", header.kind)));
        }
        let codec = Arc::new(codec_from_tensors(header.codec, &map)?);
        let params = map_to_store(&map, MODEL_PREFIX);
        let model = Self::from_parts(header.config, header.vocab, codec, params)?;
        let _ = model.id.set(archive_id(bytes));
        Ok((model, header.train, map))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        let id = archive_id(&bytes);
        let _ = self.id.set(id.clone());
        Ok(id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// SHA-256 of the file this model was loaded from (or would be saved as).
    pub fn checkpoint_id(&self) -> String {
        self.id
            .get_or_init(|| archive_id(&self.to_bytes().expect("in-memory model serializes")))
            .clone()
    }
}

fn check_same_layout(expected: &ParamStore<f32>, got: &ParamStore<f32>) -> Result<()> {
    for (name, t) in expected.iter() {
        match got.get(name) {
            None => return Err(Error::Format(format!("parameter `{name}` missing"))),
            Some(p) if p.shape() != t.shape() => {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = got.names().find(|n| !expected.contains(n)) {
        return Err(Error::Format(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// One story ready for training: token rows and scaled clean latents per frame.
#[derive(Clone, Debug)]
pub struct TrainingStory {
    pub tokens: Vec<Vec<usize>>,
    pub latents: Vec<Tensor<f32>>,
}

impl TrainingStory {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Tokenize the (pronoun-bearing) sentences and encode every frame with the codec.
pub fn prepare_stories(vocab: &Vocabulary, codec: &LatentCodec, samples: &[StorySample]) -> Result<Vec<TrainingStory>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let frames: Vec<&Image> = chunk.iter().flat_map(|s| s.frames.iter()).collect();
        let z = codec.encode_batch(&frames)?;
        let mut rows = (0..z.dim(0)).map(|i| z.index0(i));
        for s in chunk {
            if s.sentences.len() != s.frames.len() || s.frames.is_empty() {
                return Err(Error::Config(format!("story {} has mismatched sentences and frames", s.id)));
            }
            out.push(TrainingStory {
                tokens: s.sentences.iter().map(|x| vocab.tokenize(x)).collect(),
                latents: rows.by_ref().take(s.frames.len()).collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryMode {
    /// Memory holds ground-truth latents of earlier frames.
    TeacherForced,
    /// Memory holds the model's own one-shot clean estimates of earlier frames.
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ema_decay: Option<f64>,
    /// Log rows written per epoch.
    pub log_per_epoch: usize,
    pub memory_mode: MemoryMode,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            ema_decay: None,
            log_per_epoch: 4,
            memory_mode: MemoryMode::TeacherForced,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 || self.log_per_epoch == 0 {
            return Err(Error::Config("lr, batch size, epochs and log cadence must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("EMA decay {d} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Random choices for one training step.
#[derive(Clone, Debug)]
pub struct StepDraws {
    /// Frame index `m` per story.
    pub frames: Vec<usize>,
    pub ts: Vec<usize>,
    /// `[B, c, h, w]`
    pub noise: Tensor<f32>,
    /// Timesteps and noise used to form generated memory, `B × (F-1)` entries.
    pub memory_ts: Vec<usize>,
    pub memory_noise: Option<Tensor<f32>>,
}

/// `(z_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`
pub fn estimate_clean(z_t: &Tensor<f32>, t: usize, eps_pred: &Tensor<f32>, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    if z_t.shape() != eps_pred.shape() {
        return Err(Error::Shape {
            op: "estimate_clean",
            expected: z_t.shape().to_vec(),
            got: eps_pred.shape().to_vec(),
        });
    }
    Ok(z_t.zip_map(eps_pred, |z, e| (z - s * e) / a))
}

const GENERATED_CLAMP: f32 = 5.0;

impl StoryModel {
    fn latent_shape(&self) -> [usize; 3] {
        let c = &self.config.unet;
        [c.latent_channels, c.latent_size, c.latent_size]
    }

    fn check_batch(&self, batch: &[&TrainingStory]) -> Result<usize> {
        let f = batch.first().ok_or(Error::Empty("training batch"))?.len();
        if f == 0 || batch.iter().any(|s| s.len() != f || s.tokens.len() != f) {
            return Err(Error::Config("training stories must share one non-zero length".into()));
        }
        if f > self.config.unet.frame_slots {
            return Err(Error::Config(format!(
                "stories of {f} frames exceed {} frame slots",
                self.config.unet.frame_slots
            )));
        }
        Ok(f)
    }

    /// Per story `m ~ U{0..F-1}`, `t ~ U{1..T}`, and Gaussian noise.
    pub fn draw_step<R: Rng + ?Sized>(&self, rng: &mut R, batch: &[&TrainingStory], mode: MemoryMode) -> Result<StepDraws> {
        let f = self.check_batch(batch)?;
        let steps = self.schedule.steps;
        let mut frames = Vec::with_capacity(batch.len());
        let mut ts = Vec::with_capacity(batch.len());
        for _ in batch {
            frames.push(rng.random_range(0..f));
            ts.push(rng.random_range(1..=steps));
        }
        let [c, h, w] = self.latent_shape();
        let noise = Tensor::randn(&[batch.len(), c, h, w], rng);
        let (memory_ts, memory_noise) = if mode == MemoryMode::Generated && self.uses_memory() && f > 1 {
            let n = batch.len() * (f - 1);
            let mts = (0..n).map(|_| rng.random_range(1..=steps)).collect();
            (mts, Some(Tensor::randn(&[n, c, h, w], rng)))
        } else {
            (Vec::new(), None)
        };
        Ok(StepDraws {
            frames,
            ts,
            noise,
            memory_ts,
            memory_noise,
        })
    }

    /// Memory latents for `b × (f-1)` slots under generated mode.
    fn generated_memory(&self, batch: &[&TrainingStory], draws: &StepDraws, f: usize) -> Result<Vec<Tensor<f32>>> {
        let noise = draws.memory_noise.as_ref().ok_or(Error::Empty("generated memory noise"))?;
        let n = f - 1;
        let clean: Vec<Tensor<f32>> = batch
            .iter()
            .flat_map(|s| s.latents[..n].iter().cloned())
            .collect();
        let z0 = Tensor::stack(&clean)?;
        let zt = q_sample_batch(&z0, &draws.memory_ts, noise, &self.schedule)?;
        let ids: Vec<Vec<usize>> = batch.iter().flat_map(|s| s.tokens[..n].iter().cloned()).collect();
        let frames: Vec<usize> = (0..batch.len()).flat_map(|_| 0..n).collect();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.params);
        let text = self.text.forward(&cx, &ids)?;
        let eps = self
            .unet
            .forward(&cx, cx.constant(zt.clone()), &draws.memory_ts, &frames, &text, None)?
            .to_tensor();
        (0..clean.len())
            .map(|i| {
                let est = estimate_clean(&zt.index0(i), draws.memory_ts[i], &eps.index0(i), &self.schedule)?;
                Ok(est.map(|v| v.clamp(-GENERATED_CLAMP, GENERATED_CLAMP)))
            })
            .collect()
    }

    fn loss_var<'g>(
        &self,
        cx: &Ctx<'g, f32>,
        batch: &[&TrainingStory],
        draws: &StepDraws,
        mode: MemoryMode,
        with_memory: bool,
    ) -> Result<Var<'g, f32>> {
        let f = self.check_batch(batch)?;
        let b = batch.len();
        if draws.frames.len() != b || draws.ts.len() != b || draws.frames.iter().any(|&m| m >= f) {
            return Err(Error::Config("step draws do not match the batch".into()));
        }
        let ids: Vec<Vec<usize>> = batch.iter().flat_map(|s| s.tokens.iter().cloned()).collect();
        let enc = self.text.forward(cx, &ids)?;
        let (l, d) = (ids[0].len(), self.config.text.dim);
        let cur: Vec<usize> = (0..b).map(|i| i * f + draws.frames[i]).collect();
        let text = EncodedBatch {
            tokens: enc.tokens.reshape(&[b * f, l * d]).embedding(&cur).reshape(&[b, l, d]),
            pooled: enc.pooled.embedding(&cur),
            mask: cur
                .iter()
                .flat_map(|&r| enc.mask[r * l..(r + 1) * l].iter().copied())
                .collect(),
        };
        let memory = if with_memory && self.uses_memory() && f > 1 {
            let n = f - 1;
            let rows: Vec<usize> = (0..b).flat_map(|i| (0..n).map(move |j| i * f + j)).collect();
            let keys = enc.pooled.embedding(&rows).reshape(&[b, n, d]);
            let mask = (0..b)
                .flat_map(|i| (0..n).map(move |j| j < draws.frames[i]))
                .collect();
            let lat = match mode {
                MemoryMode::TeacherForced => batch
                    .iter()
                    .flat_map(|s| s.latents[..n].iter().cloned())
                    .collect(),
                MemoryMode::Generated => self.generated_memory(batch, draws, f)?,
            };
            let [c, h, w] = self.latent_shape();
            let latents = cx.constant(Tensor::stack(&lat)?.into_reshape(&[b, n, c, h, w])?);
            Some(MemoryInput::Latents { keys, latents, mask })
        } else {
            None
        };
        let z0 = Tensor::stack(
            &batch
                .iter()
                .zip(&draws.frames)
                .map(|(s, &m)| s.latents[m].clone())
                .collect::<Vec<_>>(),
        )?;
        let z_t = q_sample_batch(&z0, &draws.ts, &draws.noise, &self.schedule)?;
        let pred = self
            .unet
            .forward(cx, cx.constant(z_t), &draws.ts, &draws.frames, &text, memory)?;
        Ok(pred.mse(&cx.constant(draws.noise.clone())))
    }

    /// Training objective for fixed draws, without updating anything.
    pub fn batch_loss(&self, batch: &[&TrainingStory], draws: &StepDraws, mode: MemoryMode) -> Result<f64> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.params);
        Ok(self.loss_var(&cx, batch, draws, mode, true)?.value().item() as f64)
    }

    /// The same objective with the memory path left out entirely.
    pub fn batch_loss_without_memory(&self, batch: &[&TrainingStory], draws: &StepDraws) -> Result<f64> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.params);
        Ok(self
            .loss_var(&cx, batch, draws, MemoryMode::TeacherForced, false)?
            .value()
            .item() as f64)
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    crate::synthstory::story_seed(seed, salt)
}

/// Owns the model being trained together with optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: StoryModel,
    pub config: TrainConfig,
    opt: Adam<f32>,
    ema: Option<Ema<f32>>,
    step: u64,
}

const STEP_SALT: u64 = 0x57E9_0000_0000_0000;
const EPOCH_SALT: u64 = 0xE90C_0000_0000_0000;

impl Trainer {
    pub fn new(model: StoryModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Adam::new(AdamConfig {
            lr: config.lr,
            ..Default::default()
        });
        let ema = config.ema_decay.map(|d| Ema::new(d, model.params()));
        Ok(Self {
            model,
            config,
            opt,
            ema,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Each step draws from its own stream keyed by `(seed, step)`, so resuming needs only the step count.
    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.config.seed, STEP_SALT ^ self.step))
    }

    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, EPOCH_SALT ^ epoch as u64)));
        order
    }

    pub fn train_step(&mut self, batch: &[&TrainingStory]) -> Result<f64> {
        let mut rng = self.step_rng();
        let mode = self.config.memory_mode;
        let draws = self.model.draw_step(&mut rng, batch, mode)?;
        let (value, mut grads) = {
            let g = Graph::new();
            let cx = Ctx::new(&g, self.model.params());
            let loss = self.model.loss_var(&cx, batch, &draws, mode, true)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: self.step + 1,
                    loss: value,
                    last_good: None,
                });
            }
            (value, g.param_grads(&g.backward(loss)))
        };
        clip_grad_norm(&mut grads, self.config.grad_clip);
        self.opt.step(self.model.params_mut(), &grads);
        if let Some(ema) = &mut self.ema {
            ema.update(self.model.params());
        }
        self.step += 1;
        Ok(value)
    }

    /// The model with EMA weights swapped in when EMA is enabled.
    pub fn export_model(&self) -> StoryModel {
        let mut model = self.model.clone();
        if let Some(ema) = &self.ema {
            *model.params_mut() = ema.shadow.clone();
        }
        model
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = TrainHeader {
            config: self.config.clone(),
            step: self.step,
            adam: self.opt.config,
            adam_step: self.opt.steps_taken(),
        };
        self.model.archive(Some((&header, &self.opt, self.ema.as_ref())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut model, train, map) = StoryModel::decode(bytes)?;
        let train = train.ok_or_else(|| Error::Format("model checkpoint carries no training state".into()))?;
        model.id = OnceLock::new();
        let collect = |prefix: &str| -> BTreeMap<String, Tensor<f32>> {
            map.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                .collect()
        };
        let opt = Adam::restore(train.adam, train.adam_step, collect(ADAM_M_PREFIX), collect(ADAM_V_PREFIX));
        let ema = match train.config.ema_decay {
            Some(decay) => {
                let shadow = map_to_store(&map, EMA_PREFIX);
                check_same_layout(model.params(), &shadow)?;
                Some(Ema { decay, shadow, updates: train.step })
            }
            None => None,
        };
        Ok(Self {
            model,
            config: train.config,
            opt,
            ema,
            step: train.step,
        })
    }

    pub fn resume(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// One row of the CSV run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub elapsed_s: f64,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const RUN_LOG: &str = "train_log.csv";

/// Step indices (1-based, within an epoch) after which a log row is written.
fn log_boundaries(steps_per_epoch: usize, cadence: usize) -> Vec<usize> {
    (1..=cadence).map(|k| (k * steps_per_epoch).div_ceil(cadence)).collect()
}

/// Train for the configured number of epochs, resuming from the trainer's step count.
///
/// With `out_dir` set, writes `last.ckpt` after every epoch and appends to `train_log.csv`.
pub fn train(
    trainer: &mut Trainer,
    stories: &[TrainingStory],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&Trainer, &EpochSummary) -> Result<()>,
) -> Result<Vec<EpochSummary>> {
    if stories.is_empty() {
        return Err(Error::Empty("training stories"));
    }
    let bs = trainer.config.batch_size;
    let steps_per_epoch = stories.len().div_ceil(bs);
    if trainer.config.log_per_epoch > steps_per_epoch {
        return Err(Error::Config(format!(
            "{} log rows per epoch but only {steps_per_epoch} steps",
            trainer.config.log_per_epoch
        )));
    }
    if trainer.step % steps_per_epoch as u64 != 0 {
        return Err(Error::Config("can only resume at an epoch boundary".into()));
    }
    let start_epoch = (trainer.step / steps_per_epoch as u64) as usize;
    let boundaries = log_boundaries(steps_per_epoch, trainer.config.log_per_epoch);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(RUN_LOG);
            let fresh = start_epoch == 0 || !path.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(
                csv::WriterBuilder::new()
                    .has_headers(fresh)
                    .from_writer(file),
            )
        }
        None => None,
    };
    let last_good: Option<PathBuf> = out_dir.map(|d| d.join(LAST_CHECKPOINT)).filter(|p| p.exists());
    let mut last_good = last_good;
    let started = Instant::now();
    let mut summaries = Vec::new();
    for epoch in start_epoch..trainer.config.epochs {
        let t0 = Instant::now();
        let order = trainer.epoch_order(epoch, stories.len());
        let (mut sum, mut count) = (0.0, 0usize);
        let (mut window, mut window_n) = (0.0, 0usize);
        let mut next = 0;
        for (i, idx) in order.chunks(bs).enumerate() {
            let batch: Vec<&TrainingStory> = idx.iter().map(|&k| &stories[k]).collect();
            let loss = match trainer.train_step(&batch) {
                Ok(v) => v,
                Err(Error::Diverged { step, loss, .. }) => {
                    return Err(Error::Diverged {
                        step,
                        loss,
                        last_good: last_good.clone(),
                    })
                }
                Err(e) => return Err(e),
            };
            sum += loss * batch.len() as f64;
            count += batch.len();
            window += loss;
            window_n += 1;
            if next < boundaries.len() && i + 1 == boundaries[next] {
                next += 1;
                if let Some(w) = &mut log {
                    w.serialize(LogRow {
                        epoch,
                        step: trainer.step,
                        loss: window / window_n as f64,
                        elapsed_s: started.elapsed().as_secs_f64(),
                    })
                    .map_err(|e| Error::Format(format!("run log: {e}")))?;
                    w.flush().map_err(|e| Error::io(out_dir.unwrap().join(RUN_LOG), e))?;
                }
                window = 0.0;
                window_n = 0;
            }
        }
        let summary = EpochSummary {
            epoch,
            step: trainer.step,
            mean_loss: sum / count as f64,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            let path = dir.join(LAST_CHECKPOINT);
            trainer.save(&path)?;
            last_good = Some(path);
        }
        on_epoch(trainer, &summary)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Memory view with no entries, used by the memory-free baseline.
struct NoMemory;

impl MemoryView<f32> for NoMemory {
    fn len(&self) -> usize {
        0
    }

    fn entry(&self, _: usize) -> &MemoryEntry<f32> {
        unreachable!("empty memory has no entries")
    }
}

/// Seed of the noise stream used for frame `m` of a story sampled with `seed`.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    mix(seed, 0xF8A3_0000_0000_0000 ^ frame as u64)
}

/// A story generated so far.
#[derive(Clone, Debug)]
pub struct StorySession {
    pub checkpoint_id: String,
    pub seed: u64,
    pub sentences: Vec<String>,
    /// Clean latents `[c, h, w]`, one per frame.
    pub latents: Vec<Tensor<f32>>,
    pub frames: Vec<Image>,
    history: Vec<Arc<MemoryEntry<f32>>>,
    memory: VisualMemory<f32>,
}

/// Serializable form of a session; frames and memory are rebuilt from the latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub checkpoint_id: String,
    pub seed: u64,
    pub sentences: Vec<String>,
    pub latents: Vec<Vec<f32>>,
}

impl StorySession {
    pub fn new(model: &StoryModel, seed: u64) -> Self {
        Self {
            checkpoint_id: model.checkpoint_id(),
            seed,
            sentences: Vec::new(),
            latents: Vec::new(),
            frames: Vec::new(),
            history: Vec::new(),
            memory: VisualMemory::new(MEMORY_CAPACITY),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn memory(&self) -> &VisualMemory<f32> {
        &self.memory
    }

    /// Copy of the first `k` frames, sentences and memory entries.
    pub fn branch(&self, k: usize) -> Result<Self> {
        if k > self.len() {
            return Err(Error::OutOfRange {
                what: "branch point",
                value: k as i64,
                range: format!("0..={}", self.len()),
            });
        }
        let history = self.history[..k].to_vec();
        Ok(Self {
            checkpoint_id: self.checkpoint_id.clone(),
            seed: self.seed,
            sentences: self.sentences[..k].to_vec(),
            latents: self.latents[..k].to_vec(),
            frames: self.frames[..k].to_vec(),
            memory: VisualMemory::from_history(&history, self.memory.capacity())?,
            history,
        })
    }

    fn check_model(&self, model: &StoryModel) -> Result<()> {
        let id = model.checkpoint_id();
        if id != self.checkpoint_id {
            return Err(Error::CheckpointMismatch {
                session: self.checkpoint_id.clone(),
                model: id,
            });
        }
        Ok(())
    }

    fn push(&mut self, model: &StoryModel, sentence: &str, enc: SentenceEncoding<f32>, latent: Tensor<f32>) -> Result<()> {
        let frame = model.codec.decode(&latent)?;
        let feats = model.unet.memory_features(model.params(), &latent)?;
        let entry = MemoryEntry {
            frame_index: self.len(),
            sentence: enc,
            latent: latent.clone(),
            feats,
        };
        self.memory = self.memory.append(entry.clone())?;
        self.history.push(Arc::new(entry));
        self.sentences.push(sentence.to_string());
        self.latents.push(latent);
        self.frames.push(frame);
        Ok(())
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            checkpoint_id: self.checkpoint_id.clone(),
            seed: self.seed,
            sentences: self.sentences.clone(),
            latents: self.latents.iter().map(|t| t.data().to_vec()).collect(),
        }
    }

    pub fn restore(model: &StoryModel, snap: &SessionSnapshot) -> Result<Self> {
        let mut s = Self::new(model, snap.seed);
        s.check_model(model)?;
        s.checkpoint_id = snap.checkpoint_id.clone();
        if snap.sentences.len() != snap.latents.len() {
            return Err(Error::Format("snapshot has mismatched sentences and latents".into()));
        }
        let shape = model.latent_shape();
        for (sentence, data) in snap.sentences.iter().zip(&snap.latents) {
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Format("snapshot latent has the wrong size".into()));
            }
            let enc = model.encode_sentence(sentence)?;
            s.push(model, sentence, enc, Tensor::from_vec(&shape, data.clone()))?;
        }
        Ok(s)
    }
}

/// Full reverse chain for one frame, conditioned at every step on the sentence and memory.
fn generate_latent(
    model: &StoryModel,
    sentence: &SentenceEncoding<f32>,
    memory: &dyn MemoryView<f32>,
    frame: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let memory: &dyn MemoryView<f32> = if model.uses_memory() { memory } else { &NoMemory };
    let mut z = Tensor::randn(&model.latent_shape(), rng);
    for t in (1..=model.schedule.steps).rev() {
        let bundle = ConditioningBundle {
            sentence,
            memory,
            frame,
            t,
        };
        let eps = model.unet.predict_noise(model.params(), &z, &bundle)?;
        z = p_sample_step(&z, t, &eps, &model.schedule, rng)?;
    }
    Ok(z)
}

/// Generate one more frame; the input session is left untouched.
pub fn extend_story(model: &StoryModel, session: &StorySession, sentence: &str) -> Result<StorySession> {
    session.check_model(model)?;
    let enc = model.encode_sentence(sentence)?;
    let m = session.len();
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(session.seed, m));
    let z = generate_latent(model, &enc, &session.memory, m, &mut rng)?;
    let mut next = session.clone();
    next.push(model, sentence, enc, z)?;
    Ok(next)
}

pub fn sample_story<S: AsRef<str>>(model: &StoryModel, sentences: &[S], seed: u64) -> Result<StorySession> {
    if sentences.is_empty() {
        return Err(Error::Empty("story"));
    }
    let mut session = StorySession::new(model, seed);
    for s in sentences {
        session = extend_story(model, &session, s.as_ref())?;
    }
    Ok(session)
}

/// Sample many stories at once, batching the denoiser across stories at each frame.
///
/// Each story draws from the same per-frame noise streams as [`sample_story`].
pub fn sample_stories<S: AsRef<str>>(
    model: &StoryModel,
    stories: &[Vec<S>],
    seeds: &[u64],
    max_batch: usize,
) -> Result<Vec<StorySession>> {
    if stories.len() != seeds.len() {
        return Err(Error::Config("one seed per story required".into()));
    }
    let mut sessions: Vec<StorySession> = seeds.iter().map(|&s| StorySession::new(model, s)).collect();
    let longest = stories.iter().map(Vec::len).max().unwrap_or(0);
    let levels = model.config.unet.levels();
    let slot_cap = model.config.unet.frame_slots - 1;
    for m in 0..longest {
        let active: Vec<usize> = (0..stories.len()).filter(|&i| stories[i].len() > m).collect();
        for chunk in active.chunks(max_batch.max(1)) {
            let encs = chunk
                .iter()
                .map(|&i| model.encode_sentence(stories[i][m].as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let mut rngs: Vec<ChaCha8Rng> = chunk
                .iter()
                .map(|&i| ChaCha8Rng::seed_from_u64(frame_seed(seeds[i], m)))
                .collect();
            let shape = model.latent_shape();
            let mut zs: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| Tensor::randn(&shape, r)).collect();
            let b = chunk.len();
            for t in (1..=model.schedule.steps).rev() {
                let eps = {
                    let g = Graph::inference();
                    let cx = Ctx::new(&g, model.params());
                    let refs: Vec<&SentenceEncoding<f32>> = encs.iter().collect();
                    let text = encoding_batch(&cx, &refs);
                    let memory = if model.uses_memory() {
                        let views: Vec<&dyn MemoryView<f32>> =
                            chunk.iter().map(|&i| &sessions[i].memory as &dyn MemoryView<f32>).collect();
                        memory_input(&cx, &views, m, levels)?
                    } else {
                        None
                    };
                    let z = cx.constant(Tensor::stack(&zs)?);
                    model
                        .unet
                        .forward(&cx, z, &vec![t; b], &vec![m.min(slot_cap); b], &text, memory)?
                        .to_tensor()
                };
                for (k, z) in zs.iter_mut().enumerate() {
                    *z = p_sample_step(z, t, &eps.index0(k), &model.schedule, &mut rngs[k])?;
                }
            }
            for ((&i, enc), z) in chunk.iter().zip(encs).zip(zs) {
                sessions[i].push(model, stories[i][m].as_ref(), enc, z)?;
            }
        }
    }
    Ok(sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latentcodec::CodecConfig;

    fn tiny_codec() -> Arc<LatentCodec> {
        let cfg = CodecConfig {
            widths: [4, 4],
            ..Default::default()
        };
        Arc::new(LatentCodec::new(cfg, 1).unwrap())
    }

    fn tiny_model(memory: bool) -> StoryModel {
        let vocab = Vocabulary::build(["Lisa walks on the grass.", "She jumps."]).unwrap();
        let codec = tiny_codec();
        let mut cfg = ModelConfig::tiny(vocab.len(), &codec);
        cfg.unet.use_memory = memory;
        StoryModel::new(cfg, vocab, codec, 7).unwrap()
    }

    #[test]
    fn config_mismatches_are_rejected() {
        let vocab = Vocabulary::build(["a b"]).unwrap();
        let codec = tiny_codec();
        let mut cfg = ModelConfig::tiny(vocab.len(), &codec);
        cfg.text.vocab_size += 1;
        assert!(StoryModel::new(cfg.clone(), vocab.clone(), codec.clone(), 0).is_err());
        cfg.text.vocab_size -= 1;
        cfg.unet.text_dim = 8;
        assert!(StoryModel::new(cfg, vocab, codec, 0).is_err());
    }

    #[test]
    fn empty_sentence_is_an_error_and_unknown_words_are_tolerated() {
        let model = tiny_model(true);
        assert!(matches!(model.encode_sentence("  "), Err(Error::Empty(_))));
        assert!(model.encode_sentence("Zork flies.").is_ok());
    }

    #[test]
    fn model_round_trips_through_bytes() {
        let model = tiny_model(true);
        let bytes = model.to_bytes().unwrap();
        let back = StoryModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.checkpoint_id(), model.checkpoint_id());
    }

    #[test]
    fn branch_bounds() {
        let model = tiny_model(false);
        let s = sample_story(&model, &["Lisa walks on the grass.", "She jumps."], 3).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.memory().len(), 2);
        assert_eq!(s.branch(0).unwrap().len(), 0);
        assert_eq!(s.branch(2).unwrap().frames, s.frames);
        assert!(s.branch(3).is_err());
    }

    #[test]
    fn log_boundaries_are_spread_over_the_epoch() {
        assert_eq!(log_boundaries(10, 4), vec![3, 5, 8, 10]);
        assert_eq!(log_boundaries(3, 3), vec![1, 2, 3]);
        assert_eq!(log_boundaries(7, 1), vec![7]);
    }

    #[test]
    fn mismatched_session_and_model_are_rejected() {
        let a = tiny_model(true);
        let vocab = a.vocab.clone();
        let b = StoryModel::new(a.config.clone(), vocab, a.codec.clone(), 99).unwrap();
        let s = StorySession::new(&a, 0);
        assert!(matches!(extend_story(&b, &s, "She jumps."), Err(Error::CheckpointMismatch { .. })));
    }
}
