//! Noise-prediction U-Net over latents, conditioned on time, frame slot,
//! the current sentence and the visual memory.

use rand::Rng;
use serde::{Deserialize, Serialize};
use storyldm_autodiff::layers::{Conv2d, Embedding, GroupNorm, Linear};
use storyldm_autodiff::{Ctx, Graph, ParamStore, Real, Tensor, Var};

use crate::attention::{fuse_attention, CrossAttention, MemoryAttention, MemoryBatch, MemoryView};
use crate::error::{Error, Result};
use crate::textenc::{EncodedBatch, SentenceEncoding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_dim: usize,
    pub text_dim: usize,
    pub memory_key_dim: usize,
    pub adapter_channels: usize,
    pub groups: usize,
    /// Number of learned frame-position slots.
    pub frame_slots: usize,
    pub diffusion_steps: usize,
    pub use_memory: bool,
    pub use_frame_position: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 8,
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            time_dim: 128,
            text_dim: 128,
            memory_key_dim: 64,
            adapter_channels: 32,
            groups: 8,
            frame_slots: 4,
            diffusion_steps: 200,
            use_memory: true,
            use_frame_position: true,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.latent_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::Config("U-Net needs at least one level".into()));
        }
        if self.latent_size % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "latent size {} not divisible by 2^{}",
                self.latent_size,
                levels - 1
            )));
        }
        for l in 0..levels {
            if self.channels(l) % self.groups != 0 {
                return Err(Error::Config(format!(
                    "{} channels at level {l} not divisible into {} groups",
                    self.channels(l),
                    self.groups
                )));
            }
        }
        if self.frame_slots == 0 || self.diffusion_steps == 0 {
            return Err(Error::Config("frame slots and diffusion steps must be positive".into()));
        }
        if self.time_dim % 2 != 0 || self.base_channels % 2 != 0 {
            return Err(Error::Config("embedding widths must be even".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &UNetConfig,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), group_count(cfg.groups, cin), cin),
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, rng),
            time: Linear::new(store, &format!("{name}.time"), cfg.time_dim, cout, true, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cfg.groups, cout),
            conv2: Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    fn forward<'g, T: Real>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>, temb: Var<'g, T>) -> Var<'g, T> {
        let h = self.conv1.forward(cx, self.norm1.forward(cx, x).silu());
        let t = self.time.forward(cx, temb.silu());
        let ts = t.shape();
        let h = h.add(&t.reshape(&[ts[0], ts[1], 1, 1]));
        let h = self.conv2.forward(cx, self.norm2.forward(cx, h).silu());
        let skip = match &self.skip {
            Some(s) => s.forward(cx, x),
            None => x,
        };
        skip.add(&h)
    }
}

/// Largest divisor of `channels` not above `groups`.
fn group_count(groups: usize, channels: usize) -> usize {
    (1..=groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct AttnSite {
    level: usize,
    cross: CrossAttention,
    memory: Option<MemoryAttention>,
}

/// Strided conv stack mapping a clean latent to one feature map per level.
#[derive(Clone, Debug)]
pub struct MemoryAdapter {
    stem: Conv2d,
    down: Vec<Conv2d>,
}

impl MemoryAdapter {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &UNetConfig, rng: &mut R) -> Self {
        let ca = cfg.adapter_channels;
        Self {
            stem: Conv2d::same3(store, &format!("{name}.stem"), cfg.latent_channels, ca, rng),
            down: (1..cfg.levels())
                .map(|l| Conv2d::new(store, &format!("{name}.down{l}"), ca, ca, 3, 2, 1, rng))
                .collect(),
        }
    }

    /// `[N, c, h, w]` → per-level `[N, C_a, h_l, w_l]`.
    pub fn forward<'g, T: Real>(&self, cx: &Ctx<'g, T>, latents: Var<'g, T>) -> Vec<Var<'g, T>> {
        let mut h = self.stem.forward(cx, latents).silu();
        let mut out = vec![h];
        for conv in &self.down {
            h = conv.forward(cx, h).silu();
            out.push(h);
        }
        out
    }
}

/// Memory contents as consumed by the network.
pub enum MemoryInput<'g, T: Real> {
    /// Clean latents `[B, N, c, h, w]`; the adapter runs inside the graph.
    Latents {
        keys: Var<'g, T>,
        latents: Var<'g, T>,
        mask: Vec<bool>,
    },
    /// Precomputed adapter features, one `[B, N, C_a, h_l, w_l]` per level.
    Features {
        keys: Var<'g, T>,
        feats: Vec<Var<'g, T>>,
        mask: Vec<bool>,
    },
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    time1: Linear,
    time2: Linear,
    frame_pos: Embedding,
    in_conv: Conv2d,
    down_res: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    down_attn: Vec<AttnSite>,
    mid_res: ResBlock,
    mid_attn: AttnSite,
    up_res: Vec<ResBlock>,
    upsample: Vec<Conv2d>,
    up_attn: Vec<AttnSite>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    adapter: Option<MemoryAdapter>,
}

/// Sinusoidal features of a scalar position, `[sin(p ω_i), cos(p ω_i)]`.
pub fn sinusoidal<T: Real>(positions: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[positions.len(), dim], |i| {
        let (r, d) = (i / dim, i % dim);
        let k = d % half;
        let freq = (10000f64).powf(-(k as f64) / half as f64);
        let a = positions[r] * freq;
        T::lit(if d < half { a.sin() } else { a.cos() })
    })
}

impl UNet {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: UNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let levels = cfg.levels();
        let base = cfg.base_channels;
        let site = |store: &mut ParamStore<T>, rng: &mut R, tag: String, level: usize, ch: usize| AttnSite {
            level,
            cross: CrossAttention::new(store, &format!("{tag}.cross"), ch, cfg.text_dim, cfg.groups, rng),
            memory: cfg.use_memory.then(|| {
                MemoryAttention::new(
                    store,
                    &format!("{tag}.memory"),
                    cfg.text_dim,
                    cfg.memory_key_dim,
                    cfg.adapter_channels,
                    ch,
                    rng,
                )
            }),
        };
        let time1 = Linear::new(store, &format!("{name}.time1"), base, cfg.time_dim, true, rng);
        let time2 = Linear::new(store, &format!("{name}.time2"), cfg.time_dim, cfg.time_dim, true, rng);
        let frame_pos = Embedding::new(store, &format!("{name}.frame_pos"), cfg.frame_slots, base, 0.5, rng);
        let in_conv = Conv2d::same3(store, &format!("{name}.in"), cfg.latent_channels, base, rng);

        let mut down_res = Vec::new();
        let mut downsample = Vec::new();
        let mut down_attn = Vec::new();
        let mut ch = base;
        for l in 0..levels {
            let c = cfg.channels(l);
            down_res.push(ResBlock::new(store, &format!("{name}.down{l}.res"), cfg, ch, c, rng));
            ch = c;
            if l + 1 < levels {
                downsample.push(Conv2d::new(store, &format!("{name}.down{l}.down"), c, c, 3, 2, 1, rng));
                down_attn.push(site(store, rng, format!("{name}.down{l}.attn"), l + 1, c));
            }
        }
        let mid_res = ResBlock::new(store, &format!("{name}.mid.res"), cfg, ch, ch, rng);
        let mid_attn = site(store, rng, format!("{name}.mid.attn"), levels - 1, ch);

        let mut up_res = Vec::new();
        let mut upsample = Vec::new();
        let mut up_attn = Vec::new();
        for l in (0..levels).rev() {
            let c = cfg.channels(l);
            up_res.push(ResBlock::new(store, &format!("{name}.up{l}.res"), cfg, ch + c, c, rng));
            ch = c;
            if l > 0 {
                let next = cfg.channels(l - 1);
                upsample.push(Conv2d::same3(store, &format!("{name}.up{l}.up"), c, next, rng));
                up_attn.push(site(store, rng, format!("{name}.up{l}.attn"), l - 1, next));
                ch = next;
            }
        }
        let out_norm = GroupNorm::new(store, &format!("{name}.out_norm"), cfg.groups, base);
        let out_conv = Conv2d::same3(store, &format!("{name}.out"), base, cfg.latent_channels, rng);
        let adapter = cfg
            .use_memory
            .then(|| MemoryAdapter::new(store, &format!("{name}.adapter"), cfg, rng));
        Ok(Self {
            config,
            time1,
            time2,
            frame_pos,
            in_conv,
            down_res,
            downsample,
            down_attn,
            mid_res,
            mid_attn,
            up_res,
            upsample,
            up_attn,
            out_norm,
            out_conv,
            adapter,
        })
    }

    /// Sinusoidal timestep features (before the learned projection).
    pub fn time_features<T: Real>(&self, ts: &[usize]) -> Result<Tensor<T>> {
        for &t in ts {
            if t == 0 || t > self.config.diffusion_steps {
                return Err(Error::OutOfRange {
                    what: "timestep",
                    value: t as i64,
                    range: format!("1..={}", self.config.diffusion_steps),
                });
            }
        }
        let pos: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        Ok(sinusoidal(&pos, self.config.base_channels))
    }

    /// Projected time embedding `[B, time_dim]`.
    pub fn time_embed<'g, T: Real>(&self, cx: &Ctx<'g, T>, ts: &[usize]) -> Result<Var<'g, T>> {
        let f = cx.constant(self.time_features(ts)?);
        Ok(self.time2.forward(cx, self.time1.forward(cx, f).silu()))
    }

    /// Learned slot embedding `[B, base]`, or zeros when disabled.
    pub fn frame_pos_embed<'g, T: Real>(&self, cx: &Ctx<'g, T>, frames: &[usize]) -> Result<Var<'g, T>> {
        if let Some(&bad) = frames.iter().find(|&&m| m >= self.config.frame_slots) {
            return Err(Error::OutOfRange {
                what: "frame index",
                value: bad as i64,
                range: format!("0..{}", self.config.frame_slots),
            });
        }
        if !self.config.use_frame_position {
            return Ok(cx.constant(Tensor::zeros(&[frames.len(), self.config.base_channels])));
        }
        Ok(self.frame_pos.forward(cx, frames))
    }

    pub fn adapter(&self) -> Option<&MemoryAdapter> {
        self.adapter.as_ref()
    }

    fn memory_batches<'g, T: Real>(
        &self,
        cx: &Ctx<'g, T>,
        memory: Option<MemoryInput<'g, T>>,
        batch: usize,
    ) -> Result<Option<Vec<MemoryBatch<'g, T>>>> {
        let (Some(adapter), Some(memory)) = (&self.adapter, memory) else {
            return Ok(None);
        };
        let (keys, feats, mask) = match memory {
            MemoryInput::Latents { keys, latents, mask } => {
                let s = latents.shape();
                if s.len() != 5 || s[0] != batch {
                    return Err(Error::Shape {
                        op: "memory latents",
                        expected: vec![batch, 0, self.config.latent_channels, 0, 0],
                        got: s,
                    });
                }
                let n = s[1];
                if n == 0 {
                    return Ok(None);
                }
                let flat = latents.reshape(&[batch * n, s[2], s[3], s[4]]);
                let feats = adapter
                    .forward(cx, flat)
                    .into_iter()
                    .map(|f| {
                        let fs = f.shape();
                        f.reshape(&[batch, n, fs[1], fs[2], fs[3]])
                    })
                    .collect();
                (keys, feats, mask)
            }
            MemoryInput::Features { keys, feats, mask } => {
                if keys.shape().get(1) == Some(&0) {
                    return Ok(None);
                }
                if feats.len() != self.config.levels() {
                    return Err(Error::MissingResolution(feats.len()));
                }
                (keys, feats, mask)
            }
        };
        Ok(Some(
            feats
                .into_iter()
                .map(|f| MemoryBatch {
                    keys,
                    feats: f,
                    mask: mask.clone(),
                })
                .collect(),
        ))
    }

    fn attend<'g, T: Real>(
        &self,
        cx: &Ctx<'g, T>,
        site: &AttnSite,
        x: Var<'g, T>,
        text: &EncodedBatch<'g, T>,
        memory: Option<&[MemoryBatch<'g, T>]>,
    ) -> Result<Var<'g, T>> {
        let c = site.cross.forward(cx, x, text.tokens, &text.mask)?;
        let fused = match &site.memory {
            Some(mem) => {
                let r = self.config.resolution(site.level);
                let batch = match memory {
                    Some(m) => Some(m.get(site.level).ok_or(Error::MissingResolution(site.level))?),
                    None => None,
                };
                let m = mem.forward(cx, text.pooled, batch, (r, r))?;
                fuse_attention(c, m)?
            }
            None => c,
        };
        Ok(x.add(&fused))
    }

    /// Batched noise prediction for `z_t` of shape `[B, c, h, w]`.
    pub fn forward<'g, T: Real>(
        &self,
        cx: &Ctx<'g, T>,
        z_t: Var<'g, T>,
        ts: &[usize],
        frames: &[usize],
        text: &EncodedBatch<'g, T>,
        memory: Option<MemoryInput<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let s = z_t.shape();
        let b = s[0];
        if s != [b, cfg.latent_channels, cfg.latent_size, cfg.latent_size] || ts.len() != b || frames.len() != b {
            return Err(Error::Shape {
                op: "UNet::forward",
                expected: vec![b, cfg.latent_channels, cfg.latent_size, cfg.latent_size],
                got: s,
            });
        }
        let memory = self.memory_batches(cx, memory, b)?;
        let memory = memory.as_deref();
        let temb = self.time_embed(cx, ts)?;
        let fpos = self.frame_pos_embed(cx, frames)?;
        let mut h = self
            .in_conv
            .forward(cx, z_t)
            .add(&fpos.reshape(&[b, cfg.base_channels, 1, 1]));
        let mut skips = Vec::new();
        for l in 0..cfg.levels() {
            h = self.down_res[l].forward(cx, h, temb);
            skips.push(h);
            if l + 1 < cfg.levels() {
                h = self.downsample[l].forward(cx, h);
                h = self.attend(cx, &self.down_attn[l], h, text, memory)?;
            }
        }
        h = self.mid_res.forward(cx, h, temb);
        h = self.attend(cx, &self.mid_attn, h, text, memory)?;
        for (i, l) in (0..cfg.levels()).rev().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = self.up_res[i].forward(cx, Var::concat(&[h, skip], 1), temb);
            if l > 0 {
                h = self.upsample[i].forward(cx, h.upsample_nearest2x());
                h = self.attend(cx, &self.up_attn[i], h, text, memory)?;
            }
        }
        let h = self.out_norm.forward(cx, h).silu();
        Ok(self.out_conv.forward(cx, h))
    }

    /// Adapter features for one clean latent `[c, h, w]`, or none without memory.
    pub fn memory_features<T: Real>(&self, params: &ParamStore<T>, latent: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let Some(adapter) = &self.adapter else {
            return Ok(Vec::new());
        };
        let g = Graph::inference();
        let cx = Ctx::new(&g, params);
        let mut shape = vec![1];
        shape.extend_from_slice(latent.shape());
        let x = cx.constant(latent.reshape(&shape)?);
        adapter
            .forward(&cx, x)
            .into_iter()
            .map(|f| {
                let t = f.to_tensor();
                let s = t.shape()[1..].to_vec();
                Ok(t.into_reshape(&s)?)
            })
            .collect()
    }

    /// Single-frame eval-mode prediction `ε_θ(z_t, S^m, memory, m, t)`.
    ///
    /// Only memory entries with a frame index below `frame` are admissible.
    pub fn predict_noise<T: Real>(
        &self,
        params: &ParamStore<T>,
        z_t: &Tensor<T>,
        bundle: &ConditioningBundle<'_, T>,
    ) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, params);
        let text = encoding_batch(&cx, &[bundle.sentence]);
        let memory = memory_input(&cx, &[bundle.memory], bundle.frame, self.config.levels())?;
        let mut shape = vec![1];
        shape.extend_from_slice(z_t.shape());
        let z = cx.constant(z_t.reshape(&shape)?);
        // Frames past the trained story length reuse the last slot.
        let slot = bundle.frame.min(self.config.frame_slots - 1);
        let out = self.forward(&cx, z, &[bundle.t], &[slot], &text, memory)?;
        Ok(out.to_tensor().into_reshape(z_t.shape())?)
    }
}

/// Everything a single-frame prediction is conditioned on.
pub struct ConditioningBundle<'a, T: Real> {
    pub sentence: &'a SentenceEncoding<T>,
    pub memory: &'a dyn MemoryView<T>,
    pub frame: usize,
    pub t: usize,
}

/// Stack precomputed sentence encodings into a graph batch.
pub fn encoding_batch<'g, T: Real>(cx: &Ctx<'g, T>, encodings: &[&SentenceEncoding<T>]) -> EncodedBatch<'g, T> {
    let tokens: Vec<Tensor<T>> = encodings.iter().map(|e| e.tokens.clone()).collect();
    let pooled: Vec<Tensor<T>> = encodings.iter().map(|e| e.pooled.clone()).collect();
    EncodedBatch {
        tokens: cx.constant(Tensor::stack(&tokens).expect("equal sentence shapes")),
        pooled: cx.constant(Tensor::stack(&pooled).expect("equal sentence shapes")),
        mask: encodings.iter().flat_map(|e| e.mask.iter().copied()).collect(),
    }
}

/// Precomputed memory for a batch of stories that all sit at `frame`.
/// Every entry read must belong to an earlier frame.
pub fn memory_input<'g, T: Real>(
    cx: &Ctx<'g, T>,
    memories: &[&dyn MemoryView<T>],
    frame: usize,
    levels: usize,
) -> Result<Option<MemoryInput<'g, T>>> {
    let n = memories.iter().map(|m| m.len()).max().unwrap_or(0);
    if n == 0 {
        return Ok(None);
    }
    let b = memories.len();
    let first = memories
        .iter()
        .find(|m| !m.is_empty())
        .map(|m| m.entry(0))
        .expect("n > 0");
    let key_pad = Tensor::zeros(first.sentence.pooled.shape());
    let feat_pad: Vec<Tensor<T>> = first.feats.iter().map(|f| Tensor::zeros(f.shape())).collect();
    let mut k_rows = Vec::with_capacity(b * n);
    let mut f_rows: Vec<Vec<Tensor<T>>> = vec![Vec::with_capacity(b * n); levels];
    let mut full_mask = Vec::with_capacity(b * n);
    for mem in memories {
        for i in 0..n {
            if i >= mem.len() {
                k_rows.push(key_pad.clone());
                for (rows, pad) in f_rows.iter_mut().zip(&feat_pad) {
                    rows.push(pad.clone());
                }
                full_mask.push(false);
                continue;
            }
            let e = mem.entry(i);
            if e.frame_index >= frame {
                return Err(Error::OutOfRange {
                    what: "memory entry frame",
                    value: e.frame_index as i64,
                    range: format!("0..{frame}"),
                });
            }
            if e.feats.len() != levels {
                return Err(Error::MissingResolution(e.feats.len()));
            }
            k_rows.push(e.sentence.pooled.clone());
            for (rows, f) in f_rows.iter_mut().zip(&e.feats) {
                rows.push(f.clone());
            }
            full_mask.push(true);
        }
    }
    let d = k_rows[0].numel();
    let keys = cx.constant(Tensor::stack(&k_rows)?.into_reshape(&[b, n, d])?);
    let feats = f_rows
        .into_iter()
        .map(|rows| {
            let s = rows[0].shape().to_vec();
            let t = Tensor::stack(&rows)?.into_reshape(&[b, n, s[0], s[1], s[2]])?;
            Ok(cx.constant(t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(MemoryInput::Features {
        keys,
        feats,
        mask: full_mask,
    }))
}
