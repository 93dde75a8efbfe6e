//! Cross-attention on the current sentence and memory-attention over the
//! sentences and latents of earlier frames.

use std::sync::Arc;

use rand::Rng;
use storyldm_autodiff::layers::{GroupNorm, Linear};
use storyldm_autodiff::{Ctx, Graph, ParamStore, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::textenc::SentenceEncoding;

/// `softmax(q kᵀ / √d) v` on `[B, nq, d] × [B, nk, d] × [B, nk, dv]`.
///
/// `key_mask` has `B * nk` entries; masked keys get zero weight and a query
/// whose keys are all masked yields a zero row.
pub fn attend<'g, T: Real>(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>, key_mask: Option<&[bool]>) -> Var<'g, T> {
    let d = *q.shape().last().expect("attention query rank");
    let scores = q.bmm(&k, true).scale(1.0 / (d as f64).sqrt());
    scores.softmax_last(key_mask).bmm(&v, false)
}

/// Unbatched attention: `Q [nq, dk]`, `K [nk, dk]`, `V [nk, dv]` → `[nq, dv]`.
pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            expected: vec![0, 0],
            got: [q.shape(), k.shape(), v.shape()].concat(),
        });
    }
    if k.dim(0) == 0 {
        return Err(Error::Empty("attention keys"));
    }
    if q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0) {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            expected: vec![q.dim(1), k.dim(0)],
            got: vec![k.dim(1), v.dim(0)],
        });
    }
    let g = Graph::inference();
    let lift = |t: &Tensor<T>| g.constant(t.reshape(&[1, t.dim(0), t.dim(1)]).expect("rank checked"));
    let out = attend(lift(q), lift(k), lift(v), None).to_tensor();
    Ok(out.into_reshape(&[q.dim(0), v.dim(1)])?)
}

/// `[B, C, H, W]` → `[B, H·W, C]`
pub fn flatten_spatial<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    let s = x.shape();
    x.permute(&[0, 2, 3, 1]).reshape(&[s[0], s[2] * s[3], s[1]])
}

/// `[B, H·W, C]` → `[B, C, H, W]`
pub fn unflatten_spatial<'g, T: Real>(x: Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
    let s = x.shape();
    x.reshape(&[s[0], h, w, s[2]]).permute(&[0, 3, 1, 2])
}

/// Queries from frame features, keys and values from the sentence tokens.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        text_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), groups, channels),
            q: Linear::new(store, &format!("{name}.q"), channels, channels, false, rng),
            k: Linear::new(store, &format!("{name}.k"), text_dim, channels, false, rng),
            v: Linear::new(store, &format!("{name}.v"), text_dim, channels, false, rng),
            o: Linear::new(store, &format!("{name}.o"), channels, channels, false, rng),
        }
    }

    /// On flattened features `[B, n, C]` and text `[B, L, D]`.
    pub fn forward_flat<'g, T: Real>(
        &self,
        cx: &Ctx<'g, T>,
        feats: Var<'g, T>,
        text: Var<'g, T>,
        text_mask: &[bool],
    ) -> Result<Var<'g, T>> {
        let (fs, ts) = (feats.shape(), text.shape());
        if fs.len() != 3 || ts.len() != 3 || fs[0] != ts[0] || fs[2] != self.q.in_dim || ts[2] != self.k.in_dim {
            return Err(Error::Shape {
                op: "cross_attention",
                expected: vec![fs[0], self.q.in_dim, self.k.in_dim],
                got: [fs, ts].concat(),
            });
        }
        if text_mask.len() != ts[0] * ts[1] {
            return Err(Error::Shape {
                op: "cross_attention mask",
                expected: vec![ts[0] * ts[1]],
                got: vec![text_mask.len()],
            });
        }
        let q = self.q.forward(cx, feats);
        let k = self.k.forward(cx, text);
        let v = self.v.forward(cx, text);
        Ok(self.o.forward(cx, attend(q, k, v, Some(text_mask))))
    }

    /// Normalised `[B, C, H, W]` features attend to the sentence; same shape out.
    pub fn forward<'g, T: Real>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        text: Var<'g, T>,
        text_mask: &[bool],
    ) -> Result<Var<'g, T>> {
        let s = x.shape();
        let h = self.norm.forward(cx, x);
        let out = self.forward_flat(cx, flatten_spatial(h), text, text_mask)?;
        Ok(unflatten_spatial(out, s[2], s[3]))
    }
}

/// Memory contents for a batch, laid out for one attention site.
pub struct MemoryBatch<'g, T: Real> {
    /// `[B, N, D]` pooled encodings of earlier sentences.
    pub keys: Var<'g, T>,
    /// `[B, N, C_a, h, w]` adapted latents of earlier frames.
    pub feats: Var<'g, T>,
    /// `B * N`; false marks padding slots.
    pub mask: Vec<bool>,
}

/// One pooled query per frame, one key per earlier frame, values are the
/// projected spatial feature maps of those frames.
#[derive(Clone, Debug)]
pub struct MemoryAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub channels: usize,
}

impl MemoryAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        text_dim: usize,
        key_dim: usize,
        feat_channels: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), text_dim, key_dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), text_dim, key_dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), feat_channels, channels, false, rng),
            channels,
        }
    }

    /// `current` is `[B, D]`; returns `[B, C, h, w]`, exactly zero where the
    /// memory holds no entries.
    pub fn forward<'g, T: Real>(
        &self,
        cx: &Ctx<'g, T>,
        current: Var<'g, T>,
        memory: Option<&MemoryBatch<'g, T>>,
        size: (usize, usize),
    ) -> Result<Var<'g, T>> {
        let b = current.shape()[0];
        let (h, w) = size;
        let Some(mem) = memory.filter(|m| m.keys.shape()[1] > 0 && m.mask.iter().any(|&x| x)) else {
            return Ok(cx.constant(Tensor::zeros(&[b, self.channels, h, w])));
        };
        let fs = mem.feats.shape();
        let n = fs[1];
        if fs.len() != 5 || fs[0] != b || fs[2] != self.v.in_dim || fs[3] != h || fs[4] != w {
            return Err(Error::Shape {
                op: "memory_attention values",
                expected: vec![b, n, self.v.in_dim, h, w],
                got: fs,
            });
        }
        if mem.mask.len() != b * n || mem.keys.shape() != [b, n, self.q.in_dim] {
            return Err(Error::Shape {
                op: "memory_attention keys",
                expected: vec![b, n, self.q.in_dim],
                got: mem.keys.shape(),
            });
        }
        let q = self.q.forward(cx, current).reshape(&[b, 1, self.q.out_dim]);
        let k = self.k.forward(cx, mem.keys);
        let v = self
            .v
            .forward(cx, mem.feats.permute(&[0, 1, 3, 4, 2]))
            .reshape(&[b, n, h * w * self.channels]);
        let out = attend(q, k, v, Some(&mem.mask));
        Ok(out.reshape(&[b, h, w, self.channels]).permute(&[0, 3, 1, 2]))
    }
}

/// `c + m`, the combined attention contribution added to a block's features.
pub fn fuse_attention<'g, T: Real>(c: Var<'g, T>, m: Var<'g, T>) -> Result<Var<'g, T>> {
    if c.shape() != m.shape() {
        return Err(Error::Shape {
            op: "fuse_attention",
            expected: c.shape(),
            got: m.shape(),
        });
    }
    Ok(c.add(&m))
}

/// What the memory stores about one earlier frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<T: Real> {
    pub frame_index: usize,
    pub sentence: SentenceEncoding<T>,
    /// Clean latent `[c, h, w]`.
    pub latent: Tensor<T>,
    /// Adapted latent per attention resolution, `[C_a, h_r, w_r]`.
    pub feats: Vec<Tensor<T>>,
}

/// Read access to earlier frames, in frame order.
pub trait MemoryView<T: Real> {
    fn len(&self) -> usize;
    fn entry(&self, i: usize) -> &MemoryEntry<T>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const MEMORY_CAPACITY: usize = 16;

/// Immutable snapshot; [`VisualMemory::append`] returns a new one.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualMemory<T: Real> {
    entries: Vec<Arc<MemoryEntry<T>>>,
    capacity: usize,
}

impl<T: Real> Default for VisualMemory<T> {
    fn default() -> Self {
        Self::new(MEMORY_CAPACITY)
    }
}

impl<T: Real> VisualMemory<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity: capacity.max(1),
        }
    }

    /// New snapshot with `entry` appended; the oldest entry is evicted past capacity.
    pub fn append(&self, entry: MemoryEntry<T>) -> Result<Self> {
        if let Some(last) = self.entries.last() {
            if entry.frame_index <= last.frame_index {
                return Err(Error::OutOfRange {
                    what: "memory frame index",
                    value: entry.frame_index as i64,
                    range: format!("> {}", last.frame_index),
                });
            }
        }
        let mut entries = self.entries.clone();
        entries.push(Arc::new(entry));
        if entries.len() > self.capacity {
            entries.remove(0);
        }
        Ok(Self {
            entries,
            capacity: self.capacity,
        })
    }

    /// Snapshot holding the newest `capacity` of `history`.
    pub fn from_history(history: &[Arc<MemoryEntry<T>>], capacity: usize) -> Result<Self> {
        let capacity = capacity.max(1);
        let entries = history[history.len().saturating_sub(capacity)..].to_vec();
        if entries.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
            return Err(Error::OutOfRange {
                what: "memory frame index",
                value: 0,
                range: "strictly increasing".into(),
            });
        }
        Ok(Self { entries, capacity })
    }

    /// First `k` entries.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            entries: self.entries[..k.min(self.entries.len())].to_vec(),
            capacity: self.capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry<T>> {
        self.entries.iter().map(|e| e.as_ref())
    }
}

impl<T: Real> MemoryView<T> for VisualMemory<T> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn entry(&self, i: usize) -> &MemoryEntry<T> {
        &self.entries[i]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec())
    }

    #[test]
    fn single_key_returns_its_value() {
        let out = scaled_dot_attention(&t(&[2, 3], &[1., 2., 3., -4., 5., 0.]), &t(&[1, 3], &[0.3, 0.1, 2.]), &t(&[1, 2], &[7., -1.])).unwrap();
        assert_eq!(out.data(), &[7., -1., 7., -1.]);
    }

    #[test]
    fn identical_keys_average_values() {
        let out = scaled_dot_attention(
            &t(&[1, 2], &[0.4, -2.0]),
            &t(&[2, 2], &[1., 1., 1., 1.]),
            &t(&[2, 2], &[2., 4., 6., -8.]),
        )
        .unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-12);
        assert!((out.data()[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_keys_are_rejected() {
        let r = scaled_dot_attention(&t(&[1, 2], &[1., 1.]), &Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2]));
        assert!(matches!(r, Err(Error::Empty(_))));
        let r = scaled_dot_attention(&t(&[1, 2], &[1., 1.]), &t(&[1, 3], &[1., 1., 1.]), &t(&[1, 1], &[1.]));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn empty_memory_is_exact_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mem = MemoryAttention::new(&mut store, "m", 8, 4, 3, 5, &mut rng);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let cur = cx.constant(Tensor::randn(&[2, 8], &mut rng));
        let out = mem.forward(&cx, cur, None, (4, 4)).unwrap().to_tensor();
        assert_eq!(out.shape(), &[2, 5, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        // A batch whose slots are all padding is the same as no memory.
        let batch = MemoryBatch {
            keys: cx.constant(Tensor::randn(&[2, 1, 8], &mut rng)),
            feats: cx.constant(Tensor::randn(&[2, 1, 3, 4, 4], &mut rng)),
            mask: vec![false, false],
        };
        let out = mem.forward(&cx, cur, Some(&batch), (4, 4)).unwrap().to_tensor();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_rejects_mismatched_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(fuse_attention(a, b).is_err());
    }

    fn entry(i: usize) -> MemoryEntry<f64> {
        MemoryEntry {
            frame_index: i,
            sentence: SentenceEncoding {
                tokens: Tensor::zeros(&[1, 2]),
                pooled: Tensor::full(&[2], i as f64),
                mask: vec![true],
            },
            latent: Tensor::zeros(&[1, 1, 1]),
            feats: vec![],
        }
    }

    #[test]
    fn append_is_persistent_and_fifo() {
        let m0 = VisualMemory::new(2);
        let m1 = m0.append(entry(0)).unwrap();
        let m2 = m1.append(entry(1)).unwrap();
        let m3 = m2.append(entry(2)).unwrap();
        assert_eq!((m0.len(), m1.len(), m2.len(), m3.len()), (0, 1, 2, 2));
        assert_eq!(m3.entry(0).frame_index, 1);
        assert_eq!(m2.entry(0).frame_index, 0);
        assert!(m3.append(entry(1)).is_err());
    }
}
