//! Word-level tokenizer and a small transformer sentence encoder.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use storyldm_autodiff::layers::{Embedding, LayerNorm, Linear};
use storyldm_autodiff::{Ctx, Graph, ParamStore, Real, Tensor, Var};

use crate::attention::attend;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];
pub const MAX_LEN: usize = 16;

const PUNCT: [char; 5] = ['.', ',', '!', '?', ';'];

/// Lowercase, split on whitespace, and separate punctuation.
pub fn words(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in sentence.split_whitespace() {
        let mut cur = String::new();
        for ch in raw.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let index = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: f.tokens, index }
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Specials first, then every corpus token in sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = BTreeSet::new();
        let mut any = false;
        for s in corpus {
            any = true;
            set.extend(words(s));
        }
        if !any {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())))
            .collect();
        Ok(VocabFile { tokens }.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// `[BOS, w.., EOS, PAD..]` of length [`MAX_LEN`]; long inputs keep EOS.
    pub fn tokenize(&self, sentence: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(words(sentence).iter().map(|w| self.id(w)).take(MAX_LEN - 2));
        ids.push(EOS);
        ids.resize(MAX_LEN, PAD);
        ids
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            let tok = self.token(id).unwrap_or(SPECIALS[UNK]);
            let is_punct = tok.chars().count() == 1 && tok.chars().all(|c| PUNCT.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dim: 128,
            layers: 2,
            ff_mult: 2,
            max_len: MAX_LEN,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Embedding + sinusoidal positions + pre-norm single-head self-attention.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    embed: Embedding,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
}

/// Per-sentence encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEncoding<T: Real> {
    /// `[L, D]`
    pub tokens: Tensor<T>,
    /// `[D]`
    pub pooled: Tensor<T>,
    pub mask: Vec<bool>,
}

/// Batched encoder output inside a graph.
pub struct EncodedBatch<'g, T: Real> {
    /// `[B, L, D]`
    pub tokens: Var<'g, T>,
    /// `[B, D]`
    pub pooled: Var<'g, T>,
    /// `B * L`, true for real tokens.
    pub mask: Vec<bool>,
}

pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |i| {
        let (p, d) = (i / dim, i % dim);
        let freq = (10000f64).powf(-((d / 2 * 2) as f64) / dim as f64);
        let a = p as f64 * freq;
        T::lit(if d % 2 == 0 { a.sin() } else { a.cos() })
    })
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: TextEncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let embed = Embedding::new(store, &format!("{name}.embed"), config.vocab_size, d, 0.5, rng);
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    q: Linear::new(store, &format!("{p}.q"), d, d, false, rng),
                    k: Linear::new(store, &format!("{p}.k"), d, d, false, rng),
                    v: Linear::new(store, &format!("{p}.v"), d, d, false, rng),
                    o: Linear::new(store, &format!("{p}.o"), d, d, true, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, d * config.ff_mult, true, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), d * config.ff_mult, d, true, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), d);
        Self {
            config,
            embed,
            layers,
            ln_f,
        }
    }

    fn check_ids(&self, ids: &[Vec<usize>]) -> Result<usize> {
        let len = ids.first().map(Vec::len).ok_or(Error::Empty("token batch"))?;
        if len == 0 || len > self.config.max_len {
            return Err(Error::OutOfRange {
                what: "sequence length",
                value: len as i64,
                range: format!("1..={}", self.config.max_len),
            });
        }
        for row in ids {
            if row.len() != len {
                return Err(Error::Shape {
                    op: "TextEncoder::forward",
                    expected: vec![len],
                    got: vec![row.len()],
                });
            }
            if let Some(&bad) = row.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::OutOfRange {
                    what: "token id",
                    value: bad as i64,
                    range: format!("0..{}", self.config.vocab_size),
                });
            }
        }
        Ok(len)
    }

    /// Encode a batch of equal-length token rows.
    pub fn forward<'g, T: Real>(&self, cx: &Ctx<'g, T>, ids: &[Vec<usize>]) -> Result<EncodedBatch<'g, T>> {
        let len = self.check_ids(ids)?;
        let (b, d) = (ids.len(), self.config.dim);
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let mask: Vec<bool> = flat.iter().map(|&t| t != PAD).collect();
        let pos = cx.constant(sinusoidal_positions(len, d));
        let mut x = self.embed.forward(cx, &flat).reshape(&[b, len, d]).add(&pos);
        for layer in &self.layers {
            let h = layer.ln1.forward(cx, x);
            let q = layer.q.forward(cx, h);
            let k = layer.k.forward(cx, h);
            let v = layer.v.forward(cx, h);
            let a = attend(q, k, v, Some(&mask));
            x = x.add(&layer.o.forward(cx, a));
            let h = layer.ln2.forward(cx, x);
            x = x.add(&layer.ff2.forward(cx, layer.ff1.forward(cx, h).silu()));
        }
        let tokens = self.ln_f.forward(cx, x);
        let pooled = masked_mean(cx, tokens, &mask, b, len);
        Ok(EncodedBatch { tokens, pooled, mask })
    }

    /// Eval-mode encoding of a single token row.
    pub fn encode<T: Real>(&self, params: &ParamStore<T>, ids: &[usize]) -> Result<SentenceEncoding<T>> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, params);
        let out = self.forward(&cx, &[ids.to_vec()])?;
        let len = ids.len();
        Ok(SentenceEncoding {
            tokens: out.tokens.to_tensor().into_reshape(&[len, self.config.dim])?,
            pooled: out.pooled.to_tensor().into_reshape(&[self.config.dim])?,
            mask: out.mask,
        })
    }
}

/// Mean over real tokens; a row without any falls back to the mean of all rows.
fn masked_mean<'g, T: Real>(cx: &Ctx<'g, T>, x: Var<'g, T>, mask: &[bool], b: usize, len: usize) -> Var<'g, T> {
    let mut w = vec![T::zero(); b * len];
    for r in 0..b {
        let row = &mask[r * len..(r + 1) * len];
        let n = row.iter().filter(|&&m| m).count();
        for (j, &m) in row.iter().enumerate() {
            w[r * len + j] = if n == 0 {
                T::lit(1.0 / len as f64)
            } else if m {
                T::lit(1.0 / n as f64)
            } else {
                T::zero()
            };
        }
    }
    let d = x.shape()[2];
    cx.constant(Tensor::from_vec(&[b, 1, len], w))
        .bmm(&x, false)
        .reshape(&[b, d])
}
