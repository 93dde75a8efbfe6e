//! Frame classifier, consistency metrics, and Fréchet distance between feature sets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use storyldm_autodiff::layers::{Conv2d, Linear};
use storyldm_autodiff::optim::{clip_grad_norm, Adam, AdamConfig};
use storyldm_autodiff::{Ctx, Graph, ParamStore, Tensor, Var};

use crate::checkpoint::{decode_archive, encode_archive, map_to_store, read_file, store_to_map, write_atomic};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latentcodec::{cosine_lr, images_to_batch};
use crate::pipeline::{sample_stories, StoryModel};
use crate::synthstory::{story_seed, Background, Character, FrameLabel, StorySample};

pub const NUM_CHARACTERS: usize = 3;
pub const NUM_BACKGROUNDS: usize = 6;
pub const CLASSIFIER_THRESHOLD: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub widths: [usize; 4],
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            widths: [16, 32, 32, 64],
            feature_dim: 32,
            epochs: 12,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug)]
struct Trunk {
    convs: Vec<Conv2d>,
    feat: Linear,
    chars: Linear,
    bg: Linear,
}

impl Trunk {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore<f32>, cfg: &ClassifierConfig, rng: &mut R) -> Self {
        let w = cfg.widths;
        let convs = vec![
            Conv2d::same3(store, "cls.conv0", 3, w[0], rng),
            Conv2d::new(store, "cls.conv1", w[0], w[1], 3, 2, 1, rng),
            Conv2d::new(store, "cls.conv2", w[1], w[2], 3, 2, 1, rng),
            Conv2d::new(store, "cls.conv3", w[2], w[3], 3, 2, 1, rng),
        ];
        Self {
            convs,
            feat: Linear::new(store, "cls.feat", w[3] * (cfg.image_size / 8).pow(2), cfg.feature_dim, true, rng),
            chars: Linear::new(store, "cls.chars", cfg.feature_dim, NUM_CHARACTERS, true, rng),
            bg: Linear::new(store, "cls.bg", cfg.feature_dim, NUM_BACKGROUNDS, true, rng),
        }
    }

    /// `(features [N, F], character logits [N, 3], background logits [N, 6])`
    fn forward<'g>(&self, cx: &Ctx<'g, f32>, x: Var<'g, f32>) -> (Var<'g, f32>, Var<'g, f32>, Var<'g, f32>) {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(cx, h).silu();
        }
        let s = h.shape();
        let f = self.feat.forward(cx, h.reshape(&[s[0], s[1] * s[2] * s[3]])).silu();
        (f, self.chars.forward(cx, f), self.bg.forward(cx, f))
    }
}

/// Multi-label character detector plus background classifier; its penultimate layer feeds the FID.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamStore<f32>,
    trunk: Trunk,
}

/// Classifier output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub char_probs: [f64; NUM_CHARACTERS],
    pub bg_probs: [f64; NUM_BACKGROUNDS],
}

impl Prediction {
    /// Characters with probability above one half, and the arg-max background.
    pub fn label(&self) -> FrameLabel {
        let characters = (0..NUM_CHARACTERS)
            .filter(|&i| self.char_probs[i] > 0.5)
            .map(|i| Character::from_index(i).expect("index < 3"))
            .collect();
        let bg = (0..NUM_BACKGROUNDS)
            .max_by(|&a, &b| self.bg_probs[a].total_cmp(&self.bg_probs[b]))
            .expect("six classes");
        FrameLabel {
            characters,
            background: Background::from_index(bg).expect("index < 6"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    kind: String,
    config: ClassifierConfig,
}

const CHUNK: usize = 64;

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let trunk = Trunk::new(&mut params, &config, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { config, params, trunk }
    }

    fn check(&self, images: &[&Image]) -> Result<()> {
        let s = self.config.image_size;
        if let Some(bad) = images.iter().find(|i| i.height != s || i.width != s) {
            return Err(Error::Shape {
                op: "Classifier",
                expected: vec![s, s, 3],
                got: vec![bad.height, bad.width, 3],
            });
        }
        Ok(())
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<Prediction>> {
        self.check(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &self.params);
            let (_, c, b) = self.trunk.forward(&cx, cx.constant(images_to_batch(chunk)?));
            let (c, b) = (c.to_tensor(), b.to_tensor());
            for i in 0..chunk.len() {
                let cl = &c.data()[i * NUM_CHARACTERS..(i + 1) * NUM_CHARACTERS];
                let bl = &b.data()[i * NUM_BACKGROUNDS..(i + 1) * NUM_BACKGROUNDS];
                let max = bl.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let exps: Vec<f64> = bl.iter().map(|&v| (v as f64 - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.push(Prediction {
                    char_probs: std::array::from_fn(|k| 1.0 / (1.0 + (-(cl[k] as f64)).exp())),
                    bg_probs: std::array::from_fn(|k| exps[k] / z),
                });
            }
        }
        Ok(out)
    }

    pub fn labels(&self, images: &[&Image]) -> Result<Vec<FrameLabel>> {
        Ok(self.predict(images)?.iter().map(Prediction::label).collect())
    }

    /// Penultimate-layer features, one row per image.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        self.check(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &self.params);
            let (f, _, _) = self.trunk.forward(&cx, cx.constant(images_to_batch(chunk)?));
            let f = f.to_tensor();
            let d = self.config.feature_dim;
            out.extend((0..chunk.len()).map(|i| f.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut map = BTreeMap::new();
        store_to_map(&self.params, "", &mut map);
        encode_archive(
            &ClassifierFile {
                kind: "classifier".into(),
                config: self.config.clone(),
            },
            &map,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (file, map): (ClassifierFile, _) = decode_archive(bytes)?;
        if file.kind != "classifier" {
            return Err(Error::Format(format!("expected a classifier archive, found `{}`", file.kind)));
        }
        let mut c = Self::new(file.config, 0);
        let loaded = map_to_store(&map, "");
        for name in c.params.names().map(str::to_string).collect::<Vec<_>>() {
            let p = loaded
                .get(&name)
                .filter(|p| p.shape() == c.params.get(&name).unwrap().shape())
                .ok_or_else(|| Error::Format(format!("classifier parameter `{name}` missing or misshapen")))?;
            c.params.set(name, p.clone());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Exact-match character accuracy and background accuracy on labeled frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub char_acc: f64,
    pub bg_acc: f64,
}

pub fn classifier_accuracy(classifier: &Classifier, frames: &[(&Image, &FrameLabel)]) -> Result<HeadAccuracy> {
    let images: Vec<&Image> = frames.iter().map(|f| f.0).collect();
    let truth: Vec<FrameLabel> = frames.iter().map(|f| f.1.clone()).collect();
    let m = story_metrics(&classifier.labels(&images)?, &truth)?;
    Ok(HeadAccuracy {
        char_acc: m.char_acc,
        bg_acc: m.bg_acc,
    })
}

/// Train on ground-truth frames, then require the threshold on held-out frames.
pub fn train_classifier(
    train: &[(&Image, &FrameLabel)],
    held_out: &[(&Image, &FrameLabel)],
    config: &ClassifierConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Classifier, HeadAccuracy)> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::Empty("classifier frames"));
    }
    let mut clf = Classifier::new(config.clone(), seed);
    clf.check(&train.iter().map(|f| f.0).collect::<Vec<_>>())?;
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    let total = (config.epochs * train.len().div_ceil(config.batch_size.max(1))).max(1) as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size.max(1)) {
            let images: Vec<&Image> = idx.iter().map(|&i| train[i].0).collect();
            let mut char_t = Vec::with_capacity(idx.len() * NUM_CHARACTERS);
            let mut bg_t = Vec::with_capacity(idx.len());
            for &i in idx {
                let l = train[i].1;
                char_t.extend(l.character_mask().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
                bg_t.push(l.background.index());
            }
            let (value, mut grads) = {
                let g = Graph::new();
                let cx = Ctx::new(&g, &clf.params);
                let (_, c, b) = clf.trunk.forward(&cx, cx.constant(images_to_batch(&images)?));
                let loss = c
                    .bce_with_logits(&Tensor::from_vec(&[idx.len(), NUM_CHARACTERS], char_t))
                    .add(&b.cross_entropy(&bg_t));
                let value = loss.value().item() as f64;
                (value, g.param_grads(&g.backward(loss)))
            };
            step += 1;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: value,
                    last_good: None,
                });
            }
            clip_grad_norm(&mut grads, 1.0);
            opt.config.lr = cosine_lr(config.lr, (step - 1) as f64 / total);
            opt.step(&mut clf.params, &grads);
            sum += value * idx.len() as f64;
            n += idx.len();
        }
        on_epoch(epoch, sum / n as f64);
    }
    let acc = classifier_accuracy(&clf, held_out)?;
    for (what, got) in [("classifier char_acc", acc.char_acc), ("classifier bg_acc", acc.bg_acc)] {
        if got < CLASSIFIER_THRESHOLD {
            return Err(Error::BelowThreshold {
                what,
                got,
                required: CLASSIFIER_THRESHOLD,
            });
        }
    }
    Ok((clf, acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub char_acc: f64,
    pub char_f1: f64,
    pub bg_acc: f64,
    pub bg_f1: f64,
}

fn f1(tp: usize, fp: usize, fneg: usize) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Exact character-set accuracy, micro-F1 over characters, background accuracy and
/// macro-F1 over the backgrounds occurring in either labels or predictions.
pub fn story_metrics(pred: &[FrameLabel], truth: &[FrameLabel]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "story_metrics",
            expected: vec![truth.len()],
            got: vec![pred.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("story_metrics"));
    }
    let n = pred.len();
    let (mut exact, mut bg_hit) = (0usize, 0usize);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let mut per_class: BTreeMap<Background, (usize, usize, usize)> = BTreeMap::new();
    for (p, t) in pred.iter().zip(truth) {
        let (pm, tm) = (p.character_mask(), t.character_mask());
        exact += usize::from(pm == tm);
        for k in 0..NUM_CHARACTERS {
            match (pm[k], tm[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if p.background == t.background {
            bg_hit += 1;
            per_class.entry(t.background).or_default().0 += 1;
        } else {
            per_class.entry(p.background).or_default().1 += 1;
            per_class.entry(t.background).or_default().2 += 1;
        }
    }
    let classes: BTreeSet<Background> = per_class.keys().copied().collect();
    let bg_f1 = classes
        .iter()
        .map(|c| {
            let (a, b, d) = per_class[c];
            f1(a, b, d)
        })
        .sum::<f64>()
        / classes.len() as f64;
    Ok(Metrics {
        frames: n,
        char_acc: exact as f64 / n as f64,
        char_f1: f1(tp, fp, fneg),
        bg_acc: bg_hit as f64 / n as f64,
        bg_f1,
    })
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `S` with `S·S = A·B` for symmetric positive-definite `A` and PSD `B`.
pub fn product_sqrt(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ra = psd_sqrt(a);
    let inv = ra
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Config("left factor is singular".into()))?;
    Ok(&ra * psd_sqrt(&(&ra * b * &ra)) * inv)
}

fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.len() < 2 {
        return Err(Error::Empty("FID needs at least two samples per set"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Config("feature rows must share one non-zero width".into()));
    }
    let m = DMatrix::from_fn(x.len(), d, |i, j| x[i][j]);
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(x.len(), d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (x.len() - 1) as f64;
    Ok((mean, cov))
}

/// `‖μ_r−μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_r^{1/2} Σ_g Σ_r^{1/2})^{1/2})`
pub fn compute_fid(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<f64> {
    let (mr, cr) = moments(real)?;
    let (mg, cg) = moments(gen)?;
    if mr.len() != mg.len() {
        return Err(Error::Shape {
            op: "compute_fid",
            expected: vec![mr.len()],
            got: vec![mg.len()],
        });
    }
    let d = mr.len();
    if real.len() <= d || gen.len() <= d {
        log::warn!("FID on {} / {} samples of width {d}; covariances are rank deficient", real.len(), gen.len());
    }
    let rr = psd_sqrt(&cr);
    let mid = &rr * &cg * &rr;
    let mid = (&mid + mid.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fid = (&mr - &mg).norm_squared() + cr.trace() + cg.trace() - 2.0 * tr_sqrt;
    Ok(fid.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub stories: usize,
    pub seed: u64,
    /// How each metric is aggregated.
    pub protocol: String,
    pub overall: Metrics,
    /// Frames whose sentence names the characters (m = 0).
    pub first_frame: Metrics,
    /// Frames whose sentence refers to characters only by pronoun (m ≥ 1).
    pub referenced: Metrics,
    pub fid: f64,
    pub config: serde_json::Value,
}

pub const PROTOCOL: &str = "char_acc: exact character-set match (sigmoid > 0.5); char_f1: micro over characters; \
bg_acc: top-1; bg_f1: macro over backgrounds present in labels or predictions; fid: classifier penultimate features";

/// Score generated frames against the stories they were generated for.
pub fn report_from_frames(
    generated: &[Vec<Image>],
    samples: &[StorySample],
    classifier: &Classifier,
) -> Result<(Metrics, Metrics, Metrics, f64)> {
    if generated.len() != samples.len() {
        return Err(Error::Config("one generated story per sample required".into()));
    }
    let (mut gen_imgs, mut real_imgs, mut truth, mut index) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (g, s) in generated.iter().zip(samples) {
        if g.len() != s.labels.len() {
            return Err(Error::Config(format!("story {} has {} generated frames", s.id, g.len())));
        }
        for (m, (img, label)) in g.iter().zip(&s.labels).enumerate() {
            gen_imgs.push(img);
            truth.push(label.clone());
            index.push(m);
        }
        real_imgs.extend(s.frames.iter());
    }
    let pred = classifier.labels(&gen_imgs)?;
    let split = |keep: &dyn Fn(usize) -> bool| -> Result<Metrics> {
        let (p, t): (Vec<FrameLabel>, Vec<FrameLabel>) = pred
            .iter()
            .zip(&truth)
            .zip(&index)
            .filter(|(_, &m)| keep(m))
            .map(|((p, t), _)| (p.clone(), t.clone()))
            .unzip();
        story_metrics(&p, &t)
    };
    let overall = story_metrics(&pred, &truth)?;
    let first = split(&|m| m == 0)?;
    let referenced = split(&|m| m >= 1)?;
    let fid = compute_fid(&classifier.features(&real_imgs)?, &classifier.features(&gen_imgs)?)?;
    Ok((overall, first, referenced, fid))
}

/// Sample one story per test item with seeds derived from `seed` and the story id, then score it.
pub fn evaluate_run(
    model: &StoryModel,
    samples: &[StorySample],
    classifier: &Classifier,
    seed: u64,
    max_batch: usize,
) -> Result<EvalReport> {
    let texts: Vec<Vec<String>> = samples.iter().map(|s| s.sentences.clone()).collect();
    let seeds: Vec<u64> = samples.iter().map(|s| story_seed(seed, s.id)).collect();
    let sessions = sample_stories(model, &texts, &seeds, max_batch)?;
    let frames: Vec<Vec<Image>> = sessions.into_iter().map(|s| s.frames).collect();
    let (overall, first_frame, referenced, fid) = report_from_frames(&frames, samples, classifier)?;
    Ok(EvalReport {
        checkpoint_id: model.checkpoint_id(),
        stories: samples.len(),
        seed,
        protocol: PROTOCOL.into(),
        overall,
        first_frame,
        referenced,
        fid,
        config: serde_json::to_value(&model.config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(chars: &[Character], bg: Background) -> FrameLabel {
        FrameLabel {
            characters: chars.to_vec(),
            background: bg,
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let t = vec![
            label(&[Character::Tony], Background::Snow),
            label(&[Character::Lisa, Character::Jhon], Background::Grass),
        ];
        let m = story_metrics(&t, &t).unwrap();
        assert_eq!((m.char_acc, m.char_f1, m.bg_acc, m.bg_f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn complemented_characters_score_zero() {
        let t = vec![label(&[Character::Tony], Background::Snow)];
        let p = vec![label(&[Character::Lisa, Character::Jhon], Background::Snow)];
        let m = story_metrics(&p, &t).unwrap();
        assert_eq!(m.char_acc, 0.0);
        assert_eq!(m.char_f1, 0.0);
        assert!(story_metrics(&p, &[]).is_err());
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        assert!(compute_fid(&x, &x).unwrap() < 1e-6);
        assert!(compute_fid(&x[..1], &x).is_err());
    }

    #[test]
    fn psd_sqrt_clamps_negative_round_off() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let r = psd_sqrt(&m);
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((r[(0, 0)] - 1.0).abs() < 1e-12);
    }
}
