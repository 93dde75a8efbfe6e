//! Memory vs memory-free training under one budget, scored on referenced frames.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use storyldm_core::checkpoint::{load_codec, save_codec};
use storyldm_core::evalsuite::{
    classifier_accuracy, report_from_frames, train_classifier, Classifier, ClassifierConfig, EvalReport, HeadAccuracy,
    PROTOCOL,
};
use storyldm_core::image::Image;
use storyldm_core::latentcodec::{train_codec, CodecConfig, LatentCodec};
use storyldm_core::pipeline::{
    prepare_stories, sample_stories, train, ModelConfig, StoryModel, TrainConfig, Trainer, LAST_CHECKPOINT,
};
use storyldm_core::synthstory::{story_by_id, story_seed, Atlas, StoryConfig, StorySample};
use storyldm_core::textenc::Vocabulary;

/// Ids match a `gen-data` run with 2000/200/200 stories and the same seed.
pub const VAL_FIRST_ID: u64 = 2000;
pub const TEST_FIRST_ID: u64 = 2200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub data_seed: u64,
    pub train_stories: usize,
    pub test_stories: usize,
    pub codec_stories: usize,
    pub classifier_stories: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ema_decay: Option<f64>,
    pub base_channels: usize,
    pub seed: u64,
    /// Test stories sampled from the untrained model for the FID comparison.
    pub fid_stories: usize,
    pub max_batch: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            train_stories: 2000,
            test_stories: 200,
            codec_stories: 1000,
            classifier_stories: 1000,
            epochs: 40,
            lr: 1e-3,
            batch_size: 16,
            ema_decay: Some(0.999),
            base_channels: 64,
            seed: 0,
            fid_stories: 50,
            max_batch: 50,
        }
    }
}

impl AblationConfig {
    /// The reduced CPU budget.
    pub fn fallback() -> Self {
        Self {
            train_stories: 500,
            ..Self::default()
        }
    }

    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub report: EvalReport,
    pub final_loss: f64,
    pub train_seconds: f64,
    /// FID over the first `fid_stories` test stories.
    pub subset_fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub codec_psnr: f64,
    pub classifier: HeadAccuracy,
    pub memory: RunSummary,
    pub baseline: RunSummary,
    /// Untrained memory model on the FID subset.
    pub init_fid: f64,
}

impl AblationReport {
    /// Referenced-frame (char_acc, bg_acc) gaps in points.
    pub fn gaps(&self) -> (f64, f64) {
        let (m, b) = (&self.memory.report.referenced, &self.baseline.report.referenced);
        (100.0 * (m.char_acc - b.char_acc), 100.0 * (m.bg_acc - b.bg_acc))
    }
}

pub fn stories(seed: u64, ids: std::ops::Range<u64>) -> Result<Vec<StorySample>> {
    let (config, atlas) = (StoryConfig::default(), Atlas::default());
    ids.map(|id| story_by_id(seed, id, &config, &atlas).map_err(Into::into)).collect()
}

fn frames(samples: &[StorySample]) -> Vec<&Image> {
    samples.iter().flat_map(|s| s.frames.iter()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}

fn codec(cfg: &AblationConfig, dir: &Path, train: &[StorySample], val: &[StorySample], log: &mut dyn FnMut(&str)) -> Result<(LatentCodec, f64)> {
    let path = dir.join(format!("codec-{}-{}.ckpt", cfg.data_seed, cfg.codec_stories));
    let codec = if path.exists() {
        load_codec(&path)?
    } else {
        log("training codec");
        let imgs = frames(&train[..cfg.codec_stories.min(train.len())]);
        let (c, _) = train_codec(&imgs, &CodecConfig::default(), cfg.seed, |e, l| log(&format!("codec epoch {e} loss {l:.5}")))?;
        save_codec(&c, &path)?;
        c
    };
    let psnr = codec.reconstruction_psnr(&frames(val))?;
    Ok((codec, psnr))
}

fn classifier(cfg: &AblationConfig, dir: &Path, val: &[StorySample], log: &mut dyn FnMut(&str)) -> Result<(Classifier, HeadAccuracy)> {
    let path = dir.join(format!("classifier-{}-{}.ckpt", cfg.data_seed, cfg.classifier_stories));
    let held: Vec<_> = val.iter().flat_map(|s| s.frames.iter().zip(&s.labels)).collect();
    if path.exists() {
        let c = Classifier::load(&path)?;
        let acc = classifier_accuracy(&c, &held)?;
        return Ok((c, acc));
    }
    log("training classifier");
    let train = stories(cfg.data_seed, 0..cfg.classifier_stories as u64)?;
    let pairs: Vec<_> = train.iter().flat_map(|s| s.frames.iter().zip(&s.labels)).collect();
    let (c, acc) = train_classifier(&pairs, &held, &ClassifierConfig::default(), cfg.seed, |e, l| {
        log(&format!("classifier epoch {e} loss {l:.4}"))
    })?;
    c.save(&path)?;
    Ok((c, acc))
}

fn generate(model: &StoryModel, samples: &[StorySample], cfg: &AblationConfig) -> Result<Vec<Vec<Image>>> {
    let texts: Vec<Vec<String>> = samples.iter().map(|s| s.sentences.clone()).collect();
    let seeds: Vec<u64> = samples.iter().map(|s| story_seed(cfg.seed, s.id)).collect();
    Ok(sample_stories(model, &texts, &seeds, cfg.max_batch)?.into_iter().map(|s| s.frames).collect())
}

fn save_frames(dir: &Path, samples: &[StorySample], generated: &[Vec<Image>]) -> Result<()> {
    for (s, g) in samples.iter().zip(generated) {
        let d = dir.join(format!("story_{}", s.id));
        fs::create_dir_all(&d)?;
        for (m, img) in g.iter().enumerate() {
            img.save_png(&d.join(format!("frame_{m}.png")))?;
        }
    }
    Ok(())
}

struct Shared<'a> {
    cfg: &'a AblationConfig,
    codec: Arc<LatentCodec>,
    vocab: Vocabulary,
    classifier: &'a Classifier,
    test: &'a [StorySample],
}

impl Shared<'_> {
    fn model_config(&self, memory: bool) -> ModelConfig {
        let mut mc = ModelConfig::new(self.vocab.len(), &self.codec);
        mc.unet.base_channels = self.cfg.base_channels;
        if memory {
            mc
        } else {
            mc.without_memory()
        }
    }

    fn fresh_model(&self, memory: bool) -> Result<StoryModel> {
        Ok(StoryModel::new(self.model_config(memory), self.vocab.clone(), self.codec.clone(), self.cfg.seed)?)
    }

    fn score(&self, model: &StoryModel, generated: &[Vec<Image>]) -> Result<(EvalReport, f64)> {
        let (overall, first_frame, referenced, fid) = report_from_frames(generated, self.test, self.classifier)?;
        let k = self.cfg.fid_stories.min(self.test.len());
        let (_, _, _, subset_fid) = report_from_frames(&generated[..k], &self.test[..k], self.classifier)?;
        let report = EvalReport {
            checkpoint_id: model.checkpoint_id(),
            stories: self.test.len(),
            seed: self.cfg.seed,
            protocol: PROTOCOL.into(),
            overall,
            first_frame,
            referenced,
            fid,
            config: serde_json::to_value(&model.config)?,
        };
        Ok((report, subset_fid))
    }

    fn run(&self, dir: &Path, memory: bool, data: &[storyldm_core::pipeline::TrainingStory], log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
        let summary_path = dir.join("summary.json");
        if let Some(s) = read_json::<RunSummary>(&summary_path)? {
            return Ok(s);
        }
        fs::create_dir_all(dir)?;
        let tag = if memory { "memory" } else { "baseline" };
        let last = dir.join(LAST_CHECKPOINT);
        let mut trainer = if last.exists() {
            log(&format!("{tag}: resuming from {}", last.display()));
            Trainer::resume(&last)?
        } else {
            Trainer::new(
                self.fresh_model(memory)?,
                TrainConfig {
                    lr: self.cfg.lr,
                    epochs: self.cfg.epochs,
                    batch_size: self.cfg.batch_size,
                    ema_decay: self.cfg.ema_decay,
                    seed: self.cfg.seed,
                    ..Default::default()
                },
            )?
        };
        let t0 = Instant::now();
        let mut final_loss = f64::NAN;
        train(&mut trainer, data, Some(dir), |_, s| {
            final_loss = s.mean_loss;
            log(&format!("{tag}: epoch {} loss {:.4} ({:.0}s)", s.epoch, s.mean_loss, s.seconds));
            Ok(())
        })?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let model = trainer.export_model();
        model.save(&dir.join("model.ckpt"))?;
        log(&format!("{tag}: sampling {} test stories", self.test.len()));
        let generated = generate(&model, self.test, self.cfg)?;
        save_frames(&dir.join("samples"), self.test, &generated)?;
        let (report, subset_fid) = self.score(&model, &generated)?;
        write_json(&dir.join("report.json"), &report)?;
        let summary = RunSummary {
            report,
            final_loss,
            train_seconds,
            subset_fid,
        };
        write_json(&summary_path, &summary)?;
        Ok(summary)
    }
}

/// Runs (or resumes) the ablation under `work/<config key>`; finished stages are reused.
pub fn run_ablation(cfg: &AblationConfig, work: &Path, log: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    let dir: PathBuf = work.join(cfg.key());
    fs::create_dir_all(&dir)?;
    let report_path = dir.join("ablation.json");
    if let Some(r) = read_json::<AblationReport>(&report_path)? {
        return Ok(r);
    }
    write_json(&dir.join("config.json"), cfg)?;
    let train_s = stories(cfg.data_seed, 0..cfg.train_stories.max(cfg.codec_stories) as u64)?;
    let val = stories(cfg.data_seed, VAL_FIRST_ID..VAL_FIRST_ID + 100)?;
    let test = stories(cfg.data_seed, TEST_FIRST_ID..TEST_FIRST_ID + cfg.test_stories as u64)?;
    let (codec, codec_psnr) = codec(cfg, work, &train_s, &val, log)?;
    log(&format!("codec held-out PSNR {codec_psnr:.2} dB"));
    let (classifier, acc) = classifier(cfg, work, &val, log)?;
    log(&format!("classifier held-out char {:.4} bg {:.4}", acc.char_acc, acc.bg_acc));

    let train_s = &train_s[..cfg.train_stories];
    let vocab = Vocabulary::build(
        train_s
            .iter()
            .flat_map(|s| s.sentences.iter().chain(&s.resolved_sentences))
            .map(String::as_str),
    )?;
    let codec = Arc::new(codec);
    let data = prepare_stories(&vocab, &codec, train_s)?;
    let shared = Shared {
        cfg,
        codec,
        vocab,
        classifier: &classifier,
        test: &test,
    };

    let init_fid = match read_json::<f64>(&dir.join("init_fid.json"))? {
        Some(v) => v,
        None => {
            let k = cfg.fid_stories.min(test.len());
            log(&format!("sampling {k} stories from the untrained model"));
            let model = shared.fresh_model(true)?;
            let generated = generate(&model, &test[..k], cfg)?;
            let (_, _, _, fid) = report_from_frames(&generated, &test[..k], &classifier)?;
            write_json(&dir.join("init_fid.json"), &fid)?;
            fid
        }
    };
    let memory = shared.run(&dir.join("memory"), true, &data, log)?;
    let baseline = shared.run(&dir.join("baseline"), false, &data, log)?;
    let report = AblationReport {
        config: cfg.clone(),
        codec_psnr,
        classifier: acc,
        memory,
        baseline,
        init_fid,
    };
    write_json(&report_path, &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_changes_with_the_config() {
        let a = AblationConfig::default();
        assert_eq!(a.key(), AblationConfig::default().key());
        assert_ne!(a.key(), AblationConfig::fallback().key());
    }

    #[test]
    fn story_ids_line_up_with_generated_datasets() {
        let s = stories(3, 5..7).unwrap();
        assert_eq!((s[0].id, s[1].id), (5, 6));
        assert_eq!(s[0].seed, story_seed(3, 5));
    }
}
