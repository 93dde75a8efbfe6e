pub mod ablation;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use storyldm_core::checkpoint::{load_codec, save_codec};
use storyldm_core::evalsuite::{evaluate_run, train_classifier, Classifier, ClassifierConfig};
use storyldm_core::latentcodec::{train_codec, CodecConfig};
use storyldm_core::pipeline::{
    prepare_stories, sample_story, train, MemoryMode, ModelConfig, StoryModel, TrainConfig, Trainer, LAST_CHECKPOINT,
};
use storyldm_core::synthstory::{generate_dataset, load_split, DatasetConfig, StorySample};
use storyldm_core::textenc::Vocabulary;
use storyldm_service::{serve, AppState};

use crate::ablation::{run_ablation, AblationConfig};

#[derive(Debug, Parser)]
#[command(name = "storyldm", version, about = "Latent diffusion story generation with visual memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic story dataset.
    GenData(GenData),
    /// Train the image autoencoder.
    TrainCodec(TrainCodec),
    /// Train the frame classifier used for evaluation.
    TrainClassifier(TrainClassifier),
    /// Train a story model.
    Train(TrainArgs),
    /// Generate one story.
    Sample(SampleArgs),
    /// Score a model on a dataset split.
    Eval(EvalArgs),
    /// Serve the session API.
    Serve(ServeArgs),
    /// Train memory and memory-free models under one budget and compare them.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub val: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainCodec {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training stories used (from the start of the train split).
    #[arg(long, default_value_t = 1000)]
    pub stories: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainClassifier {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub stories: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// EMA decay; 0 disables.
    #[arg(long, default_value_t = 0.999)]
    pub ema: f64,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Train the memory-free baseline.
    #[arg(long)]
    pub no_memory: bool,
    #[arg(long, value_enum, default_value = "teacher-forced")]
    pub memory_mode: Mode,
    /// Small model with 20 diffusion steps.
    #[arg(long)]
    pub tiny: bool,
    /// Continue from `<out>/last.ckpt` when present.
    #[arg(long)]
    pub resume: bool,
    /// Use only the first N training stories.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Mode {
    TeacherForced,
    Generated,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Text file with one sentence per line.
    #[arg(long, conflicts_with = "text")]
    pub story: Option<PathBuf>,
    /// A sentence; repeat for each frame.
    #[arg(long)]
    pub text: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub max_batch: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model checkpoint; repeat to serve several.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub snapshot_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub work: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub stories: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainCodec(a) => train_codec_cmd(a),
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Ablation(a) => ablation_cmd(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load(data: &Path, split: &str, limit: Option<usize>) -> Result<Vec<StorySample>> {
    let mut s = load_split(data, split).with_context(|| format!("loading {split} split from {}", data.display()))?;
    if let Some(n) = limit {
        s.truncate(n);
    }
    if s.is_empty() {
        bail!("{split} split of {} is empty", data.display());
    }
    Ok(s)
}

pub fn gen_data(a: GenData) -> Result<()> {
    let config = DatasetConfig {
        train: a.train,
        val: a.val,
        test: a.test,
        ..Default::default()
    };
    let m = generate_dataset(&a.out, &config, a.seed)?;
    for (split, st) in &m.stats {
        info!(
            "{split}: {} stories, {:.2} references per story, {} with two characters",
            st.stories, st.avg_references_per_story, st.two_character_stories
        );
    }
    println!("{}", a.out.join("manifest.json").display());
    Ok(())
}

pub fn train_codec_cmd(a: TrainCodec) -> Result<()> {
    let train_s = load(&a.data, "train", Some(a.stories))?;
    let val = load(&a.data, "val", None)?;
    let mut config = CodecConfig::default();
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    let imgs: Vec<_> = train_s.iter().flat_map(|s| s.frames.iter()).collect();
    let (codec, _) = train_codec(&imgs, &config, a.seed, |e, l| info!("epoch {e} loss {l:.5}"))?;
    let held: Vec<_> = val.iter().flat_map(|s| s.frames.iter()).collect();
    let psnr = codec.reconstruction_psnr(&held)?;
    save_codec(&codec, &a.out)?;
    println!("held-out PSNR {psnr:.2} dB -> {}", a.out.display());
    Ok(())
}

pub fn train_classifier_cmd(a: TrainClassifier) -> Result<()> {
    let train_s = load(&a.data, "train", Some(a.stories))?;
    let val = load(&a.data, "val", None)?;
    let pairs: Vec<_> = train_s.iter().flat_map(|s| s.frames.iter().zip(&s.labels)).collect();
    let held: Vec<_> = val.iter().flat_map(|s| s.frames.iter().zip(&s.labels)).collect();
    let (c, acc) = train_classifier(&pairs, &held, &ClassifierConfig::default(), a.seed, |e, l| {
        info!("epoch {e} loss {l:.4}")
    })?;
    c.save(&a.out)?;
    println!(
        "held-out char_acc {:.4} bg_acc {:.4} -> {}",
        acc.char_acc,
        acc.bg_acc,
        a.out.display()
    );
    Ok(())
}

pub fn train_cmd(a: TrainArgs) -> Result<()> {
    let train_s = load(&a.data, "train", a.limit)?;
    let last = a.out.join(LAST_CHECKPOINT);
    let mut trainer = if a.resume && last.exists() {
        info!("resuming from {}", last.display());
        Trainer::resume(&last)?
    } else {
        if last.exists() {
            bail!("{} exists; pass --resume or choose another --out", last.display());
        }
        let codec = Arc::new(load_codec(&a.codec)?);
        let vocab = Vocabulary::build(
            train_s
                .iter()
                .flat_map(|s| s.sentences.iter().chain(&s.resolved_sentences))
                .map(String::as_str),
        )?;
        let mut mc = if a.tiny {
            ModelConfig::tiny(vocab.len(), &codec)
        } else {
            ModelConfig::new(vocab.len(), &codec)
        };
        if let Some(b) = a.base_channels {
            mc.unet.base_channels = b;
        }
        if a.no_memory {
            mc = mc.without_memory();
        }
        let model = StoryModel::new(mc, vocab, codec, a.seed)?;
        Trainer::new(
            model,
            TrainConfig {
                lr: a.lr,
                batch_size: a.batch_size,
                epochs: a.epochs,
                seed: a.seed,
                ema_decay: (a.ema > 0.0).then_some(a.ema),
                memory_mode: match a.memory_mode {
                    Mode::TeacherForced => MemoryMode::TeacherForced,
                    Mode::Generated => MemoryMode::Generated,
                },
                ..Default::default()
            },
        )?
    };
    let data = prepare_stories(&trainer.model.vocab, &trainer.model.codec, &train_s)?;
    train(&mut trainer, &data, Some(&a.out), |_, s| {
        info!("epoch {} step {} loss {:.4} ({:.1}s)", s.epoch, s.step, s.mean_loss, s.seconds);
        Ok(())
    })?;
    let path = a.out.join("model.ckpt");
    let id = trainer.export_model().save(&path)?;
    println!("{id} -> {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    checkpoint_id: &'a str,
    seed: u64,
    sentences: &'a [String],
    frames: Vec<String>,
    session: storyldm_core::pipeline::SessionSnapshot,
}

pub fn sample_cmd(a: SampleArgs) -> Result<()> {
    let sentences: Vec<String> = match &a.story {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => a.text.clone(),
    };
    if sentences.is_empty() {
        bail!("no sentences: pass --story FILE or --text");
    }
    let model = StoryModel::load(&a.ckpt)?;
    let session = sample_story(&model, &sentences, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut frames = Vec::new();
    for (m, img) in session.frames.iter().enumerate() {
        let name = format!("frame_{m}.png");
        img.save_png(&a.out.join(&name))?;
        frames.push(name);
    }
    let record = SampleRecord {
        checkpoint_id: &session.checkpoint_id,
        seed: a.seed,
        sentences: &session.sentences,
        frames,
        session: session.snapshot(),
    };
    write_json(&a.out.join("session.json"), &record)?;
    println!("{} frames -> {}", session.len(), a.out.display());
    Ok(())
}

pub fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = StoryModel::load(&a.ckpt)?;
    let classifier = Classifier::load(&a.classifier)?;
    let samples = load(&a.data, &a.split, a.limit)?;
    let report = evaluate_run(&model, &samples, &classifier, a.seed, a.max_batch)?;
    write_json(&a.out, &report)?;
    let r = &report.referenced;
    println!(
        "referenced frames: char_acc {:.4} char_f1 {:.4} bg_acc {:.4} bg_f1 {:.4}; fid {:.3}",
        r.char_acc, r.char_f1, r.bg_acc, r.bg_f1, report.fid
    );
    Ok(())
}

pub fn serve_cmd(a: ServeArgs) -> Result<()> {
    let models = a.ckpt.iter().map(|p| StoryModel::load(p)).collect::<std::result::Result<Vec<_>, _>>()?;
    let state = AppState::new(models, a.snapshot_dir)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad --host/--port")?;
    for id in state.checkpoints() {
        info!("serving checkpoint {id}");
    }
    info!("listening on http://{addr}");
    tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
    Ok(())
}

pub fn ablation_cmd(a: AblationArgs) -> Result<()> {
    let base = AblationConfig::default();
    let cfg = AblationConfig {
        train_stories: a.stories,
        test_stories: a.test,
        epochs: a.epochs.unwrap_or(base.epochs),
        lr: a.lr.unwrap_or(base.lr),
        base_channels: a.base_channels.unwrap_or(base.base_channels),
        seed: a.seed,
        ..base
    };
    let report = run_ablation(&cfg, &a.work, &mut |msg| info!("{msg}"))?;
    let (m, b) = (&report.memory.report.referenced, &report.baseline.report.referenced);
    println!("referenced frames      char_acc  bg_acc");
    println!("memory                 {:>8.4}  {:>6.4}", m.char_acc, m.bg_acc);
    println!("memory-free baseline   {:>8.4}  {:>6.4}", b.char_acc, b.bg_acc);
    let (gc, gb) = report.gaps();
    println!("gap (points)           {gc:>8.1}  {gb:>6.1}");
    println!("fid: untrained {:.3}, trained {:.3}", report.init_fid, report.memory.subset_fid);
    Ok(())
}
