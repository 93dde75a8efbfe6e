use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storyldm_autodiff::Tensor;
use storyldm_core::diffusion::q_sample;
use storyldm_core::latentcodec::{CodecConfig, LatentCodec};
use storyldm_core::pipeline::{
    estimate_clean, extend_story, prepare_stories, sample_stories, sample_story, train, MemoryMode, ModelConfig,
    StoryModel, StorySession, TrainConfig, Trainer, TrainingStory, LAST_CHECKPOINT, RUN_LOG,
};
use storyldm_core::synthstory::{build_story, Atlas, StoryConfig, StorySample};
use storyldm_core::textenc::Vocabulary;
use storyldm_core::Error;

fn stories(n: u64) -> Vec<StorySample> {
    let atlas = Atlas::default();
    (0..n)
        .map(|s| build_story(&mut ChaCha8Rng::seed_from_u64(s), &StoryConfig::default(), &atlas).unwrap())
        .collect()
}

fn setup(n: u64, memory: bool) -> (StoryModel, Vec<TrainingStory>) {
    let samples = stories(n);
    let vocab = Vocabulary::build(samples.iter().flat_map(|s| s.sentences.iter().map(String::as_str))).unwrap();
    let codec = Arc::new(
        LatentCodec::new(
            CodecConfig {
                widths: [4, 4],
                ..Default::default()
            },
            5,
        )
        .unwrap(),
    );
    let data = prepare_stories(&vocab, &codec, &samples).unwrap();
    let mut cfg = ModelConfig::tiny(vocab.len(), &codec);
    cfg.unet.use_memory = memory;
    (StoryModel::new(cfg, vocab, codec, 11).unwrap(), data)
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        batch_size: 4,
        epochs,
        seed: 9,
        log_per_epoch: 2,
        ..Default::default()
    }
}

#[test]
fn first_frame_objective_ignores_the_memory_path() {
    let (model, data) = setup(6, true);
    let batch: Vec<&TrainingStory> = data.iter().collect();
    let mut draws = model
        .draw_step(&mut ChaCha8Rng::seed_from_u64(1), &batch, MemoryMode::TeacherForced)
        .unwrap();
    draws.frames = vec![0; batch.len()];
    let with = model.batch_loss(&batch, &draws, MemoryMode::TeacherForced).unwrap();
    let without = model.batch_loss_without_memory(&batch, &draws).unwrap();
    assert!((with - without).abs() < 1e-6, "{with} vs {without}");
    draws.frames = vec![3; batch.len()];
    let later = model.batch_loss(&batch, &draws, MemoryMode::TeacherForced).unwrap();
    let later_without = model.batch_loss_without_memory(&batch, &draws).unwrap();
    assert!((later - later_without).abs() > 1e-9);
}

#[test]
fn overfits_a_small_story_set() {
    let (model, data) = setup(50, true);
    let probe: Vec<&TrainingStory> = data.iter().take(16).collect();
    let draws = model
        .draw_step(&mut ChaCha8Rng::seed_from_u64(2), &probe, MemoryMode::TeacherForced)
        .unwrap();
    let initial = model.batch_loss(&probe, &draws, MemoryMode::TeacherForced).unwrap();
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            lr: 3e-3,
            batch_size: 16,
            ..quick_config(1)
        },
    )
    .unwrap();
    for step in 0..200 {
        let start = (step * 16) % 48;
        let batch: Vec<&TrainingStory> = data[start..start + 16].iter().collect();
        trainer.train_step(&batch).unwrap();
    }
    let last = trainer
        .model
        .batch_loss(&probe, &draws, MemoryMode::TeacherForced)
        .unwrap();
    assert!(last < 0.5 * initial, "initial {initial}, final {last}");
}

#[test]
fn identical_seeds_give_identical_loss_traces() {
    let (model, data) = setup(8, true);
    let run = || {
        let mut t = Trainer::new(model.clone(), quick_config(2)).unwrap();
        train(&mut t, &data, None, |_, _| Ok(()))
            .unwrap()
            .into_iter()
            .map(|s| s.mean_loss)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_the_uninterrupted_trace() {
    let (model, data) = setup(8, true);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        ema_decay: Some(0.9),
        ..quick_config(3)
    };
    let mut full = Trainer::new(model.clone(), config.clone()).unwrap();
    let whole = train(&mut full, &data, None, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(
        model,
        TrainConfig {
            epochs: 1,
            ..config.clone()
        },
    )
    .unwrap();
    train(&mut first, &data, Some(dir.path()), |_, _| Ok(())).unwrap();
    let mut resumed = Trainer::resume(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    resumed.config.epochs = 3;
    let rest = train(&mut resumed, &data, Some(dir.path()), |_, _| Ok(())).unwrap();
    assert_eq!(rest.len(), 2);
    for (a, b) in whole[1..].iter().zip(&rest) {
        assert_eq!(a.mean_loss, b.mean_loss);
        assert_eq!(a.step, b.step);
    }
    assert_eq!(full.to_bytes().unwrap(), resumed.to_bytes().unwrap());

    let log = std::fs::read_to_string(dir.path().join(RUN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1 + 3 * 2, "{log}");
}

#[test]
fn nan_loss_aborts_with_a_pointer_to_the_last_checkpoint() {
    let (mut model, data) = setup(8, false);
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(model.clone(), quick_config(1)).unwrap();
    train(&mut trainer, &data, Some(dir.path()), |_, _| Ok(())).unwrap();
    for (_, p) in model.params_mut().iter_mut() {
        p.data_mut().fill(f32::NAN);
    }
    let mut broken = Trainer::resume(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    broken.model = model;
    broken.config.epochs = 2;
    match train(&mut broken, &data, Some(dir.path()), |_, _| Ok(())) {
        Err(Error::Diverged { last_good, .. }) => assert_eq!(last_good, Some(dir.path().join(LAST_CHECKPOINT))),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn log_cadence_larger_than_an_epoch_is_rejected() {
    let (model, data) = setup(4, false);
    let mut t = Trainer::new(
        model,
        TrainConfig {
            log_per_epoch: 5,
            ..quick_config(1)
        },
    )
    .unwrap();
    assert!(matches!(train(&mut t, &data, None, |_, _| Ok(())), Err(Error::Config(_))));
}

const STORY: [&str; 3] = ["Lisa stands on the grass.", "She jumps.", "She walks."];

fn png_bytes(s: &StorySession) -> Vec<Vec<u8>> {
    s.frames.iter().map(|f| f.to_png_bytes().unwrap()).collect()
}

#[test]
fn sampling_is_deterministic_and_seed_sensitive() {
    let (model, _) = setup(4, true);
    let a = sample_story(&model, &STORY, 3).unwrap();
    let b = sample_story(&model, &STORY, 3).unwrap();
    assert_eq!(png_bytes(&a), png_bytes(&b));
    let c = sample_story(&model, &STORY, 4).unwrap();
    let (x, y) = (&a.frames[0].data, &c.frames[0].data);
    let differing = x.iter().zip(y).filter(|(p, q)| (*p - *q).abs() > 1.0 / 255.0).count();
    assert!(differing as f64 >= 0.01 * x.len() as f64, "{differing}");
    assert!(sample_story::<&str>(&model, &[], 0).is_err());
    assert!(sample_story(&model, &["Lisa walks.", ""], 0).is_err());
}

#[test]
fn frames_never_depend_on_later_sentences() {
    let (model, _) = setup(4, true);
    let a = sample_story(&model, &STORY, 8).unwrap();
    let b = sample_story(&model, &["Lisa stands on the grass.", "She jumps.", "Tony climbs."], 8).unwrap();
    assert_eq!(png_bytes(&a)[..2], png_bytes(&b)[..2]);
    assert_eq!(a.latents[..2], b.latents[..2]);
}

#[test]
fn extending_an_empty_session_matches_sampling() {
    let (model, _) = setup(4, true);
    let empty = StorySession::new(&model, 21);
    let one = extend_story(&model, &empty, STORY[0]).unwrap();
    assert!(empty.is_empty());
    let direct = sample_story(&model, &STORY[..1], 21).unwrap();
    assert_eq!(one.latents, direct.latents);
}

#[test]
fn branches_share_their_prefix_and_leave_the_parent_alone() {
    let (model, _) = setup(4, true);
    let parent = sample_story(&model, &STORY[..2], 5).unwrap();
    let before = png_bytes(&parent);
    let left = extend_story(&model, &parent, "She walks.").unwrap();
    let right = extend_story(&model, &parent.branch(2).unwrap(), "Tony climbs.").unwrap();
    assert_eq!(png_bytes(&parent), before);
    assert_eq!(png_bytes(&left)[..2], before[..]);
    assert_eq!(png_bytes(&right)[..2], before[..]);
    assert_ne!(left.latents[2], right.latents[2]);
    let early = parent.branch(1).unwrap();
    assert_eq!(early.memory().iter().count(), 1);
    let regrown = extend_story(&model, &early, STORY[1]).unwrap();
    assert_eq!(png_bytes(&regrown), before);
}

#[test]
fn snapshots_restore_bit_identically() {
    let (model, _) = setup(4, true);
    let s = sample_story(&model, &STORY, 2).unwrap();
    let snap = s.snapshot();
    let json = serde_json::to_string(&snap).unwrap();
    let back = StorySession::restore(&model, &serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(png_bytes(&back), png_bytes(&s));
    assert_eq!(back.memory(), s.memory());
    let next_a = extend_story(&model, &s, "She climbs.").unwrap();
    let next_b = extend_story(&model, &back, "She climbs.").unwrap();
    assert_eq!(next_a.latents, next_b.latents);
}

#[test]
fn batched_sampling_tracks_single_story_sampling() {
    let (model, _) = setup(4, true);
    let texts = vec![
        STORY.to_vec(),
        vec!["Tony and Jhon walk in the desert.", "They jump."],
    ];
    let batched = sample_stories(&model, &texts, &[1, 2], 8).unwrap();
    for (i, text) in texts.iter().enumerate() {
        let single = sample_story(&model, text, [1, 2][i]).unwrap();
        assert_eq!(single.len(), batched[i].len());
        for (a, b) in single.latents.iter().zip(&batched[i].latents) {
            let diff = a.zip_map(b, |x, y| (x - y).abs()).max_abs();
            assert!(diff < 1e-3, "{diff}");
        }
    }
}

#[test]
fn frames_past_the_trained_length_reuse_the_last_slot() {
    let (model, _) = setup(4, true);
    let long: Vec<String> = (0..6).map(|i| format!("Lisa walks {i}.")).collect();
    let s = sample_story(&model, &long, 1).unwrap();
    assert_eq!(s.len(), 6);
    assert!(s.latents.iter().all(|z| z.all_finite()));
}

#[test]
fn perfect_noise_estimates_recover_clean_latents() {
    let (model, data) = setup(2, true);
    let z0 = &data[0].latents[1];
    let eps = Tensor::randn(z0.shape(), &mut ChaCha8Rng::seed_from_u64(3));
    for t in [1, 7, model.schedule.steps] {
        let zt = q_sample(z0, t, &eps, &model.schedule).unwrap();
        let back = estimate_clean(&zt, t, &eps, &model.schedule).unwrap();
        let err = back.zip_map(z0, |a, b| (a - b).abs()).max_abs();
        assert!(err < 1e-4, "t={t}: {err}");
    }
}

#[test]
fn generated_memory_mode_trains() {
    let (model, data) = setup(8, true);
    let mut t = Trainer::new(
        model,
        TrainConfig {
            memory_mode: MemoryMode::Generated,
            ..quick_config(1)
        },
    )
    .unwrap();
    let s = train(&mut t, &data, None, |_, _| Ok(())).unwrap();
    assert!(s[0].mean_loss.is_finite());
}

#[test]
fn training_checkpoints_load_as_models() {
    let (model, data) = setup(8, true);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(model, quick_config(1)).unwrap();
    train(&mut t, &data, Some(dir.path()), |_, _| Ok(())).unwrap();
    let loaded = StoryModel::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(loaded.params().iter().count(), t.model.params().iter().count());
    let path = dir.path().join("model.ckpt");
    let id = t.export_model().save(&path).unwrap();
    assert_eq!(StoryModel::load(&path).unwrap().checkpoint_id(), id);
    assert!(Trainer::resume(&path).is_err());
}
