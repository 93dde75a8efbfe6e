//! On-disk corpus: PNG frames, one JSON line per story, and a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_story, Atlas, FrameLabel, SceneState, StoryConfig, StorySample};
use crate::error::{Error, Result};
use crate::image::Image;

pub const GRAMMAR_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub story: StoryConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 200,
            story: StoryConfig::default(),
        }
    }
}

/// One line of `story.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub id: u64,
    pub seed: u64,
    pub sentences: Vec<String>,
    pub resolved_sentences: Vec<String>,
    pub labels: Vec<FrameLabel>,
    pub scenes: Vec<SceneState>,
    /// Paths relative to the dataset root.
    pub frames: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub count: usize,
    pub first_id: u64,
    pub records: String,
    /// SHA-256 over the JSONL records and every PNG, in story order.
    pub content_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub stories: usize,
    pub avg_references_per_story: f64,
    pub num_characters: usize,
    pub num_backgrounds: usize,
    pub background_counts: BTreeMap<String, usize>,
    pub two_character_stories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grammar_version: u32,
    pub seed: u64,
    pub frame_size: usize,
    pub frames_per_story: usize,
    pub characters: Vec<String>,
    pub backgrounds: Vec<String>,
    pub splits: BTreeMap<String, SplitInfo>,
    /// Per split.
    pub stats: BTreeMap<String, DatasetStats>,
    pub atlas: Atlas,
}

/// Per-story seed: a splitmix64 step over the global seed and story id.
pub fn story_seed(global: u64, id: u64) -> u64 {
    let mut z = global ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The story a dataset generated with `seed` holds under `id`.
pub fn story_by_id(seed: u64, id: u64, config: &StoryConfig, atlas: &Atlas) -> Result<StorySample> {
    let s_seed = story_seed(seed, id);
    let mut story = build_story(&mut ChaCha8Rng::seed_from_u64(s_seed), config, atlas)?;
    story.id = id;
    story.seed = s_seed;
    Ok(story)
}

fn write_split(
    root: &Path,
    split: &str,
    ids: std::ops::Range<u64>,
    seed: u64,
    config: &StoryConfig,
    atlas: &Atlas,
) -> Result<(SplitInfo, DatasetStats)> {
    let partial = root.join(format!("{split}.partial"));
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    let result = (|| {
        let mut hasher = Sha256::new();
        let records_path = partial.join("story.jsonl");
        let mut records =
            std::io::BufWriter::new(fs::File::create(&records_path).map_err(|e| Error::io(&records_path, e))?);
        let mut refs = 0usize;
        let mut bg_counts: BTreeMap<String, usize> = config
            .backgrounds
            .iter()
            .map(|b| (b.name().to_string(), 0))
            .collect();
        let mut two = 0usize;
        for id in ids.clone() {
            let story = story_by_id(seed, id, config, atlas)?;
            let dir_name = format!("story_{id}");
            let dir = partial.join(&dir_name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut frames = Vec::new();
            for (m, frame) in story.frames.iter().enumerate() {
                let bytes = frame.to_png_bytes()?;
                let path = dir.join(format!("frame_{m}.png"));
                fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                hasher.update(&bytes);
                frames.push(format!("{split}/{dir_name}/frame_{m}.png"));
            }
            refs += story.reference_count();
            *bg_counts.entry(story.labels[0].background.name().to_string()).or_default() += 1;
            if story.labels[0].characters.len() == 2 {
                two += 1;
            }
            let record = StoryRecord {
                id,
                seed: story.seed,
                sentences: story.sentences,
                resolved_sentences: story.resolved_sentences,
                labels: story.labels,
                scenes: story.scenes,
                frames,
            };
            let line = serde_json::to_string(&record)?;
            hasher.update(line.as_bytes());
            writeln!(records, "{line}").map_err(|e| Error::io(&records_path, e))?;
        }
        records.flush().map_err(|e| Error::io(&records_path, e))?;
        let count = (ids.end - ids.start) as usize;
        let info = SplitInfo {
            count,
            first_id: ids.start,
            records: format!("{split}/story.jsonl"),
            content_sha256: crate::hex(&hasher.finalize()),
        };
        let stats = DatasetStats {
            stories: count,
            avg_references_per_story: if count == 0 { 0.0 } else { refs as f64 / count as f64 },
            num_characters: config.characters.len(),
            num_backgrounds: config.backgrounds.len(),
            background_counts: bg_counts,
            two_character_stories: two,
        };
        Ok((info, stats))
    })();
    match result {
        Ok(v) => {
            let final_dir = root.join(split);
            let publish = (|| {
                if final_dir.exists() {
                    fs::remove_dir_all(&final_dir)?;
                }
                fs::rename(&partial, &final_dir)
            })();
            if let Err(e) = publish {
                let _ = fs::remove_dir_all(&partial);
                return Err(Error::io(&final_dir, e));
            }
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            Err(e)
        }
    }
}

/// Write train/val/test splits under `root` and return the manifest.
///
/// Story ids are assigned consecutively across splits, so splits never
/// share a story. A failing split leaves no directory behind.
pub fn generate_dataset(root: &Path, config: &DatasetConfig, seed: u64) -> Result<DatasetManifest> {
    config.story.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let atlas = Atlas::default();
    let counts = [config.train, config.val, config.test];
    let mut splits = BTreeMap::new();
    let mut stats = BTreeMap::new();
    let mut next = 0u64;
    for (name, count) in SPLITS.iter().zip(counts) {
        let range = next..next + count as u64;
        next += count as u64;
        let (info, st) = write_split(root, name, range, seed, &config.story, &atlas)?;
        splits.insert(name.to_string(), info);
        stats.insert(name.to_string(), st);
    }
    let manifest = DatasetManifest {
        grammar_version: GRAMMAR_VERSION,
        seed,
        frame_size: config.story.frame_size,
        frames_per_story: config.story.frames,
        characters: config.story.characters.iter().map(|c| c.name().to_string()).collect(),
        backgrounds: config.story.backgrounds.iter().map(|b| b.name().to_string()).collect(),
        splits,
        stats,
        atlas,
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_records(root: &Path, split: &str) -> Result<Vec<StoryRecord>> {
    let path: PathBuf = root.join(split).join("story.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Read a split back, decoding every frame.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<StorySample>> {
    load_records(root, split)?
        .into_iter()
        .map(|r| {
            let frames = r
                .frames
                .iter()
                .map(|f| Image::load_png(&root.join(f)))
                .collect::<Result<Vec<_>>>()?;
            Ok(StorySample {
                id: r.id,
                seed: r.seed,
                frames,
                sentences: r.sentences,
                resolved_sentences: r.resolved_sentences,
                labels: r.labels,
                scenes: r.scenes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train: 6,
            val: 2,
            test: 3,
            story: StoryConfig::default(),
        }
    }

    #[test]
    fn counts_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), &small(), 5).unwrap();
        assert_eq!(m.splits["train"].count, 6);
        assert_eq!(m.splits["val"].count, 2);
        assert_eq!(m.splits["test"].count, 3);
        assert_eq!(m.stats["train"].avg_references_per_story, 3.0);
        let train = load_split(dir.path(), "train").unwrap();
        assert_eq!(train.len(), 6);
        let val = load_split(dir.path(), "val").unwrap();
        assert!(train.iter().all(|t| val.iter().all(|v| v.id != t.id)));
        assert_eq!(load_manifest(dir.path()).unwrap(), m);
        assert!(!dir.path().join("train.partial").exists());
    }

    #[test]
    fn same_seed_same_hashes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(a.path(), &small(), 9).unwrap();
        let mb = generate_dataset(b.path(), &small(), 9).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn failed_split_is_cleaned_up() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.story.characters.clear();
        assert!(generate_dataset(dir.path(), &cfg, 1).is_err());
        // A plain file where the split directory should go blocks publishing.
        fs::write(dir.path().join("train"), b"not a directory").unwrap();
        assert!(generate_dataset(dir.path(), &small(), 1).is_err());
        assert!(!dir.path().join("train.partial").exists());
        assert!(dir.path().join("train").is_file());
    }
}
