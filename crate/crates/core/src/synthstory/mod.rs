//! Procedurally generated four-frame stories with pronoun co-references.
//!
//! Every story names its characters and background in the first sentence;
//! the remaining sentences refer to the characters only through pronouns.
//! Scenes are rendered from a fixed sprite/texture atlas so labels are exact.

mod dataset;
mod grammar;
mod render;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, load_manifest, load_split, story_seed, DatasetConfig, DatasetManifest,
    DatasetStats, SplitInfo, StoryRecord, story_by_id, GRAMMAR_VERSION,
};
pub use grammar::{entity_map, inject_coreferences, opening_sentence, plain_sentence, pronoun_sentence};
pub use render::{render_frame, sprite_mask, Atlas, BackgroundSpec, CharacterSpec, SpriteShape, SPRITE_H, SPRITE_W};

use crate::error::{Error, Result};
use crate::image::Image;

pub const FRAMES_PER_STORY: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Character {
    Tony,
    Lisa,
    Jhon,
}

impl Character {
    pub const ALL: [Character; 3] = [Character::Tony, Character::Lisa, Character::Jhon];

    pub fn name(self) -> &'static str {
        match self {
            Character::Tony => "Tony",
            Character::Lisa => "Lisa",
            Character::Jhon => "Jhon",
        }
    }

    pub fn pronoun(self) -> Pronoun {
        match self {
            Character::Lisa => Pronoun::She,
            Character::Tony | Character::Jhon => Pronoun::He,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(name))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pronoun {
    He,
    She,
    They,
}

impl Pronoun {
    pub fn word(self) -> &'static str {
        match self {
            Pronoun::He => "He",
            Pronoun::She => "She",
            Pronoun::They => "They",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        match w.to_ascii_lowercase().as_str() {
            "he" => Some(Pronoun::He),
            "she" => Some(Pronoun::She),
            "they" => Some(Pronoun::They),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Background {
    Planet,
    Snow,
    Sand,
    Dirt,
    Grass,
    Stone,
}

impl Background {
    pub const ALL: [Background; 6] = [
        Background::Planet,
        Background::Snow,
        Background::Sand,
        Background::Dirt,
        Background::Grass,
        Background::Stone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Background::Planet => "Planet",
            Background::Snow => "Snow",
            Background::Sand => "Sand",
            Background::Dirt => "Dirt",
            Background::Grass => "Grass",
            Background::Stone => "Stone",
        }
    }

    /// Lower-case form used inside sentences.
    pub fn word(self) -> String {
        self.name().to_ascii_lowercase()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name().eq_ignore_ascii_case(w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Walks,
    Jumps,
    Climbs,
    CollectsCoin,
    Stands,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Walks,
        Action::Jumps,
        Action::Climbs,
        Action::CollectsCoin,
        Action::Stands,
    ];

    /// Verb phrase agreeing with a singular or plural subject.
    pub fn phrase(self, plural: bool) -> &'static str {
        match (self, plural) {
            (Action::Walks, false) => "walks",
            (Action::Walks, true) => "walk",
            (Action::Jumps, false) => "jumps",
            (Action::Jumps, true) => "jump",
            (Action::Climbs, false) => "climbs",
            (Action::Climbs, true) => "climb",
            (Action::CollectsCoin, false) => "collects a coin",
            (Action::CollectsCoin, true) => "collect a coin",
            (Action::Stands, false) => "stands",
            (Action::Stands, true) => "stand",
        }
    }

    pub fn from_phrase(phrase: &str) -> Option<Self> {
        let p = phrase.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|a| a.phrase(false) == p || a.phrase(true) == p)
    }
}

/// One rendered scene. Positions are sprite top-left corners `(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub characters: Vec<Character>,
    pub background: Background,
    pub positions: Vec<(i32, i32)>,
    pub action: Action,
}

impl SceneState {
    pub fn validate(&self, frame_size: usize) -> Result<()> {
        if self.characters.len() > 2 {
            return Err(Error::InvalidScene(format!(
                "{} characters, at most 2 allowed",
                self.characters.len()
            )));
        }
        if self.positions.len() != self.characters.len() {
            return Err(Error::InvalidScene("one position per character required".into()));
        }
        let size = frame_size as i32;
        for (c, &(x, y)) in self.characters.iter().zip(&self.positions) {
            if x < 0 || y < 0 || x + SPRITE_W as i32 > size || y + SPRITE_H as i32 > size {
                return Err(Error::InvalidScene(format!(
                    "{} at ({x}, {y}) leaves the {size}x{size} frame",
                    c.name()
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth annotation of one frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameLabel {
    /// Sorted, deduplicated.
    pub characters: Vec<Character>,
    pub background: Background,
}

impl FrameLabel {
    pub fn character_mask(&self) -> [bool; 3] {
        let mut m = [false; 3];
        for c in &self.characters {
            m[c.index()] = true;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StorySample {
    pub id: u64,
    pub seed: u64,
    pub frames: Vec<Image>,
    /// Sentences with pronoun references (what models are conditioned on).
    pub sentences: Vec<String>,
    /// Same sentences with explicit names.
    pub resolved_sentences: Vec<String>,
    pub labels: Vec<FrameLabel>,
    pub scenes: Vec<SceneState>,
}

impl StorySample {
    /// Number of pronoun references across the story.
    pub fn reference_count(&self) -> usize {
        self.sentences
            .iter()
            .flat_map(|s| s.split_whitespace())
            .filter(|w| Pronoun::from_word(w.trim_end_matches('.')).is_some())
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryConfig {
    pub frame_size: usize,
    pub frames: usize,
    pub characters: Vec<Character>,
    pub backgrounds: Vec<Background>,
    pub actions: Vec<Action>,
    pub two_character_prob: f64,
}

impl Default for StoryConfig {
    fn default() -> Self {
        Self {
            frame_size: 32,
            frames: FRAMES_PER_STORY,
            characters: Character::ALL.to_vec(),
            backgrounds: Background::ALL.to_vec(),
            actions: Action::ALL.to_vec(),
            two_character_prob: 0.5,
        }
    }
}

impl StoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.characters.is_empty() {
            return Err(Error::Config("no characters configured".into()));
        }
        if self.backgrounds.is_empty() {
            return Err(Error::Config("no backgrounds configured".into()));
        }
        if self.actions.is_empty() {
            return Err(Error::Config("no actions configured".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("stories need at least one frame".into()));
        }
        if self.frame_size < 24 {
            return Err(Error::Config(format!(
                "frame size {} too small for two sprites",
                self.frame_size
            )));
        }
        if !(0.0..=1.0).contains(&self.two_character_prob) {
            return Err(Error::Config("two_character_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Sprite positions for a frame: one or two horizontal slots with jitter,
/// vertical placement set by the action.
fn layout<R: Rng + ?Sized>(count: usize, action: Action, size: usize, rng: &mut R) -> Vec<(i32, i32)> {
    let size = size as i32;
    let (w, h) = (SPRITE_W as i32, SPRITE_H as i32);
    let ground = size - h - 1;
    let y = match action {
        Action::Jumps => ground - 8,
        Action::Climbs => ground - 4,
        _ => ground,
    };
    let slots: Vec<i32> = match count {
        1 => vec![(size - w) / 2],
        _ => vec![size / 2 - w - 3, size / 2 + 3],
    };
    let spread = if count == 1 { 3 } else { 2 };
    slots
        .into_iter()
        .map(|x| {
            let j = rng.random_range(-spread..=spread);
            ((x + j).clamp(0, size - w), y)
        })
        .collect()
}

/// Generate one story. Deterministic in the state of `rng`.
pub fn build_story<R: Rng + ?Sized>(rng: &mut R, config: &StoryConfig, atlas: &Atlas) -> Result<StorySample> {
    config.validate()?;
    let want_two = config.characters.len() >= 2 && rng.random_bool(config.two_character_prob);
    let mut cast: Vec<Character> = if want_two {
        config.characters.choose_multiple(rng, 2).copied().collect()
    } else {
        vec![*config.characters.choose(rng).unwrap()]
    };
    cast.sort();
    let background = *config.backgrounds.choose(rng).unwrap();

    let mut scenes = Vec::with_capacity(config.frames);
    for _ in 0..config.frames {
        let action = *config.actions.choose(rng).unwrap();
        let positions = layout(cast.len(), action, config.frame_size, rng);
        scenes.push(SceneState {
            characters: cast.clone(),
            background,
            positions,
            action,
        });
    }

    let resolved: Vec<String> = scenes
        .iter()
        .enumerate()
        .map(|(m, s)| {
            if m == 0 {
                opening_sentence(&s.characters, s.action, background)
            } else {
                plain_sentence(&s.characters, s.action)
            }
        })
        .collect();
    let sentences = inject_coreferences(&resolved, &entity_map(&config.characters))?;
    let frames = scenes
        .iter()
        .map(|s| render_frame(s, atlas, config.frame_size))
        .collect::<Result<Vec<_>>>()?;
    let labels = scenes
        .iter()
        .map(|s| FrameLabel {
            characters: s.characters.clone(),
            background: s.background,
        })
        .collect();
    Ok(StorySample {
        id: 0,
        seed: 0,
        frames,
        sentences,
        resolved_sentences: resolved,
        labels,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn pronoun_map_is_fixed() {
        assert_eq!(Character::Lisa.pronoun(), Pronoun::She);
        assert_eq!(Character::Tony.pronoun(), Pronoun::He);
        assert_eq!(Character::Jhon.pronoun(), Pronoun::He);
    }

    #[test]
    fn every_story_has_four_sentences_and_three_references() {
        let atlas = Atlas::default();
        let cfg = StoryConfig::default();
        for seed in 0..200 {
            let s = build_story(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, &atlas).unwrap();
            assert_eq!(s.sentences.len(), 4);
            assert_eq!(s.reference_count(), 3, "{:?}", s.sentences);
        }
    }

    #[test]
    fn same_seed_same_story() {
        let atlas = Atlas::default();
        let cfg = StoryConfig::default();
        let a = build_story(&mut ChaCha8Rng::seed_from_u64(11), &cfg, &atlas).unwrap();
        let b = build_story(&mut ChaCha8Rng::seed_from_u64(11), &cfg, &atlas).unwrap();
        assert_eq!(a, b);
        let pa: Vec<u8> = a.frames.iter().flat_map(|f| f.to_png_bytes().unwrap()).collect();
        let pb: Vec<u8> = b.frames.iter().flat_map(|f| f.to_png_bytes().unwrap()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn later_sentences_never_name_characters() {
        let atlas = Atlas::default();
        let cfg = StoryConfig::default();
        for seed in 0..300 {
            let s = build_story(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, &atlas).unwrap();
            for sentence in &s.sentences[1..] {
                for w in sentence.split_whitespace() {
                    assert!(Character::from_name(w.trim_end_matches('.')).is_none(), "{sentence}");
                }
            }
            for c in &s.labels[0].characters {
                assert!(s.sentences[0].contains(c.name()));
            }
            assert!(s.sentences[0].contains(&s.labels[0].background.word()));
        }
    }

    #[test]
    fn empty_lists_are_config_errors() {
        let atlas = Atlas::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = StoryConfig {
            characters: vec![],
            ..Default::default()
        };
        assert!(matches!(build_story(&mut rng, &cfg, &atlas), Err(Error::Config(_))));
        let cfg = StoryConfig {
            backgrounds: vec![],
            ..Default::default()
        };
        assert!(matches!(build_story(&mut rng, &cfg, &atlas), Err(Error::Config(_))));
    }

    #[test]
    fn scene_bounds_are_validated() {
        let scene = SceneState {
            characters: vec![Character::Tony],
            background: Background::Snow,
            positions: vec![(30, 0)],
            action: Action::Walks,
        };
        assert!(matches!(scene.validate(32), Err(Error::InvalidScene(_))));
    }
}
