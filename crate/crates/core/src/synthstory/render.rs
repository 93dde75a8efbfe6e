//! Sprite/texture atlas and the scene rasteriser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, Background, Character, SceneState};
use crate::error::Result;
use crate::image::Image;

pub const SPRITE_W: usize = 10;
pub const SPRITE_H: usize = 12;

pub const SKIN: [f32; 3] = [0.96, 0.80, 0.62];
pub const DARK: [f32; 3] = [0.12, 0.12, 0.16];
pub const COIN: [f32; 3] = [1.0, 0.84, 0.10];
pub const LADDER: [f32; 3] = [0.55, 0.35, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpriteShape {
    Block,
    Dress,
    Wide,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub character: Character,
    pub shape: SpriteShape,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub background: Background,
    pub texture_seed: u64,
    pub base_color: [f32; 3],
}

impl BackgroundSpec {
    /// Low-amplitude sinusoidal texture, a pure function of the seed.
    pub fn texture(&self, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let period: f32 = rng.random_range(8.0..16.0);
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (kx, ky) = (angle.cos(), angle.sin());
        let mut img = Image::filled(size, size, self.base_color);
        for y in 0..size {
            for x in 0..size {
                let s = (std::f32::consts::TAU * (kx * x as f32 + ky * y as f32) / period + phase).sin();
                let rgb = self.base_color.map(|c| (c + 0.05 * s).clamp(0.0, 1.0));
                img.set(y, x, rgb);
            }
        }
        img
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub characters: Vec<CharacterSpec>,
    pub backgrounds: Vec<BackgroundSpec>,
}

impl Default for Atlas {
    fn default() -> Self {
        let characters = vec![
            CharacterSpec {
                character: Character::Tony,
                shape: SpriteShape::Block,
                color: [0.90, 0.12, 0.10],
            },
            CharacterSpec {
                character: Character::Lisa,
                shape: SpriteShape::Dress,
                color: [0.95, 0.35, 0.80],
            },
            CharacterSpec {
                character: Character::Jhon,
                shape: SpriteShape::Wide,
                color: [0.10, 0.30, 0.95],
            },
        ];
        let colors = [
            [0.35, 0.20, 0.45],
            [0.90, 0.92, 0.96],
            [0.87, 0.78, 0.52],
            [0.45, 0.30, 0.18],
            [0.30, 0.62, 0.25],
            [0.55, 0.55, 0.58],
        ];
        let backgrounds = Background::ALL
            .iter()
            .zip(colors)
            .map(|(&background, base_color)| BackgroundSpec {
                background,
                texture_seed: 1000 + background.index() as u64,
                base_color,
            })
            .collect();
        Self { characters, backgrounds }
    }
}

impl Atlas {
    pub fn character(&self, c: Character) -> &CharacterSpec {
        self.characters
            .iter()
            .find(|s| s.character == c)
            .expect("atlas covers every character")
    }

    pub fn background(&self, b: Background) -> &BackgroundSpec {
        self.backgrounds
            .iter()
            .find(|s| s.background == b)
            .expect("atlas covers every background")
    }
}

/// Sprite pixel classes: 0 transparent, 1 body colour, 2 skin, 3 dark.
pub fn sprite_mask(shape: SpriteShape) -> [[u8; SPRITE_W]; SPRITE_H] {
    let mut m = [[0u8; SPRITE_W]; SPRITE_H];
    for row in m.iter_mut().take(4) {
        for px in row.iter_mut().take(7).skip(3) {
            *px = 2;
        }
    }
    match shape {
        SpriteShape::Block => {
            for row in m.iter_mut().take(10).skip(4) {
                for px in row.iter_mut().take(8).skip(2) {
                    *px = 1;
                }
            }
            for row in m.iter_mut().skip(10) {
                for x in [2, 3, 6, 7] {
                    row[x] = 3;
                }
            }
        }
        SpriteShape::Dress => {
            for (r, row) in m.iter_mut().enumerate().take(11).skip(4) {
                let half = 1 + (r - 4) / 2;
                for px in row.iter_mut().take(5 + half).skip(5 - half) {
                    *px = 1;
                }
            }
            m[11][3] = 3;
            m[11][6] = 3;
        }
        SpriteShape::Wide => {
            for x in 2..8 {
                m[0][x] = 3;
            }
            for row in m.iter_mut().take(9).skip(4) {
                for px in row.iter_mut().take(9).skip(1) {
                    *px = 1;
                }
            }
            for row in m.iter_mut().skip(9) {
                for x in [2, 3, 6, 7] {
                    row[x] = 3;
                }
            }
        }
    }
    m
}

fn put(img: &mut Image, y: i32, x: i32, rgb: [f32; 3]) {
    if y >= 0 && x >= 0 && (y as usize) < img.height && (x as usize) < img.width {
        img.set(y as usize, x as usize, rgb);
    }
}

pub fn render_frame(scene: &SceneState, atlas: &Atlas, size: usize) -> Result<Image> {
    scene.validate(size)?;
    let mut img = atlas.background(scene.background).texture(size);
    for (&c, &(x, y)) in scene.characters.iter().zip(&scene.positions) {
        if scene.action == Action::Climbs {
            for yy in y..size as i32 {
                put(&mut img, yy, x, LADDER);
                put(&mut img, yy, x + SPRITE_W as i32 - 1, LADDER);
                if (yy - y) % 3 == 1 {
                    for xx in x..x + SPRITE_W as i32 {
                        put(&mut img, yy, xx, LADDER);
                    }
                }
            }
        }
        let spec = atlas.character(c);
        let mask = sprite_mask(spec.shape);
        for (dy, row) in mask.iter().enumerate() {
            for (dx, &cls) in row.iter().enumerate() {
                let rgb = match cls {
                    1 => spec.color,
                    2 => SKIN,
                    3 => DARK,
                    _ => continue,
                };
                put(&mut img, y + dy as i32, x + dx as i32, rgb);
            }
        }
        if scene.action == Action::CollectsCoin {
            for dy in 0..3 {
                for dx in 0..3 {
                    put(&mut img, y - 4 + dy, x + 3 + dx, COIN);
                }
            }
        }
    }
    Ok(img)
}
