//! Procedural styled-shape corpus with labels, features and oracle
//! classifiers.

mod features;
mod oracle;
mod render;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{extract_features, FEATURE_LEN};
pub use oracle::{train_oracles, Oracle, Oracles};
pub use render::render;

use crate::error::{Error, Result};
use crate::raster::Image;

pub const CANVAS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Stripes,
    Dots,
    Gradient,
    NoiseGrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: usize,
    /// Words naming the style, e.g. "watercolor painting".
    pub descriptor: String,
    /// Background, foreground and accent colors.
    pub palette: [[f64; 3]; 3],
    pub texture: Texture,
    pub stroke_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Triangle,
    Square,
    LetterGlyph,
    Cross,
    Ring,
}

impl Shape {
    /// The word used for this shape in prompts.
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Square => "square",
            Shape::LetterGlyph => "letter",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentSpec {
    pub content_id: usize,
    pub shape: Shape,
    pub scale: f64,
}

impl ContentSpec {
    /// Content text used in prompts, e.g. "A circle".
    pub fn text(&self) -> String {
        format!("A {}", self.shape.word())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image: Image,
    pub style_id: usize,
    pub content_id: usize,
    pub seed: u64,
}

/// One row of the on-disk dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub style_id: usize,
    pub content_id: usize,
    pub seed: u64,
    pub file: String,
}

const fn rgb(r: u8, g: u8, b: u8) -> [f64; 3] {
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

const NAVY: [f64; 3] = rgb(26, 38, 102);
const ORANGE: [f64; 3] = rgb(242, 140, 26);
const CREAM: [f64; 3] = rgb(242, 235, 204);
const TEAL: [f64; 3] = rgb(26, 153, 153);
const CRIMSON: [f64; 3] = rgb(204, 26, 51);
const INK: [f64; 3] = rgb(20, 20, 20);
const YELLOW: [f64; 3] = rgb(242, 217, 51);
const LILAC: [f64; 3] = rgb(179, 140, 230);
const FOREST: [f64; 3] = rgb(38, 115, 51);
const PINK: [f64; 3] = rgb(242, 153, 191);
const WHITE: [f64; 3] = rgb(255, 255, 255);
const SKY: [f64; 3] = rgb(102, 179, 242);

/// Styles × contents with one style and one content reserved as held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub styles: Vec<StyleSpec>,
    pub contents: Vec<ContentSpec>,
    /// Excluded from generative pretraining; still used for oracle training.
    pub held_out_style: usize,
    /// Excluded from generative pretraining; still used for oracle training.
    pub held_out_content: usize,
}

impl Default for Catalog {
    fn default() -> Self {
        use Texture::*;
        let style = |id, desc: &str, palette, texture, stroke_width| StyleSpec {
            style_id: id,
            descriptor: desc.to_string(),
            palette,
            texture,
            stroke_width,
        };
        let styles = vec![
            style(0, "flat cartoon", [CREAM, NAVY, ORANGE], Flat, 1),
            style(1, "watercolor painting", [SKY, CRIMSON, WHITE], Gradient, 1),
            style(2, "oil painting", [FOREST, YELLOW, INK], NoiseGrain, 1),
            style(3, "line drawing", [WHITE, INK, SKY], Stripes, 1),
            style(4, "crayon drawing", [YELLOW, LILAC, CRIMSON], Dots, 2),
            style(5, "sticker art", [PINK, TEAL, WHITE], Flat, 1),
            style(6, "glowing neon", [INK, PINK, TEAL], Stripes, 2),
            // Held out: every color appears in some other style, but never in
            // this combination or with this texture layout.
            style(7, "melting golden", [NAVY, YELLOW, TEAL], Dots, 1),
        ];
        let content = |id, shape, scale| ContentSpec {
            content_id: id,
            shape,
            scale,
        };
        let contents = vec![
            content(0, Shape::Circle, 0.7),
            content(1, Shape::Triangle, 0.85),
            content(2, Shape::Square, 0.65),
            content(3, Shape::LetterGlyph, 0.75),
            content(4, Shape::Cross, 0.8),
            content(5, Shape::Ring, 0.8),
        ];
        Self {
            styles,
            contents,
            held_out_style: 7,
            held_out_content: 5,
        }
    }
}

impl Catalog {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.styles.iter().enumerate() {
            if s.style_id != i {
                return Err(Error::InvalidArgument(format!(
                    "style ids must be dense: index {i} has id {}",
                    s.style_id
                )));
            }
            if s.stroke_width == 0 {
                return Err(Error::InvalidArgument(format!("style {i}: stroke width 0")));
            }
            for a in 0..3 {
                for b in a + 1..3 {
                    let d = crate::linalg::l2_norm(
                        &(0..3)
                            .map(|c| s.palette[a][c] - s.palette[b][c])
                            .collect::<Vec<_>>(),
                    );
                    if d < 0.2 {
                        return Err(Error::InvalidArgument(format!(
                            "style {i}: palette colors {a} and {b} closer than 0.2"
                        )));
                    }
                }
            }
        }
        for (i, c) in self.contents.iter().enumerate() {
            if c.content_id != i {
                return Err(Error::InvalidArgument(format!(
                    "content ids must be dense: index {i} has id {}",
                    c.content_id
                )));
            }
            if !(c.scale > 0.3 && c.scale < 0.9) {
                return Err(Error::InvalidArgument(format!(
                    "content {i}: scale {} outside (0.3, 0.9)",
                    c.scale
                )));
            }
        }
        if self.held_out_style >= self.styles.len() || self.held_out_content >= self.contents.len()
        {
            return Err(Error::InvalidArgument("held-out ids out of range".into()));
        }
        Ok(())
    }

    pub fn style(&self, id: usize) -> &StyleSpec {
        &self.styles[id]
    }

    pub fn content(&self, id: usize) -> &ContentSpec {
        &self.contents[id]
    }

    pub fn example(&self, style_id: usize, content_id: usize, seed: u64) -> LabeledExample {
        LabeledExample {
            image: render(self.style(style_id), self.content(content_id), seed),
            style_id,
            content_id,
            seed,
        }
    }

    /// Every (style, content) pair rendered with seeds `0..seeds_per_pair`.
    pub fn generate(&self, seeds_per_pair: u64) -> Vec<LabeledExample> {
        let mut out =
            Vec::with_capacity(self.styles.len() * self.contents.len() * seeds_per_pair as usize);
        for s in 0..self.styles.len() {
            for c in 0..self.contents.len() {
                for seed in 0..seeds_per_pair {
                    out.push(self.example(s, c, seed));
                }
            }
        }
        out
    }

    pub fn is_pretraining_pair(&self, style_id: usize, content_id: usize) -> bool {
        style_id != self.held_out_style && content_id != self.held_out_content
    }
}

/// Deterministic 80/20 split: every fifth seed of each (style, content) pair
/// is held out.
pub fn split_train_test(
    examples: &[LabeledExample],
) -> (Vec<&LabeledExample>, Vec<&LabeledExample>) {
    examples.iter().partition(|e| e.seed % 5 != 4)
}

/// Writes PNGs under `root/images/` and returns the manifest (also written
/// to `root/manifest.json`).
pub fn write_dataset(root: &Path, examples: &[LabeledExample]) -> Result<Vec<ManifestEntry>> {
    let images = root.join("images");
    std::fs::create_dir_all(&images)?;
    let mut manifest = Vec::with_capacity(examples.len());
    for e in examples {
        let file = format!("images/s{}_c{}_{:04}.png", e.style_id, e.content_id, e.seed);
        e.image.save_png(&root.join(&file))?;
        manifest.push(ManifestEntry {
            style_id: e.style_id,
            content_id: e.content_id,
            seed: e.seed,
            file,
        });
    }
    std::fs::write(
        root.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_dataset(root: &Path) -> Result<Vec<LabeledExample>> {
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&std::fs::read(root.join("manifest.json"))?)?;
    manifest
        .into_iter()
        .map(|m| {
            Ok(LabeledExample {
                image: Image::load_png(&root.join(&m.file))?,
                style_id: m.style_id,
                content_id: m.content_id,
                seed: m.seed,
            })
        })
        .collect()
}
