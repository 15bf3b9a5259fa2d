//! Document data model: tokens with boxes on a single page, optional raster,
//! and task annotations.

mod dataset;
mod grid;
pub mod image;
mod render;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
pub use dataset::{document_line, load_dataset, read_document_line, save_dataset, DatasetReader};
pub use grid::{image_anchor_tokens, quantize_center, quantize_centers, GRID_H, GRID_W};
pub use image::GrayImage;
pub use render::{render_plaintext, Rendered};

/// Canonical raster width the model expects.
pub const CANONICAL_W: usize = 512;
/// Canonical raster height the model expects.
pub const CANONICAL_H: usize = 384;

/// Axis-aligned box in page pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x0: self.x0 * sx,
            y0: self.y0 * sy,
            x1: self.x1 * sx,
            y1: self.y1 * sy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    #[default]
    Word,
    ImageAnchor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub text: String,
    pub bbox: BBox,
    pub kind: TokenKind,
}

impl Token {
    pub fn word(text: impl Into<String>, bbox: BBox) -> Self {
        Token {
            text: text.into(),
            bbox,
            kind: TokenKind::Word,
        }
    }

    pub fn anchor(bbox: BBox) -> Self {
        Token {
            text: String::new(),
            bbox,
            kind: TokenKind::ImageAnchor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Page {
    pub width: u32,
    pub height: u32,
    pub image: Option<GrayImage>,
}

impl Page {
    pub fn blank(width: u32, height: u32) -> Self {
        Page {
            width,
            height,
            image: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    Kie,
    Classify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: TaskKind,
    pub prompt: String,
    #[serde(default)]
    pub answers: Vec<String>,
}

impl TaskInstance {
    pub fn new(task: TaskKind, prompt: impl Into<String>, answers: &[&str]) -> Self {
        TaskInstance {
            task,
            prompt: prompt.into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub page: Page,
    /// Reading order.
    pub tokens: Vec<Token>,
    pub annotations: Vec<TaskInstance>,
}

impl Document {
    /// Checks the token and page invariants.
    pub fn validate(&self) -> Result<()> {
        if self.page.width == 0 || self.page.height == 0 {
            return Err(TiltError::Validation(format!(
                "document `{}`: empty page {}x{}",
                self.id, self.page.width, self.page.height
            )));
        }
        if let Some(img) = &self.page.image {
            if img.width() != self.page.width as usize || img.height() != self.page.height as usize {
                return Err(TiltError::Validation(format!(
                    "document `{}`: raster is {}x{}, page declares {}x{}",
                    self.id,
                    img.width(),
                    img.height(),
                    self.page.width,
                    self.page.height
                )));
            }
        }
        let (w, h) = (self.page.width as f64, self.page.height as f64);
        for (i, t) in self.tokens.iter().enumerate() {
            if !t.bbox.is_valid() {
                return Err(TiltError::Validation(format!(
                    "document `{}`: token {i} `{}` has inverted bbox {:?}",
                    self.id, t.text, t.bbox
                )));
            }
            if t.bbox.x0 < 0.0 || t.bbox.y0 < 0.0 || t.bbox.x1 > w || t.bbox.y1 > h {
                return Err(TiltError::Validation(format!(
                    "document `{}`: token {i} `{}` lies outside the page",
                    self.id, t.text
                )));
            }
            match t.kind {
                TokenKind::Word if t.text.is_empty() => {
                    return Err(TiltError::Validation(format!(
                        "document `{}`: word token {i} has empty text",
                        self.id
                    )))
                }
                TokenKind::ImageAnchor if !t.text.is_empty() => {
                    return Err(TiltError::Validation(format!(
                        "document `{}`: image anchor token {i} carries text",
                        self.id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn word_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.kind == TokenKind::Word).count()
    }

    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .filter(|t| t.kind == TokenKind::Word)
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rescales page, raster and boxes to `width × height`.
    pub fn resized(&self, width: usize, height: usize) -> Document {
        let sx = width as f64 / self.page.width as f64;
        let sy = height as f64 / self.page.height as f64;
        Document {
            id: self.id.clone(),
            page: Page {
                width: width as u32,
                height: height as u32,
                image: self.page.image.as_ref().map(|img| img.resize(width, height)),
            },
            tokens: self
                .tokens
                .iter()
                .map(|t| Token {
                    bbox: t.bbox.scaled(sx, sy).clamp_to(width as f64, height as f64),
                    ..t.clone()
                })
                .collect(),
            annotations: self.annotations.clone(),
        }
    }
}
