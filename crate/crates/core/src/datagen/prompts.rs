//! Templated edit prompts over a fixed word vocabulary.
//!
//! Each template encodes a pose delta. Template 0 is the neutral prompt
//! ("this item without any change") and maps to the identity delta.

use serde::{Deserialize, Serialize};

use super::scene::{Pose, Rgb, ShapeKind};
use crate::error::{Error, Result};

/// Vocabulary; a token id is the word's index.
pub const VOCAB: &[&str] = &[
    "<pad>",
    "this",
    "item",
    "without",
    "any",
    "change",
    "rotate",
    "turn",
    "the",
    "left",
    "right",
    "red",
    "orange",
    "yellow",
    "green",
    "cyan",
    "blue",
    "purple",
    "pink",
    "white",
    "gray",
    "black",
    "brown",
    "rectangle",
    "ellipse",
    "triangle",
];

pub const NEUTRAL_TEMPLATE: usize = 0;
pub const ROTATION_STEP_DEG: f64 = 20.0;
pub const TURN_SHEAR: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptTemplate {
    Neutral,
    RotateLeft,
    RotateRight,
    TurnLeft,
    TurnRight,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 5] = [
        PromptTemplate::Neutral,
        PromptTemplate::RotateLeft,
        PromptTemplate::RotateRight,
        PromptTemplate::TurnLeft,
        PromptTemplate::TurnRight,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        PromptTemplate::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::config("prompt-id", format!("no template {id} (0..=4)")))
    }

    pub fn delta(self) -> Pose {
        match self {
            PromptTemplate::Neutral => Pose::IDENTITY,
            PromptTemplate::RotateLeft => Pose::new(0.0, -ROTATION_STEP_DEG),
            PromptTemplate::RotateRight => Pose::new(0.0, ROTATION_STEP_DEG),
            PromptTemplate::TurnLeft => Pose::new(-TURN_SHEAR, 0.0),
            PromptTemplate::TurnRight => Pose::new(TURN_SHEAR, 0.0),
        }
    }

    /// Prompt text; non-neutral templates name the subject's color and shape.
    pub fn render(self, color: &str, shape: ShapeKind) -> String {
        let subject = format!("the {color} {}", shape.name());
        match self {
            PromptTemplate::Neutral => "this item without any change".to_string(),
            PromptTemplate::RotateLeft => format!("rotate {subject} left"),
            PromptTemplate::RotateRight => format!("rotate {subject} right"),
            PromptTemplate::TurnLeft => format!("turn {subject} left"),
            PromptTemplate::TurnRight => format!("turn {subject} right"),
        }
    }
}

pub fn tokenize(prompt: &str) -> Result<Vec<usize>> {
    prompt
        .split_whitespace()
        .map(|word| {
            VOCAB
                .iter()
                .position(|v| *v == word)
                .ok_or_else(|| Error::format("prompt", format!("word {word:?} not in vocabulary")))
        })
        .collect()
}

/// Coarse color name of an 8-bit color.
pub fn color_name(color: Rgb) -> &'static str {
    let [r, g, b] = color.to_f64();
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    if chroma < 0.15 {
        return match color.luma() {
            l if l > 0.75 => "white",
            l if l < 0.25 => "black",
            _ => "gray",
        };
    }
    let hue = if max == r {
        60.0 * (((g - b) / chroma).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / chroma + 2.0)
    } else {
        60.0 * ((r - g) / chroma + 4.0)
    };
    match hue {
        h if !(15.0..345.0).contains(&h) => {
            if max < 0.5 {
                "brown"
            } else {
                "red"
            }
        }
        h if h < 40.0 => {
            if max < 0.6 {
                "brown"
            } else {
                "orange"
            }
        }
        h if h < 70.0 => "yellow",
        h if h < 160.0 => "green",
        h if h < 200.0 => "cyan",
        h if h < 260.0 => "blue",
        h if h < 300.0 => "purple",
        _ => "pink",
    }
}

/// The neutral prompt's token ids.
pub fn neutral_tokens() -> Vec<usize> {
    tokenize(&PromptTemplate::Neutral.render("", ShapeKind::Rectangle)).expect("neutral prompt is in vocabulary")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_and_color_tokenizes() {
        for t in PromptTemplate::ALL {
            for shape in ShapeKind::ALL {
                for r in (0..=255).step_by(51) {
                    for g in (0..=255).step_by(51) {
                        for b in (0..=255).step_by(51) {
                            let name = color_name(Rgb([r as u8, g as u8, b as u8]));
                            let ids = tokenize(&t.render(name, shape)).unwrap();
                            assert!(ids.len() <= 8);
                            assert!(ids.iter().all(|&i| i < 64));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn neutral_template_is_id_zero_with_identity_delta() {
        assert_eq!(PromptTemplate::from_id(0).unwrap(), PromptTemplate::Neutral);
        assert_eq!(PromptTemplate::Neutral.delta(), Pose::IDENTITY);
        assert_eq!(neutral_tokens(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn vocabulary_fits_the_text_table() {
        assert!(VOCAB.len() <= 64);
    }
}
