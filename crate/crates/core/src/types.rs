//! Shared domain types used across the pipeline.

use serde::{Deserialize, Serialize};

use crate::geometry::Polygon;

/// The 36 recognizable symbols: uppercase letters then digits. Class indices
/// everywhere in the crate are positions in this array; inputs are
/// case-folded before lookup.
pub const CHARSET: [char; 36] = [
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q',
    'R', 'S', 'T', 'U', 'V', 'W', 'X', 'Y', 'Z', '0', '1', '2', '3', '4', '5', '6', '7',
    '8', '9',
];

/// Class index of a character after case-folding, if it is in the charset.
pub fn char_class(c: char) -> Option<usize> {
    let c = c.to_ascii_uppercase();
    match c {
        'A'..='Z' => Some(c as usize - 'A' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        _ => None,
    }
}

/// Inverse of [`char_class`].
pub fn class_char(class: usize) -> Option<char> {
    CHARSET.get(class).copied()
}

/// Single-channel 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, data: vec![0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, data: vec![value; width * height] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        if data.len() != width * height {
            return None;
        }
        Some(GrayImage { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }
}

/// One detected or ground-truth word: region polygon, transcription, confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub polygon: Polygon,
    pub text: String,
    pub confidence: f64,
}

impl TextInstance {
    pub fn new(polygon: Polygon, text: impl Into<String>, confidence: f64) -> Self {
        TextInstance { polygon, text: text.into(), confidence }
    }
}

/// One image in a traversal together with its text instances.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: String,
    pub image: GrayImage,
    pub instances: Vec<TextInstance>,
}
