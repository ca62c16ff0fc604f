//! Deterministic synthetic signage generator.
//!
//! Scenes are grayscale canvases with dot-matrix words placed at arbitrary
//! anchors, optionally rotated, partially occluded by opaque rectangles,
//! brightened or dimmed by a global illumination gain, and finished with
//! Gaussian pixel noise. Every rendered word carries its exact bounding
//! quadrilateral and transcription, so detector/recognizer metrics can be
//! computed against perfect truth. Rendering is a pure function of the
//! [`SceneSpec`] (including its seed), which is what makes traversal
//! generation reproducible byte-for-byte.
//!
//! [`generate_traversal`] emulates a map/query benchmark: the map pass
//! renders each place once, the query pass re-renders the same words under
//! jittered viewpoint and photometry (or swaps in distractor words for
//! dropped places), and records the ground-truth correspondence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{clip_polygon, Polygon};
use crate::types::{char_class, Frame, GrayImage, TextInstance, CHARSET};

/// Longest renderable word, matching the recognizer's output capacity.
pub const MAX_WORD_LEN: usize = 25;

/// Background, ink, and occluder gray levels before illumination/noise.
const BG: u8 = 64;
const INK: u8 = 200;
const OCCLUDER: u8 = 140;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("canvas has zero area")]
    ZeroAreaCanvas,
    #[error("word {0:?} is empty or longer than {MAX_WORD_LEN} characters")]
    BadWordLength(String),
    #[error("character {0:?} is outside the A-Z 0-9 charset")]
    OutsideCharset(char),
    #[error("occlusion fraction {0} must lie in [0, 1)")]
    BadOcclusion(f64),
    #[error("config: {0}")]
    Config(String),
}

/// Placement of one word on the canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct WordSpec {
    pub text: String,
    /// Top-left corner of the unrotated word box, pixels.
    pub anchor: [f64; 2],
    /// Glyph pixel height; the 5×7 font cell is scaled so that seven font
    /// rows span this many pixels (rounded to an integer factor).
    pub scale: f64,
    /// Rotation about the word-box center, radians.
    pub rotation: f64,
    /// Fraction of the word box hidden behind an opaque rectangle.
    pub occlusion_fraction: f64,
}

/// Complete recipe for one frame; rendering is a pure function of this.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub canvas: (usize, usize),
    pub words: Vec<WordSpec>,
    pub illumination_gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return Err(SynthError::ZeroAreaCanvas);
        }
        if !(self.illumination_gain > 0.0) || self.noise_sigma < 0.0 {
            return Err(SynthError::Config(format!(
                "illumination_gain {} must be > 0 and noise_sigma {} >= 0",
                self.illumination_gain, self.noise_sigma
            )));
        }
        for w in &self.words {
            if w.text.is_empty() || w.text.chars().count() > MAX_WORD_LEN {
                return Err(SynthError::BadWordLength(w.text.clone()));
            }
            if let Some(bad) = w.text.chars().find(|c| char_class(*c).is_none()) {
                return Err(SynthError::OutsideCharset(bad));
            }
            if !(0.0..1.0).contains(&w.occlusion_fraction) {
                return Err(SynthError::BadOcclusion(w.occlusion_fraction));
            }
            if !(w.scale > 0.0) {
                return Err(SynthError::Config(format!("scale {} must be > 0", w.scale)));
            }
        }
        Ok(())
    }
}

/// Map and query traversals over the same places, with ground truth.
#[derive(Clone, Debug)]
pub struct TraversalPair {
    pub map_frames: Vec<Frame>,
    pub query_frames: Vec<Frame>,
    /// Ground-truth map index per query; `None` marks a distractor place.
    pub correspondence: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraversalConfig {
    pub n_places: usize,
    pub words_per_place: usize,
    /// 0 reproduces map frames pixel-for-pixel; 1 is the standard jitter
    /// magnitude for viewpoint, illumination, occlusion, and noise.
    pub query_perturbation: f64,
    /// Fraction of queries replaced by distractor places with no
    /// correspondence (rounded to a whole count).
    pub drop_rate: f64,
    pub canvas: (usize, usize),
}

impl Default for TraversalConfig {
    fn default() -> Self {
        TraversalConfig {
            n_places: 16,
            words_per_place: 2,
            query_perturbation: 0.3,
            drop_rate: 0.0,
            canvas: (128, 128),
        }
    }
}

// ---- font -----------------------------------------------------------------

/// 5×7 dot-matrix font over [`CHARSET`], one row byte per font row, bit 4 =
/// leftmost column. '0' carries a slash so it never collides with 'O'.
#[rustfmt::skip]
const FONT: [[u8; 7]; 36] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // C
    [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C], // D
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10], // F
    [0x0E, 0x11, 0x10, 0x13, 0x11, 0x11, 0x0F], // G
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // I
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C], // J
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11], // M
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11], // N
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // O
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10], // P
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D], // Q
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // S
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // U
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // V
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A], // W
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04], // Y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0 (slashed)
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x1C], // 9
];

/// Binary glyph bitmap, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphBitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl GlyphBitmap {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn ink_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

fn scale_factor(scale_px: f64) -> usize {
    ((scale_px / 7.0).round() as isize).max(1) as usize
}

/// Rasterize one charset character at roughly `scale_px` pixels of height.
/// The font cell is 5×7; the integer magnification is `round(scale_px / 7)`,
/// so scale 7 returns the raw 5×7 pattern.
pub fn glyph_raster(c: char, scale_px: usize) -> Result<GlyphBitmap, SynthError> {
    let class = char_class(c).ok_or(SynthError::OutsideCharset(c))?;
    let f = scale_factor(scale_px as f64);
    let (width, height) = (5 * f, 7 * f);
    let mut bits = vec![false; width * height];
    for y in 0..height {
        let row = FONT[class][y / f];
        for x in 0..width {
            bits[y * width + x] = row & (0x10 >> (x / f)) != 0;
        }
    }
    Ok(GlyphBitmap { width, height, bits })
}

/// Unrotated pixel size of a word box: glyph cells plus one-cell-column
/// spacing between glyphs.
pub fn word_box_size(n_chars: usize, scale_px: f64) -> (f64, f64) {
    let f = scale_factor(scale_px) as f64;
    (f * (6.0 * n_chars as f64 - 1.0), 7.0 * f)
}

// ---- rendering ------------------------------------------------------------

struct PlacedWord {
    corners: [[f64; 2]; 4], // exact rotated quad, canvas pixels
    center: [f64; 2],
    cos: f64,
    sin: f64,
    width: f64,
    height: f64,
    factor: usize,
    classes: Vec<usize>,
}

fn place_word(w: &WordSpec) -> PlacedWord {
    let n = w.text.chars().count();
    let (bw, bh) = word_box_size(n, w.scale);
    let center = [w.anchor[0] + bw / 2.0, w.anchor[1] + bh / 2.0];
    let (sin, cos) = w.rotation.sin_cos();
    let rot = |p: [f64; 2]| -> [f64; 2] {
        let dx = p[0] - center[0];
        let dy = p[1] - center[1];
        [center[0] + cos * dx - sin * dy, center[1] + sin * dx + cos * dy]
    };
    let (ax, ay) = (w.anchor[0], w.anchor[1]);
    PlacedWord {
        corners: [
            rot([ax, ay]),
            rot([ax + bw, ay]),
            rot([ax + bw, ay + bh]),
            rot([ax, ay + bh]),
        ],
        center,
        cos,
        sin,
        width: bw,
        height: bh,
        factor: scale_factor(w.scale),
        classes: w.text.chars().map(|c| char_class(c).unwrap()).collect(),
    }
}

impl PlacedWord {
    /// Font bit hit by a canvas position, if any (inverse-rotates into the
    /// word box, then indexes glyph cells of width 6f with 5f of ink).
    fn ink_at(&self, px: f64, py: f64, anchor: [f64; 2]) -> bool {
        let dx = px - self.center[0];
        let dy = py - self.center[1];
        let lx = self.cos * dx + self.sin * dy + self.center[0] - anchor[0];
        let ly = -self.sin * dx + self.cos * dy + self.center[1] - anchor[1];
        if lx < 0.0 || ly < 0.0 || lx >= self.width || ly >= self.height {
            return false;
        }
        let f = self.factor as f64;
        let cell = (lx / (6.0 * f)) as usize;
        if cell >= self.classes.len() {
            return false;
        }
        let cx = lx - cell as f64 * 6.0 * f;
        if cx >= 5.0 * f {
            return false; // inter-glyph spacing column
        }
        let col = (cx / f) as usize;
        let row = ((ly / f) as usize).min(6);
        FONT[self.classes[cell]][row] & (0x10 >> col.min(4)) != 0
    }

    fn aabb(&self) -> ([f64; 2], [f64; 2]) {
        let xs = self.corners.iter().map(|c| c[0]);
        let ys = self.corners.iter().map(|c| c[1]);
        (
            [xs.clone().fold(f64::INFINITY, f64::min), ys.clone().fold(f64::INFINITY, f64::min)],
            [xs.fold(f64::NEG_INFINITY, f64::max), ys.fold(f64::NEG_INFINITY, f64::max)],
        )
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Render a scene: the image plus exact ground truth per visible word.
/// Deterministic in the `SceneSpec`, including its seed.
pub fn render_frame(spec: &SceneSpec) -> Result<(GrayImage, Vec<TextInstance>), SynthError> {
    spec.validate()?;
    let (cw, ch) = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image = GrayImage::filled(cw, ch, BG);
    let canvas_rect = [
        [0.0, 0.0],
        [cw as f64, 0.0],
        [cw as f64, ch as f64],
        [0.0, ch as f64],
    ];
    let mut truth = Vec::new();

    for word in &spec.words {
        let placed = place_word(word);
        let occ_u: f64 = rng.gen(); // occluder position; drawn unconditionally
        let (lo, hi) = placed.aabb();
        let x0 = (lo[0].floor().max(0.0)) as usize;
        let y0 = (lo[1].floor().max(0.0)) as usize;
        let x1 = (hi[0].ceil().min(cw as f64)) as usize;
        let y1 = (hi[1].ceil().min(ch as f64)) as usize;
        for py in y0..y1 {
            for px in x0..x1 {
                if placed.ink_at(px as f64 + 0.5, py as f64 + 0.5, word.anchor) {
                    image.set(px, py, INK);
                }
            }
        }
        if word.occlusion_fraction > 0.0 {
            let occ_w = (hi[0] - lo[0]) * word.occlusion_fraction;
            let ox0 = lo[0] + occ_u * ((hi[0] - lo[0]) - occ_w);
            let sx0 = ox0.floor().max(0.0) as usize;
            let sx1 = (ox0 + occ_w).ceil().min(cw as f64) as usize;
            for py in y0..y1 {
                for px in sx0..sx1.max(sx0) {
                    image.set(px, py, OCCLUDER);
                }
            }
        }
        let clipped = dedup_chain(clip_polygon(&placed.corners, &canvas_rect));
        if clipped.len() >= 3 {
            if let Ok(poly) = Polygon::new(clipped) {
                if poly.area() > 1e-6 {
                    truth.push(TextInstance::new(poly, word.text.to_ascii_uppercase(), 1.0));
                }
            }
        }
    }

    let noisy = spec.noise_sigma > 0.0;
    for v in image.data.iter_mut() {
        let mut val = *v as f64 * spec.illumination_gain;
        if noisy {
            val += spec.noise_sigma * gauss(&mut rng);
        }
        *v = val.round().clamp(0.0, 255.0) as u8;
    }
    Ok((image, truth))
}

fn dedup_chain(mut points: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    points.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    if points.len() > 1 {
        let (first, last) = (points[0], *points.last().unwrap());
        if (first[0] - last[0]).abs() < 1e-9 && (first[1] - last[1]).abs() < 1e-9 {
            points.pop();
        }
    }
    points
}

// ---- traversal ------------------------------------------------------------

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=8);
    (0..len).map(|_| CHARSET[rng.gen_range(0..CHARSET.len())]).collect()
}

/// Draw a word absent from `taken`; records it as taken. Globally unique
/// words keep synthetic places unambiguous.
fn fresh_word(rng: &mut ChaCha8Rng, taken: &mut std::collections::HashSet<String>) -> String {
    loop {
        let w = random_word(rng);
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// Random on-canvas layout for one word; keeps words inside the margins and
/// (best-effort) away from already placed boxes.
fn layout_word(
    rng: &mut ChaCha8Rng,
    text: &str,
    canvas: (usize, usize),
    placed: &mut Vec<[f64; 4]>, // x0, y0, x1, y1
) -> WordSpec {
    let (cw, ch) = (canvas.0 as f64, canvas.1 as f64);
    let mut scale = rng.gen_range(10.0..18.0);
    let n = text.chars().count();
    while word_box_size(n, scale).0 > cw - 6.0 && scale > 7.0 {
        scale -= 7.0;
    }
    let (bw, bh) = word_box_size(n, scale);
    let max_x = (cw - 3.0 - bw).max(3.0);
    let max_y = (ch - 3.0 - bh).max(3.0);
    let mut anchor = [3.0, 3.0];
    for _ in 0..50 {
        anchor = [rng.gen_range(3.0..=max_x), rng.gen_range(3.0..=max_y)];
        let boxr = [anchor[0] - 2.0, anchor[1] - 2.0, anchor[0] + bw + 2.0, anchor[1] + bh + 2.0];
        let clash = placed
            .iter()
            .any(|p| boxr[0] < p[2] && p[0] < boxr[2] && boxr[1] < p[3] && p[1] < boxr[3]);
        if !clash {
            break;
        }
    }
    placed.push([anchor[0], anchor[1], anchor[0] + bw, anchor[1] + bh]);
    WordSpec {
        text: text.to_string(),
        anchor,
        scale,
        rotation: rng.gen_range(-0.15..0.15),
        occlusion_fraction: 0.0,
    }
}

/// Build a map/query traversal pair. Map frames are clean; query frames
/// re-render the same place under perturbation-scaled jitter, except for the
/// dropped fraction, which become distractor places with fresh words and no
/// correspondence. Deterministic per (config, seed).
pub fn generate_traversal(
    config: &TraversalConfig,
    seed: u64,
) -> Result<TraversalPair, SynthError> {
    if config.n_places == 0 || config.words_per_place == 0 {
        return Err(SynthError::Config(
            "n_places and words_per_place must be >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.drop_rate) || config.query_perturbation < 0.0 {
        return Err(SynthError::Config(format!(
            "drop_rate {} must lie in [0,1] and query_perturbation {} be >= 0",
            config.drop_rate, config.query_perturbation
        )));
    }
    if config.canvas.0 == 0 || config.canvas.1 == 0 {
        return Err(SynthError::ZeroAreaCanvas);
    }

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut content_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut drop_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut distractor_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let mut taken = std::collections::HashSet::new();
    let mut map_specs = Vec::with_capacity(config.n_places);
    let mut map_frames = Vec::with_capacity(config.n_places);
    for place in 0..config.n_places {
        let words: Vec<String> = (0..config.words_per_place)
            .map(|_| fresh_word(&mut content_rng, &mut taken))
            .collect();
        let mut boxes = Vec::new();
        let word_specs: Vec<WordSpec> = words
            .iter()
            .map(|w| layout_word(&mut content_rng, w, config.canvas, &mut boxes))
            .collect();
        let spec = SceneSpec {
            canvas: config.canvas,
            words: word_specs,
            illumination_gain: 1.0,
            noise_sigma: 0.0,
            seed: content_rng.gen(),
        };
        let (image, instances) = render_frame(&spec)?;
        map_frames.push(Frame { id: format!("map-{place:04}"), image, instances });
        map_specs.push(spec);
    }

    let n_drop = (config.drop_rate * config.n_places as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.n_places).collect();
    for i in 0..n_drop.min(config.n_places) {
        let j = drop_rng.gen_range(i..config.n_places);
        order.swap(i, j);
    }
    let mut dropped = vec![false; config.n_places];
    for &q in order.iter().take(n_drop) {
        dropped[q] = true;
    }

    let p = config.query_perturbation;
    let mut query_frames = Vec::with_capacity(config.n_places);
    let mut correspondence = Vec::with_capacity(config.n_places);
    for place in 0..config.n_places {
        let spec = if dropped[place] {
            let words: Vec<String> = (0..config.words_per_place)
                .map(|_| fresh_word(&mut distractor_rng, &mut taken))
                .collect();
            let mut boxes = Vec::new();
            let mut word_specs: Vec<WordSpec> = words
                .iter()
                .map(|w| layout_word(&mut distractor_rng, w, config.canvas, &mut boxes))
                .collect();
            for w in &mut word_specs {
                w.occlusion_fraction = (p * 0.35 * distractor_rng.gen::<f64>()).min(0.9);
            }
            SceneSpec {
                canvas: config.canvas,
                words: word_specs,
                illumination_gain: (1.0 + p * distractor_rng.gen_range(-0.3..0.3)).max(0.2),
                noise_sigma: p * 3.0,
                seed: distractor_rng.gen(),
            }
        } else {
            let base = &map_specs[place];
            let (cw, ch) = (config.canvas.0 as f64, config.canvas.1 as f64);
            let words = base
                .words
                .iter()
                .map(|w| {
                    let n = w.text.chars().count();
                    let (bw, bh) = word_box_size(n, w.scale);
                    let jx = p * jitter_rng.gen_range(-8.0..8.0);
                    let jy = p * jitter_rng.gen_range(-8.0..8.0);
                    let jr = p * jitter_rng.gen_range(-0.12..0.12);
                    let occ = p * 0.35 * jitter_rng.gen::<f64>();
                    WordSpec {
                        text: w.text.clone(),
                        anchor: [
                            (w.anchor[0] + jx).clamp(1.0, (cw - 1.0 - bw).max(1.0)),
                            (w.anchor[1] + jy).clamp(1.0, (ch - 1.0 - bh).max(1.0)),
                        ],
                        scale: w.scale,
                        rotation: w.rotation + jr,
                        occlusion_fraction: occ.min(0.9),
                    }
                })
                .collect();
            SceneSpec {
                canvas: base.canvas,
                words,
                illumination_gain: (base.illumination_gain
                    + p * jitter_rng.gen_range(-0.3..0.3))
                .max(0.2),
                noise_sigma: p * 3.0,
                seed: base.seed,
            }
        };
        let (image, instances) = render_frame(&spec)?;
        query_frames.push(Frame { id: format!("query-{place:04}"), image, instances });
        correspondence.push(if dropped[place] { None } else { Some(place) });
    }

    Ok(TraversalPair { map_frames, query_frames, correspondence })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_spec(words: Vec<WordSpec>) -> SceneSpec {
        SceneSpec {
            canvas: (128, 128),
            words,
            illumination_gain: 1.0,
            noise_sigma: 0.0,
            seed: 7,
        }
    }

    fn word(text: &str, anchor: [f64; 2], scale: f64, rotation: f64) -> WordSpec {
        WordSpec {
            text: text.into(),
            anchor,
            scale,
            rotation,
            occlusion_fraction: 0.0,
        }
    }

    #[test]
    fn glyph_i_at_scale_7_is_the_raw_pattern_with_full_center_column() {
        let g = glyph_raster('I', 7).unwrap();
        assert_eq!((g.width, g.height), (5, 7));
        for y in 0..7 {
            assert!(g.get(2, y), "center column broken at row {y}");
        }
        assert!(g.get(1, 0) && g.get(3, 0), "top serif missing");
        assert!(!g.get(0, 3), "stem should be 1px wide mid-glyph");
    }

    #[test]
    fn zero_and_oh_are_distinct() {
        let zero = glyph_raster('0', 7).unwrap();
        let oh = glyph_raster('O', 7).unwrap();
        assert_ne!(zero.bits, oh.bits);
    }

    #[test]
    fn every_glyph_has_ink_and_fits_its_cell() {
        for &c in CHARSET.iter() {
            let g = glyph_raster(c, 14).unwrap();
            assert_eq!((g.width, g.height), (10, 14), "{c}");
            assert!(g.ink_count() > 0, "{c} has no ink");
        }
        for row in FONT.iter().flatten() {
            assert!(*row <= 0x1F, "font row wider than 5 columns");
        }
    }

    #[test]
    fn glyph_rejects_outside_charset() {
        assert_eq!(glyph_raster('!', 7), Err(SynthError::OutsideCharset('!')));
        // lowercase folds into the charset
        assert!(glyph_raster('a', 7).is_ok());
    }

    #[test]
    fn horizontal_word_truth_is_the_analytic_box() {
        let spec = plain_spec(vec![word("HI", [20.0, 30.0], 7.0, 0.0)]);
        let (image, truth) = render_frame(&spec).unwrap();
        assert_eq!(truth.len(), 1);
        assert_eq!(truth[0].text, "HI");
        assert_eq!(truth[0].confidence, 1.0);
        // 2 glyphs at factor 1: width 6*2-1 = 11, height 7.
        assert_eq!(
            truth[0].polygon.points(),
            &[[20.0, 30.0], [31.0, 30.0], [31.0, 37.0], [20.0, 37.0]]
        );
        // The 'I' center column: glyph cell 1 starts at x = 20 + 6, column 2.
        assert_eq!(image.get(28, 33), INK);
        assert_eq!(image.get(2, 2), BG);
    }

    #[test]
    fn rotated_truth_equals_rotation_of_the_unrotated_quad() {
        let theta = std::f64::consts::FRAC_PI_6;
        let anchor = [40.0, 50.0];
        let spec = plain_spec(vec![word("ROT", anchor, 14.0, theta)]);
        let (_, truth) = render_frame(&spec).unwrap();
        let (bw, bh) = word_box_size(3, 14.0);
        let center = [anchor[0] + bw / 2.0, anchor[1] + bh / 2.0];
        let expect: Vec<[f64; 2]> = [
            [anchor[0], anchor[1]],
            [anchor[0] + bw, anchor[1]],
            [anchor[0] + bw, anchor[1] + bh],
            [anchor[0], anchor[1] + bh],
        ]
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
            [
                center[0] + theta.cos() * dx - theta.sin() * dy,
                center[1] + theta.sin() * dx + theta.cos() * dy,
            ]
        })
        .collect();
        let got = truth[0].polygon.points();
        assert_eq!(got.len(), 4);
        for e in &expect {
            let nearest = got
                .iter()
                .map(|g| ((g[0] - e[0]).powi(2) + (g[1] - e[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.5, "vertex {e:?} off by {nearest}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SceneSpec {
            noise_sigma: 3.0,
            words: vec![
                word("NOISY", [10.0, 10.0], 14.0, 0.1),
                WordSpec { occlusion_fraction: 0.4, ..word("BLOCK", [20.0, 80.0], 14.0, -0.05) },
            ],
            ..plain_spec(vec![])
        };
        let (a, ta) = render_frame(&spec).unwrap();
        let (b, tb) = render_frame(&spec).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(ta, tb);
    }

    #[test]
    fn occlusion_hides_ink_but_keeps_truth() {
        let clean = plain_spec(vec![word("COVERME", [10.0, 40.0], 21.0, 0.0)]);
        let occluded = plain_spec(vec![WordSpec {
            occlusion_fraction: 0.5,
            ..clean.words[0].clone()
        }]);
        let (img_clean, t_clean) = render_frame(&clean).unwrap();
        let (img_occ, t_occ) = render_frame(&occluded).unwrap();
        let ink = |img: &GrayImage| img.data.iter().filter(|v| **v == INK).count();
        assert!(ink(&img_occ) < ink(&img_clean) / 2 + ink(&img_clean) / 4);
        assert_eq!(t_clean[0].polygon.points(), t_occ[0].polygon.points());
        assert_eq!(t_clean[0].text, t_occ[0].text);
    }

    #[test]
    fn illumination_gain_scales_pixels() {
        let spec = plain_spec(vec![word("GAIN", [10.0, 10.0], 14.0, 0.0)]);
        let bright = SceneSpec { illumination_gain: 1.25, ..spec.clone() };
        let (a, _) = render_frame(&spec).unwrap();
        let (b, _) = render_frame(&bright).unwrap();
        assert_eq!(b.data[0], (BG as f64 * 1.25).round() as u8);
        assert!(b.data.iter().zip(&a.data).all(|(hi, lo)| hi >= lo));
    }

    #[test]
    fn zero_canvas_rejected() {
        let mut spec = plain_spec(vec![]);
        spec.canvas = (0, 128);
        assert_eq!(render_frame(&spec).unwrap_err(), SynthError::ZeroAreaCanvas);
    }

    #[test]
    fn truth_clipped_to_canvas() {
        let spec = plain_spec(vec![word("EDGE", [110.0, 100.0], 21.0, 0.4)]);
        let (_, truth) = render_frame(&spec).unwrap();
        for inst in &truth {
            for p in inst.polygon.points() {
                assert!((-1e-9..=128.0 + 1e-9).contains(&p[0]), "{p:?}");
                assert!((-1e-9..=128.0 + 1e-9).contains(&p[1]), "{p:?}");
            }
        }
    }

    #[test]
    fn traversal_zero_drop_has_full_correspondence() {
        let config = TraversalConfig { n_places: 6, ..TraversalConfig::default() };
        let t = generate_traversal(&config, 3).unwrap();
        assert_eq!(t.map_frames.len(), 6);
        assert_eq!(t.query_frames.len(), 6);
        assert!(t.correspondence.iter().all(Option::is_some));
    }

    #[test]
    fn traversal_zero_perturbation_reproduces_map_pixels() {
        let config = TraversalConfig {
            n_places: 4,
            query_perturbation: 0.0,
            ..TraversalConfig::default()
        };
        let t = generate_traversal(&config, 11).unwrap();
        for (q, m) in t.query_frames.iter().zip(&t.map_frames) {
            assert_eq!(q.image.data, m.image.data);
        }
    }

    #[test]
    fn traversal_drop_rate_gives_exact_distractor_count() {
        let config = TraversalConfig {
            n_places: 100,
            drop_rate: 0.2,
            ..TraversalConfig::default()
        };
        let t = generate_traversal(&config, 5).unwrap();
        let with_truth = t.correspondence.iter().filter(|c| c.is_some()).count();
        assert_eq!(with_truth, 80);
    }

    #[test]
    fn corresponding_frames_share_word_multisets() {
        let config = TraversalConfig {
            n_places: 10,
            drop_rate: 0.3,
            query_perturbation: 0.5,
            ..TraversalConfig::default()
        };
        let t = generate_traversal(&config, 21).unwrap();
        for (q, c) in t.query_frames.iter().zip(&t.correspondence) {
            if let Some(m) = c {
                let mut qw: Vec<&str> =
                    q.instances.iter().map(|i| i.text.as_str()).collect();
                let mut mw: Vec<&str> =
                    t.map_frames[*m].instances.iter().map(|i| i.text.as_str()).collect();
                qw.sort_unstable();
                mw.sort_unstable();
                assert_eq!(qw, mw, "query {} vs map {m}", q.id);
            }
        }
    }

    #[test]
    fn traversal_regeneration_is_bitwise_identical() {
        let config = TraversalConfig {
            n_places: 5,
            drop_rate: 0.2,
            query_perturbation: 0.7,
            ..TraversalConfig::default()
        };
        let a = generate_traversal(&config, 99).unwrap();
        let b = generate_traversal(&config, 99).unwrap();
        assert_eq!(a.correspondence, b.correspondence);
        for (fa, fb) in a
            .map_frames
            .iter()
            .chain(&a.query_frames)
            .zip(b.map_frames.iter().chain(&b.query_frames))
        {
            assert_eq!(fa.id, fb.id);
            assert_eq!(fa.image.data, fb.image.data);
        }
    }

    #[test]
    fn frame_ids_unique() {
        let t = generate_traversal(&TraversalConfig::default(), 1).unwrap();
        let mut ids: Vec<&str> = t.map_frames.iter().map(|f| f.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), t.map_frames.len());
    }
}
