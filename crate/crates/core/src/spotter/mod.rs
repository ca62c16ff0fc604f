//! End-to-end transformer text spotter.
//!
//! A ViT-style encoder over 16×16 patches (optionally MAE-masked during
//! pretraining), a multi-scale adapter that spreads the single-scale
//! backbone map into a stride-{4,8,16,32} pyramid, a set of learned object
//! queries decoded with deformable sampling over that pyramid, and three
//! parallel heads per query: objectness, a sigmoid polygon, and
//! per-position character logits with an end-of-word class. No anchors and
//! no non-max suppression — queries either claim a word or predict
//! "no text".
//!
//! Everything is sized for CPU: the defaults (128 px images, dim 64, 2+2
//! layers, 25 queries) train in minutes on synthetic signage.

mod forward;
mod params;

pub use forward::{
    decode_queries, encode_backbone, encode_tokens, forward_spotting, mae_reconstruct,
    mask_patches, multi_scale_adapt, patchify, predict_heads, unpatchify, AdaptOutputs,
    DecodeOutputs, ForwardOutputs, HeadOutputs, MaeOutputs, MaskSelection,
};
pub use params::SpotterParams;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Polygon;
use crate::io::{self, CheckpointData, IoError};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::types::{GrayImage, TextInstance, CHARSET};

/// Feed-forward hidden width as a multiple of the embedding dim.
pub(crate) const FFN_MULT: usize = 2;

#[derive(Debug, Error)]
pub enum SpotterError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] IoError),
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint has unexpected parameter {0:?}")]
    UnexpectedParam(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpotterConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_queries: usize,
    pub mask_ratio: f64,
    pub charset: String,
    pub max_word_len: usize,
    pub n_polygon_points: usize,
    pub n_sample_points: usize,
    pub pyramid_strides: Vec<usize>,
}

impl Default for SpotterConfig {
    fn default() -> Self {
        SpotterConfig {
            image_size: 128,
            patch_size: 16,
            embed_dim: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_queries: 25,
            mask_ratio: 0.75,
            charset: CHARSET.iter().collect(),
            max_word_len: 25,
            n_polygon_points: 16,
            n_sample_points: 4,
            pyramid_strides: vec![4, 8, 16, 32],
        }
    }
}

impl SpotterConfig {
    pub fn validate(&self) -> Result<(), SpotterError> {
        let bad = |msg: String| Err(SpotterError::Config(msg));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.n_queries == 0 || self.n_sample_points == 0 {
            return bad("need n_queries >= 1 and n_sample_points >= 1".into());
        }
        // Boundary resampling of ground-truth polygons works on even counts.
        if self.n_polygon_points < 4 || self.n_polygon_points % 2 != 0 {
            return bad(format!(
                "n_polygon_points {} must be even and >= 4",
                self.n_polygon_points
            ));
        }
        if self.max_word_len == 0 || self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            return bad("layer counts and max_word_len must be >= 1".into());
        }
        let chars: Vec<char> = self.charset.chars().collect();
        let mut dedup = chars.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if chars.is_empty() || dedup.len() != chars.len() {
            return bad("charset must be non-empty with unique symbols".into());
        }
        // The adapter derives each level from the stride-patch_size backbone
        // map by factor-of-two resampling, so only this ladder is supported.
        let want = vec![
            self.patch_size / 4,
            self.patch_size / 2,
            self.patch_size,
            self.patch_size * 2,
        ];
        if self.patch_size % 4 != 0 || self.pyramid_strides != want {
            return bad(format!(
                "pyramid_strides {:?} must be {want:?} for patch_size {}",
                self.pyramid_strides, self.patch_size
            ));
        }
        if self.image_size % (self.patch_size * 2) != 0 {
            return bad(format!(
                "image_size {} must be divisible by the coarsest stride {}",
                self.image_size,
                self.patch_size * 2
            ));
        }
        Ok(())
    }

    /// Patch-grid side length (the stride-16 map is `grid × grid`).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn n_classes(&self) -> usize {
        self.charset.chars().count()
    }

    /// Index of the end-of-word class in the recognition head.
    pub fn eow_class(&self) -> usize {
        self.n_classes()
    }

    pub fn char_class(&self, c: char) -> Option<usize> {
        let folded = c.to_ascii_uppercase();
        self.charset.chars().position(|x| x == folded)
    }

    pub fn class_char(&self, class: usize) -> Option<char> {
        self.charset.chars().nth(class)
    }
}

/// One query's raw head readout, in plain f64 for matching and decoding.
#[derive(Clone, Debug)]
pub struct QueryPrediction {
    /// (no-text, text) logits.
    pub objectness: [f64; 2],
    /// Normalized polygon vertices, `n_polygon_points` of them.
    pub polygon: Vec<[f64; 2]>,
    /// `max_word_len` rows of `n_classes + 1` logits.
    pub char_logits: Vec<Vec<f64>>,
}

impl QueryPrediction {
    /// Text probability, the sigmoid of the logit gap.
    pub fn p_text(&self) -> f64 {
        1.0 / (1.0 + (self.objectness[0] - self.objectness[1]).exp())
    }

    pub fn char_probs(&self, position: usize) -> Vec<f64> {
        let row = &self.char_logits[position];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }
}

/// Read the head tensors out of the tape into per-query predictions.
pub fn extract_predictions<S: Scalar>(
    tape: &Tape<S>,
    out: &ForwardOutputs,
    config: &SpotterConfig,
) -> Vec<QueryPrediction> {
    let obj = tape.value(out.heads.obj);
    let poly = tape.value(out.heads.poly);
    let chars = tape.value(out.heads.chars);
    let n_cls = config.n_classes() + 1;
    let p2 = 2 * config.n_polygon_points;
    (0..config.n_queries)
        .map(|q| QueryPrediction {
            objectness: [
                obj.data()[2 * q].as_f64(),
                obj.data()[2 * q + 1].as_f64(),
            ],
            polygon: (0..config.n_polygon_points)
                .map(|i| {
                    [
                        poly.data()[q * p2 + 2 * i].as_f64(),
                        poly.data()[q * p2 + 2 * i + 1].as_f64(),
                    ]
                })
                .collect(),
            char_logits: (0..config.max_word_len)
                .map(|pos| {
                    (0..n_cls)
                        .map(|k| {
                            chars.data()[q * config.max_word_len * n_cls + pos * n_cls + k]
                                .as_f64()
                        })
                        .collect()
                })
                .collect(),
        })
        .collect()
}

/// The spotter: architecture config plus master f32 weights.
#[derive(Clone, Debug)]
pub struct SpotterModel {
    pub config: SpotterConfig,
    pub params: SpotterParams<Tensor<f32>>,
}

impl SpotterModel {
    pub fn new(config: SpotterConfig, seed: u64) -> Result<Self, SpotterError> {
        config.validate()?;
        let params = SpotterParams::init(&config, seed);
        Ok(SpotterModel { config, params })
    }

    /// Push every parameter onto a tape (cast to its scalar) as trainable
    /// leaves, preserving the visit order for gradient readback.
    pub fn stage<S: Scalar>(&self, tape: &mut Tape<S>) -> SpotterParams<Var> {
        self.params.map(&mut |t| tape.param(t.cast::<S>()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SpotterError> {
        let mut tensors = Vec::new();
        self.params.visit(&mut |name, t| tensors.push((name, t.clone())));
        let data = CheckpointData {
            config: serde_json::to_value(&self.config).expect("config serializes"),
            tensors,
        };
        io::save_checkpoint(&data, path)?;
        Ok(())
    }

    /// Load and validate a checkpoint: the config must parse and every
    /// parameter must be present with exactly the architecture's shape.
    pub fn load(path: &Path) -> Result<Self, SpotterError> {
        let data = io::load_checkpoint(path)?;
        let config: SpotterConfig = serde_json::from_value(data.config.clone())
            .map_err(|e| SpotterError::Config(format!("checkpoint config: {e}")))?;
        let mut model = SpotterModel::new(config, 0)?;
        let mut used = vec![false; data.tensors.len()];
        let mut first_error = None;
        model.params.visit_mut(&mut |name, slot| {
            if first_error.is_some() {
                return;
            }
            match data.tensors.iter().position(|(n, _)| *n == name) {
                None => first_error = Some(SpotterError::MissingParam(name)),
                Some(i) => {
                    used[i] = true;
                    let stored = &data.tensors[i].1;
                    if stored.shape() != slot.shape() {
                        first_error = Some(SpotterError::Checkpoint(IoError::Shape {
                            name,
                            stored: stored.shape().to_vec(),
                            expected: slot.shape().to_vec(),
                        }));
                    } else {
                        *slot = stored.clone();
                    }
                }
            }
        });
        if let Some(e) = first_error {
            return Err(e);
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(SpotterError::UnexpectedParam(data.tensors[i].0.clone()));
        }
        Ok(model)
    }
}

// ---- inference ------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct Letterbox {
    scale: f64,
    ox: f64,
    oy: f64,
}

impl Letterbox {
    /// Map a model-space pixel coordinate back to the source image.
    fn to_image(&self, mx: f64, my: f64) -> [f64; 2] {
        [(mx - self.ox) / self.scale, (my - self.oy) / self.scale]
    }
}

/// Scale-preserving resize onto a `size × size` canvas, content centered,
/// borders zero. Identity (bitwise) when the image is already that size.
pub(crate) fn letterbox(image: &GrayImage, size: usize) -> (GrayImage, Letterbox) {
    let scale = (size as f64 / image.width as f64).min(size as f64 / image.height as f64);
    let sw = ((image.width as f64 * scale).round() as usize).clamp(1, size);
    let sh = ((image.height as f64 * scale).round() as usize).clamp(1, size);
    let ox = (size - sw) / 2;
    let oy = (size - sh) / 2;
    let mut out = GrayImage::new(size, size);
    for y in 0..sh {
        let sy = (((y as f64 + 0.5) / scale) - 0.5).round().clamp(0.0, image.height as f64 - 1.0)
            as usize;
        for x in 0..sw {
            let sx = (((x as f64 + 0.5) / scale) - 0.5)
                .round()
                .clamp(0.0, image.width as f64 - 1.0) as usize;
            out.set(ox + x, oy + y, image.get(sx, sy));
        }
    }
    (
        out,
        Letterbox {
            scale,
            ox: ox as f64,
            oy: oy as f64,
        },
    )
}

/// Run the spotter on one image. Keeps queries whose text probability
/// reaches `score_threshold`, decodes transcriptions greedily up to the
/// first end-of-word, and reports polygons in source-image pixel space.
pub fn spot(
    model: &SpotterModel,
    image: &GrayImage,
    score_threshold: f64,
) -> Result<Vec<TextInstance>, SpotterError> {
    if image.width == 0 || image.height == 0 {
        return Err(SpotterError::Config("cannot spot on an empty image".into()));
    }
    let (boxed, tf) = letterbox(image, model.config.image_size);
    let tokens = patchify(&boxed, model.config.patch_size)?;
    let mut tape = Tape::<f32>::new();
    let staged = model.stage(&mut tape);
    let tok = tape.constant(tokens);
    let out = forward_spotting(&mut tape, &staged, &model.config, tok)?;
    let preds = extract_predictions(&tape, &out, &model.config);

    let size = model.config.image_size as f64;
    let mut instances = Vec::new();
    for pred in preds {
        // The sigmoid is mathematically below 1 for finite logits; nudge it
        // off the rounded boundary so a threshold of exactly 1.0 rejects all.
        let p_text = pred.p_text().min(1.0 - 1e-9);
        if p_text < score_threshold {
            continue;
        }
        let mut text = String::new();
        let mut prob_sum = 0.0;
        for pos in 0..model.config.max_word_len {
            let probs = pred.char_probs(pos);
            let (cls, p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, p)| (i, *p))
                .expect("non-empty class row");
            if cls == model.config.eow_class() {
                break;
            }
            text.push(model.config.class_char(cls).expect("class within charset"));
            prob_sum += p;
        }
        let char_conf = if text.is_empty() {
            1.0
        } else {
            prob_sum / text.chars().count() as f64
        };
        let points: Vec<[f64; 2]> = pred
            .polygon
            .iter()
            .map(|p| tf.to_image(p[0] * size, p[1] * size))
            .collect();
        let polygon = Polygon::new(points).expect("n_polygon_points >= 3");
        instances.push(TextInstance::new(polygon, text, p_text * char_conf));
    }
    Ok(instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SpotterConfig {
        SpotterConfig {
            image_size: 32,
            patch_size: 16,
            embed_dim: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_queries: 4,
            max_word_len: 3,
            n_polygon_points: 4,
            n_sample_points: 2,
            pyramid_strides: vec![4, 8, 16, 32],
            ..SpotterConfig::default()
        }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = GrayImage::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.gen();
        }
        img
    }

    #[test]
    fn patchify_shapes_and_constant_tokens() {
        let img = GrayImage::filled(32, 32, 77);
        let tokens = patchify(&img, 16).unwrap();
        assert_eq!(tokens.shape(), &[4, 256]);
        let first = &tokens.data()[..256];
        for p in 1..4 {
            assert_eq!(&tokens.data()[p * 256..(p + 1) * 256], first);
        }
        assert!(tokens.data().iter().all(|v| *v == 77.0));
    }

    #[test]
    fn unpatchify_inverts_patchify_bitwise() {
        let img = random_image(64, 32, 3);
        let tokens = patchify(&img, 16).unwrap();
        let back = unpatchify(&tokens, 64, 32, 16).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = GrayImage::new(33, 32);
        assert!(matches!(patchify(&img, 16), Err(SpotterError::Config(_))));
    }

    #[test]
    fn mask_counts_are_exact() {
        let tokens = patchify(&random_image(64, 64, 1), 16).unwrap(); // P = 16
        let (_, sel) = mask_patches(&tokens, 0.75, 5).unwrap();
        assert_eq!(sel.masked.len(), 12);
        assert_eq!(sel.visible.len(), 4);
        // round(0.95 · 16) = 15: one visible token left.
        let (vis, sel) = mask_patches(&tokens, 0.95, 5).unwrap();
        assert_eq!(sel.masked.len(), 15);
        assert_eq!(vis.shape(), &[1, 256]);
    }

    #[test]
    fn mask_is_seeded_and_varies_across_seeds() {
        let tokens = patchify(&random_image(64, 64, 1), 16).unwrap();
        let (_, a) = mask_patches(&tokens, 0.75, 42).unwrap();
        let (_, b) = mask_patches(&tokens, 0.75, 42).unwrap();
        assert_eq!(a, b);
        let differing = (0..100)
            .filter(|s| mask_patches(&tokens, 0.75, *s).unwrap().1 != a)
            .count();
        assert!(differing > 90, "only {differing} of 100 seeds differed");
    }

    #[test]
    fn mask_preserves_visible_order() {
        let tokens = patchify(&random_image(64, 64, 2), 16).unwrap();
        let (vis, sel) = mask_patches(&tokens, 0.5, 9).unwrap();
        for (row, &idx) in sel.visible.iter().enumerate() {
            assert_eq!(
                &vis.data()[row * 256..(row + 1) * 256],
                &tokens.data()[idx * 256..(idx + 1) * 256]
            );
        }
        assert!(sel.visible.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mask_ratio_bounds_rejected() {
        let tokens = patchify(&random_image(64, 64, 1), 16).unwrap();
        assert!(mask_patches(&tokens, 0.0, 1).is_err());
        assert!(mask_patches(&tokens, 1.0, 1).is_err());
    }

    #[test]
    fn encoder_output_shape_and_attention_rows() {
        let config = SpotterConfig::default();
        let model = SpotterModel::new(config.clone(), 11).unwrap();
        let tokens = patchify(&random_image(128, 128, 4), 16).unwrap();
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let tok = tape.constant(tokens);
        let (map, attns) = encode_backbone(&mut tape, &staged, &config, tok).unwrap();
        assert_eq!(tape.value(map).shape(), &[8, 8, 64]);
        assert_eq!(attns.len(), config.n_encoder_layers * config.n_heads);
        for a in attns {
            let t = tape.value(a);
            let n = t.shape()[1];
            for row in t.data().chunks(n) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "attention row sums to {sum}");
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let config = tiny();
        let model = SpotterModel::new(config.clone(), 3).unwrap();
        let tokens = patchify(&random_image(32, 32, 8), 16).unwrap();
        let mut swapped_data = tokens.data().to_vec();
        for i in 0..256 {
            swapped_data.swap(256 + i, 512 + i); // swap patch rows 1 and 2
        }
        let swapped = Tensor::new(vec![4, 256], swapped_data).unwrap();

        let run = |tokens: Tensor<f32>, indices: &[usize]| -> Vec<f32> {
            let mut tape = Tape::<f32>::new();
            let staged = model.stage(&mut tape);
            let tok = tape.constant(tokens);
            let (seq, _) = encode_tokens(&mut tape, &staged, &config, tok, indices).unwrap();
            tape.value(seq).data().to_vec()
        };
        let base = run(tokens, &[0, 1, 2, 3]);
        let perm = run(swapped, &[0, 2, 1, 3]);
        let d = config.embed_dim;
        for (row_base, row_perm) in [(0usize, 0usize), (1, 2), (2, 1), (3, 3)] {
            for c in 0..d {
                let a = base[row_base * d + c];
                let b = perm[row_perm * d + c];
                assert!((a - b).abs() < 1e-5, "row {row_base}->{row_perm} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mae_loss_zero_for_exact_reconstruction() {
        let config = tiny();
        let mut model = SpotterModel::new(config.clone(), 5).unwrap();
        // Zero head on a zero image: reconstruction and target both zero.
        model.params.visit_mut(&mut |name, t| {
            if name.starts_with("mae.head") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        });
        let tokens = patchify(&GrayImage::new(32, 32), 16).unwrap();
        let (_, sel) = mask_patches(&tokens, 0.5, 1).unwrap();
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let out = mae_reconstruct(&mut tape, &staged, &config, &tokens, &sel).unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
    }

    #[test]
    fn mae_loss_is_mean_square_of_masked_outputs_on_zero_images() {
        let config = tiny();
        let model = SpotterModel::new(config.clone(), 6).unwrap();
        let tokens = patchify(&GrayImage::new(32, 32), 16).unwrap();
        let (_, sel) = mask_patches(&tokens, 0.5, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let staged = model.stage(&mut tape);
        let out = mae_reconstruct(&mut tape, &staged, &config, &tokens, &sel).unwrap();
        let recon = tape.value(out.recon);
        let width = recon.shape()[1];
        let mut acc = 0.0;
        for &m in &sel.masked {
            for v in &recon.data()[m * width..(m + 1) * width] {
                acc += v * v;
            }
        }
        let expect = acc / (sel.masked.len() * width) as f64;
        let got = tape.value(out.loss).item();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn mae_requires_a_masked_patch() {
        let config = tiny();
        let model = SpotterModel::new(config.clone(), 6).unwrap();
        let tokens = patchify(&GrayImage::new(32, 32), 16).unwrap();
        let sel = MaskSelection {
            visible: (0..4).collect(),
            masked: vec![],
        };
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        assert!(matches!(
            mae_reconstruct(&mut tape, &staged, &config, &tokens, &sel),
            Err(SpotterError::Config(_))
        ));
    }

    #[test]
    fn adapter_levels_have_pyramid_shapes() {
        let config = SpotterConfig::default();
        let model = SpotterModel::new(config.clone(), 2).unwrap();
        let tokens = patchify(&random_image(128, 128, 5), 16).unwrap();
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let tok = tape.constant(tokens);
        let (map, _) = encode_backbone(&mut tape, &staged, &config, tok).unwrap();
        let adapt = multi_scale_adapt(&mut tape, &staged, map).unwrap();
        let shapes: Vec<Vec<usize>> = adapt
            .levels
            .iter()
            .map(|l| tape.value(*l).shape().to_vec())
            .collect();
        assert_eq!(
            shapes,
            vec![
                vec![32, 32, 64],
                vec![16, 16, 64],
                vec![8, 8, 64],
                vec![4, 4, 64]
            ]
        );
    }

    #[test]
    fn adapter_maps_constants_to_constants() {
        let config = tiny();
        let model = SpotterModel::new(config.clone(), 2).unwrap();
        let d = config.embed_dim;
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let flat = tape.constant(Tensor::full(vec![2, 2, d], 0.37f32));
        let adapt = multi_scale_adapt(&mut tape, &staged, flat).unwrap();
        for level in adapt.levels {
            let t = tape.value(level);
            let first = &t.data()[..d];
            for row in t.data().chunks(d) {
                assert_eq!(row, first, "level rows differ on constant input");
            }
        }
    }

    #[test]
    fn pooled_level_matches_block_mean_oracle() {
        let config = SpotterConfig::default();
        let model = SpotterModel::new(config.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = config.embed_dim;
        let data: Vec<f32> = (0..8 * 8 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = Tensor::new(vec![8, 8, d], data.clone()).unwrap();
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let feat = tape.constant(map);
        let adapt = multi_scale_adapt(&mut tape, &staged, feat).unwrap();
        let pooled = tape.value(adapt.pooled);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..d {
                    let mut mean = 0.0f32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            mean += data[((2 * y + dy) * 8 + 2 * x + dx) * d + c];
                        }
                    }
                    mean *= 0.25;
                    let got = pooled.data()[(y * 4 + x) * d + c];
                    assert!((got - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn decoder_shapes_and_weight_normalization() {
        let config = SpotterConfig::default();
        let model = SpotterModel::new(config.clone(), 9).unwrap();
        let tokens = patchify(&random_image(128, 128, 6), 16).unwrap();
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let tok = tape.constant(tokens);
        let out = forward_spotting(&mut tape, &staged, &config, tok).unwrap();
        assert_eq!(tape.value(out.decode.queries).shape(), &[25, 64]);
        for w in &out.decode.sample_weights {
            let t = tape.value(*w);
            assert_eq!(t.shape(), &[25, 16]); // 4 levels × 4 points
            for row in t.data().chunks(16) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_offsets_sample_at_the_reference_points() {
        let config = tiny();
        let mut model = SpotterModel::new(config.clone(), 4).unwrap();
        model.params.visit_mut(&mut |name, t| {
            if name.contains(".offset.") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        });
        let tokens = patchify(&random_image(32, 32, 7), 16).unwrap();
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let tok = tape.constant(tokens);
        let (map, _) = encode_backbone(&mut tape, &staged, &config, tok).unwrap();
        let adapt = multi_scale_adapt(&mut tape, &staged, map).unwrap();
        let decode = decode_queries(&mut tape, &staged, &config, &adapt.levels).unwrap();
        for layer in &decode.samples {
            for (l, level) in adapt.levels.iter().enumerate() {
                let direct = tape.bilinear_sample(*level, decode.refs).unwrap();
                let expect = tape.value(direct).data().to_vec();
                for k in 0..config.n_sample_points {
                    let s = layer[l * config.n_sample_points + k];
                    assert_eq!(tape.value(s).data(), &expect[..]);
                }
            }
        }
    }

    #[test]
    fn head_shapes_match_defaults() {
        let config = SpotterConfig::default();
        let model = SpotterModel::new(config.clone(), 1).unwrap();
        let tokens = patchify(&random_image(128, 128, 9), 16).unwrap();
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let tok = tape.constant(tokens);
        let out = forward_spotting(&mut tape, &staged, &config, tok).unwrap();
        assert_eq!(tape.value(out.heads.obj).shape(), &[25, 2]);
        assert_eq!(tape.value(out.heads.poly).shape(), &[25, 32]);
        assert_eq!(tape.value(out.heads.chars).shape(), &[25, 925]);
        assert!(tape
            .value(out.heads.poly)
            .data()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_embeddings_predict_identically() {
        let config = tiny();
        let model = SpotterModel::new(config.clone(), 1).unwrap();
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let row: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let q = Tensor::new(vec![2, d], data).unwrap();
        let mut tape = Tape::<f32>::new();
        let staged = model.stage(&mut tape);
        let qv = tape.constant(q);
        let heads = predict_heads(&mut tape, &staged, qv).unwrap();
        for h in [heads.obj, heads.poly, heads.chars] {
            let t = tape.value(h);
            let w = t.shape()[1];
            assert_eq!(&t.data()[..w], &t.data()[w..]);
        }
    }

    #[test]
    fn spot_threshold_one_returns_nothing() {
        let model = SpotterModel::new(tiny(), 21).unwrap();
        let img = random_image(32, 32, 3);
        assert!(spot(&model, &img, 1.0).unwrap().is_empty());
    }

    #[test]
    fn spot_bounds_and_determinism() {
        let model = SpotterModel::new(tiny(), 22).unwrap();
        let img = random_image(32, 32, 4);
        let a = spot(&model, &img, 0.0).unwrap();
        let b = spot(&model, &img, 0.0).unwrap();
        assert!(a.len() <= model.config.n_queries);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.confidence.to_bits(), y.confidence.to_bits());
            assert_eq!(x.polygon.points(), y.polygon.points());
        }
    }

    #[test]
    fn spot_is_finite_on_extreme_images() {
        let model = SpotterModel::new(tiny(), 23).unwrap();
        for img in [GrayImage::new(32, 32), GrayImage::filled(32, 32, 255)] {
            for inst in spot(&model, &img, 0.0).unwrap() {
                assert!(inst.confidence.is_finite());
                assert!((0.0..=1.0).contains(&inst.confidence));
                assert!(inst
                    .polygon
                    .points()
                    .iter()
                    .all(|p| p[0].is_finite() && p[1].is_finite()));
            }
        }
    }

    #[test]
    fn spot_letterboxes_other_sizes() {
        let model = SpotterModel::new(tiny(), 24).unwrap();
        let img = random_image(64, 16, 5);
        let instances = spot(&model, &img, 0.0).unwrap();
        assert!(instances.len() <= model.config.n_queries);
    }

    #[test]
    fn letterbox_is_identity_at_native_size() {
        let img = random_image(32, 32, 6);
        let (boxed, tf) = letterbox(&img, 32);
        assert_eq!(boxed.data, img.data);
        let p = tf.to_image(12.25, 30.5);
        assert_eq!(p, [12.25, 30.5]);
    }

    #[test]
    fn letterbox_centers_and_inverts() {
        let img = random_image(64, 32, 7);
        let (boxed, tf) = letterbox(&img, 128);
        // Scale 2: content spans 128×64 starting at y = 32.
        assert_eq!(boxed.get(20, 32 + 20), img.get(10, 10));
        assert_eq!(boxed.get(0, 0), 0);
        let back = tf.to_image(2.0 * 10.0 + 1.0, 32.0 + 2.0 * 10.0 + 1.0);
        assert!((back[0] - 10.5).abs() < 1e-12 && (back[1] - 10.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spotter.ckpt");
        let model = SpotterModel::new(tiny(), 31).unwrap();
        model.save(&path).unwrap();
        let back = SpotterModel::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        let mut originals = Vec::new();
        model.params.visit(&mut |name, t| originals.push((name, t.clone())));
        back.params.visit(&mut |name, t| {
            let (n, orig) = originals.remove(0);
            assert_eq!(n, name);
            assert_eq!(orig.shape(), t.shape());
            for (a, b) in orig.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        });
    }

    #[test]
    fn checkpoint_shape_edit_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spotter.ckpt");
        let model = SpotterModel::new(tiny(), 32).unwrap();
        model.save(&path).unwrap();
        let mut data = io::load_checkpoint(&path).unwrap();
        let idx = data.tensors.iter().position(|(n, _)| n == "head.obj.w").unwrap();
        let wrong_shape = vec![3, model.config.embed_dim];
        data.tensors[idx].1 = Tensor::zeros(wrong_shape.clone());
        io::save_checkpoint(&data, &path).unwrap();
        match SpotterModel::load(&path) {
            Err(SpotterError::Checkpoint(IoError::Shape { name, stored, expected })) => {
                assert_eq!(name, "head.obj.w");
                assert_eq!(stored, wrong_shape);
                assert_eq!(expected, vec![2, model.config.embed_dim]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_missing_and_extra_parameters_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spotter.ckpt");
        let model = SpotterModel::new(tiny(), 33).unwrap();
        model.save(&path).unwrap();
        let mut data = io::load_checkpoint(&path).unwrap();
        let removed = data.tensors.remove(3);
        io::save_checkpoint(&data, &path).unwrap();
        match SpotterModel::load(&path) {
            Err(SpotterError::MissingParam(name)) => assert_eq!(name, removed.0),
            other => panic!("expected missing-param error, got {other:?}"),
        }
        let mut data = io::load_checkpoint(&path).unwrap();
        data.tensors.push(removed);
        data.tensors.push(("stray.extra".into(), Tensor::zeros(vec![1])));
        io::save_checkpoint(&data, &path).unwrap();
        match SpotterModel::load(&path) {
            Err(SpotterError::UnexpectedParam(name)) => assert_eq!(name, "stray.extra"),
            other => panic!("expected unexpected-param error, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let ok = SpotterConfig::default();
        assert!(ok.validate().is_ok());
        let cases = [
            SpotterConfig { embed_dim: 65, ..ok.clone() },
            SpotterConfig { patch_size: 24, ..ok.clone() },
            SpotterConfig { mask_ratio: 1.0, ..ok.clone() },
            SpotterConfig { n_polygon_points: 2, ..ok.clone() },
            SpotterConfig { pyramid_strides: vec![8, 16, 32, 64], ..ok.clone() },
            SpotterConfig { charset: "AAB".into(), ..ok.clone() },
            SpotterConfig { charset: String::new(), ..ok.clone() },
        ];
        for bad in cases {
            assert!(bad.validate().is_err(), "{bad:?} should fail validation");
        }
    }

    #[test]
    fn charset_classes_fold_case_and_round_trip() {
        let config = SpotterConfig::default();
        assert_eq!(config.n_classes(), 36);
        assert_eq!(config.eow_class(), 36);
        assert_eq!(config.char_class('a'), config.char_class('A'));
        for (i, c) in config.charset.chars().enumerate() {
            assert_eq!(config.char_class(c), Some(i));
            assert_eq!(config.class_char(i), Some(c));
        }
        assert_eq!(config.char_class('!'), None);
    }
}
