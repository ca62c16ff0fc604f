//! The spotting pipeline as tape programs: patch extraction and masking,
//! the transformer encoder, MAE reconstruction, the multi-scale adapter,
//! the deformable query decoder, and the prediction heads. Everything is
//! generic over the scalar so the identical graph runs in f32 for training
//! and f64 for reference checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Attention, Block, Linear, SpotterParams};
use super::{SpotterConfig, SpotterError};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::types::GrayImage;

const LN_EPS: f64 = 1e-5;

/// Row-major patch tokens `[P × patch_size²]`, raw 0–255 pixel values.
pub fn patchify(image: &GrayImage, patch_size: usize) -> Result<Tensor<f32>, SpotterError> {
    if patch_size == 0 || image.width % patch_size != 0 || image.height % patch_size != 0 {
        return Err(SpotterError::Config(format!(
            "image {}x{} not divisible by patch size {patch_size}",
            image.width, image.height
        )));
    }
    let (gw, gh) = (image.width / patch_size, image.height / patch_size);
    let mut data = Vec::with_capacity(image.width * image.height);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch_size {
                for x in 0..patch_size {
                    data.push(image.get(px * patch_size + x, py * patch_size + y) as f32);
                }
            }
        }
    }
    Ok(Tensor::new(vec![gw * gh, patch_size * patch_size], data)
        .expect("patch grid covers the image"))
}

/// Inverse of [`patchify`]: reassemble tokens into an image, rounding and
/// clamping to u8.
pub fn unpatchify(
    tokens: &Tensor<f32>,
    width: usize,
    height: usize,
    patch_size: usize,
) -> Result<GrayImage, SpotterError> {
    let gw = width / patch_size;
    let gh = height / patch_size;
    let pd = patch_size * patch_size;
    if tokens.shape() != [gw * gh, pd] || width % patch_size != 0 || height % patch_size != 0 {
        return Err(SpotterError::Config(format!(
            "token shape {:?} does not tile {width}x{height} at patch {patch_size}",
            tokens.shape()
        )));
    }
    let mut image = GrayImage::new(width, height);
    for (p, patch) in tokens.data().chunks(pd).enumerate() {
        let (px, py) = (p % gw, p / gw);
        for y in 0..patch_size {
            for x in 0..patch_size {
                let v = patch[y * patch_size + x].round().clamp(0.0, 255.0) as u8;
                image.set(px * patch_size + x, py * patch_size + y, v);
            }
        }
    }
    Ok(image)
}

/// Which patches a masking round hides; both index lists are ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSelection {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Hide exactly `round(mask_ratio · P)` patches chosen by a seeded shuffle;
/// the visible tokens keep their original order.
pub fn mask_patches(
    tokens: &Tensor<f32>,
    mask_ratio: f64,
    seed: u64,
) -> Result<(Tensor<f32>, MaskSelection), SpotterError> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(SpotterError::Config(format!(
            "mask ratio {mask_ratio} outside (0, 1)"
        )));
    }
    let p = tokens.shape()[0];
    let width = tokens.shape().get(1).copied().unwrap_or(0);
    let n_mask = (mask_ratio * p as f64).round() as usize;
    let mut order: Vec<usize> = (0..p).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_mask.min(p) {
        let j = rng.gen_range(i..p);
        order.swap(i, j);
    }
    let mut masked: Vec<usize> = order[..n_mask].to_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; p];
    for &m in &masked {
        is_masked[m] = true;
    }
    let visible: Vec<usize> = (0..p).filter(|i| !is_masked[*i]).collect();
    let mut data = Vec::with_capacity(visible.len() * width);
    for &i in &visible {
        data.extend_from_slice(&tokens.data()[i * width..(i + 1) * width]);
    }
    let visible_tokens =
        Tensor::new(vec![visible.len(), width], data).expect("visible rows");
    Ok((visible_tokens, MaskSelection { visible, masked }))
}

// ---- transformer pieces ---------------------------------------------------

pub(super) fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Linear<Var>,
    x: Var,
) -> Result<Var, TensorError> {
    let y = tape.matmul_nt(x, p.w)?;
    tape.add_bias(y, p.b)
}

/// Multi-head self-attention; returns the output and one `[n×n]` attention
/// matrix per head.
fn mha<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Attention<Var>,
    x: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>), TensorError> {
    let d = tape.value(x).shape()[1];
    let dh = d / n_heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let q = linear(tape, &p.q, x)?;
    let k = linear(tape, &p.k, x)?;
    let v = linear(tape, &p.v, x)?;
    let mut heads = Vec::with_capacity(n_heads);
    let mut attns = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let a = tape.softmax(scaled, 1)?;
        attns.push(a);
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = linear(tape, &p.o, cat)?;
    Ok((out, attns))
}

fn transformer_block<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Block<Var>,
    x: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>), TensorError> {
    let (a, attns) = mha(tape, &b.attn, x, n_heads)?;
    let r1 = tape.add(x, a)?;
    let h1 = tape.layer_norm(r1, b.n1.g, b.n1.b, LN_EPS)?;
    let f = linear(tape, &b.f1, h1)?;
    let f = tape.relu(f)?;
    let f = linear(tape, &b.f2, f)?;
    let r2 = tape.add(h1, f)?;
    let h2 = tape.layer_norm(r2, b.n2.g, b.n2.b, LN_EPS)?;
    Ok((h2, attns))
}

/// Embed raw patch tokens (normalized to [0,1]), add the position rows for
/// `indices`, and run the encoder stack. Returns `[n × d]` plus all
/// attention matrices.
pub fn encode_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    p: &SpotterParams<Var>,
    config: &SpotterConfig,
    tokens: Var,
    indices: &[usize],
) -> Result<(Var, Vec<Var>), TensorError> {
    let n = tape.value(tokens).shape()[0];
    if n != indices.len() {
        return Err(TensorError::Contract(format!(
            "{n} tokens but {} position indices",
            indices.len()
        )));
    }
    let norm = tape.affine(tokens, S::of(1.0 / 255.0), S::zero())?;
    let emb = linear(tape, &p.patch_embed, norm)?;
    let pos = tape.select_rows(p.pos_embed, indices)?;
    let mut x = tape.add(emb, pos)?;
    let mut attns = Vec::new();
    for block in &p.encoder {
        let (y, a) = transformer_block(tape, block, x, config.n_heads)?;
        x = y;
        attns.extend(a);
    }
    Ok((x, attns))
}

/// Full-image encoding reshaped to the stride-`patch_size` feature map
/// `[h16 × w16 × d]`.
pub fn encode_backbone<S: Scalar>(
    tape: &mut Tape<S>,
    p: &SpotterParams<Var>,
    config: &SpotterConfig,
    tokens: Var,
) -> Result<(Var, Vec<Var>), TensorError> {
    let indices: Vec<usize> = (0..config.n_patches()).collect();
    let (seq, attns) = encode_tokens(tape, p, config, tokens, &indices)?;
    let g = config.grid();
    let map = tape.reshape(seq, vec![g, g, config.embed_dim])?;
    Ok((map, attns))
}

pub struct MaeOutputs {
    /// `[P × patch_size²]` reconstruction in normalized pixel units.
    pub recon: Var,
    /// Mean squared error over masked patches only.
    pub loss: Var,
}

/// Encode the visible patches, fill masked slots with the mask token, run
/// the lightweight decoder, and score reconstruction on masked patches.
pub fn mae_reconstruct<S: Scalar>(
    tape: &mut Tape<S>,
    p: &SpotterParams<Var>,
    config: &SpotterConfig,
    tokens: &Tensor<f32>,
    sel: &MaskSelection,
) -> Result<MaeOutputs, SpotterError> {
    if sel.masked.is_empty() {
        return Err(SpotterError::Config("masked set is empty".into()));
    }
    let n_patches = config.n_patches();
    let visible = {
        let width = tokens.shape()[1];
        let mut data = Vec::with_capacity(sel.visible.len() * width);
        for &i in &sel.visible {
            data.extend_from_slice(&tokens.data()[i * width..(i + 1) * width]);
        }
        Tensor::new(vec![sel.visible.len(), width], data).expect("visible rows")
    };
    let vis_var = tape.constant(visible.cast::<S>());
    let (enc, _) = encode_tokens(tape, p, config, vis_var, &sel.visible)?;
    let base = tape.broadcast_rows(p.mask_token, n_patches)?;
    let seq = tape.scatter_rows(base, enc, &sel.visible)?;
    let seq = tape.add(seq, p.pos_embed)?;
    let (dec, _) = transformer_block(tape, &p.mae_block, seq, config.n_heads)?;
    let recon = linear(tape, &p.mae_head, dec)?;
    let pred_masked = tape.select_rows(recon, &sel.masked)?;
    let target_full = tape.constant(tokens.cast::<S>());
    let target_norm = tape.affine(target_full, S::of(1.0 / 255.0), S::zero())?;
    let target_masked = tape.select_rows(target_norm, &sel.masked)?;
    let diff = tape.sub(pred_masked, target_masked)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq)?;
    Ok(MaeOutputs { recon, loss })
}

pub struct AdaptOutputs {
    /// Feature maps ordered by ascending stride: 4, 8, 16, 32.
    pub levels: Vec<Var>,
    /// Stride-32 block means before projection (oracle hook).
    pub pooled: Var,
}

/// Build the four-level pyramid from the stride-16 backbone map. The
/// stride-16 level is the map itself; finer levels are projected then
/// nearest-upsampled (these commute exactly, and projecting first is
/// cheaper); the coarser level is average-pooled then projected.
pub fn multi_scale_adapt<S: Scalar>(
    tape: &mut Tape<S>,
    p: &SpotterParams<Var>,
    feat: Var,
) -> Result<AdaptOutputs, TensorError> {
    let shape = tape.value(feat).shape().to_vec();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(feat, vec![h * w, d])?;

    let p4 = linear(tape, &p.proj4, flat)?;
    let p4 = tape.reshape(p4, vec![h, w, d])?;
    let p4 = tape.upsample2x(p4)?;
    let s4 = tape.upsample2x(p4)?;

    let p8 = linear(tape, &p.proj8, flat)?;
    let p8 = tape.reshape(p8, vec![h, w, d])?;
    let s8 = tape.upsample2x(p8)?;

    let pooled = tape.avgpool2x2(feat)?;
    let pooled_flat = tape.reshape(pooled, vec![(h / 2) * (w / 2), d])?;
    let p32 = linear(tape, &p.proj32, pooled_flat)?;
    let s32 = tape.reshape(p32, vec![h / 2, w / 2, d])?;

    Ok(AdaptOutputs {
        levels: vec![s4, s8, feat, s32],
        pooled,
    })
}

pub struct DecodeOutputs {
    /// Final query embeddings `[n_queries × d]`.
    pub queries: Var,
    /// Sigmoid-squashed reference points `[n_queries × 2]`.
    pub refs: Var,
    /// Per layer: softmaxed sampling weights `[n_queries × levels·points]`.
    pub sample_weights: Vec<Var>,
    /// Per layer, per (level, point): sampled features `[n_queries × d]`.
    pub samples: Vec<Vec<Var>>,
    /// Query self-attention matrices across layers and heads.
    pub attns: Vec<Var>,
}

/// Run the decoder stack: query self-attention, deformable cross-attention
/// over the pyramid (reference point + predicted offsets, softmax-combined
/// bilinear samples), feed-forward.
pub fn decode_queries<S: Scalar>(
    tape: &mut Tape<S>,
    p: &SpotterParams<Var>,
    config: &SpotterConfig,
    levels: &[Var],
) -> Result<DecodeOutputs, TensorError> {
    let d = config.embed_dim;
    let k_points = config.n_sample_points;
    let lk = levels.len() * k_points;
    let refs = tape.sigmoid(p.ref_points)?;
    let ones_row = tape.constant(Tensor::full(vec![1, d], S::one()));
    let mut x = p.queries;
    let mut sample_weights = Vec::new();
    let mut samples = Vec::new();
    let mut attns = Vec::new();

    for block in &p.decoder {
        let (sa, a) = mha(tape, &block.self_attn, x, config.n_heads)?;
        attns.extend(a);
        let r1 = tape.add(x, sa)?;
        let h1 = tape.layer_norm(r1, block.n1.g, block.n1.b, LN_EPS)?;

        let offsets = linear(tape, &block.offset, h1)?;
        let wlogits = linear(tape, &block.weight, h1)?;
        let w = tape.softmax(wlogits, 1)?;
        sample_weights.push(w);

        let mut layer_samples = Vec::with_capacity(lk);
        let mut agg: Option<Var> = None;
        for (l, &level) in levels.iter().enumerate() {
            for k in 0..k_points {
                let idx = l * k_points + k;
                let off = tape.slice_cols(offsets, idx * 2, 2)?;
                let pts = tape.add(refs, off)?;
                let s = tape.bilinear_sample(level, pts)?;
                layer_samples.push(s);
                let wcol = tape.slice_cols(w, idx, 1)?;
                let wrow = tape.matmul(wcol, ones_row)?;
                let ws = tape.mul(s, wrow)?;
                agg = Some(match agg {
                    None => ws,
                    Some(acc) => tape.add(acc, ws)?,
                });
            }
        }
        samples.push(layer_samples);
        let gathered = agg.expect("at least one pyramid level");
        let v = linear(tape, &block.value, gathered)?;
        let o = linear(tape, &block.out, v)?;
        let r2 = tape.add(h1, o)?;
        let h2 = tape.layer_norm(r2, block.n2.g, block.n2.b, LN_EPS)?;

        let f = linear(tape, &block.f1, h2)?;
        let f = tape.relu(f)?;
        let f = linear(tape, &block.f2, f)?;
        let r3 = tape.add(h2, f)?;
        x = tape.layer_norm(r3, block.n3.g, block.n3.b, LN_EPS)?;
    }

    Ok(DecodeOutputs {
        queries: x,
        refs,
        sample_weights,
        samples,
        attns,
    })
}

pub struct HeadOutputs {
    /// Objectness logits `[n_queries × 2]` (no-text, text).
    pub obj: Var,
    /// Sigmoid polygon coordinates `[n_queries × 2·n_polygon_points]`.
    pub poly: Var,
    /// Character logits `[n_queries × max_word_len·(n_classes+1)]`.
    pub chars: Var,
}

pub fn predict_heads<S: Scalar>(
    tape: &mut Tape<S>,
    p: &SpotterParams<Var>,
    queries: Var,
) -> Result<HeadOutputs, TensorError> {
    let obj = linear(tape, &p.head_obj, queries)?;
    let poly_raw = linear(tape, &p.head_poly, queries)?;
    let poly = tape.sigmoid(poly_raw)?;
    let chars = linear(tape, &p.head_char, queries)?;
    Ok(HeadOutputs { obj, poly, chars })
}

pub struct ForwardOutputs {
    pub heads: HeadOutputs,
    pub decode: DecodeOutputs,
    pub encoder_attns: Vec<Var>,
}

/// The whole inference/training graph: encode every patch (no masking),
/// adapt to the pyramid, decode queries, predict.
pub fn forward_spotting<S: Scalar>(
    tape: &mut Tape<S>,
    p: &SpotterParams<Var>,
    config: &SpotterConfig,
    tokens: Var,
) -> Result<ForwardOutputs, TensorError> {
    let (feat, encoder_attns) = encode_backbone(tape, p, config, tokens)?;
    let adapt = multi_scale_adapt(tape, p, feat)?;
    let decode = decode_queries(tape, p, config, &adapt.levels)?;
    let heads = predict_heads(tape, p, decode.queries)?;
    Ok(ForwardOutputs {
        heads,
        decode,
        encoder_attns,
    })
}
