//! Parameter tree for the spotter, generic over the payload so the same
//! structure describes master weights (`Tensor<f32>`) and staged tape
//! variables (`Var`). `visit`, `visit_mut`, and `map` traverse fields in
//! one fixed order; checkpoint parameter names are the `visit` prefixes, so
//! that order is a compatibility contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SpotterConfig;
use crate::tensor::Tensor;

/// Fully-connected layer: `y = x·Wᵀ + b`, with `w` stored `[out × in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug)]
pub struct Norm<T> {
    pub g: T,
    pub b: T,
}

#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

/// Post-norm transformer block: attention → add&norm → feed-forward →
/// add&norm.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub attn: Attention<T>,
    pub n1: Norm<T>,
    pub f1: Linear<T>,
    pub f2: Linear<T>,
    pub n2: Norm<T>,
}

/// Decoder layer: query self-attention plus deformable cross-attention
/// (per-query offsets, softmax sample weights, value/output projections).
#[derive(Clone, Debug)]
pub struct DecBlock<T> {
    pub self_attn: Attention<T>,
    pub n1: Norm<T>,
    pub offset: Linear<T>,
    pub weight: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub n2: Norm<T>,
    pub f1: Linear<T>,
    pub f2: Linear<T>,
    pub n3: Norm<T>,
}

#[derive(Clone, Debug)]
pub struct SpotterParams<T> {
    pub patch_embed: Linear<T>,
    pub pos_embed: T,
    pub encoder: Vec<Block<T>>,
    pub mask_token: T,
    pub mae_block: Block<T>,
    pub mae_head: Linear<T>,
    pub proj4: Linear<T>,
    pub proj8: Linear<T>,
    pub proj32: Linear<T>,
    pub queries: T,
    pub ref_points: T,
    pub decoder: Vec<DecBlock<T>>,
    pub head_obj: Linear<T>,
    pub head_poly: Linear<T>,
    pub head_char: Linear<T>,
}

impl<T> Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear { w: f(&self.w), b: f(&self.b) }
    }
}

impl<T> Norm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.g"), &self.g);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}.g"), &mut self.g);
        f(format!("{prefix}.b"), &mut self.b);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm { g: f(&self.g), b: f(&self.b) }
    }
}

impl<T> Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
        self.o.visit(&format!("{prefix}.o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.q.visit_mut(&format!("{prefix}.q"), f);
        self.k.visit_mut(&format!("{prefix}.k"), f);
        self.v.visit_mut(&format!("{prefix}.v"), f);
        self.o.visit_mut(&format!("{prefix}.o"), f);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attention<U> {
        Attention {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
        }
    }
}

impl<T> Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.n1.visit(&format!("{prefix}.n1"), f);
        self.f1.visit(&format!("{prefix}.f1"), f);
        self.f2.visit(&format!("{prefix}.f2"), f);
        self.n2.visit(&format!("{prefix}.n2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.n1.visit_mut(&format!("{prefix}.n1"), f);
        self.f1.visit_mut(&format!("{prefix}.f1"), f);
        self.f2.visit_mut(&format!("{prefix}.f2"), f);
        self.n2.visit_mut(&format!("{prefix}.n2"), f);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Block<U> {
        Block {
            attn: self.attn.map(f),
            n1: self.n1.map(f),
            f1: self.f1.map(f),
            f2: self.f2.map(f),
            n2: self.n2.map(f),
        }
    }
}

impl<T> DecBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.n1.visit(&format!("{prefix}.n1"), f);
        self.offset.visit(&format!("{prefix}.offset"), f);
        self.weight.visit(&format!("{prefix}.weight"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        self.out.visit(&format!("{prefix}.out"), f);
        self.n2.visit(&format!("{prefix}.n2"), f);
        self.f1.visit(&format!("{prefix}.f1"), f);
        self.f2.visit(&format!("{prefix}.f2"), f);
        self.n3.visit(&format!("{prefix}.n3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.n1.visit_mut(&format!("{prefix}.n1"), f);
        self.offset.visit_mut(&format!("{prefix}.offset"), f);
        self.weight.visit_mut(&format!("{prefix}.weight"), f);
        self.value.visit_mut(&format!("{prefix}.value"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
        self.n2.visit_mut(&format!("{prefix}.n2"), f);
        self.f1.visit_mut(&format!("{prefix}.f1"), f);
        self.f2.visit_mut(&format!("{prefix}.f2"), f);
        self.n3.visit_mut(&format!("{prefix}.n3"), f);
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecBlock<U> {
        DecBlock {
            self_attn: self.self_attn.map(f),
            n1: self.n1.map(f),
            offset: self.offset.map(f),
            weight: self.weight.map(f),
            value: self.value.map(f),
            out: self.out.map(f),
            n2: self.n2.map(f),
            f1: self.f1.map(f),
            f2: self.f2.map(f),
            n3: self.n3.map(f),
        }
    }
}

impl<T> SpotterParams<T> {
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.patch_embed.visit("patch_embed", f);
        f("pos_embed".into(), &self.pos_embed);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("encoder.{i}"), f);
        }
        f("mask_token".into(), &self.mask_token);
        self.mae_block.visit("mae.block", f);
        self.mae_head.visit("mae.head", f);
        self.proj4.visit("adapter.proj4", f);
        self.proj8.visit("adapter.proj8", f);
        self.proj32.visit("adapter.proj32", f);
        f("queries".into(), &self.queries);
        f("ref_points".into(), &self.ref_points);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&format!("decoder.{i}"), f);
        }
        self.head_obj.visit("head.obj", f);
        self.head_poly.visit("head.poly", f);
        self.head_char.visit("head.chars", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.patch_embed.visit_mut("patch_embed", f);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&format!("encoder.{i}"), f);
        }
        f("mask_token".into(), &mut self.mask_token);
        self.mae_block.visit_mut("mae.block", f);
        self.mae_head.visit_mut("mae.head", f);
        self.proj4.visit_mut("adapter.proj4", f);
        self.proj8.visit_mut("adapter.proj8", f);
        self.proj32.visit_mut("adapter.proj32", f);
        f("queries".into(), &mut self.queries);
        f("ref_points".into(), &mut self.ref_points);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&format!("decoder.{i}"), f);
        }
        self.head_obj.visit_mut("head.obj", f);
        self.head_poly.visit_mut("head.poly", f);
        self.head_char.visit_mut("head.chars", f);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SpotterParams<U> {
        SpotterParams {
            patch_embed: self.patch_embed.map(f),
            pos_embed: f(&self.pos_embed),
            encoder: self.encoder.iter().map(|b| b.map(f)).collect(),
            mask_token: f(&self.mask_token),
            mae_block: self.mae_block.map(f),
            mae_head: self.mae_head.map(f),
            proj4: self.proj4.map(f),
            proj8: self.proj8.map(f),
            proj32: self.proj32.map(f),
            queries: f(&self.queries),
            ref_points: f(&self.ref_points),
            decoder: self.decoder.iter().map(|b| b.map(f)).collect(),
            head_obj: self.head_obj.map(f),
            head_poly: self.head_poly.map(f),
            head_char: self.head_char.map(f),
        }
    }
}

// ---- initialization -------------------------------------------------------

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).expect("shape matches element count")
}

fn linear(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Linear<Tensor<f32>> {
    Linear {
        w: uniform(rng, vec![out_dim, in_dim], (1.0 / in_dim as f64).sqrt()),
        b: Tensor::zeros(vec![out_dim]),
    }
}

fn norm(d: usize) -> Norm<Tensor<f32>> {
    Norm {
        g: Tensor::full(vec![d], 1.0),
        b: Tensor::zeros(vec![d]),
    }
}

fn block(rng: &mut ChaCha8Rng, d: usize, ffn: usize) -> Block<Tensor<f32>> {
    Block {
        attn: Attention {
            q: linear(rng, d, d),
            k: linear(rng, d, d),
            v: linear(rng, d, d),
            o: linear(rng, d, d),
        },
        n1: norm(d),
        f1: linear(rng, ffn, d),
        f2: linear(rng, d, ffn),
        n2: norm(d),
    }
}

impl SpotterParams<Tensor<f32>> {
    /// Deterministic initialization: uniform fan-in scaling for linear
    /// layers, near-zero deformable offsets, zero sampling-weight logits
    /// (uniform attention over samples), and reference points spread on a
    /// grid covering the unit square.
    pub fn init(config: &SpotterConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let ffn = d * super::FFN_MULT;
        let patch_dim = config.patch_size * config.patch_size;
        let n_patches = config.n_patches();
        let lk = config.pyramid_strides.len() * config.n_sample_points;

        let side = (config.n_queries as f64).sqrt().ceil() as usize;
        let ref_data: Vec<f32> = (0..config.n_queries)
            .flat_map(|i| {
                let logit = |p: f64| (p / (1.0 - p)).ln() as f32;
                let x = ((i % side) as f64 + 0.5) / side as f64;
                let y = ((i / side) as f64 + 0.5) / side as f64;
                [logit(x), logit(y)]
            })
            .collect();

        SpotterParams {
            patch_embed: linear(&mut rng, d, patch_dim),
            pos_embed: uniform(&mut rng, vec![n_patches, d], 0.02),
            encoder: (0..config.n_encoder_layers).map(|_| block(&mut rng, d, ffn)).collect(),
            mask_token: uniform(&mut rng, vec![1, d], 0.02),
            mae_block: block(&mut rng, d, ffn),
            mae_head: linear(&mut rng, patch_dim, d),
            proj4: linear(&mut rng, d, d),
            proj8: linear(&mut rng, d, d),
            proj32: linear(&mut rng, d, d),
            queries: uniform(&mut rng, vec![config.n_queries, d], (1.0 / d as f64).sqrt()),
            ref_points: Tensor::new(vec![config.n_queries, 2], ref_data)
                .expect("two coords per query"),
            decoder: (0..config.n_decoder_layers)
                .map(|_| DecBlock {
                    self_attn: Attention {
                        q: linear(&mut rng, d, d),
                        k: linear(&mut rng, d, d),
                        v: linear(&mut rng, d, d),
                        o: linear(&mut rng, d, d),
                    },
                    n1: norm(d),
                    offset: Linear {
                        w: uniform(&mut rng, vec![lk * 2, d], 1e-3),
                        b: Tensor::zeros(vec![lk * 2]),
                    },
                    weight: Linear {
                        w: Tensor::zeros(vec![lk, d]),
                        b: Tensor::zeros(vec![lk]),
                    },
                    value: linear(&mut rng, d, d),
                    out: linear(&mut rng, d, d),
                    n2: norm(d),
                    f1: linear(&mut rng, ffn, d),
                    f2: linear(&mut rng, d, ffn),
                    n3: norm(d),
                })
                .collect(),
            head_obj: linear(&mut rng, 2, d),
            head_poly: linear(&mut rng, 2 * config.n_polygon_points, d),
            head_char: linear(
                &mut rng,
                config.max_word_len * (config.n_classes() + 1),
                d,
            ),
        }
    }
}
