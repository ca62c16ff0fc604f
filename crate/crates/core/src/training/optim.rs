//! Adaptive-moment gradient descent and the training loops.
//!
//! One step = forward + matching + loss + backward per example in the
//! batch, gradients averaged, then an Adam update on the master f32
//! weights. Everything is seeded: example order comes from one ChaCha
//! stream, MAE mask seeds from another draw of the same stream, so two runs
//! with the same seed produce identical traces on one platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spotter::{
    extract_predictions, forward_spotting, mae_reconstruct, mask_patches, SpotterModel,
    SpotterParams,
};
use crate::tensor::{Tape, Tensor, Var};

use super::{
    match_predictions, spotting_loss, LossBreakdown, TrainError, TrainExample,
};

/// Optimizer and loop settings. The loss weights follow the
/// detection-dominant convention for set-prediction detectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda_cls: f64,
    pub lambda_poly: f64,
    pub lambda_char: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 1000,
            batch_size: 4,
            lambda_cls: 2.0,
            lambda_poly: 5.0,
            lambda_char: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Zero learning rate is admitted as a diagnostic degenerate case (the
    /// loop runs, parameters stay bitwise unchanged).
    pub fn validate(&self) -> Result<(), TrainError> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(TrainError::Contract(format!("{name} {v} must be finite and >= 0")))
            }
        };
        finite_nonneg("learning_rate", self.learning_rate)?;
        finite_nonneg("lambda_cls", self.lambda_cls)?;
        finite_nonneg("lambda_poly", self.lambda_poly)?;
        finite_nonneg("lambda_char", self.lambda_char)?;
        if self.batch_size == 0 {
            return Err(TrainError::Contract("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with β = (0.9, 0.999), eps 1e-8. Moment buffers are keyed by the
/// parameter visit order and allocated lazily on the first step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `grads` must follow the parameter visit order;
    /// `None` entries act as zero gradients (moments keep decaying).
    pub fn step(
        &mut self,
        params: &mut SpotterParams<Tensor<f32>>,
        grads: &[Option<Tensor<f32>>],
    ) -> Result<(), TrainError> {
        if self.m.is_empty() {
            params.visit(&mut |_, t| {
                self.m.push(vec![0.0; t.len()]);
                self.v.push(vec![0.0; t.len()]);
            });
        }
        let mut count = 0usize;
        params.visit(&mut |_, _| count += 1);
        if grads.len() != count {
            return Err(TrainError::Contract(format!(
                "{} gradients for {count} parameters",
                grads.len()
            )));
        }
        self.t += 1;
        let lr = self.learning_rate as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - (self.beta1).powi(self.t as i32) as f32;
        let bc2 = 1.0 - (self.beta2).powi(self.t as i32) as f32;
        let eps = self.eps as f32;
        let mut i = 0usize;
        let mut bad = None;
        params.visit_mut(&mut |name, theta| {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = grads[i].as_ref();
            if let Some(g) = grad {
                if g.shape() != theta.shape() {
                    bad.get_or_insert(name);
                }
            }
            if bad.is_none() {
                for (e, x) in theta.data_mut().iter_mut().enumerate() {
                    let g = grad.map_or(0.0, |g| g.data()[e]);
                    m[e] = b1 * m[e] + (1.0 - b1) * g;
                    v[e] = b2 * v[e] + (1.0 - b2) * g * g;
                    let mhat = m[e] / bc1;
                    let vhat = v[e] / bc2;
                    *x -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            i += 1;
        });
        match bad {
            Some(name) => Err(TrainError::Contract(format!(
                "gradient shape mismatch for {name:?}"
            ))),
            None => Ok(()),
        }
    }
}

/// Gradients of the backward target w.r.t. every staged parameter, in
/// visit order. `None` where the loss did not touch the parameter.
pub fn collect_grads<S: crate::tensor::Scalar>(
    tape: &Tape<S>,
    staged: &SpotterParams<Var>,
) -> Vec<Option<Tensor<S>>> {
    let mut out = Vec::new();
    staged.visit(&mut |_, v| out.push(tape.grad(*v)));
    out
}

/// One line of the spotting loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Render a trace as `step,total,cls,poly,char` CSV.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,total,cls,poly,char\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.loss.total, row.loss.cls, row.loss.poly, row.loss.chars
        ));
    }
    out
}

/// Seeded epoch-style sampler: shuffles the index range, deals batches,
/// reshuffles when exhausted.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        BatchSampler { order: (0..n).collect(), cursor: n }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                for i in (1..self.order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn accumulate(
    acc: &mut Vec<Option<Tensor<f32>>>,
    grads: Vec<Option<Tensor<f32>>>,
) -> Result<(), TrainError> {
    if acc.is_empty() {
        *acc = grads;
        return Ok(());
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
    Ok(())
}

fn scale_grads(acc: &mut [Option<Tensor<f32>>], k: f32) {
    for g in acc.iter_mut().flatten() {
        for x in g.data_mut() {
            *x *= k;
        }
    }
}

/// Train the spotter on prepared examples. Returns the per-step loss trace;
/// aborts with [`TrainError::Diverged`] if any loss stops being finite.
pub fn fit(
    model: &mut SpotterModel,
    dataset: &[TrainExample],
    config: &TrainConfig,
) -> Result<Vec<TraceRow>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Contract("empty training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = BatchSampler::new(dataset.len());
    let mut adam = Adam::new(config.learning_rate);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.next_batch(config.batch_size, &mut rng);
        let mut acc: Vec<Option<Tensor<f32>>> = Vec::new();
        let mut sums = LossBreakdown { total: 0.0, cls: 0.0, poly: 0.0, chars: 0.0 };
        for &idx in &batch {
            let example = &dataset[idx];
            let mut tape = Tape::<f32>::new();
            let staged = model.stage(&mut tape);
            let tok = tape.constant(example.tokens.clone());
            let out = forward_spotting(&mut tape, &staged, &model.config, tok)
                .map_err(|e| TrainError::Contract(e.to_string()))?;
            // Exploded weights surface here first; report divergence rather
            // than letting NaN matching costs trip the contract check.
            for head in [out.heads.obj, out.heads.poly, out.heads.chars] {
                if tape.value(head).data().iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::Diverged { step });
                }
            }
            let preds = extract_predictions(&tape, &out, &model.config);
            let assignment = match_predictions(&preds, &example.truths, config)?;
            let terms = spotting_loss(
                &mut tape,
                &out.heads,
                &example.truths,
                &assignment,
                &model.config,
                config,
            )?;
            let snap = terms.snapshot(&tape);
            if !snap.total.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            tape.backward(terms.total)?;
            accumulate(&mut acc, collect_grads(&tape, &staged))?;
            sums.total += snap.total;
            sums.cls += snap.cls;
            sums.poly += snap.poly;
            sums.chars += snap.chars;
        }
        let inv = 1.0 / batch.len() as f64;
        scale_grads(&mut acc, inv as f32);
        adam.step(&mut model.params, &acc)?;
        trace.push(TraceRow {
            step,
            loss: LossBreakdown {
                total: sums.total * inv,
                cls: sums.cls * inv,
                poly: sums.poly * inv,
                chars: sums.chars * inv,
            },
        });
    }
    Ok(trace)
}

/// Masked-autoencoder pretraining on patch-token tensors. Returns
/// `(step, masked MSE)` per step. Mask seeds derive from the run seed, so
/// the schedule is reproducible.
pub fn fit_mae(
    model: &mut SpotterModel,
    dataset: &[Tensor<f32>],
    config: &TrainConfig,
) -> Result<Vec<(usize, f64)>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Contract("empty pretraining dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = BatchSampler::new(dataset.len());
    let mut adam = Adam::new(config.learning_rate);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.next_batch(config.batch_size, &mut rng);
        let mut acc: Vec<Option<Tensor<f32>>> = Vec::new();
        let mut total = 0.0f64;
        for &idx in &batch {
            let tokens = &dataset[idx];
            let mask_seed = rng.gen::<u64>();
            let (_, sel) = mask_patches(tokens, model.config.mask_ratio, mask_seed)
                .map_err(|e| TrainError::Contract(e.to_string()))?;
            let mut tape = Tape::<f32>::new();
            let staged = model.stage(&mut tape);
            let out = mae_reconstruct(&mut tape, &staged, &model.config, tokens, &sel)
                .map_err(|e| TrainError::Contract(e.to_string()))?;
            let loss = tape.value(out.loss).item() as f64;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            tape.backward(out.loss)?;
            accumulate(&mut acc, collect_grads(&tape, &staged))?;
            total += loss;
        }
        let inv = 1.0 / batch.len() as f64;
        scale_grads(&mut acc, inv as f32);
        adam.step(&mut model.params, &acc)?;
        trace.push((step, total * inv));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{scene_example, tiny_model};
    use super::*;
    use crate::training::TrainError;

    fn quick_config(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            steps,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn param_bits(model: &SpotterModel) -> Vec<u32> {
        let mut bits = Vec::new();
        model
            .params
            .visit(&mut |_, t| bits.extend(t.data().iter().map(|v| v.to_bits())));
        bits
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let mut model = tiny_model(1);
        let before = param_bits(&model);
        let dataset = vec![scene_example(2), scene_example(3)];
        let trace = fit(&mut model, &dataset, &quick_config(3, 0.0)).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(param_bits(&model), before);
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let dataset = vec![scene_example(4), scene_example(5), scene_example(6)];
        let config = quick_config(5, 1e-3);
        let mut a = tiny_model(2);
        let mut b = a.clone();
        let ta = fit(&mut a, &dataset, &config).unwrap();
        let tb = fit(&mut b, &dataset, &config).unwrap();
        assert_eq!(ta.len(), tb.len());
        for (x, y) in ta.iter().zip(&tb) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.loss.total.to_bits(), y.loss.total.to_bits());
            assert_eq!(x.loss.cls.to_bits(), y.loss.cls.to_bits());
            assert_eq!(x.loss.poly.to_bits(), y.loss.poly.to_bits());
            assert_eq!(x.loss.chars.to_bits(), y.loss.chars.to_bits());
        }
        assert_eq!(param_bits(&a), param_bits(&b));
    }

    #[test]
    fn one_step_changes_some_parameter() {
        let mut model = tiny_model(3);
        let before = param_bits(&model);
        let dataset = vec![scene_example(7)];
        fit(&mut model, &dataset, &quick_config(1, 1e-3)).unwrap();
        assert_ne!(param_bits(&model), before);
    }

    #[test]
    fn divergence_guard_reports_the_step() {
        let mut model = tiny_model(4);
        model.params.visit_mut(&mut |name, t| {
            if name == "patch_embed.w" {
                for v in t.data_mut() {
                    *v = f32::NAN;
                }
            }
        });
        let dataset = vec![scene_example(8)];
        match fit(&mut model, &dataset, &quick_config(3, 1e-3)) {
            Err(TrainError::Diverged { step }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn short_fit_reduces_the_loss() {
        let mut model = tiny_model(5);
        let dataset = vec![scene_example(9), scene_example(10)];
        let trace = fit(&mut model, &dataset, &quick_config(60, 3e-3)).unwrap();
        let first = trace.first().unwrap().loss.total;
        let last = trace.last().unwrap().loss.total;
        assert!(
            last < 0.8 * first,
            "loss went {first} -> {last}, expected a clear drop"
        );
    }

    #[test]
    fn mae_fit_reduces_the_loss() {
        let mut model = tiny_model(6);
        let dataset = vec![scene_example(11).tokens, scene_example(12).tokens];
        let trace = fit_mae(&mut model, &dataset, &quick_config(40, 3e-3)).unwrap();
        let first = trace.first().unwrap().1;
        let last = trace.last().unwrap().1;
        assert!(last < first, "masked MSE went {first} -> {last}");
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let trace = vec![
            TraceRow {
                step: 0,
                loss: LossBreakdown { total: 1.5, cls: 0.5, poly: 0.125, chars: 0.25 },
            },
            TraceRow {
                step: 1,
                loss: LossBreakdown { total: 1.0, cls: 0.25, poly: 0.0625, chars: 0.125 },
            },
        ];
        let csv = trace_to_csv(&trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,total,cls,poly,char");
        assert_eq!(lines[1], "0,1.5,0.5,0.125,0.25");
        assert_eq!(lines[2], "1,1,0.25,0.0625,0.125");
    }

    #[test]
    fn adam_rejects_malformed_gradients() {
        let mut model = tiny_model(7);
        let mut adam = Adam::new(1e-3);
        assert!(matches!(
            adam.step(&mut model.params, &[]),
            Err(TrainError::Contract(_))
        ));
        let mut count = 0;
        model.params.visit(&mut |_, _| count += 1);
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; count];
        grads[0] = Some(Tensor::zeros(vec![1, 1]));
        match adam.step(&mut model.params, &grads) {
            Err(TrainError::Contract(msg)) => assert!(msg.contains("patch_embed.w")),
            other => panic!("expected shape contract error, got {other:?}"),
        }
    }

    #[test]
    fn fit_requires_examples_and_valid_config() {
        let mut model = tiny_model(8);
        assert!(fit(&mut model, &[], &quick_config(1, 1e-3)).is_err());
        let bad = TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() };
        assert!(fit(&mut model, &[scene_example(13)], &bad).is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(fit(&mut model, &[scene_example(13)], &bad).is_err());
    }
}
