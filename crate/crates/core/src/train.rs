//! L2-norm training loss, global-norm gradient clipping, bias-corrected
//! Adam, and a deterministic mini-batch loop with validation-based early
//! stopping.

use crate::data::{augment_with, sample_augment, split_dataset, SceneSequence, SequenceWindow};
use crate::error::{Error, Result};
use crate::eval::{window_human_error, window_object_error};
use crate::model::{forward_on_tape, predict, BoundIds, ModelConfig, ParamSet};
use crate::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::time::Instant;

/// Single source of randomness for a run; everything downstream derives
/// from one command-level seed.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Hex digest used to fingerprint input files in run manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ── Loss ──────────────────────────────────────────────────────────────────

/// Plain-value counterpart of the on-tape loss: the L2 norm over every
/// human-joint residual (mm), plus the norm over object-box corner
/// residuals when requested. Accumulation order mirrors the tape exactly,
/// so the two agree bitwise.
pub fn l2_loss(
    bundle: &crate::model::PredictionBundle,
    seq: &SceneSequence,
    window: SequenceWindow,
    include_objects: bool,
) -> Result<f64> {
    let mut total = 0.0;
    let mut any = false;
    if !bundle.humans.is_empty() {
        let mut sq = 0.0;
        for (idx, &hi) in bundle.humans.iter().enumerate() {
            for d in 0..window.predicted {
                let t = window.first_predicted() + d;
                let truth = seq.frames[t].entities[hi]
                    .skeleton
                    .as_ref()
                    .ok_or_else(|| Error::Train { msg: format!("entity {hi} lost its skeleton") })?
                    .to_flat();
                let pred = bundle.poses[idx][d].to_flat();
                for (p, q) in pred.iter().zip(&truth) {
                    let r = p - q;
                    sq += r * r;
                }
            }
        }
        total += sq.sqrt();
        any = true;
    }
    if include_objects {
        let boxes = bundle
            .boxes
            .as_ref()
            .ok_or_else(|| Error::Train { msg: "prediction carries no object boxes".into() })?;
        let human = seq.vocabulary.human_index();
        let mut sq = 0.0;
        let mut seen = false;
        for (e, meta) in seq.roster.iter().enumerate() {
            if meta.type_index == human {
                continue;
            }
            seen = true;
            for (d, p) in boxes[e].iter().enumerate().take(window.predicted) {
                let t = window.first_predicted() + d;
                let truth = &seq.frames[t].entities[e].bbox;
                for a in 0..3 {
                    let r = p.min[a] - truth.min[a];
                    sq += r * r;
                }
                for a in 0..3 {
                    let r = p.max[a] - truth.max[a];
                    sq += r * r;
                }
            }
        }
        if seen {
            total += sq.sqrt();
            any = true;
        }
    }
    if !any {
        return Err(Error::Train { msg: "window has nothing to predict".into() });
    }
    Ok(total)
}

// ── Optimizer ─────────────────────────────────────────────────────────────

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns whether clipping fired.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> bool {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
        true
    } else {
        false
    }
}

/// Adam with bias correction; first and second moments are kept per
/// parameter block, aligned with the block order of the model.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        AdamState {
            lr: 0.0005,
            beta1: 0.5,
            beta2: 0.99,
            epsilon: 1e-8,
            step: 0,
            m: params.blocks().iter().map(|b| vec![0.0; b.data.len()]).collect(),
            v: params.blocks().iter().map(|b| vec![0.0; b.data.len()]).collect(),
        }
    }

    /// One update over all blocks. Rejects non-finite gradients by block
    /// name rather than silently corrupting the moments.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (bi, block) in params.blocks_mut().iter_mut().enumerate() {
            for (k, p) in block.data.iter_mut().enumerate() {
                let g = grads[bi][k];
                if !g.is_finite() {
                    return Err(Error::Numeric {
                        op: "adam_step",
                        msg: format!("non-finite gradient in block `{}`", block.name),
                    });
                }
                let m = &mut self.m[bi][k];
                let v = &mut self.v[bi][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

// ── Training loop ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_steps: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { batch_size: 16, max_steps: 10_000, patience: 10, augment: true, seed: 0 }
    }
}

/// Step-wise trainer; `train` drives it, and callers that need custom stop
/// conditions can drive `step` themselves.
pub struct Trainer {
    config: ModelConfig,
    params: ParamSet,
    adam: AdamState,
    seqs: Vec<SceneSequence>,
    train_windows: Vec<(usize, SequenceWindow)>,
    val_windows: Vec<(usize, SequenceWindow)>,
    batch: usize,
    options: TrainOptions,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha20Rng,
    pub steps_done: usize,
    pub clipped_steps: usize,
}

impl Trainer {
    pub fn new(seqs: Vec<SceneSequence>, config: ModelConfig, options: TrainOptions) -> Result<Trainer> {
        config.validate()?;
        let split = split_dataset(seqs.len(), options.seed)?;
        // windows are indexed against the full `seqs` vec
        let collect = |idx: &[usize]| -> Vec<(usize, SequenceWindow)> {
            idx.iter()
                .flat_map(|&i| {
                    crate::data::extract_windows(&seqs[i], config.observed_frames, config.predicted_frames)
                        .into_iter()
                        .map(move |w| (i, w))
                })
                .collect()
        };
        let train_windows = collect(&split.train);
        let val_windows = collect(&split.val);
        if train_windows.is_empty() {
            return Err(Error::Train { msg: "training split contains no usable windows".into() });
        }
        if val_windows.is_empty() {
            return Err(Error::Train { msg: "validation split contains no usable windows".into() });
        }
        let batch = options.batch_size.min(train_windows.len()).max(1);
        let params = ParamSet::init(&config, options.seed)?;
        let adam = AdamState::new(&params);
        let order: Vec<usize> = (0..train_windows.len()).collect();
        let cursor = order.len(); // force a shuffle on the first step
        let rng = seeded_rng(options.seed);
        Ok(Trainer {
            config,
            params,
            adam,
            seqs,
            train_windows,
            val_windows,
            batch,
            options,
            order,
            cursor,
            rng,
            steps_done: 0,
            clipped_steps: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_train_windows(&self) -> usize {
        self.train_windows.len()
    }

    /// Training-split windows as (sequence index, window) into `sequences`.
    pub fn train_windows(&self) -> &[(usize, SequenceWindow)] {
        &self.train_windows
    }

    pub fn sequences(&self) -> &[SceneSequence] {
        &self.seqs
    }

    /// Optimizer steps per epoch; the final partial batch of an epoch is
    /// dropped.
    pub fn steps_per_epoch(&self) -> usize {
        (self.train_windows.len() / self.batch).max(1)
    }

    /// One mini-batch gradient step; returns the mean batch loss.
    pub fn step(&mut self) -> Result<f64> {
        if self.cursor + self.batch > self.order.len() {
            // reshuffle for a new epoch, discarding the partial remainder
            for i in (1..self.order.len()).rev() {
                let j = self.rng.gen_range(0..=i);
                self.order.swap(i, j);
            }
            self.cursor = 0;
        }
        let mut grads: Vec<Vec<f64>> =
            self.params.blocks().iter().map(|b| vec![0.0; b.data.len()]).collect();
        let mut loss_sum = 0.0;
        for k in 0..self.batch {
            let (si, w) = self.train_windows[self.order[self.cursor + k]];
            let seq = if self.options.augment {
                let t = sample_augment(&mut self.rng);
                augment_with(&self.seqs[si], t)
            } else {
                self.seqs[si].clone()
            };
            let mut tape = Tape::new();
            let ids = self.params.bind(&mut tape)?;
            let bound = BoundIds::new(&self.params, &ids, &self.config)?;
            let out = forward_on_tape(&mut tape, &seq, w, &self.config, &bound, true)?;
            let loss_id = out.loss.ok_or_else(|| Error::Train { msg: "forward produced no loss".into() })?;
            let loss = tape.value(loss_id)[0];
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    op: "train_step",
                    msg: format!("loss diverged at step {}", self.steps_done + 1),
                });
            }
            loss_sum += loss;
            tape.backward(loss_id)?;
            for (bi, &id) in ids.iter().enumerate() {
                for (a, g) in grads[bi].iter_mut().zip(tape.grad(id)) {
                    *a += g;
                }
            }
        }
        let inv = 1.0 / self.batch as f64;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        if clip_global_norm(&mut grads, 5.0) {
            self.clipped_steps += 1;
        }
        self.adam.apply(&mut self.params, &grads)?;
        self.cursor += self.batch;
        self.steps_done += 1;
        Ok(loss_sum * inv)
    }

    /// Mean error at the furthest horizon over the validation windows
    /// (human joints, plus boxes for object-motion variants).
    pub fn validation_error(&self) -> Result<f64> {
        self.validation_error_of(&self.params)
    }

    fn validation_error_of(&self, params: &ParamSet) -> Result<f64> {
        let h = self.config.predicted_frames;
        let mut total = 0.0;
        for &(si, w) in &self.val_windows {
            let seq = &self.seqs[si];
            let bundle = predict(seq, w, &self.config, params)?;
            let mut e = window_human_error(&bundle, seq, w, h)?;
            if self.config.object_motion {
                e += window_object_error(&bundle, seq, w, h)?;
            }
            total += e;
        }
        Ok(total / self.val_windows.len() as f64)
    }
}

/// Everything a run leaves behind besides the weights.
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    /// Validation error once per epoch, in epoch order.
    pub val_history: Vec<f64>,
    pub best_val: Option<f64>,
    pub wall_seconds: f64,
    pub seed: u64,
    pub clipped_steps: usize,
    pub early_stopped: bool,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

/// Full training run: mini-batches of `batch_size`, per-epoch validation,
/// best-validation weights retained, early stop after `patience` epochs
/// without improvement. `max_steps == 0` returns the initialization
/// untouched.
pub fn train(
    seqs: Vec<SceneSequence>,
    config: ModelConfig,
    options: TrainOptions,
) -> Result<(ParamSet, TrainReport)> {
    let start = Instant::now();
    let seed = options.seed;
    let max_steps = options.max_steps;
    let mut trainer = Trainer::new(seqs, config, options)?;
    let mut report = TrainReport {
        losses: Vec::new(),
        val_history: Vec::new(),
        best_val: None,
        wall_seconds: 0.0,
        seed,
        clipped_steps: 0,
        early_stopped: false,
    };
    if max_steps == 0 {
        report.wall_seconds = start.elapsed().as_secs_f64();
        return Ok((trainer.params.clone(), report));
    }
    let epoch_len = trainer.steps_per_epoch();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut stale_epochs = 0usize;
    loop {
        let loss = trainer.step()?;
        report.losses.push(loss);
        let done = trainer.steps_done >= max_steps;
        if trainer.steps_done % epoch_len == 0 || done {
            let val = trainer.validation_error()?;
            report.val_history.push(val);
            let improved = best.as_ref().map(|(b, _)| val < *b).unwrap_or(true);
            if improved {
                best = Some((val, trainer.params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= trainer.options.patience {
                    report.early_stopped = true;
                    break;
                }
            }
        }
        if done {
            break;
        }
    }
    report.clipped_steps = trainer.clipped_steps;
    let (best_val, params) = match best {
        Some((v, p)) => (Some(v), p),
        None => (None, trainer.params.clone()),
    };
    report.best_val = best_val;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, report))
}
