//! The full predictor: a residual recurrent human branch fused with the
//! scene-context branch, optional object-motion heads, the zero-velocity
//! baseline, parameter management, and the versioned checkpoint container.

use crate::data::{
    build_node_features, feature_width, BoundingBox, SceneSequence, SequenceWindow, Skeleton,
    JOINT_COUNT, JOINT_DIM,
};
use crate::error::{Error, Result};
use crate::graph::{
    self, context_frame_step, context_observe, ContextIds, GruIds, InteractionMode,
};
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Read as _;
use std::path::Path;

// ── Variants ──────────────────────────────────────────────────────────────

/// The two baselines and four context models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Zv,
    Rnn,
    Crnn,
    CrnnLi,
    CrnnOmp,
    CrnnOmpLi,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Zv, Variant::Rnn, Variant::Crnn, Variant::CrnnOmp, Variant::CrnnLi, Variant::CrnnOmpLi];

    pub fn parse(s: &str) -> Option<Variant> {
        Some(match s {
            "zv" => Variant::Zv,
            "rnn" => Variant::Rnn,
            "crnn" => Variant::Crnn,
            "crnn-li" => Variant::CrnnLi,
            "crnn-omp" => Variant::CrnnOmp,
            "crnn-omp-li" => Variant::CrnnOmpLi,
            _ => return None,
        })
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::Zv => "zv",
            Variant::Rnn => "rnn",
            Variant::Crnn => "crnn",
            Variant::CrnnLi => "crnn-li",
            Variant::CrnnOmp => "crnn-omp",
            Variant::CrnnOmpLi => "crnn-omp-li",
        }
    }

    /// Row label used by report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Zv => "ZV",
            Variant::Rnn => "RNN",
            Variant::Crnn => "C-RNN",
            Variant::CrnnLi => "C-RNN+LI",
            Variant::CrnnOmp => "C-RNN+OMP",
            Variant::CrnnOmpLi => "C-RNN+OMP+LI",
        }
    }

    /// (context, learned interactions, object motion)
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Zv | Variant::Rnn => (false, false, false),
            Variant::Crnn => (true, false, false),
            Variant::CrnnLi => (true, true, false),
            Variant::CrnnOmp => (true, false, true),
            Variant::CrnnOmpLi => (true, true, true),
        }
    }

    pub fn is_trainable(self) -> bool {
        self != Variant::Zv
    }
}

// ── Configuration ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_enabled: bool,
    pub learn_interactions: bool,
    pub object_motion: bool,
    pub human_hidden: usize,
    pub context_hidden: usize,
    pub interaction_mid: usize,
    pub vocab_size: usize,
    pub observed_frames: usize,
    pub predicted_frames: usize,
    /// Scale coordinate inputs by 1/1000 inside the network and rescale
    /// outputs; off by default so coordinates stay absolute millimetres.
    pub scale_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context_enabled: true,
            learn_interactions: false,
            object_motion: false,
            human_hidden: 1024,
            context_hidden: 256,
            interaction_mid: 128,
            vocab_size: 15,
            observed_frames: 10,
            predicted_frames: 20,
            scale_inputs: false,
        }
    }
}

impl ModelConfig {
    /// Default-sized configuration for a trainable variant.
    pub fn for_variant(v: Variant) -> Result<ModelConfig> {
        if !v.is_trainable() {
            return Err(Error::Config { msg: "the zero-velocity baseline has no parameters".into() });
        }
        let (context_enabled, learn_interactions, object_motion) = v.flags();
        Ok(ModelConfig { context_enabled, learn_interactions, object_motion, ..Default::default() })
    }

    pub fn variant(&self) -> Variant {
        match (self.context_enabled, self.learn_interactions, self.object_motion) {
            (false, _, _) => Variant::Rnn,
            (true, false, false) => Variant::Crnn,
            (true, true, false) => Variant::CrnnLi,
            (true, false, true) => Variant::CrnnOmp,
            (true, true, true) => Variant::CrnnOmpLi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.learn_interactions || self.object_motion) && !self.context_enabled {
            return Err(Error::Config {
                msg: "learned interactions and object motion require the context branch".into(),
            });
        }
        if self.human_hidden == 0 || (self.context_enabled && self.context_hidden == 0) {
            return Err(Error::Config { msg: "hidden widths must be positive".into() });
        }
        if self.learn_interactions && self.interaction_mid == 0 {
            return Err(Error::Config { msg: "interaction head width must be positive".into() });
        }
        if self.vocab_size == 0 {
            return Err(Error::Config { msg: "vocabulary must not be empty".into() });
        }
        if self.observed_frames == 0 || self.predicted_frames == 0 {
            return Err(Error::Config { msg: "window lengths must be positive".into() });
        }
        Ok(())
    }
}

// ── Parameters ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Named, ordered parameter blocks. Order is fixed by the configuration, so
/// optimizer state, checkpoints, and gradient readback all align by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

/// Canonical block layout for a configuration: `(name, rows, cols)`.
pub fn block_shapes(config: &ModelConfig) -> Vec<(&'static str, usize, usize)> {
    let hh = config.human_hidden;
    let hc = config.context_hidden;
    let dec_in = if config.context_enabled { hh + hc } else { hh };
    let mut v = vec![
        ("hm.gru.wz", JOINT_DIM, hh),
        ("hm.gru.uz", hh, hh),
        ("hm.gru.bz", 1, hh),
        ("hm.gru.wr", JOINT_DIM, hh),
        ("hm.gru.ur", hh, hh),
        ("hm.gru.br", 1, hh),
        ("hm.gru.wn", JOINT_DIM, hh),
        ("hm.gru.un", hh, hh),
        ("hm.gru.bn", 1, hh),
        ("hm.dec.w", dec_in, JOINT_DIM),
        ("hm.dec.b", 1, JOINT_DIM),
    ];
    if config.context_enabled {
        let f0 = feature_width(config.vocab_size);
        v.push(("ctx.ec.w", 2 * f0, hc));
        v.extend([
            ("ctx.gru.wz", hc, hc),
            ("ctx.gru.uz", hc, hc),
            ("ctx.gru.bz", 1, hc),
            ("ctx.gru.wr", hc, hc),
            ("ctx.gru.ur", hc, hc),
            ("ctx.gru.br", 1, hc),
            ("ctx.gru.wn", hc, hc),
            ("ctx.gru.un", hc, hc),
            ("ctx.gru.bn", 1, hc),
        ]);
        if config.learn_interactions {
            v.push(("ctx.int.w1", 2 * hc, config.interaction_mid));
            v.push(("ctx.int.w2", config.interaction_mid, 1));
        }
        if config.object_motion {
            v.push(("omp.head.w", hc, 6));
            v.push(("omp.head.b", 1, 6));
        }
    }
    v
}

/// Exact count of trainable scalars for a configuration.
pub fn count_parameters(config: &ModelConfig) -> usize {
    block_shapes(config).iter().map(|(_, r, c)| r * c).sum()
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.').next().map(|tail| tail.starts_with('b')).unwrap_or(false)
}

impl ParamSet {
    /// Uniform init in ±sqrt(6/(fan_in+fan_out)) for weights, zeros for biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
        config.validate()?;
        let mut rng = crate::train::seeded_rng(seed);
        let blocks = block_shapes(config)
            .into_iter()
            .map(|(name, rows, cols)| {
                let data = if is_bias(name) {
                    vec![0.0; rows * cols]
                } else {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                ParamBlock { name: name.to_string(), rows, cols, data }
            })
            .collect();
        Ok(ParamSet { blocks })
    }

    pub fn zeros(config: &ModelConfig) -> Result<ParamSet> {
        config.validate()?;
        let blocks = block_shapes(config)
            .into_iter()
            .map(|(name, rows, cols)| ParamBlock {
                name: name.to_string(),
                rows,
                cols,
                data: vec![0.0; rows * cols],
            })
            .collect();
        Ok(ParamSet { blocks })
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    /// Records every block as a trainable leaf, in block order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<TensorId>> {
        self.blocks
            .iter()
            .map(|b| tape.leaf(b.rows, b.cols, b.data.clone()))
            .collect()
    }
}

/// Tape handles for one bound parameter set.
pub struct BoundIds {
    pub hm_gru: GruIds,
    pub dec_w: TensorId,
    pub dec_b: TensorId,
    pub ctx: Option<ContextIds>,
    pub omp_head: Option<(TensorId, TensorId)>,
}

impl BoundIds {
    pub fn new(params: &ParamSet, ids: &[TensorId], config: &ModelConfig) -> Result<BoundIds> {
        let get = |name: &str| -> Result<TensorId> {
            params
                .index_of(name)
                .map(|i| ids[i])
                .ok_or_else(|| Error::Config { msg: format!("missing parameter block `{name}`") })
        };
        let gru = |prefix: &str| -> Result<GruIds> {
            Ok(GruIds {
                wz: get(&format!("{prefix}.wz"))?,
                uz: get(&format!("{prefix}.uz"))?,
                bz: get(&format!("{prefix}.bz"))?,
                wr: get(&format!("{prefix}.wr"))?,
                ur: get(&format!("{prefix}.ur"))?,
                br: get(&format!("{prefix}.br"))?,
                wn: get(&format!("{prefix}.wn"))?,
                un: get(&format!("{prefix}.un"))?,
                bn: get(&format!("{prefix}.bn"))?,
            })
        };
        let ctx = if config.context_enabled {
            let head = if config.learn_interactions {
                Some((get("ctx.int.w1")?, get("ctx.int.w2")?))
            } else {
                None
            };
            Some(ContextIds { ec_w: get("ctx.ec.w")?, gru: gru("ctx.gru")?, head })
        } else {
            None
        };
        let omp_head = if config.object_motion {
            Some((get("omp.head.w")?, get("omp.head.b")?))
        } else {
            None
        };
        Ok(BoundIds { hm_gru: gru("hm.gru")?, dec_w: get("hm.dec.w")?, dec_b: get("hm.dec.b")?, ctx, omp_head })
    }
}

// ── Prediction bundle ─────────────────────────────────────────────────────

/// Forecast for one window, in absolute millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    /// Roster indices of the humans the pose forecasts belong to.
    pub humans: Vec<usize>,
    /// `poses[h][d]`: pose of human `humans[h]` at the d-th predicted frame.
    pub poses: Vec<Vec<Skeleton>>,
    /// `boxes[e][d]`: box of roster entity `e` at the d-th predicted frame.
    /// Present for object-motion variants and the zero-velocity baseline.
    pub boxes: Option<Vec<Vec<BoundingBox>>>,
    /// Recorded adjacency series as (window-relative frame, row-major N×N).
    pub interactions: Vec<(usize, Vec<f64>)>,
}

/// Repeats the last observed frame for the whole horizon.
pub fn zero_velocity_baseline(seq: &SceneSequence, window: SequenceWindow) -> Result<PredictionBundle> {
    let last_t = window.start + window.observed - 1;
    if last_t >= seq.num_frames() {
        return Err(Error::Eval {
            msg: format!("window needs frame {last_t} but sequence has {}", seq.num_frames()),
        });
    }
    let last = &seq.frames[last_t];
    let humans = seq.human_indices();
    let poses = humans
        .iter()
        .map(|&hi| {
            let skel = last.entities[hi].skeleton.clone().expect("human entities carry skeletons");
            vec![skel; window.predicted]
        })
        .collect();
    let boxes = last.entities.iter().map(|e| vec![e.bbox; window.predicted]).collect();
    Ok(PredictionBundle { humans, poses, boxes: Some(boxes), interactions: Vec::new() })
}

// ── Forward pass ──────────────────────────────────────────────────────────

pub struct ForwardResult {
    pub bundle: PredictionBundle,
    /// Scalar loss node; present when ground-truth future frames were used.
    pub loss: Option<TensorId>,
}

fn scaled_row(values: &[f64], scale: f64) -> Vec<f64> {
    values.iter().map(|v| v * scale).collect()
}

/// Node features with the coordinate blocks (box and joints) scaled.
fn scaled_features(seq: &SceneSequence, t: usize, k: usize, scale: f64) -> Result<Vec<f64>> {
    let mut x = build_node_features(&seq.roster, &seq.frames[t].entities, k)?;
    let f0 = feature_width(k);
    for row in x.chunks_mut(f0) {
        for v in &mut row[..6] {
            *v *= scale;
        }
        for v in &mut row[6 + k..] {
            *v *= scale;
        }
    }
    Ok(x)
}

fn stack_rows(tape: &mut Tape, ids: &[TensorId]) -> Result<TensorId> {
    let mut it = ids.iter();
    let mut acc = *it.next().ok_or(Error::InvalidDimension {
        op: "stack_rows",
        msg: "nothing to stack".into(),
    })?;
    for &id in it {
        acc = tape.concat_rows(acc, id)?;
    }
    Ok(acc)
}

/// L2 norm of the rowwise difference between `pred` and the constant `truth`.
fn residual_norm(tape: &mut Tape, pred: TensorId, truth: Vec<f64>) -> Result<TensorId> {
    let (r, c) = tape.shape(pred);
    let t = tape.constant(r, c, truth)?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}

/// Runs the configured variant over one window on an existing tape.
///
/// Encoding consumes ground-truth observed frames; decoding always consumes
/// the model's own predictions. Without object motion the context bank is
/// frozen after the last observed frame; with it, the context branch keeps
/// rolling on predicted features. When `compute_loss` is set the window's
/// future frames must exist and the combined residual norm is returned.
pub fn forward_on_tape(
    tape: &mut Tape,
    seq: &SceneSequence,
    window: SequenceWindow,
    config: &ModelConfig,
    bound: &BoundIds,
    compute_loss: bool,
) -> Result<ForwardResult> {
    config.validate()?;
    if window.observed != config.observed_frames || window.predicted != config.predicted_frames {
        return Err(Error::InvalidDimension {
            op: "forward",
            msg: format!(
                "window is {}+{} frames but the model expects {}+{}",
                window.observed, window.predicted, config.observed_frames, config.predicted_frames
            ),
        });
    }
    if seq.vocabulary.len() != config.vocab_size {
        return Err(Error::Config {
            msg: format!(
                "scene vocabulary has {} classes, model expects {}",
                seq.vocabulary.len(),
                config.vocab_size
            ),
        });
    }
    let needed = if compute_loss { window.end() } else { window.start + window.observed };
    if seq.num_frames() < needed {
        return Err(Error::InvalidDimension {
            op: "forward",
            msg: format!("window needs {needed} frames, sequence has {}", seq.num_frames()),
        });
    }

    let n = seq.num_entities();
    let humans = seq.human_indices();
    let k = config.vocab_size;
    let scale = if config.scale_inputs { 1.0e-3 } else { 1.0 };
    let unscale = if config.scale_inputs { 1.0e3 } else { 1.0 };
    let mode = if config.learn_interactions { InteractionMode::Learned } else { InteractionMode::Heuristic };

    // ---- Observed phase ----
    let obs_start = window.start;
    let mut interactions: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut bank = None;
    if let Some(ctx) = &bound.ctx {
        let mut xs = Vec::with_capacity(window.observed);
        let mut centers = Vec::with_capacity(window.observed);
        for step in 0..window.observed {
            let t = obs_start + step;
            let x = scaled_features(seq, t, k, scale)?;
            xs.push(tape.constant(n, feature_width(k), x)?);
            centers.push(seq.centers_at(t));
        }
        let (h, recorded) = context_observe(tape, &xs, &centers, mode, ctx, config.context_hidden)?;
        for (step, adj) in recorded.into_iter().enumerate() {
            interactions.push((step, adj));
        }
        bank = Some(h);
    }

    let mut human_hidden: Vec<TensorId> = Vec::with_capacity(humans.len());
    for &hi in &humans {
        let mut h = tape.constant(1, config.human_hidden, vec![0.0; config.human_hidden])?;
        for step in 0..window.observed {
            let t = obs_start + step;
            let pose = seq.frames[t].entities[hi]
                .skeleton
                .as_ref()
                .expect("human entities carry skeletons")
                .to_flat();
            let x = tape.constant(1, JOINT_DIM, scaled_row(&pose, scale))?;
            h = graph::gru_step(tape, x, h, &bound.hm_gru)?;
        }
        human_hidden.push(h);
    }

    // ---- Decode phase ----
    let last_obs = obs_start + window.observed - 1;
    let mut prev_pose: Vec<TensorId> = humans
        .iter()
        .map(|&hi| {
            let pose = seq.frames[last_obs].entities[hi].skeleton.as_ref().unwrap().to_flat();
            tape.constant(1, JOINT_DIM, scaled_row(&pose, scale))
        })
        .collect::<Result<_>>()?;
    // Context rows read by the decode heads; recomputed per step only when
    // the bank keeps rolling (object motion).
    let frozen_ctx_rows: Option<Vec<TensorId>> = match (&bank, config.object_motion) {
        (Some(h), false) => Some(
            humans
                .iter()
                .map(|&hi| tape.gather_rows(*h, &[hi]))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };

    let mut prev_box: Vec<Option<TensorId>> = vec![None; n];
    if config.object_motion {
        for (e, state) in seq.frames[last_obs].entities.iter().enumerate() {
            if seq.roster[e].type_index != seq.vocabulary.human_index() {
                let mut row = Vec::with_capacity(6);
                row.extend_from_slice(&state.bbox.min);
                row.extend_from_slice(&state.bbox.max);
                prev_box[e] = Some(tape.constant(1, 6, scaled_row(&row, scale))?);
            }
        }
    }

    let onehots: Vec<TensorId> = if config.object_motion {
        seq.roster
            .iter()
            .map(|m| tape.constant(1, k, seq.vocabulary.one_hot(m.type_index)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut pose_steps: Vec<Vec<TensorId>> = vec![Vec::with_capacity(window.predicted); humans.len()];
    let mut box_steps: Vec<Vec<TensorId>> = vec![Vec::with_capacity(window.predicted); n];

    for d in 0..window.predicted {
        // human branch; its context row comes from the current bank
        let mut frame_box: Vec<Option<TensorId>> = vec![None; n];
        for (idx, &hi) in humans.iter().enumerate() {
            let h = graph::gru_step(tape, prev_pose[idx], human_hidden[idx], &bound.hm_gru)?;
            human_hidden[idx] = h;
            let cat = match (&frozen_ctx_rows, &bank) {
                (Some(rows), _) => tape.concat_cols(h, rows[idx])?,
                (None, Some(bank)) => {
                    let row = tape.gather_rows(*bank, &[hi])?;
                    tape.concat_cols(h, row)?
                }
                (None, None) => h,
            };
            let vel = tape.matmul(cat, bound.dec_w)?;
            let vel = tape.add_row_bias(vel, bound.dec_b)?;
            let pose = tape.add(prev_pose[idx], vel)?;
            pose_steps[idx].push(pose);
            prev_pose[idx] = pose;
            if config.object_motion {
                frame_box[hi] = Some(tape.joint_aabb(pose)?);
            }
        }
        if config.object_motion {
            let (w, b) = bound.omp_head.expect("validated: object motion implies the head");
            let bank_id = bank.expect("validated: object motion implies context");
            for e in 0..n {
                if let Some(pb) = prev_box[e] {
                    let row = tape.gather_rows(bank_id, &[e])?;
                    let vel = tape.matmul(row, w)?;
                    let vel = tape.add_row_bias(vel, b)?;
                    let bx = tape.add(pb, vel)?;
                    frame_box[e] = Some(bx);
                    prev_box[e] = Some(bx);
                }
            }
            for e in 0..n {
                box_steps[e].push(frame_box[e].expect("every entity has a box by now"));
            }
            // roll the context into this predicted frame, feeding the next step
            if d + 1 < window.predicted {
                let ctx = bound.ctx.as_ref().expect("validated");
                let mut rows = Vec::with_capacity(n);
                for e in 0..n {
                    let joints = match humans.iter().position(|&hi| hi == e) {
                        Some(idx) => *pose_steps[idx].last().unwrap(),
                        None => tape.constant(1, JOINT_DIM, vec![0.0; JOINT_DIM])?,
                    };
                    let bo = tape.concat_cols(frame_box[e].unwrap(), onehots[e])?;
                    rows.push(tape.concat_cols(bo, joints)?);
                }
                let x_next = stack_rows(tape, &rows)?;
                let adj = match mode {
                    InteractionMode::Learned => {
                        let (w1, w2) = ctx.head.expect("validated");
                        let logits = graph::predict_interactions(tape, bank_id, w1, w2)?;
                        graph::normalize_interactions(tape, logits)?
                    }
                    InteractionMode::Heuristic => {
                        let centers: Vec<[f64; 3]> = (0..n)
                            .map(|e| {
                                if let Some(idx) = humans.iter().position(|&hi| hi == e) {
                                    let v = tape.value(*pose_steps[idx].last().unwrap());
                                    let mut c = [0.0; 3];
                                    for j in 0..JOINT_COUNT {
                                        for a in 0..3 {
                                            c[a] += v[3 * j + a] * unscale;
                                        }
                                    }
                                    for a in &mut c {
                                        *a /= JOINT_COUNT as f64;
                                    }
                                    c
                                } else {
                                    let v = tape.value(frame_box[e].unwrap());
                                    [
                                        (v[0] + v[3]) / 2.0 * unscale,
                                        (v[1] + v[4]) / 2.0 * unscale,
                                        (v[2] + v[5]) / 2.0 * unscale,
                                    ]
                                }
                            })
                            .collect();
                        tape.constant(n, n, graph::heuristic_adjacency(&centers))?
                    }
                };
                interactions.push((window.observed + d, tape.value(adj).to_vec()));
                bank = Some(context_frame_step(tape, x_next, adj, ctx.ec_w, &ctx.gru, bank_id)?);
            }
        }
    }

    // ---- Outputs in millimetres ----
    let mut pose_mm: Vec<Vec<TensorId>> = Vec::with_capacity(humans.len());
    for steps in &pose_steps {
        pose_mm.push(steps.iter().map(|&p| tape.scale(p, unscale)).collect());
    }
    let mut box_mm: Vec<Vec<TensorId>> = Vec::with_capacity(n);
    if config.object_motion {
        for steps in &box_steps {
            box_mm.push(steps.iter().map(|&b| tape.scale(b, unscale)).collect());
        }
    }

    let loss = if compute_loss {
        let mut terms: Vec<TensorId> = Vec::new();
        if !humans.is_empty() {
            let rows: Vec<TensorId> = pose_mm.iter().flatten().copied().collect();
            let pred = stack_rows(tape, &rows)?;
            let mut truth = Vec::with_capacity(humans.len() * window.predicted * JOINT_DIM);
            for &hi in &humans {
                for d in 0..window.predicted {
                    let t = window.first_predicted() + d;
                    truth.extend(seq.frames[t].entities[hi].skeleton.as_ref().unwrap().to_flat());
                }
            }
            terms.push(residual_norm(tape, pred, truth)?);
        }
        if config.object_motion {
            let mut rows: Vec<TensorId> = Vec::new();
            let mut truth = Vec::new();
            for (e, entity_rows) in box_mm.iter().enumerate() {
                if seq.roster[e].type_index == seq.vocabulary.human_index() {
                    continue;
                }
                rows.extend(entity_rows.iter().copied());
                for d in 0..window.predicted {
                    let t = window.first_predicted() + d;
                    let bx = &seq.frames[t].entities[e].bbox;
                    truth.extend_from_slice(&bx.min);
                    truth.extend_from_slice(&bx.max);
                }
            }
            if !rows.is_empty() {
                let pred = stack_rows(tape, &rows)?;
                terms.push(residual_norm(tape, pred, truth)?);
            }
        }
        let mut it = terms.into_iter();
        let first = it.next().ok_or(Error::Train { msg: "window has nothing to predict".into() })?;
        let mut total = first;
        for t in it {
            total = tape.add(total, t)?;
        }
        Some(total)
    } else {
        None
    };

    let poses = pose_mm
        .iter()
        .map(|steps| {
            steps
                .iter()
                .map(|&p| Skeleton::from_flat(tape.value(p)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let boxes = if config.object_motion {
        Some(
            box_mm
                .iter()
                .map(|steps| {
                    steps
                        .iter()
                        .map(|&b| {
                            let v = tape.value(b);
                            BoundingBox::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
                        })
                        .collect()
                })
                .collect(),
        )
    } else {
        None
    };

    Ok(ForwardResult {
        bundle: PredictionBundle { humans, poses, boxes, interactions },
        loss,
    })
}

/// Convenience inference entry point: fresh tape, no loss.
pub fn predict(
    seq: &SceneSequence,
    window: SequenceWindow,
    config: &ModelConfig,
    params: &ParamSet,
) -> Result<PredictionBundle> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape)?;
    let bound = BoundIds::new(params, &ids, config)?;
    Ok(forward_on_tape(&mut tape, seq, window, config, &bound, false)?.bundle)
}

// ── Checkpoint container ──────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"CTXMCKPT";
const CKPT_VERSION: u32 = 1;

/// Serializes configuration and parameters; bit-exact round trip.
pub fn checkpoint_bytes(config: &ModelConfig, params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config)?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.blocks.len() as u64).to_le_bytes());
    for b in &params.blocks {
        out.extend_from_slice(&(b.name.len() as u64).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.rows as u64).to_le_bytes());
        out.extend_from_slice(&(b.cols as u64).to_le_bytes());
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint { msg: "file truncated".into() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamSet)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint { msg: "not a checkpoint file (bad magic)".into() });
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint {
            msg: format!("unsupported format version {version}, expected {CKPT_VERSION}"),
        });
    }
    let cfg_len = c.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(cfg_len)?)?;
    let n_blocks = c.u64()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = c.u64()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint { msg: "block name is not utf-8".into() })?
            .to_string();
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let raw = c.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        blocks.push(ParamBlock { name, rows, cols, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint { msg: "trailing bytes after last block".into() });
    }
    let expected = block_shapes(&config);
    if blocks.len() != expected.len()
        || blocks
            .iter()
            .zip(&expected)
            .any(|(b, (n, r, cl))| b.name != *n || b.rows != *r || b.cols != *cl)
    {
        return Err(Error::Checkpoint { msg: "parameter blocks do not match the stored configuration".into() });
    }
    Ok((config, ParamSet { blocks }))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(config, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint { msg: format!("cannot open {}: {e}", path.display()) })?
        .read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}
