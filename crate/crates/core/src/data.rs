//! Scene representation, sequence schema, feature assembly, dataset
//! splitting, and train-time augmentation.
//!
//! Coordinates are absolute millimetres in a fixed world frame end-to-end.
//! A scene file is line-delimited JSON: one header record, then one frame
//! record per line. Validation errors carry 1-based line numbers.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const JOINT_COUNT: usize = 18;
/// Flattened skeleton width: 18 joints × 3 coordinates.
pub const JOINT_DIM: usize = JOINT_COUNT * 3;
/// Feature width contributed by the bounding box (min + max corners).
pub const BOX_DIM: usize = 6;

/// Ordered class-name list; the class named `human` designates entities that
/// carry a skeleton.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
    #[serde(skip)]
    human_index: usize,
}

pub const HUMAN_CLASS: &str = "human";

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let human_index = names
            .iter()
            .position(|n| n == HUMAN_CLASS)
            .ok_or_else(|| Error::Config { msg: format!("vocabulary must contain a `{HUMAN_CLASS}` class") })?;
        Ok(Vocabulary { names, human_index })
    }

    /// The 15 default classes: a person plus common household objects.
    pub fn default_classes() -> Self {
        let names = [
            "human", "table", "cup", "knife", "bottle", "box", "sponge", "whisk", "ladder",
            "bowl", "plate", "spoon", "pan", "chair", "broom",
        ];
        Vocabulary::new(names.iter().map(|s| s.to_string()).collect()).expect("default contains human")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn human_index(&self) -> usize {
        self.human_index
    }

    pub fn is_human(&self, index: usize) -> bool {
        index == self.human_index
    }

    /// Basis vector of length `len()` with a single 1 at `index`.
    pub fn one_hot(&self, index: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.names.len()];
        v[index] = 1.0;
        v
    }
}

/// Default 18-joint naming; `r_hand` (index 7) is the manipulation joint.
pub fn default_joint_names() -> Vec<String> {
    [
        "head", "neck", "chest", "pelvis", "r_shoulder", "r_elbow", "r_wrist", "r_hand",
        "l_shoulder", "l_elbow", "l_wrist", "l_hand", "r_hip", "r_knee", "r_ankle", "l_hip",
        "l_knee", "l_ankle",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Joint index used for grasping/attachment in generated scenes.
pub const HAND_JOINT: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        BoundingBox { min, max }
    }

    /// All 8 corners, in (min/max choice per axis) lexicographic order.
    pub fn vertices(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, v) in out.iter_mut().enumerate() {
            for (axis, c) in v.iter_mut().enumerate() {
                *c = if i >> axis & 1 == 0 { self.min[axis] } else { self.max[axis] };
            }
        }
        out
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }

    /// Smallest axis-aligned box containing all given points.
    pub fn of_points(points: &[[f64; 3]]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for axis in 0..3 {
                min[axis] = min[axis].min(p[axis]);
                max[axis] = max[axis].max(p[axis]);
            }
        }
        BoundingBox { min, max }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub joints: [[f64; 3]; JOINT_COUNT],
}

impl Skeleton {
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != JOINT_DIM {
            return Err(Error::InvalidDimension {
                op: "skeleton",
                msg: format!("expected {JOINT_DIM} coordinates, got {}", flat.len()),
            });
        }
        let mut joints = [[0.0; 3]; JOINT_COUNT];
        for (j, joint) in joints.iter_mut().enumerate() {
            joint.copy_from_slice(&flat[3 * j..3 * j + 3]);
        }
        Ok(Skeleton { joints })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(JOINT_DIM);
        for j in &self.joints {
            out.extend_from_slice(j);
        }
        out
    }

    /// Mean of all joints; rotation- and translation-equivariant, unlike the
    /// centre of the axis-aligned joint box.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for j in &self.joints {
            for axis in 0..3 {
                c[axis] += j[axis];
            }
        }
        for v in &mut c {
            *v /= JOINT_COUNT as f64;
        }
        c
    }

    pub fn aabb(&self) -> BoundingBox {
        BoundingBox::of_points(&self.joints)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityMeta {
    pub id: String,
    pub type_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityState {
    pub bbox: BoundingBox,
    /// Present iff the entity's class is the human class.
    pub skeleton: Option<Skeleton>,
}

impl EntityState {
    /// Interaction centre: joint mean for humans, box centre otherwise.
    pub fn center(&self) -> [f64; 3] {
        match &self.skeleton {
            Some(s) => s.center(),
            None => self.bbox.center(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub entities: Vec<EntityState>,
    /// True for frames appended by the predictor rather than observed.
    pub predicted: bool,
}

/// Time-ordered observations of a fixed entity roster at a uniform step.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub vocabulary: Vocabulary,
    pub joint_names: Vec<String>,
    pub step_ms: u32,
    pub roster: Vec<EntityMeta>,
    pub frames: Vec<Frame>,
}

impl SceneSequence {
    pub fn num_entities(&self) -> usize {
        self.roster.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Roster indices of entities of the human class.
    pub fn human_indices(&self) -> Vec<usize> {
        let h = self.vocabulary.human_index();
        self.roster
            .iter()
            .enumerate()
            .filter(|(_, m)| m.type_index == h)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.roster.iter().position(|m| m.id == id)
    }

    /// Interaction centres of every entity at one frame.
    pub fn centers_at(&self, t: usize) -> Vec<[f64; 3]> {
        self.frames[t].entities.iter().map(|e| e.center()).collect()
    }
}

// ── Window extraction ─────────────────────────────────────────────────────

/// One observation/prediction window: frames `start..start+observed` are
/// given, frames `start+observed..start+observed+predicted` are the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceWindow {
    pub start: usize,
    pub observed: usize,
    pub predicted: usize,
}

impl SequenceWindow {
    /// First predicted frame index within the sequence.
    pub fn first_predicted(&self) -> usize {
        self.start + self.observed
    }

    pub fn end(&self) -> usize {
        self.start + self.observed + self.predicted
    }
}

/// All windows at stride 1; empty when the sequence is too short.
pub fn extract_windows(seq: &SceneSequence, observed: usize, predicted: usize) -> Vec<SequenceWindow> {
    let total = observed + predicted;
    if seq.num_frames() < total {
        return Vec::new();
    }
    (0..=seq.num_frames() - total)
        .map(|start| SequenceWindow { start, observed, predicted })
        .collect()
}

// ── Feature assembly ──────────────────────────────────────────────────────

/// Width of one node-feature row: box (6) + one-hot type (K) + joints (54).
pub fn feature_width(k: usize) -> usize {
    BOX_DIM + k + JOINT_DIM
}

/// Per-frame node features, one row per roster entity.
/// Layout per row: `[box min,max (6), type one-hot (K), joints (54)]`;
/// non-human rows carry zeros in the joint block. The human row's box is the
/// axis-aligned box of its joints, so files need not store a consistent one.
pub fn build_node_features(roster: &[EntityMeta], states: &[EntityState], k: usize) -> Result<Vec<f64>> {
    if roster.len() != states.len() {
        return Err(Error::InvalidDimension {
            op: "build_node_features",
            msg: format!("roster has {} entities, frame has {}", roster.len(), states.len()),
        });
    }
    let f0 = feature_width(k);
    let mut out = Vec::with_capacity(roster.len() * f0);
    for (meta, state) in roster.iter().zip(states) {
        if meta.type_index >= k {
            return Err(Error::Config {
                msg: format!("type index {} out of vocabulary size {k}", meta.type_index),
            });
        }
        let bbox = match &state.skeleton {
            Some(s) => s.aabb(),
            None => state.bbox,
        };
        out.extend_from_slice(&bbox.min);
        out.extend_from_slice(&bbox.max);
        let base = out.len();
        out.resize(base + k, 0.0);
        out[base + meta.type_index] = 1.0;
        match &state.skeleton {
            Some(s) => out.extend(s.to_flat()),
            None => out.resize(out.len() + JOINT_DIM, 0.0),
        }
    }
    debug_assert_eq!(out.len(), roster.len() * f0);
    Ok(out)
}

// ── Resampling ────────────────────────────────────────────────────────────

/// Keeps every `(source_hz/10)`-th frame starting at 0, yielding a 100 ms step.
pub fn resample_100ms(raw: &SceneSequence, source_hz: u32) -> Result<SceneSequence> {
    if source_hz == 0 || !source_hz.is_multiple_of(10) {
        return Err(Error::Config {
            msg: format!("source rate {source_hz} Hz is not an integer multiple of 10 Hz"),
        });
    }
    let stride = (source_hz / 10) as usize;
    let frames = raw.frames.iter().step_by(stride).cloned().collect();
    Ok(SceneSequence { step_ms: 100, frames, ..raw.clone() })
}

// ── Dataset splitting ─────────────────────────────────────────────────────

/// Whole-sequence split indices: 60% train, 20% validation, 20% test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic partition by sequence: val and test take `floor(n/5)` each,
/// the remainder trains. No frame of any sequence crosses splits.
pub fn split_dataset(num_sequences: usize, seed: u64) -> Result<DatasetSplit> {
    if num_sequences < 5 {
        return Err(Error::Config {
            msg: format!("need at least 5 sequences to split, got {num_sequences}"),
        });
    }
    let mut order: Vec<usize> = (0..num_sequences).collect();
    let mut rng = crate::train::seeded_rng(seed);
    // Fisher–Yates so the partition depends only on the seed.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_val = num_sequences / 5;
    let n_test = num_sequences / 5;
    let n_train = num_sequences - n_val - n_test;
    Ok(DatasetSplit {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

// ── Augmentation ──────────────────────────────────────────────────────────

/// One rigid scene transform: rotation about the vertical axis then a
/// horizontal translation.
#[derive(Clone, Copy, Debug)]
pub struct AugmentTransform {
    pub angle_deg: f64,
    pub dx: f64,
    pub dy: f64,
}

impl AugmentTransform {
    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let th = self.angle_deg.to_radians();
        let (s, c) = th.sin_cos();
        [c * p[0] - s * p[1] + self.dx, s * p[0] + c * p[1] + self.dy, p[2]]
    }
}

/// Rotation uniform in (−180, 180] degrees, translation in (−1500, 1500) mm.
pub fn sample_augment(rng: &mut impl Rng) -> AugmentTransform {
    let u: f64 = rng.gen_range(0.0..1.0);
    AugmentTransform {
        angle_deg: 180.0 - 360.0 * u,
        dx: rng.gen_range(-1500.0..1500.0),
        dy: rng.gen_range(-1500.0..1500.0),
    }
}

/// Applies one transform to every joint and box corner of every frame;
/// boxes are re-axis-aligned from their 8 transformed corners.
pub fn augment_with(seq: &SceneSequence, t: AugmentTransform) -> SceneSequence {
    let mut out = seq.clone();
    for frame in &mut out.frames {
        for entity in &mut frame.entities {
            if let Some(skel) = &mut entity.skeleton {
                for j in &mut skel.joints {
                    *j = t.apply_point(*j);
                }
                entity.bbox = skel.aabb();
            } else {
                let moved: Vec<[f64; 3]> = entity.bbox.vertices().iter().map(|&v| t.apply_point(v)).collect();
                entity.bbox = BoundingBox::of_points(&moved);
            }
        }
    }
    out
}

pub fn augment(seq: &SceneSequence, rng: &mut impl Rng) -> SceneSequence {
    augment_with(seq, sample_augment(rng))
}

// ── Line-delimited schema ─────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    step_ms: u32,
    vocabulary: Vec<String>,
    joint_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct EntityRecord {
    id: String,
    #[serde(rename = "type")]
    type_name: String,
    #[serde(rename = "box")]
    bbox: BoxRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    t_index: usize,
    entities: Vec<EntityRecord>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    predicted: bool,
}

fn line_err(line: usize, msg: impl Into<String>) -> Error {
    Error::SceneData { line, msg: msg.into() }
}

/// Parses a scene file from any reader. Line 1 must be the header record.
pub fn read_scene(reader: impl BufRead) -> Result<SceneSequence> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| line_err(1, "empty file: missing header record"))??;
    let header: HeaderRecord =
        serde_json::from_str(&header_line).map_err(|e| line_err(1, format!("bad header: {e}")))?;
    if header.joint_names.len() != JOINT_COUNT {
        return Err(line_err(1, format!("joint_names must list {JOINT_COUNT} names, got {}", header.joint_names.len())));
    }
    let vocabulary = Vocabulary::new(header.vocabulary)
        .map_err(|e| line_err(1, e.to_string()))?;

    let mut roster: Vec<EntityMeta> = Vec::new();
    let mut frames: Vec<Frame> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|e| line_err(line_no, format!("bad frame record: {e}")))?;
        if rec.t_index != frames.len() {
            return Err(line_err(line_no, format!("t_index {} out of order, expected {}", rec.t_index, frames.len())));
        }
        let mut states = Vec::with_capacity(rec.entities.len());
        let mut metas = Vec::with_capacity(rec.entities.len());
        for e in &rec.entities {
            let type_index = vocabulary
                .index_of(&e.type_name)
                .ok_or_else(|| line_err(line_no, format!("unknown type `{}` for entity `{}`", e.type_name, e.id)))?;
            let is_human = vocabulary.is_human(type_index);
            let skeleton = match (&e.joints, is_human) {
                (Some(j), true) => Some(
                    Skeleton::from_flat(j)
                        .map_err(|err| line_err(line_no, format!("entity `{}`: {err}", e.id)))?,
                ),
                (None, true) => {
                    return Err(line_err(line_no, format!("human entity `{}` is missing joints", e.id)))
                }
                (Some(_), false) => {
                    return Err(line_err(line_no, format!("non-human entity `{}` carries joints", e.id)))
                }
                (None, false) => None,
            };
            for axis in 0..3 {
                if !(e.bbox.min[axis].is_finite() && e.bbox.max[axis].is_finite()) {
                    return Err(line_err(line_no, format!("entity `{}`: non-finite box", e.id)));
                }
                if e.bbox.min[axis] > e.bbox.max[axis] {
                    return Err(line_err(line_no, format!("entity `{}`: box min exceeds max on axis {axis}", e.id)));
                }
            }
            if let Some(s) = &skeleton {
                if s.joints.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(line_err(line_no, format!("entity `{}`: non-finite joint", e.id)));
                }
            }
            metas.push(EntityMeta { id: e.id.clone(), type_index });
            states.push(EntityState { bbox: BoundingBox::new(e.bbox.min, e.bbox.max), skeleton });
        }
        if frames.is_empty() {
            roster = metas;
        } else if metas != roster {
            return Err(line_err(line_no, "entity roster or order differs from the first frame"));
        }
        frames.push(Frame { entities: states, predicted: rec.predicted });
    }
    if frames.is_empty() {
        return Err(line_err(2, "scene has no frames"));
    }
    Ok(SceneSequence { vocabulary, joint_names: header.joint_names, step_ms: header.step_ms, roster, frames })
}

/// Serializes a scene in the line-delimited schema.
pub fn write_scene(seq: &SceneSequence, mut writer: impl Write) -> Result<()> {
    let header = HeaderRecord {
        step_ms: seq.step_ms,
        vocabulary: seq.vocabulary.names().to_vec(),
        joint_names: seq.joint_names.clone(),
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n")?;
    for (t, frame) in seq.frames.iter().enumerate() {
        let rec = FrameRecord {
            t_index: t,
            entities: seq
                .roster
                .iter()
                .zip(&frame.entities)
                .map(|(meta, state)| EntityRecord {
                    id: meta.id.clone(),
                    type_name: seq.vocabulary.name(meta.type_index).to_string(),
                    bbox: BoxRecord { min: state.bbox.min, max: state.bbox.max },
                    joints: state.skeleton.as_ref().map(|s| s.to_flat()),
                })
                .collect(),
            predicted: frame.predicted,
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_scene_file(path: &std::path::Path) -> Result<SceneSequence> {
    let file = std::fs::File::open(path)?;
    read_scene(std::io::BufReader::new(file))
}

pub fn save_scene_file(seq: &SceneSequence, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_scene(seq, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn object_state(min: [f64; 3], max: [f64; 3]) -> EntityState {
        EntityState { bbox: BoundingBox::new(min, max), skeleton: None }
    }

    fn human_state(at: [f64; 3]) -> EntityState {
        let skel = Skeleton { joints: [at; JOINT_COUNT] };
        EntityState { bbox: skel.aabb(), skeleton: Some(skel) }
    }

    fn tiny_scene() -> SceneSequence {
        let vocabulary = Vocabulary::default_classes();
        let cup = vocabulary.index_of("cup").unwrap();
        let roster = vec![
            EntityMeta { id: "h0".into(), type_index: vocabulary.human_index() },
            EntityMeta { id: "cup0".into(), type_index: cup },
        ];
        let frames = (0..3)
            .map(|t| Frame {
                entities: vec![
                    human_state([t as f64 * 10.0, 0.0, 1000.0]),
                    object_state([500.0, 0.0, 0.0], [600.0, 100.0, 100.0]),
                ],
                predicted: false,
            })
            .collect();
        SceneSequence {
            vocabulary,
            joint_names: default_joint_names(),
            step_ms: 100,
            roster,
            frames,
        }
    }

    #[test]
    fn feature_row_layout_for_object() {
        let vocab = Vocabulary::default_classes();
        let roster = vec![EntityMeta { id: "cup".into(), type_index: 3 }];
        let states = vec![object_state([0.0, 0.0, 0.0], [100.0, 100.0, 100.0])];
        let x = build_node_features(&roster, &states, vocab.len()).unwrap();
        assert_eq!(x.len(), feature_width(15));
        assert_eq!(&x[..6], &[0.0, 0.0, 0.0, 100.0, 100.0, 100.0]);
        let mut onehot = vec![0.0; 15];
        onehot[3] = 1.0;
        assert_eq!(&x[6..21], onehot.as_slice());
        assert!(x[21..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_row_human_box_degenerate() {
        let vocab = Vocabulary::default_classes();
        let roster = vec![EntityMeta { id: "h".into(), type_index: vocab.human_index() }];
        let states = vec![human_state([1.0, 2.0, 3.0])];
        let x = build_node_features(&roster, &states, vocab.len()).unwrap();
        assert_eq!(&x[..6], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        for j in 0..JOINT_COUNT {
            assert_eq!(&x[21 + 3 * j..21 + 3 * j + 3], &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn feature_rows_follow_roster_order() {
        let seq = tiny_scene();
        let x = build_node_features(&seq.roster, &seq.frames[0].entities, seq.vocabulary.len()).unwrap();
        let f0 = feature_width(seq.vocabulary.len());
        assert_eq!(x.len(), 2 * f0);
        // second row is the cup: one-hot at index 2 of the default classes
        assert_eq!(x[f0 + 6 + 2], 1.0);
    }

    #[test]
    fn feature_readback_reconstructs_inputs() {
        let seq = tiny_scene();
        let k = seq.vocabulary.len();
        let f0 = feature_width(k);
        let x = build_node_features(&seq.roster, &seq.frames[1].entities, k).unwrap();
        for (i, state) in seq.frames[1].entities.iter().enumerate() {
            let row = &x[i * f0..(i + 1) * f0];
            let expected_box = match &state.skeleton {
                Some(s) => s.aabb(),
                None => state.bbox,
            };
            assert_eq!(&row[..3], &expected_box.min);
            assert_eq!(&row[3..6], &expected_box.max);
            let type_index = row[6..6 + k].iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(type_index, seq.roster[i].type_index);
            match &state.skeleton {
                Some(s) => assert_eq!(&row[6 + k..], s.to_flat().as_slice()),
                None => assert!(row[6 + k..].iter().all(|&v| v == 0.0)),
            }
        }
    }

    #[test]
    fn resample_strides() {
        let mut seq = tiny_scene();
        seq.frames = (0..50)
            .map(|t| Frame {
                entities: vec![
                    human_state([t as f64, 0.0, 0.0]),
                    object_state([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]),
                ],
                predicted: false,
            })
            .collect();
        let out = resample_100ms(&seq, 100).unwrap();
        assert_eq!(out.num_frames(), 5);
        for (i, f) in out.frames.iter().enumerate() {
            assert_eq!(f.entities[0].skeleton.as_ref().unwrap().joints[0][0], (i * 10) as f64);
        }
        let identity = resample_100ms(&seq, 10).unwrap();
        assert_eq!(identity.num_frames(), 50);
        let thirty = resample_100ms(&seq, 30).unwrap();
        assert_eq!(thirty.num_frames(), 17); // frames 0,3,…,48
        assert!(resample_100ms(&seq, 25).is_err());
    }

    #[test]
    fn split_ratios() {
        let s = split_dataset(10, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s5 = split_dataset(5, 1).unwrap();
        assert_eq!((s5.train.len(), s5.val.len(), s5.test.len()), (3, 1, 1));
        assert!(split_dataset(4, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_dataset(23, 99).unwrap();
        let b = split_dataset(23, 99).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn rotation_maps_axis_points() {
        let t = AugmentTransform { angle_deg: 90.0, dx: 0.0, dy: 0.0 };
        let p = t.apply_point([1000.0, 0.0, 0.0]);
        assert!((p[0] - 0.0).abs() < 1e-9);
        assert!((p[1] - 1000.0).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn translation_moves_origin() {
        let t = AugmentTransform { angle_deg: 0.0, dx: 100.0, dy: -200.0 };
        assert_eq!(t.apply_point([0.0, 0.0, 0.0]), [100.0, -200.0, 0.0]);
    }

    #[test]
    fn augment_preserves_center_distances() {
        let seq = tiny_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let out = augment(&seq, &mut rng);
            for t in 0..seq.num_frames() {
                let a = seq.centers_at(t);
                let b = out.centers_at(t);
                for i in 0..a.len() {
                    for j in 0..a.len() {
                        let da = dist(a[i], a[j]);
                        let db = dist(b[i], b[j]);
                        assert!((da - db).abs() < 1e-9, "distance changed: {da} vs {db}");
                    }
                }
            }
        }
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn sampled_angles_cover_the_half_open_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let t = sample_augment(&mut rng);
            assert!(t.angle_deg > -180.0 && t.angle_deg <= 180.0);
            assert!(t.dx > -1500.0 && t.dx < 1500.0);
            assert!(t.dy > -1500.0 && t.dy < 1500.0);
        }
    }

    #[test]
    fn scene_round_trip() {
        let seq = tiny_scene();
        let mut buf = Vec::new();
        write_scene(&seq, &mut buf).unwrap();
        let back = read_scene(buf.as_slice()).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let seq = tiny_scene();
        let mut buf = Vec::new();
        write_scene(&seq, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{not json";
        let joined = lines.join("\n");
        match read_scene(joined.as_bytes()) {
            Err(Error::SceneData { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected line-tagged error, got {other:?}"),
        }
    }

    #[test]
    fn schema_rejects_unknown_type() {
        let header = r#"{"step_ms":100,"vocabulary":["human","table"],"joint_names":["a","b","c","d","e","f","g","h","i","j","k","l","m","n","o","p","q","r"]}"#;
        let frame = r#"{"t_index":0,"entities":[{"id":"x","type":"spaceship","box":{"min":[0,0,0],"max":[1,1,1]}}]}"#;
        let text = format!("{header}\n{frame}");
        match read_scene(text.as_bytes()) {
            Err(Error::SceneData { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("spaceship"));
            }
            other => panic!("expected type error, got {other:?}"),
        }
    }

    #[test]
    fn schema_rejects_roster_change() {
        let seq = tiny_scene();
        let mut buf = Vec::new();
        write_scene(&seq, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(|s| s.to_string()).collect();
        lines[3] = lines[3].replace("cup0", "cup1");
        let joined = lines.join("\n");
        match read_scene(joined.as_bytes()) {
            Err(Error::SceneData { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected roster error, got {other:?}"),
        }
    }

    #[test]
    fn schema_rejects_human_without_joints() {
        let header = r#"{"step_ms":100,"vocabulary":["human"],"joint_names":["a","b","c","d","e","f","g","h","i","j","k","l","m","n","o","p","q","r"]}"#;
        let frame = r#"{"t_index":0,"entities":[{"id":"h","type":"human","box":{"min":[0,0,0],"max":[1,1,1]}}]}"#;
        let text = format!("{header}\n{frame}");
        assert!(matches!(read_scene(text.as_bytes()), Err(Error::SceneData { line: 2, .. })));
    }

    #[test]
    fn window_extraction_stride_one() {
        let mut seq = tiny_scene();
        seq.frames = std::iter::repeat_with(|| seq.frames[0].clone()).take(35).collect();
        let w = extract_windows(&seq, 10, 20);
        assert_eq!(w.len(), 6);
        assert_eq!(w[0].start, 0);
        assert_eq!(w[5].start, 5);
        assert_eq!(w[0].first_predicted(), 10);
        assert_eq!(w[0].end(), 30);
        seq.frames.truncate(29);
        assert!(extract_windows(&seq, 10, 20).is_empty());
    }

    #[test]
    fn box_vertices_enumerate_all_corners() {
        let b = BoundingBox::new([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
        let v = b.vertices();
        assert_eq!(v.len(), 8);
        let mut unique: Vec<_> = v.to_vec();
        unique.sort_by(|a, b| a.partial_cmp(b).unwrap());
        unique.dedup();
        assert_eq!(unique.len(), 8);
        assert!(v.contains(&[0.0, 0.0, 0.0]));
        assert!(v.contains(&[1.0, 2.0, 3.0]));
        assert!(v.contains(&[1.0, 0.0, 3.0]));
    }
}
