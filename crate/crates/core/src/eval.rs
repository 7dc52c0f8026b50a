//! Horizon-wise mean Euclidean error for human joints and object-box
//! vertices, report tables, and aggregation of interaction weights into
//! per-type-pair curves.

use crate::data::{BoundingBox, SceneSequence, SequenceWindow, Skeleton};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ParamSet, PredictionBundle};
use std::collections::BTreeMap;

// ── Per-window metrics ────────────────────────────────────────────────────

/// Mean over the 18 joints of the 3D Euclidean distance.
pub fn skeleton_error(a: &Skeleton, b: &Skeleton) -> f64 {
    let n = a.joints.len();
    let sum: f64 = a
        .joints
        .iter()
        .zip(&b.joints)
        .map(|(p, q)| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .sum();
    sum / n as f64
}

/// Mean over the 8 box vertices of the vertex-wise Euclidean distance.
pub fn box_vertex_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let va = a.vertices();
    let vb = b.vertices();
    let sum: f64 = va
        .iter()
        .zip(&vb)
        .map(|(p, q)| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .sum();
    sum / 8.0
}

fn check_horizon(seq: &SceneSequence, window: SequenceWindow, horizon: usize) -> Result<usize> {
    if horizon == 0 || horizon > window.predicted {
        return Err(Error::Eval {
            msg: format!("horizon {horizon} outside 1..={}", window.predicted),
        });
    }
    let t = window.first_predicted() + horizon - 1;
    if t >= seq.num_frames() {
        return Err(Error::Eval {
            msg: format!("horizon {horizon} needs frame {t}, sequence has {}", seq.num_frames()),
        });
    }
    Ok(t)
}

/// Error at `horizon` (1-based, 100 ms per step) averaged over the humans of
/// one window.
pub fn window_human_error(
    bundle: &PredictionBundle,
    seq: &SceneSequence,
    window: SequenceWindow,
    horizon: usize,
) -> Result<f64> {
    let t = check_horizon(seq, window, horizon)?;
    if bundle.humans.is_empty() {
        return Err(Error::Eval { msg: "window contains no humans".into() });
    }
    let mut sum = 0.0;
    for (idx, &hi) in bundle.humans.iter().enumerate() {
        let truth = seq.frames[t].entities[hi]
            .skeleton
            .as_ref()
            .ok_or_else(|| Error::Eval { msg: format!("entity {hi} lost its skeleton") })?;
        sum += skeleton_error(&bundle.poses[idx][horizon - 1], truth);
    }
    Ok(sum / bundle.humans.len() as f64)
}

/// Error at `horizon` averaged over the non-human entities of one window.
pub fn window_object_error(
    bundle: &PredictionBundle,
    seq: &SceneSequence,
    window: SequenceWindow,
    horizon: usize,
) -> Result<f64> {
    let t = check_horizon(seq, window, horizon)?;
    let boxes = bundle
        .boxes
        .as_ref()
        .ok_or_else(|| Error::Eval { msg: "prediction carries no object boxes".into() })?;
    let human = seq.vocabulary.human_index();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, meta) in seq.roster.iter().enumerate() {
        if meta.type_index == human {
            continue;
        }
        sum += box_vertex_error(&boxes[e][horizon - 1], &seq.frames[t].entities[e].bbox);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Eval { msg: "window contains no objects".into() });
    }
    Ok(sum / count as f64)
}

// ── Aggregation over windows ──────────────────────────────────────────────

/// All full windows of every sequence, keyed by sequence index.
pub fn all_windows(
    seqs: &[SceneSequence],
    observed: usize,
    predicted: usize,
) -> Vec<(usize, SequenceWindow)> {
    let mut out = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        for w in crate::data::extract_windows(seq, observed, predicted) {
            out.push((si, w));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct HorizonErrors {
    /// Mean human error per horizon (index 0 = 100 ms).
    pub human: Vec<f64>,
    /// Mean object error per horizon when the model predicts boxes.
    pub object: Option<Vec<f64>>,
    pub windows: usize,
}

/// Evaluates one model (or the zero-velocity baseline when `model` is None)
/// over the given windows, averaging each horizon with equal weight per
/// window.
pub fn horizon_errors(
    seqs: &[SceneSequence],
    windows: &[(usize, SequenceWindow)],
    predicted: usize,
    model: Option<(&ModelConfig, &ParamSet)>,
) -> Result<HorizonErrors> {
    if windows.is_empty() {
        return Err(Error::Eval { msg: "no evaluation windows".into() });
    }
    let mut human = vec![0.0; predicted];
    let mut object = vec![0.0; predicted];
    let mut with_boxes = true;
    for &(si, w) in windows {
        let seq = &seqs[si];
        let bundle = match model {
            None => model::zero_velocity_baseline(seq, w)?,
            Some((config, params)) => model::predict(seq, w, config, params)?,
        };
        with_boxes &= bundle.boxes.is_some();
        for h in 1..=predicted {
            human[h - 1] += window_human_error(&bundle, seq, w, h)?;
            if with_boxes {
                object[h - 1] += window_object_error(&bundle, seq, w, h)?;
            }
        }
    }
    let n = windows.len() as f64;
    for v in &mut human {
        *v /= n;
    }
    let object = if with_boxes {
        for v in &mut object {
            *v /= n;
        }
        Some(object)
    } else {
        None
    };
    Ok(HorizonErrors { human, object, windows: windows.len() })
}

// ── Report tables ─────────────────────────────────────────────────────────

pub const COARSE_HORIZONS_MS: [usize; 4] = [500, 1000, 1500, 2000];

/// Rows of per-horizon errors; a `None` row renders as dashes.
#[derive(Clone, Debug)]
pub struct HorizonTable {
    pub horizons_ms: Vec<usize>,
    pub rows: Vec<(String, Option<Vec<f64>>)>,
}

impl HorizonTable {
    pub fn new(predicted: usize) -> HorizonTable {
        HorizonTable { horizons_ms: (1..=predicted).map(|h| h * 100).collect(), rows: Vec::new() }
    }

    pub fn push_row(&mut self, label: &str, entries: Option<Vec<f64>>) -> Result<()> {
        if let Some(e) = &entries {
            if e.len() != self.horizons_ms.len() {
                return Err(Error::Eval {
                    msg: format!("row `{label}` has {} entries, expected {}", e.len(), self.horizons_ms.len()),
                });
            }
        }
        self.rows.push((label.to_string(), entries));
        Ok(())
    }

    /// The {0.5, 1, 1.5, 2} s column subset.
    pub fn coarse(&self) -> HorizonTable {
        let keep: Vec<usize> = self
            .horizons_ms
            .iter()
            .enumerate()
            .filter(|(_, ms)| COARSE_HORIZONS_MS.contains(ms))
            .map(|(i, _)| i)
            .collect();
        HorizonTable {
            horizons_ms: keep.iter().map(|&i| self.horizons_ms[i]).collect(),
            rows: self
                .rows
                .iter()
                .map(|(label, entries)| {
                    (
                        label.clone(),
                        entries.as_ref().map(|e| keep.iter().map(|&i| e[i]).collect()),
                    )
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for ms in &self.horizons_ms {
            out.push_str(&format!(",{}", *ms as f64 / 1000.0));
        }
        out.push('\n');
        for (label, entries) in &self.rows {
            out.push_str(label);
            match entries {
                Some(e) => {
                    for v in e {
                        out.push_str(&format!(",{v}"));
                    }
                }
                None => {
                    for _ in &self.horizons_ms {
                        out.push_str(",-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text; errors in mm with one decimal.
    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(5).max("model".len());
        let mut cells: Vec<Vec<String>> = Vec::new();
        for (_, entries) in &self.rows {
            cells.push(match entries {
                Some(e) => e.iter().map(|v| format!("{v:.1}")).collect(),
                None => self.horizons_ms.iter().map(|_| "-".to_string()).collect(),
            });
        }
        let mut col_w: Vec<usize> = self
            .horizons_ms
            .iter()
            .map(|ms| format!("{}", *ms as f64 / 1000.0).len())
            .collect();
        for row in &cells {
            for (i, c) in row.iter().enumerate() {
                col_w[i] = col_w[i].max(c.len());
            }
        }
        let mut out = format!("{:<label_w$}", "model");
        for (i, ms) in self.horizons_ms.iter().enumerate() {
            out.push_str(&format!("  {:>w$}", *ms as f64 / 1000.0, w = col_w[i]));
        }
        out.push('\n');
        for ((label, _), row) in self.rows.iter().zip(&cells) {
            out.push_str(&format!("{label:<label_w$}"));
            for (i, c) in row.iter().enumerate() {
                out.push_str(&format!("  {:>w$}", c, w = col_w[i]));
            }
            out.push('\n');
        }
        out
    }
}

// ── Interaction curves ────────────────────────────────────────────────────

/// One adjacency entry tagged with entity types: the weight of influence of
/// `src_type` on `dst_type` at a window-relative frame.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSample {
    pub frame: usize,
    pub src_type: String,
    pub dst_type: String,
    pub self_pair: bool,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub frame: usize,
    pub mean: f64,
    pub samples: usize,
}

/// Flattens a prediction's adjacency series into type-tagged samples. Entry
/// (i, j) of a matrix is the influence of entity j (src) on entity i (dst).
pub fn tag_interactions(seq: &SceneSequence, bundle: &PredictionBundle) -> Vec<InteractionSample> {
    let n = seq.num_entities();
    let type_name = |e: usize| seq.vocabulary.names()[seq.roster[e].type_index].clone();
    let mut out = Vec::new();
    for (frame, adj) in &bundle.interactions {
        for i in 0..n {
            for j in 0..n {
                out.push(InteractionSample {
                    frame: *frame,
                    src_type: type_name(j),
                    dst_type: type_name(i),
                    self_pair: i == j,
                    weight: adj[i * n + j],
                });
            }
        }
    }
    out
}

fn pool(samples: impl Iterator<Item = (usize, f64)>) -> Vec<CurvePoint> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (frame, w) in samples {
        let e = acc.entry(frame).or_insert((0.0, 0));
        e.0 += w;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(frame, (sum, n))| CurvePoint { frame, mean: sum / n as f64, samples: n })
        .collect()
}

/// Mean weight per frame for every ordered (src_type, dst_type) pair.
pub fn interaction_curves(
    samples: &[InteractionSample],
) -> BTreeMap<(String, String), Vec<CurvePoint>> {
    let mut keys: BTreeMap<(String, String), Vec<(usize, f64)>> = BTreeMap::new();
    for s in samples {
        keys.entry((s.src_type.clone(), s.dst_type.clone()))
            .or_default()
            .push((s.frame, s.weight));
    }
    keys.into_iter().map(|(k, v)| (k, pool(v.into_iter()))).collect()
}

/// Mean diagonal weight per frame, keyed by entity type.
pub fn self_interaction_curves(samples: &[InteractionSample]) -> BTreeMap<String, Vec<CurvePoint>> {
    let mut keys: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.self_pair) {
        keys.entry(s.src_type.clone()).or_default().push((s.frame, s.weight));
    }
    keys.into_iter().map(|(k, v)| (k, pool(v.into_iter()))).collect()
}
