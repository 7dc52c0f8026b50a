//! Deterministic desk-scale scene generator with known causal structure:
//! a stick-figure human walks, picks up and carries an object, optionally
//! hands it to a second human, while distractor objects sit still. The
//! frames when the rigid hand-follow constraint is active are recorded as
//! ground-truth directed interaction pairs.

use crate::data::{
    default_joint_names, BoundingBox, EntityMeta, EntityState, Frame, SceneSequence, Skeleton,
    Vocabulary, HAND_JOINT, JOINT_COUNT,
};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// No joint or box corner may move more than this between consecutive
/// noise-free frames; generation keeps a margin below it.
pub const MAX_STEP_MM: f64 = 250.0;

// ── Scenario specification ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    PickPlace,
    PassObject,
    StaticClutter,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Option<ScenarioKind> {
        Some(match s {
            "pick_place" => ScenarioKind::PickPlace,
            "pass_object" => ScenarioKind::PassObject,
            "static_clutter" => ScenarioKind::StaticClutter,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::PickPlace => "pick_place",
            ScenarioKind::PassObject => "pass_object",
            ScenarioKind::StaticClutter => "static_clutter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Frames at 100 ms; at least 30 (one full observation+prediction window).
    pub duration: usize,
    /// Standard deviation of the additive Gaussian coordinate noise.
    pub noise_mm: f64,
    pub seed: u64,
    /// Class names of extra stationary objects placed away from the action.
    pub distractors: Vec<String>,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> ScenarioSpec {
        let distractors = match kind {
            ScenarioKind::PickPlace => vec!["bottle".into(), "plate".into()],
            ScenarioKind::PassObject => vec!["bottle".into()],
            ScenarioKind::StaticClutter => vec!["box".into(), "bowl".into(), "plate".into()],
        };
        ScenarioSpec { kind, duration: 40, noise_mm: 5.0, seed: 0, distractors }
    }

    fn validate(&self, vocabulary: &Vocabulary) -> Result<()> {
        if self.duration < 30 {
            return Err(Error::Config {
                msg: format!("scenario duration {} is below the 30-frame minimum", self.duration),
            });
        }
        if !(self.noise_mm.is_finite() && self.noise_mm >= 0.0) {
            return Err(Error::Config { msg: "noise amplitude must be finite and non-negative".into() });
        }
        for d in &self.distractors {
            if vocabulary.index_of(d).is_none() {
                return Err(Error::Config { msg: format!("unknown distractor class `{d}`") });
            }
        }
        Ok(())
    }
}

// ── Ground-truth interactions ─────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionPair {
    pub frame: usize,
    /// Influencing entity (the carrier).
    pub src: String,
    /// Influenced entity (the carried object).
    pub dst: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInteractions {
    pub pairs: Vec<InteractionPair>,
}

impl GroundTruthInteractions {
    pub fn frames_for(&self, src: &str, dst: &str) -> Vec<usize> {
        self.pairs.iter().filter(|p| p.src == src && p.dst == dst).map(|p| p.frame).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,src,dst\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{},{}\n", p.frame, p.src, p.dst));
        }
        out
    }
}

// ── Stick figure ──────────────────────────────────────────────────────────

/// World-frame offset of the carrying hand from the pelvis root (facing +x).
const HAND_OFFSET: [f64; 3] = [250.0, -150.0, -150.0];
/// Carried-object center relative to the hand joint.
const CARRY_OFFSET: [f64; 3] = [0.0, 0.0, -80.0];
/// Distance walked per radian of leg swing.
const STRIDE_MM: f64 = 200.0;

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    sub3(a, b).iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn lerp3(a: [f64; 3], b: [f64; 3], u: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u, a[2] + (b[2] - a[2]) * u]
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Fixed kinematic layout: all joints are offsets from the pelvis root, legs
/// swing with the walk phase. `dir` = +1 faces +x, −1 faces −x (the offsets
/// rotate half a turn about z).
fn stick_pose(root: [f64; 3], dir: f64, phase: f64) -> Skeleton {
    let sw = 50.0 * phase.sin();
    let sw2 = 60.0 * (phase - 0.5).sin();
    let rel: [[f64; 3]; JOINT_COUNT] = [
        [0.0, 0.0, 620.0],     // head
        [0.0, 0.0, 520.0],     // neck
        [0.0, 0.0, 300.0],     // chest
        [0.0, 0.0, 0.0],       // pelvis
        [0.0, -180.0, 420.0],  // r_shoulder
        [120.0, -200.0, 150.0],
        [210.0, -170.0, -60.0],
        HAND_OFFSET,           // r_hand
        [0.0, 180.0, 420.0],   // l_shoulder
        [50.0, 210.0, 150.0],
        [90.0, 240.0, -70.0],
        [110.0, 260.0, -140.0],
        [0.0, -100.0, -80.0],  // r_hip
        [sw, -110.0, -520.0],
        [sw2, -110.0, -950.0],
        [0.0, 100.0, -80.0],   // l_hip
        [-sw, 110.0, -520.0],
        [-sw2, 110.0, -950.0],
    ];
    let mut joints = [[0.0; 3]; JOINT_COUNT];
    for (j, r) in rel.iter().enumerate() {
        joints[j] = [root[0] + dir * r[0], root[1] + dir * r[1], root[2] + r[2]];
    }
    Skeleton { joints }
}

/// Piecewise walk along waypoints with smoothstep easing per leg of the
/// journey. Returns per-frame roots and accumulated stride phases.
struct Walk {
    roots: Vec<[f64; 3]>,
    phases: Vec<f64>,
}

fn walk_schedule(legs: &[([f64; 3], [f64; 3], usize, usize)], duration: usize) -> Walk {
    let mut roots = vec![legs[0].0; duration];
    for &(from, to, start, end) in legs {
        for (t, root) in roots.iter_mut().enumerate().skip(start) {
            let u = if t >= end { 1.0 } else { smoothstep((t - start) as f64 / (end - start) as f64) };
            *root = lerp3(from, to, u);
        }
    }
    let mut phases = vec![0.0; duration];
    for t in 1..duration {
        phases[t] = phases[t - 1] + dist3(roots[t], roots[t - 1]) / STRIDE_MM;
    }
    Walk { roots, phases }
}

fn box_at(center: [f64; 3], half: [f64; 3]) -> BoundingBox {
    BoundingBox::new(sub3(center, half), add3(center, half))
}

const CUP_HALF: [f64; 3] = [40.0, 40.0, 50.0];
const TABLE_HALF: [f64; 3] = [500.0, 350.0, 25.0];

/// Walking legs are clamped so the smoothstep peak speed (1.5x the mean)
/// keeps root steps at or below this, leaving leg-swing headroom under
/// MAX_STEP_MM.
const SAFE_ROOT_STEP_MM: f64 = 185.0;

/// Pulls `to` toward `from` in the ground plane until a walk of `frames`
/// frames fits the per-frame step budget. Height is never clamped.
fn clamp_leg_xy(from: [f64; 3], to: [f64; 3], frames: usize) -> [f64; 3] {
    let budget = frames as f64 * SAFE_ROOT_STEP_MM / 1.5;
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let len = (dx * dx + dy * dy).sqrt();
    if len <= budget {
        return to;
    }
    let s = budget / len;
    [from[0] + dx * s, from[1] + dy * s, to[2]]
}

/// Stationary props scattered in a band north of the walking corridor, away
/// from the action.
fn sample_distractors(rng: &mut impl Rng, count: usize) -> Vec<BoundingBox> {
    (0..count)
        .map(|_| {
            let center = [
                rng.gen_range(600.0..3400.0),
                rng.gen_range(2100.0..2800.0),
                rng.gen_range(380.0..520.0),
            ];
            let half =
                [rng.gen_range(45.0..85.0), rng.gen_range(45.0..80.0), rng.gen_range(70.0..110.0)];
            box_at(center, half)
        })
        .collect()
}

// ── Generation ────────────────────────────────────────────────────────────

fn build_cast(
    spec: &ScenarioSpec,
    vocabulary: &Vocabulary,
    core: &[(&str, &str)],
) -> Result<Vec<EntityMeta>> {
    let mut roster = Vec::new();
    for (id, class) in core {
        let type_index = vocabulary
            .index_of(class)
            .ok_or_else(|| Error::Config { msg: format!("unknown class `{class}`") })?;
        roster.push(EntityMeta { id: id.to_string(), type_index });
    }
    for (i, class) in spec.distractors.iter().enumerate() {
        let type_index = vocabulary.index_of(class).unwrap();
        roster.push(EntityMeta { id: format!("{class}_{i}"), type_index });
    }
    Ok(roster)
}

/// Builds the configured scenario. The same spec always yields the same
/// sequence; the seed drives both the prop layout and the noise, so scenes
/// differ across seeds even when the noise amplitude is zero. The causal pair
/// list covers exactly the frames where an object center is slaved to a hand
/// joint.
pub fn generate(spec: &ScenarioSpec) -> Result<(SceneSequence, GroundTruthInteractions)> {
    let vocabulary = Vocabulary::default_classes();
    spec.validate(&vocabulary)?;
    let d = spec.duration;
    let mut truth = GroundTruthInteractions::default();
    let mut rng = crate::train::seeded_rng(spec.seed);

    let (roster, mut frames) = match spec.kind {
        ScenarioKind::PickPlace => {
            let cast = build_cast(spec, &vocabulary, &[("actor", "human"), ("cup", "cup"), ("table", "table")])?;
            let r0 = [rng.gen_range(300.0..500.0), rng.gen_range(150.0..450.0), 1000.0];
            let cup0 = [
                rng.gen_range(1400.0..1900.0),
                rng.gen_range(250.0..850.0),
                rng.gen_range(700.0..800.0),
            ];
            let table_c =
                [rng.gen_range(2700.0..3400.0), rng.gen_range(900.0..1500.0), 700.0];
            let clutter = sample_distractors(&mut rng, spec.distractors.len());
            let t_reach = (3 * d) / 10;
            let t_place = (8 * d) / 10;
            // Each walking leg must fit its step budget: pull the prop (and
            // with it the walk target) toward the walker, then re-derive the
            // prop from the clamped target so reach and place geometry hold
            // exactly.
            let r1 = clamp_leg_xy(r0, sub3(sub3(cup0, CARRY_OFFSET), HAND_OFFSET), t_reach);
            let cup0 = add3(add3(r1, HAND_OFFSET), CARRY_OFFSET);
            let place = [table_c[0], table_c[1], table_c[2] + TABLE_HALF[2] + CUP_HALF[2]];
            let r2 = clamp_leg_xy(
                r1,
                sub3(sub3(place, CARRY_OFFSET), HAND_OFFSET),
                t_place - t_reach,
            );
            let place = add3(add3(r2, HAND_OFFSET), CARRY_OFFSET);
            let table_c = [place[0], place[1], place[2] - TABLE_HALF[2] - CUP_HALF[2]];
            let walk = walk_schedule(&[(r0, r1, 0, t_reach), (r1, r2, t_reach, t_place)], d);
            let frames: Vec<Frame> = (0..d)
                .map(|t| {
                    let skel = stick_pose(walk.roots[t], 1.0, walk.phases[t]);
                    let cup_center = if t < t_reach {
                        cup0
                    } else if t <= t_place {
                        truth.pairs.push(InteractionPair { frame: t, src: "actor".into(), dst: "cup".into() });
                        add3(skel.joints[HAND_JOINT], CARRY_OFFSET)
                    } else {
                        place
                    };
                    Frame {
                        entities: std::iter::empty()
                            .chain([
                                EntityState { bbox: skel.aabb(), skeleton: Some(skel.clone()) },
                                EntityState { bbox: box_at(cup_center, CUP_HALF), skeleton: None },
                                EntityState { bbox: box_at(table_c, TABLE_HALF), skeleton: None },
                            ])
                            .chain(clutter.iter().map(|b| EntityState {
                                bbox: *b,
                                skeleton: None,
                            }))
                            .collect(),
                        predicted: false,
                    }
                })
                .collect();
            (cast, frames)
        }
        ScenarioKind::PassObject => {
            let cast = build_cast(spec, &vocabulary, &[("actor_a", "human"), ("actor_b", "human"), ("cup", "cup")])?;
            let ra0 = [rng.gen_range(300.0..500.0), rng.gen_range(150.0..450.0), 1000.0];
            let rb = [rng.gen_range(2300.0..2900.0), rng.gen_range(700.0..1100.0), 1000.0];
            let stroll = [rng.gen_range(300.0..700.0), rng.gen_range(600.0..1100.0), 0.0];
            let clutter = sample_distractors(&mut rng, spec.distractors.len());
            let t_x = d / 2;
            let t_end = (9 * d) / 10;
            // B faces −x, so its hand offset is the half-turn of HAND_OFFSET;
            // A walks to just short of B's hand. Clamping A's approach shifts
            // B (and the meeting point) along with it.
            let hand_for = |rb: [f64; 3]| add3(rb, [-HAND_OFFSET[0], -HAND_OFFSET[1], HAND_OFFSET[2]]);
            let ra1_raw = sub3(add3(hand_for(rb), [0.0, -40.0, 0.0]), HAND_OFFSET);
            let ra1 = clamp_leg_xy(ra0, ra1_raw, t_x);
            let rb = add3(rb, sub3(ra1, ra1_raw));
            let rb2 = clamp_leg_xy(rb, add3(rb, stroll), t_end - t_x);
            let walk_a = walk_schedule(&[(ra0, ra1, 0, t_x)], d);
            let walk_b = walk_schedule(&[(rb, rb2, t_x, t_end)], d);
            let frames: Vec<Frame> = (0..d)
                .map(|t| {
                    let skel_a = stick_pose(walk_a.roots[t], 1.0, walk_a.phases[t]);
                    let skel_b = stick_pose(walk_b.roots[t], -1.0, walk_b.phases[t]);
                    let (carrier, hand) = if t < t_x {
                        ("actor_a", skel_a.joints[HAND_JOINT])
                    } else {
                        ("actor_b", skel_b.joints[HAND_JOINT])
                    };
                    truth.pairs.push(InteractionPair { frame: t, src: carrier.into(), dst: "cup".into() });
                    let cup_center = add3(hand, CARRY_OFFSET);
                    Frame {
                        entities: std::iter::empty()
                            .chain([
                                EntityState { bbox: skel_a.aabb(), skeleton: Some(skel_a.clone()) },
                                EntityState { bbox: skel_b.aabb(), skeleton: Some(skel_b.clone()) },
                                EntityState { bbox: box_at(cup_center, CUP_HALF), skeleton: None },
                            ])
                            .chain(clutter.iter().map(|b| EntityState {
                                bbox: *b,
                                skeleton: None,
                            }))
                            .collect(),
                        predicted: false,
                    }
                })
                .collect();
            (cast, frames)
        }
        ScenarioKind::StaticClutter => {
            let cast = build_cast(spec, &vocabulary, &[("actor", "human"), ("table", "table")])?;
            let root = [rng.gen_range(1200.0..1800.0), rng.gen_range(500.0..1100.0), 1000.0];
            let table_c =
                [rng.gen_range(2100.0..2700.0), rng.gen_range(1700.0..2300.0), 700.0];
            let clutter = sample_distractors(&mut rng, spec.distractors.len());
            let skel = stick_pose(root, 1.0, 0.0);
            let frame = Frame {
                entities: std::iter::empty()
                    .chain([
                        EntityState { bbox: skel.aabb(), skeleton: Some(skel.clone()) },
                        EntityState { bbox: box_at(table_c, TABLE_HALF), skeleton: None },
                    ])
                    .chain(clutter.iter().map(|b| EntityState { bbox: *b, skeleton: None }))
                    .collect(),
                predicted: false,
            };
            (cast, vec![frame; d])
        }
    };

    if spec.noise_mm > 0.0 {
        let normal = Normal::new(0.0, spec.noise_mm)
            .map_err(|e| Error::Config { msg: format!("invalid noise amplitude: {e}") })?;
        for frame in &mut frames {
            for entity in &mut frame.entities {
                match &mut entity.skeleton {
                    Some(skel) => {
                        for joint in &mut skel.joints {
                            for v in joint {
                                *v += normal.sample(&mut rng);
                            }
                        }
                        entity.bbox = skel.aabb();
                    }
                    None => {
                        for a in 0..3 {
                            entity.bbox.min[a] += normal.sample(&mut rng);
                            entity.bbox.max[a] += normal.sample(&mut rng);
                            if entity.bbox.min[a] > entity.bbox.max[a] {
                                std::mem::swap(&mut entity.bbox.min[a], &mut entity.bbox.max[a]);
                            }
                        }
                    }
                }
            }
        }
    }

    // Normalize negative zeros so re-encoding and arithmetic identities stay
    // bit-stable.
    for frame in &mut frames {
        for entity in &mut frame.entities {
            for a in 0..3 {
                entity.bbox.min[a] += 0.0;
                entity.bbox.max[a] += 0.0;
            }
            if let Some(skel) = &mut entity.skeleton {
                for joint in &mut skel.joints {
                    for v in joint {
                        *v += 0.0;
                    }
                }
            }
        }
    }

    let seq = SceneSequence {
        vocabulary,
        joint_names: default_joint_names(),
        step_ms: 100,
        roster,
        frames,
    };
    Ok((seq, truth))
}
