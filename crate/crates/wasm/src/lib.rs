//! Browser demo bindings: generate synthetic scenes, train a reduced model
//! interactively, and inspect forecasts plus interaction weights. All data
//! crosses the boundary as JSON strings so the page needs no generated
//! TypeScript types.

use ctxmotion::data::{SceneSequence, SequenceWindow};
use ctxmotion::eval::window_human_error;
use ctxmotion::model::{
    count_parameters, predict, zero_velocity_baseline, ModelConfig, Variant,
};
use ctxmotion::synth::{generate, ScenarioKind, ScenarioSpec};
use ctxmotion::train::{TrainOptions, Trainer};
use ctxmotion::Error;
use wasm_bindgen::prelude::*;

/// Demo-sized widths; the defaults are far too heavy for per-frame
/// interaction in a browser tab.
fn demo_config(variant: Variant) -> Result<ModelConfig, Error> {
    Ok(ModelConfig {
        human_hidden: 64,
        context_hidden: 16,
        interaction_mid: 8,
        ..ModelConfig::for_variant(variant)?
    })
}

/// Plain-Rust session logic, shared by the bindings and host-side tests.
pub struct DemoSession {
    seqs: Vec<SceneSequence>,
    trainer: Option<Trainer>,
}

impl Default for DemoSession {
    fn default() -> Self {
        Self::new()
    }
}

impl DemoSession {
    pub fn new() -> DemoSession {
        DemoSession { seqs: Vec::new(), trainer: None }
    }

    pub fn generate_scenes(
        &mut self,
        scenario: &str,
        count: usize,
        duration: usize,
        noise_mm: f64,
        seed: u64,
    ) -> Result<String, Error> {
        let kind = ScenarioKind::parse(scenario)
            .ok_or_else(|| Error::Config { msg: format!("unknown scenario `{scenario}`") })?;
        if count == 0 {
            return Err(Error::Config { msg: "count must be positive".into() });
        }
        let mut seqs = Vec::with_capacity(count);
        for i in 0..count {
            let mut spec = ScenarioSpec::new(kind);
            spec.duration = duration;
            spec.noise_mm = noise_mm;
            spec.seed = seed.wrapping_add(i as u64);
            seqs.push(generate(&spec)?.0);
        }
        self.seqs = seqs;
        self.trainer = None;
        let first = &self.seqs[0];
        let entities: Vec<serde_json::Value> = first
            .roster
            .iter()
            .map(|m| {
                serde_json::json!({
                    "id": m.id,
                    "type": first.vocabulary.names()[m.type_index],
                })
            })
            .collect();
        Ok(serde_json::json!({
            "scenario": kind.name(),
            "scenes": self.seqs.len(),
            "frames": first.num_frames(),
            "entities": entities,
        })
        .to_string())
    }

    /// Full geometry of one scene for animation: per frame, each entity's
    /// box and (for humans) flattened joints.
    pub fn scene_geometry(&self, index: usize) -> Result<String, Error> {
        let seq = self
            .seqs
            .get(index)
            .ok_or_else(|| Error::Config { msg: format!("no scene {index}") })?;
        Ok(serde_json::json!({
            "step_ms": seq.step_ms,
            "frames": frames_json(seq, 0, seq.num_frames()),
        })
        .to_string())
    }

    pub fn start_training(&mut self, variant: &str, seed: u64) -> Result<String, Error> {
        let variant = Variant::parse(variant)
            .ok_or_else(|| Error::Config { msg: format!("unknown variant `{variant}`") })?;
        if !variant.is_trainable() {
            return Err(Error::Config {
                msg: "the zero-velocity baseline has no trainable parameters".into(),
            });
        }
        if self.seqs.len() < 5 {
            return Err(Error::Config {
                msg: format!("need at least 5 scenes to split train/val, have {}", self.seqs.len()),
            });
        }
        let config = demo_config(variant)?;
        let options = TrainOptions {
            batch_size: 8,
            augment: false,
            seed,
            ..TrainOptions::default()
        };
        let trainer = Trainer::new(self.seqs.clone(), config.clone(), options)?;
        let reply = serde_json::json!({
            "variant": variant.cli_name(),
            "parameters": count_parameters(&config),
            "train_windows": trainer.num_train_windows(),
        });
        self.trainer = Some(trainer);
        Ok(reply.to_string())
    }

    pub fn train_steps(&mut self, n: usize) -> Result<String, Error> {
        let trainer = self
            .trainer
            .as_mut()
            .ok_or_else(|| Error::Train { msg: "call start_training first".into() })?;
        let mut losses = Vec::with_capacity(n);
        for _ in 0..n {
            losses.push(trainer.step()?);
        }
        let validation = trainer.validation_error()?;
        Ok(serde_json::json!({
            "losses": losses,
            "steps_done": trainer.steps_done,
            "validation": validation,
        })
        .to_string())
    }

    /// Forecast on the first window of one scene with the trained weights,
    /// with ground truth and the zero-velocity reference alongside.
    pub fn predict_window(&self, index: usize) -> Result<String, Error> {
        let trainer = self
            .trainer
            .as_ref()
            .ok_or_else(|| Error::Train { msg: "call start_training first".into() })?;
        let seq = self
            .seqs
            .get(index)
            .ok_or_else(|| Error::Config { msg: format!("no scene {index}") })?;
        let config = trainer.config();
        let window = SequenceWindow {
            start: 0,
            observed: config.observed_frames,
            predicted: config.predicted_frames,
        };
        if seq.num_frames() < window.end() {
            return Err(Error::Config {
                msg: format!("scene has {} frames, the window needs {}", seq.num_frames(), window.end()),
            });
        }
        let bundle = predict(seq, window, config, trainer.params())?;
        let zv = zero_velocity_baseline(seq, window)?;
        let h = config.predicted_frames;
        let model_err = window_human_error(&bundle, seq, window, h)?;
        let zv_err = window_human_error(&zv, seq, window, h)?;
        let interactions: Vec<serde_json::Value> = bundle
            .interactions
            .iter()
            .map(|(frame, adj)| serde_json::json!({ "frame": frame, "weights": adj }))
            .collect();
        let predicted: Vec<serde_json::Value> = (0..window.predicted)
            .map(|d| {
                let entities: Vec<serde_json::Value> = (0..seq.num_entities())
                    .map(|e| {
                        if let Some(hi) = bundle.humans.iter().position(|&x| x == e) {
                            let skel = &bundle.poses[hi][d];
                            let bb = skel.aabb();
                            serde_json::json!({
                                "box": [bb.min[0], bb.min[1], bb.min[2], bb.max[0], bb.max[1], bb.max[2]],
                                "joints": skel.to_flat(),
                            })
                        } else {
                            let bb = match &bundle.boxes {
                                Some(boxes) => boxes[e][d],
                                None => seq.frames[window.start + window.observed - 1].entities[e].bbox,
                            };
                            serde_json::json!({
                                "box": [bb.min[0], bb.min[1], bb.min[2], bb.max[0], bb.max[1], bb.max[2]],
                            })
                        }
                    })
                    .collect();
                serde_json::json!({ "entities": entities })
            })
            .collect();
        Ok(serde_json::json!({
            "observed": frames_json(seq, window.start, window.observed),
            "truth": frames_json(seq, window.first_predicted(), window.predicted),
            "predicted": predicted,
            "interactions": interactions,
            "entities": seq.roster.iter().map(|m| m.id.clone()).collect::<Vec<_>>(),
            "error_2s": { "model": model_err, "zero_velocity": zv_err },
        })
        .to_string())
    }
}

fn frames_json(seq: &SceneSequence, start: usize, len: usize) -> Vec<serde_json::Value> {
    (start..start + len)
        .map(|t| {
            let entities: Vec<serde_json::Value> = seq.frames[t]
                .entities
                .iter()
                .map(|e| {
                    let bb = &e.bbox;
                    match &e.skeleton {
                        Some(s) => serde_json::json!({
                            "box": [bb.min[0], bb.min[1], bb.min[2], bb.max[0], bb.max[1], bb.max[2]],
                            "joints": s.to_flat(),
                        }),
                        None => serde_json::json!({
                            "box": [bb.min[0], bb.min[1], bb.min[2], bb.max[0], bb.max[1], bb.max[2]],
                        }),
                    }
                })
                .collect();
            serde_json::json!({ "entities": entities })
        })
        .collect()
}

// ── Bindings ──────────────────────────────────────────────────────────────

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// One interactive session: generate → train → predict.
#[wasm_bindgen]
pub struct Session {
    inner: DemoSession,
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Session {
        Session { inner: DemoSession::new() }
    }

    #[wasm_bindgen(js_name = generateScenes)]
    pub fn generate_scenes(
        &mut self,
        scenario: &str,
        count: usize,
        duration: usize,
        noise_mm: f64,
        seed: u64,
    ) -> Result<String, JsValue> {
        self.inner.generate_scenes(scenario, count, duration, noise_mm, seed).map_err(js_err)
    }

    #[wasm_bindgen(js_name = sceneGeometry)]
    pub fn scene_geometry(&self, index: usize) -> Result<String, JsValue> {
        self.inner.scene_geometry(index).map_err(js_err)
    }

    #[wasm_bindgen(js_name = startTraining)]
    pub fn start_training(&mut self, variant: &str, seed: u64) -> Result<String, JsValue> {
        self.inner.start_training(variant, seed).map_err(js_err)
    }

    #[wasm_bindgen(js_name = trainSteps)]
    pub fn train_steps(&mut self, n: usize) -> Result<String, JsValue> {
        self.inner.train_steps(n).map_err(js_err)
    }

    #[wasm_bindgen(js_name = predictWindow)]
    pub fn predict_window(&self, index: usize) -> Result<String, JsValue> {
        self.inner.predict_window(index).map_err(js_err)
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}
