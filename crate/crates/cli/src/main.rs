//! Command-line front end: training, evaluation, prediction, synthetic
//! scene generation, and interaction export, all reproducible from one
//! seed and a written run manifest.

use clap::{Args, Parser, Subcommand};
use ctxmotion::data::{read_scene, save_scene_file, Frame, SceneSequence, SequenceWindow};
use ctxmotion::eval::{all_windows, horizon_errors, HorizonErrors, HorizonTable};
use ctxmotion::graph::heuristic_adjacency;
use ctxmotion::model::{
    load_checkpoint, predict, save_checkpoint, ModelConfig, ParamSet, Variant,
};
use ctxmotion::synth::{generate, ScenarioKind, ScenarioSpec};
use ctxmotion::train::{sha256_hex, train, TrainOptions};
use ctxmotion::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "ctxmotion",
    version,
    about = "Context-aware forecasting of human poses and object boxes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model variant on scene files
    Train(TrainArgs),
    /// Tabulate per-horizon errors for checkpoints, with a zero-velocity row
    Eval(EvalArgs),
    /// Append model-predicted frames to a scene file
    Predict(PredictArgs),
    /// Generate synthetic tabletop scenes with ground-truth interactions
    GenSynthetic(GenArgs),
    /// Export interaction weights as CSV
    InspectInteractions(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Scene files or directories containing .jsonl scenes
    #[arg(long, required = true, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// zv | rnn | crnn | crnn-li | crnn-omp | crnn-omp-li (li alone implies crnn)
    #[arg(long)]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hard optimizer-step cap; 0 keeps the initialization untouched
    #[arg(long, default_value_t = 10_000)]
    max_steps: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Disable the per-sample rotation/translation augmentation
    #[arg(long, default_value_t = false)]
    no_augment: bool,
    /// Output directory (checkpoint.bin, loss.csv, report.json, manifest.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Checkpoints to evaluate; repeatable, one table row each
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// All 20 horizon columns instead of the coarse 0.5/1/1.5/2 s subset
    #[arg(long, default_value_t = false)]
    fine_horizons: bool,
    /// Optional directory for humans.csv, objects.csv, manifest.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// One scene file; its final observed frames seed the forecast
    #[arg(long, required = true, num_args = 1..)]
    scenes: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output scene file with predicted frames appended
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// pick_place | pass_object | static_clutter
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Frames at 100 ms; at least 30
    #[arg(long, default_value_t = 40)]
    duration: usize,
    /// Coordinate noise in mm
    #[arg(long, default_value_t = 5.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// One scene file
    #[arg(long, required = true, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Optional checkpoint; without it the distance heuristic is exported
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    };
    std::process::exit(code);
}

/// 0 success, 1 validation, 2 missing resource, 3 numeric failure.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::GenSynthetic(a) => cmd_gen(a),
        Command::InspectInteractions(a) => cmd_inspect(a),
    }
}

// ── Shared plumbing ───────────────────────────────────────────────────────

/// Variant strings are dash-separated feature tokens. `li` names a property
/// of the context branch and therefore switches it on; `omp` does not, so
/// `omp` alone fails flag validation.
fn parse_variant_flags(s: &str) -> Result<Variant> {
    let mut plain: Option<&str> = None;
    let mut context = false;
    let mut li = false;
    let mut omp = false;
    for tok in s.split('-') {
        match tok {
            "zv" | "rnn" => plain = Some(tok),
            "crnn" => context = true,
            "li" => {
                li = true;
                context = true;
            }
            "omp" => omp = true,
            other => {
                return Err(Error::Config {
                    msg: format!("unknown variant token `{other}` in `{s}`"),
                })
            }
        }
    }
    match plain {
        Some(p) if context || li || omp => {
            Err(Error::Config { msg: format!("`{p}` does not combine with feature tokens") })
        }
        Some("zv") => Ok(Variant::Zv),
        Some(_) => Ok(Variant::Rnn),
        None if !context => Err(Error::Config {
            msg: format!("variant `{s}` enables object motion without the context branch; use crnn-omp"),
        }),
        None => Ok(match (li, omp) {
            (false, false) => Variant::Crnn,
            (true, false) => Variant::CrnnLi,
            (false, true) => Variant::CrnnOmp,
            (true, true) => Variant::CrnnOmpLi,
        }),
    }
}

fn missing(kind: &str, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{kind} not found: {}", path.display()),
    ))
}

/// Expands files and directories into a sorted list of .jsonl scene paths.
fn collect_scene_paths(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in args {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|q| q.extension().map(|x| x == "jsonl").unwrap_or(false))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(missing("scene path", p));
        }
    }
    if out.is_empty() {
        return Err(Error::Config { msg: "no scene files given".into() });
    }
    Ok(out)
}

struct LoadedScenes {
    seqs: Vec<SceneSequence>,
    hashes: Vec<serde_json::Value>,
}

fn load_scenes(paths: &[PathBuf]) -> Result<LoadedScenes> {
    let mut seqs = Vec::new();
    let mut hashes = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p)?;
        let seq = read_scene(&bytes[..]).map_err(|e| match e {
            Error::SceneData { line, msg } => Error::SceneData {
                line,
                msg: format!("{}: {msg}", p.display()),
            },
            other => other,
        })?;
        hashes.push(serde_json::json!({
            "path": p.display().to_string(),
            "sha256": sha256_hex(&bytes),
        }));
        seqs.push(seq);
    }
    Ok(LoadedScenes { seqs, hashes })
}

fn one_scene(args: &[PathBuf]) -> Result<(SceneSequence, Vec<serde_json::Value>)> {
    let paths = collect_scene_paths(args)?;
    if paths.len() != 1 {
        return Err(Error::Config {
            msg: format!("expected exactly one scene file, got {}", paths.len()),
        });
    }
    let mut loaded = load_scenes(&paths)?;
    Ok((loaded.seqs.remove(0), loaded.hashes))
}

fn checked_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    if !path.is_file() {
        return Err(missing("checkpoint", path));
    }
    load_checkpoint(path)
}

fn write_manifest(path: &Path, manifest: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Window over the final observed frames, decoding the configured horizon.
fn tail_window(seq: &SceneSequence, config: &ModelConfig) -> Result<SequenceWindow> {
    let n = seq.num_frames();
    if n < config.observed_frames {
        return Err(Error::Config {
            msg: format!("scene has {n} frames, model observes {}", config.observed_frames),
        });
    }
    Ok(SequenceWindow {
        start: n - config.observed_frames,
        observed: config.observed_frames,
        predicted: config.predicted_frames,
    })
}

// ── train ─────────────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<()> {
    let variant = parse_variant_flags(&args.variant)?;
    if !variant.is_trainable() {
        return Err(Error::Config {
            msg: "the zero-velocity baseline has no trainable parameters".into(),
        });
    }
    let config = ModelConfig::for_variant(variant)?;
    let paths = collect_scene_paths(&args.scenes)?;
    let loaded = load_scenes(&paths)?;
    let options = TrainOptions {
        max_steps: args.max_steps,
        patience: args.patience,
        augment: !args.no_augment,
        seed: args.seed,
        ..TrainOptions::default()
    };
    std::fs::create_dir_all(&args.out)?;
    let (params, report) = train(loaded.seqs, config.clone(), options)?;
    save_checkpoint(&args.out.join("checkpoint.bin"), &config, &params)?;
    std::fs::write(args.out.join("loss.csv"), report.loss_csv())?;
    let report_json = serde_json::json!({
        "seed": report.seed,
        "steps": report.losses.len(),
        "final_loss": report.losses.last(),
        "validation_per_epoch": report.val_history,
        "best_validation": report.best_val,
        "early_stopped": report.early_stopped,
        "clipped_steps": report.clipped_steps,
        "wall_seconds": report.wall_seconds,
    });
    std::fs::write(
        args.out.join("report.json"),
        format!("{}\n", serde_json::to_string_pretty(&report_json)?),
    )?;
    write_manifest(
        &args.out.join("manifest.json"),
        &serde_json::json!({
            "command": "train",
            "variant": variant.cli_name(),
            "seed": args.seed,
            "max_steps": args.max_steps,
            "patience": args.patience,
            "augment": !args.no_augment,
            "config": serde_json::to_value(&config)?,
            "inputs": loaded.hashes,
        }),
    )?;
    if report.clipped_steps > 0 {
        eprintln!("note: gradient clipping fired on {} steps", report.clipped_steps);
    }
    println!(
        "trained {} for {} steps (best validation {:.3}); wrote {}",
        variant.display_name(),
        report.losses.len(),
        report.best_val.unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

// ── eval ──────────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let paths = collect_scene_paths(&args.scenes)?;
    let loaded = load_scenes(&paths)?;
    let mut models: Vec<(Variant, ModelConfig, ParamSet)> = Vec::new();
    for p in &args.checkpoint {
        let (config, params) = checked_checkpoint(p)?;
        let variant = config.variant();
        if models.iter().any(|(v, _, _)| *v == variant) {
            return Err(Error::Config {
                msg: format!("two checkpoints for variant {}", variant.display_name()),
            });
        }
        models.push((variant, config, params));
    }
    let (observed, predicted) = models
        .first()
        .map(|(_, c, _)| (c.observed_frames, c.predicted_frames))
        .unwrap_or((10, 20));
    for (v, c, _) in &models {
        if (c.observed_frames, c.predicted_frames) != (observed, predicted) {
            return Err(Error::Config {
                msg: format!("checkpoint {} uses a different window size", v.display_name()),
            });
        }
    }
    let windows = all_windows(&loaded.seqs, observed, predicted);
    if windows.is_empty() {
        return Err(Error::Config { msg: "no full windows in the given scenes".into() });
    }
    let mut results: Vec<(Variant, HorizonErrors)> = Vec::new();
    results.push((Variant::Zv, horizon_errors(&loaded.seqs, &windows, predicted, None)?));
    for (variant, config, params) in &models {
        results.push((
            *variant,
            horizon_errors(&loaded.seqs, &windows, predicted, Some((config, params)))?,
        ));
    }
    let find = |v: Variant| results.iter().find(|(rv, _)| *rv == v).map(|(_, r)| r);
    let mut humans = HorizonTable::new(predicted);
    for v in Variant::ALL {
        humans.push_row(v.display_name(), find(v).map(|r| r.human.clone()))?;
    }
    let mut objects = HorizonTable::new(predicted);
    for v in [Variant::Zv, Variant::CrnnOmp, Variant::CrnnOmpLi] {
        objects.push_row(v.display_name(), find(v).and_then(|r| r.object.clone()))?;
    }
    let (h_show, o_show) =
        if args.fine_horizons { (humans.clone(), objects.clone()) } else { (humans.coarse(), objects.coarse()) };
    println!("Human joint error (mm) over {} windows, by horizon (s):", windows.len());
    print!("{}", h_show.to_text());
    println!();
    println!("Object box error (mm), by horizon (s):");
    print!("{}", o_show.to_text());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("humans.csv"), h_show.to_csv())?;
        std::fs::write(dir.join("objects.csv"), o_show.to_csv())?;
        write_manifest(
            &dir.join("manifest.json"),
            &serde_json::json!({
                "command": "eval",
                "checkpoints": args.checkpoint.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                "fine_horizons": args.fine_horizons,
                "windows": windows.len(),
                "inputs": loaded.hashes,
            }),
        )?;
    }
    Ok(())
}

// ── predict ───────────────────────────────────────────────────────────────

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (seq, hashes) = one_scene(&args.scenes)?;
    let (config, params) = checked_checkpoint(&args.checkpoint)?;
    let window = tail_window(&seq, &config)?;
    let bundle = predict(&seq, window, &config, &params)?;
    let mut out_seq = seq.clone();
    let last = &seq.frames[seq.num_frames() - 1];
    for d in 0..window.predicted {
        let mut entities = Vec::with_capacity(seq.num_entities());
        for e in 0..seq.num_entities() {
            let state = if let Some(idx) = bundle.humans.iter().position(|&h| h == e) {
                let skel = bundle.poses[idx][d].clone();
                ctxmotion::data::EntityState { bbox: skel.aabb(), skeleton: Some(skel) }
            } else {
                let bbox = match &bundle.boxes {
                    Some(boxes) => boxes[e][d],
                    None => last.entities[e].bbox,
                };
                ctxmotion::data::EntityState { bbox, skeleton: None }
            };
            entities.push(state);
        }
        out_seq.frames.push(Frame { entities, predicted: true });
    }
    save_scene_file(&out_seq, &args.out)?;
    let manifest_path = args.out.with_extension("manifest.json");
    write_manifest(
        &manifest_path,
        &serde_json::json!({
            "command": "predict",
            "checkpoint": args.checkpoint.display().to_string(),
            "variant": config.variant().cli_name(),
            "appended_frames": window.predicted,
            "inputs": hashes,
        }),
    )?;
    println!(
        "appended {} predicted frames ({}) to {}",
        window.predicted,
        config.variant().display_name(),
        args.out.display()
    );
    Ok(())
}

// ── gen-synthetic ─────────────────────────────────────────────────────────

fn cmd_gen(args: GenArgs) -> Result<()> {
    let kind = ScenarioKind::parse(&args.scenario).ok_or_else(|| Error::Config {
        msg: format!("unknown scenario `{}`; expected pick_place, pass_object, or static_clutter", args.scenario),
    })?;
    std::fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    for i in 0..args.count {
        let mut spec = ScenarioSpec::new(kind);
        spec.duration = args.duration;
        spec.noise_mm = args.noise;
        spec.seed = args.seed.wrapping_add(i as u64);
        let (seq, truth) = generate(&spec)?;
        let scene_path = args.out.join(format!("{}_{i:03}.jsonl", kind.name()));
        save_scene_file(&seq, &scene_path)?;
        let csv_path = args.out.join(format!("{}_{i:03}.interactions.csv", kind.name()));
        std::fs::write(&csv_path, truth.to_csv())?;
        written.push(scene_path.display().to_string());
    }
    write_manifest(
        &args.out.join("manifest.json"),
        &serde_json::json!({
            "command": "gen-synthetic",
            "scenario": kind.name(),
            "count": args.count,
            "duration": args.duration,
            "noise_mm": args.noise,
            "seed": args.seed,
            "outputs": written,
            "inputs": [],
        }),
    )?;
    println!("wrote {} {} scene(s) to {}", args.count, kind.name(), args.out.display());
    Ok(())
}

// ── inspect-interactions ──────────────────────────────────────────────────

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let (seq, hashes) = one_scene(&args.scenes)?;
    let n = seq.num_entities();
    let mut csv = String::from("frame,src_entity,dst_entity,weight\n");
    let push_matrix = |csv: &mut String, frame: usize, adj: &[f64]| {
        for i in 0..n {
            for j in 0..n {
                // entry (i, j) holds the influence of j (src) on i (dst)
                csv.push_str(&format!(
                    "{frame},{},{},{}\n",
                    seq.roster[j].id, seq.roster[i].id, adj[i * n + j]
                ));
            }
        }
    };
    let source = match &args.checkpoint {
        Some(path) => {
            let (config, params) = checked_checkpoint(path)?;
            if !config.context_enabled {
                return Err(Error::Config {
                    msg: format!(
                        "variant {} has no context branch to inspect",
                        config.variant().display_name()
                    ),
                });
            }
            let window = tail_window(&seq, &config)?;
            let bundle = predict(&seq, window, &config, &params)?;
            for (frame, adj) in &bundle.interactions {
                push_matrix(&mut csv, window.start + frame, adj);
            }
            config.variant().cli_name().to_string()
        }
        None => {
            for t in 0..seq.num_frames() {
                let adj = heuristic_adjacency(&seq.centers_at(t));
                push_matrix(&mut csv, t, &adj);
            }
            "heuristic".to_string()
        }
    };
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            write_manifest(
                &path.with_extension("manifest.json"),
                &serde_json::json!({
                    "command": "inspect-interactions",
                    "source": source,
                    "inputs": hashes,
                }),
            )?;
            println!("wrote interaction weights ({source}) to {}", path.display());
        }
        None => {
            std::io::stdout().write_all(csv.as_bytes())?;
        }
    }
    Ok(())
}
