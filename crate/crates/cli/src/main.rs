//! `gcn-rwz`: ingest corridor data, train and score models, run ablations,
//! produce what-if forecasts and serve them over HTTP.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gcn_rwz::checkpoint::Checkpoint;
use gcn_rwz::config::Config;
use gcn_rwz::corridor::{write_cache, Corridor};
use gcn_rwz::evaluation::{
    neighbor_grid, run_ablation, speed_wave_grid, workzone_map, AblationCell, AblationSetup, AblationTable, Condition,
    EvalSet,
};
use gcn_rwz::features::{format_timestamp, load_workzones_csv, windowize, Part, WorkZoneEvent};
use gcn_rwz::graph::{build_hypergraph, hypergraph_operator};
use gcn_rwz::model::Model;
use gcn_rwz::scenario::{parse_time, ScenarioEngine, ScenarioRequest};
use gcn_rwz::synthetic::{generate, SyntheticConfig};
use gcn_rwz::training::train;
use gcn_rwz::ErrorKind;
use gcn_rwz_service::AppState;
use serde_json::json;

#[derive(Parser)]
#[command(name = "gcn-rwz", version, about = "Work-zone aware traffic speed forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output location; a directory for `train`, a file elsewhere.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Scoring {
    /// Forecast steps to score.
    #[arg(long, value_parser = parse_horizon)]
    horizon: Option<usize>,
    /// Cells to score: normal, workzone or all.
    #[arg(long, value_parser = parse_condition)]
    condition: Option<Condition>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the input files and write the feature cache.
    Ingest(Common),
    /// Train a model; writes `history.jsonl` and `checkpoint.json`.
    Train(Common),
    /// Score a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, val or test.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Part,
    },
    /// Train one model per grid cell and print the ablation tables.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        /// JSON list of cells; defaults to both standard tables.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Forecast from an anchor time, optionally with hypothetical work zones;
    /// prints an N x P speed table as CSV.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// First forecast step, ISO-8601.
        #[arg(long)]
        anchor: String,
        #[arg(long, value_parser = parse_horizon)]
        horizon: Option<usize>,
        /// Hypothetical work zones, JSON list or CSV (`segment_id,start,end`).
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Start the scenario HTTP service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `service.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Write a generated corridor (CSV files plus a config) into a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        segments: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
    },
}

fn parse_horizon(s: &str) -> Result<usize, String> {
    match s.parse() {
        Ok(h @ (3 | 6 | 12)) => Ok(h),
        _ => Err(format!("horizon must be 3, 6 or 12, got `{s}`")),
    }
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.parse().map_err(|e: gcn_rwz::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Part, String> {
    match s {
        "train" => Ok(Part::Train),
        "val" => Ok(Part::Val),
        "test" => Ok(Part::Test),
        _ => Err(format!("split must be train, val or test, got `{s}`")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<gcn_rwz::Error>())
        .map(gcn_rwz::Error::kind);
    match kind {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
        None => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(c) => ingest(&c),
        Command::Train(c) => train_cmd(&c),
        Command::Evaluate {
            common,
            scoring,
            checkpoint,
            split,
        } => evaluate(&common, &scoring, checkpoint, split),
        Command::Ablate { common, scoring, grid } => ablate(&common, &scoring, grid),
        Command::Forecast {
            common,
            checkpoint,
            anchor,
            horizon,
            events,
        } => forecast(&common, checkpoint, &anchor, horizon, events),
        Command::Serve {
            common,
            checkpoint,
            bind,
        } => serve(&common, checkpoint, bind),
        Command::Synth {
            out,
            seed,
            segments,
            days,
        } => synth(&out, seed, segments, days),
    }
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = Config::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.training.seed = seed;
    }
    Ok(cfg)
}

/// Writes `text` to `out`, or to stdout when no file is given.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn ingest(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let corridor = Corridor::from_files(&cfg.data, cfg.features)?;
    let bundle = &corridor.bundle;
    let splits = windowize(bundle)?;
    let cache = c.out.clone().or_else(|| cfg.data.cache.clone());
    if let Some(path) = &cache {
        write_cache(bundle, path)?;
        log::info!("feature cache written to {}", path.display());
    }
    let observed = bundle.mask.values().iter().filter(|m| **m == 1.0).count();
    let summary = json!({
        "segments": bundle.segments(),
        "steps": bundle.steps(),
        "start": format_timestamp(bundle.calendar.start),
        "step_minutes": bundle.calendar.step_minutes,
        "observed_fraction": observed as f64 / bundle.mask.values().len() as f64,
        "work_zone_events": bundle.events.len(),
        "samples": { "train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len() },
        "normalizer": bundle.normalizer,
        "cache": cache,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = c.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let corridor = Corridor::load(&cfg.data, cfg.features)?;
    let bundle = &corridor.bundle;
    let splits = windowize(bundle)?;
    let g_op = hypergraph_operator(&build_hypergraph(&corridor.network, cfg.model.k_neighbors)?)?;
    let model = Model::new(cfg.model.clone(), bundle.segments(), bundle.calendar.slots_per_week())?;
    log::info!(
        "training on {} samples ({} validation), {} parameters",
        splits.train.len(),
        splits.val.len(),
        model.param_shapes().values().map(|s| s.iter().product::<usize>()).sum::<usize>()
    );
    let init = model.init_params(cfg.training.seed);
    let outcome = train(&model, init, &splits.train, &splits.val, &g_op, bundle.normalizer, &cfg.training)?;

    let mut lines = String::new();
    for record in &outcome.history.epochs {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    emit(Some(&dir.join("history.jsonl")), &lines)?;
    let checkpoint = Checkpoint {
        model,
        feature_options: cfg.features,
        segment_ids: bundle.segment_ids.clone(),
        normalizer: bundle.normalizer,
        params: outcome.params,
    };
    let path = dir.join("checkpoint.json");
    checkpoint.save(&path)?;
    let best = &outcome.history.epochs[outcome.history.best_epoch];
    let summary = json!({
        "epochs": outcome.history.epochs.len(),
        "best_epoch": outcome.history.best_epoch,
        "stopped_early": outcome.history.stopped_early,
        "val_mae": best.val_mae,
        "val_rmse": best.val_rmse,
        "checkpoint": path,
        "checkpoint_id": checkpoint.id(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Loads the checkpoint and the corridor it was trained on, with the
/// checkpoint's feature window and normalization.
fn engine(cfg: &Config, checkpoint: Option<PathBuf>) -> Result<ScenarioEngine> {
    let path = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let corridor = Corridor::load(&cfg.data, ckpt.feature_options)?;
    Ok(ScenarioEngine::new(ckpt, corridor)?)
}

fn evaluate(c: &Common, s: &Scoring, checkpoint: Option<PathBuf>, split: Part) -> Result<()> {
    let cfg = load_config(c)?;
    let engine = engine(&cfg, checkpoint)?;
    let bundle = &engine.corridor.bundle;
    let model = &engine.checkpoint.model;
    let horizon = s.horizon.unwrap_or(cfg.evaluation.horizon);
    if horizon > model.config.horizon {
        bail!(gcn_rwz::Error::Parameter(format!(
            "horizon {horizon} exceeds the model's {} forecast steps",
            model.config.horizon
        )));
    }
    let condition = s.condition.unwrap_or(cfg.evaluation.condition);
    let splits = windowize(bundle)?;
    let zones = workzone_map(bundle, &engine.corridor.network, cfg.evaluation.workzone_radius)?;
    let set = EvalSet::build(
        model,
        &engine.checkpoint.params,
        splits.get(split),
        engine.operator(),
        bundle,
        &zones,
    )?;
    let report = json!({
        "checkpoint_id": engine.checkpoint_id(),
        "split": split,
        "metrics": set.metrics(horizon, condition)?,
        "disruption_threshold_mph": cfg.evaluation.disruption_threshold,
        "disruption_accuracy": set.disruption_accuracy(cfg.evaluation.disruption_threshold),
    });
    emit(c.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn ablate(c: &Common, s: &Scoring, grid: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    let corridor = Corridor::load(&cfg.data, cfg.features)?;
    let cells: Vec<AblationCell> = match grid {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| gcn_rwz::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => neighbor_grid().into_iter().chain(speed_wave_grid()).collect(),
    };
    let setup = AblationSetup {
        bundle: &corridor.bundle,
        network: &corridor.network,
        model: cfg.model.clone(),
        train: cfg.training.clone(),
        horizon: s.horizon.unwrap_or(cfg.evaluation.horizon),
        condition: s.condition.unwrap_or(cfg.evaluation.condition),
        eval_radius: cfg.evaluation.workzone_radius,
    };
    let report = run_ablation(&setup, &cells)?;
    for table in [AblationTable::Neighbors, AblationTable::SpeedWave] {
        if report.table(table).next().is_some() {
            eprintln!("{}", report.render(table));
        }
    }
    emit(c.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn read_events(path: &Path) -> Result<Vec<WorkZoneEvent>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return Ok(load_workzones_csv(path)?);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| gcn_rwz::Error::Schema(format!("{}: {e}", path.display())).into())
}

fn forecast(
    c: &Common,
    checkpoint: Option<PathBuf>,
    anchor: &str,
    horizon: Option<usize>,
    events: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(c)?;
    let engine = engine(&cfg, checkpoint)?;
    let req = ScenarioRequest {
        injected_events: events.as_deref().map(read_events).transpose()?.unwrap_or_default(),
        anchor: parse_time(anchor)?,
        horizon: horizon.unwrap_or(engine.checkpoint.model.config.horizon),
    };
    let resp = engine.predict_scenario(&req)?;
    let mut csv = String::from("segment_id");
    for t in &resp.times {
        csv.push(',');
        csv.push_str(t);
    }
    csv.push('\n');
    for (id, row) in resp.segment_ids.iter().zip(&resp.scenario) {
        csv.push_str(id);
        for v in row {
            csv.push_str(&format!(",{v:.3}"));
        }
        csv.push('\n');
    }
    if !req.injected_events.is_empty() {
        for s in &resp.summary {
            log::info!(
                "{}: mean change {:+.2} MPH, largest slowdown {:.2} MPH",
                s.segment_id,
                s.mean_delta,
                s.max_slowdown
            );
        }
    }
    emit(c.out.as_deref(), &csv)
}

fn serve(c: &Common, checkpoint: Option<PathBuf>, bind: Option<String>) -> Result<()> {
    let cfg = load_config(c)?;
    let path = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
    let first = engine(&cfg, Some(path.clone()))?;
    log::info!("serving checkpoint {}", first.checkpoint_id());
    let reload_cfg = cfg.clone();
    let state = AppState::new(first).with_loader(Box::new(move || {
        let ckpt = Checkpoint::load(&path)?;
        let corridor = Corridor::load(&reload_cfg.data, ckpt.feature_options)?;
        ScenarioEngine::new(ckpt, corridor)
    }));
    let bind = bind.unwrap_or(cfg.service.bind);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        gcn_rwz_service::serve(listener, Arc::new(state)).await?;
        Ok(())
    })
}

fn synth(out: &Path, seed: u64, segments: usize, days: usize) -> Result<()> {
    let corridor = generate(&SyntheticConfig {
        seed,
        segments,
        days,
        ..SyntheticConfig::default()
    })?;
    corridor.write_csv(out)?;
    let config = "\
[data]
speeds = \"speeds.csv\"
distances = \"distances.csv\"
workzones = \"workzones.csv\"
cache = \"features.bin\"

[features]
history = 12
horizon = 12

[training]
epochs = 30

[output]
dir = \"out\"
";
    std::fs::write(out.join("config.toml"), config)?;
    println!("{}", out.join("config.toml").display());
    Ok(())
}
