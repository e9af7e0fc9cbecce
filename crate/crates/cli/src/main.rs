use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use weakseg::dataio::{load_index, load_soft_mask, save_soft_mask, Dataset, TileId, INDEX_FILE};
use weakseg::experiment::{run_ablation, write_ablation_csv, Axis, Splits};
use weakseg::grid_context::{build_context_map, classify_tiles, ContextMap, CONTEXT_MAP_FILE};
use weakseg::metrics::{binarize, eval_dataset, predict_dataset, Aggregation};
use weakseg::polygonize::{mask_to_polygons, simplify, to_geojson};
use weakseg::synthgen::{dataset_stats, generate_splits, SceneConfig, TEST_DIR, TRAIN_DIR};
use weakseg::trainer::{load_checkpoint, resume, train, ContextMode, TrainConfig, CHECKPOINT_FILE, LOSS_LOG_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalOptions {
    threshold: f32,
    aggregation: Aggregation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { threshold: 0.5, aggregation: Aggregation::Micro }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PolygonizeOptions {
    threshold: f32,
    tolerance: f64,
}

impl Default for PolygonizeOptions {
    fn default() -> Self {
        Self { threshold: 0.5, tolerance: 0.0 }
    }
}

/// Everything a command can be configured with, as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    scene: SceneConfig,
    train: TrainConfig,
    eval: EvalOptions,
    polygonize: PolygonizeOptions,
}

#[derive(Parser, Debug)]
#[command(name = "weakseg", version, about = "Segmentation from point labels with adversarial compositing")]
struct Cli {
    /// JSON run configuration; missing keys take the defaults listed below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the scene and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    csm: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// original, blank, red or noise.
    #[arg(long)]
    context_mode: Option<String>,
    #[arg(long)]
    no_d2: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into OUT/train and OUT/test.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the context map of a dataset.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train on a dataset; writes checkpoint.bin, losses.csv and config.json to OUT.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Write soft-mask PNGs for every point-labelled chip.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset with ground truth; writes OUT/metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
        /// micro or macro.
        #[arg(long)]
        aggregation: Option<String>,
    },
    /// Convert predicted soft masks to a GeoJSON FeatureCollection.
    Polygonize {
        #[arg(long)]
        pred: PathBuf,
        /// Output .geojson file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Seeded sweep along one axis; writes OUT/ablation_report.csv.
    Ablate {
        /// Directory holding train/ and test/ datasets.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// d2, csm, context or supervision.
        #[arg(long)]
        axis: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| weakseg::Error::Io { path: path.into(), source: e })?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| weakseg::Error::Json { path: path.into(), source: e })?;
    Ok(cfg)
}

fn parse_context_mode(s: &str) -> Result<ContextMode> {
    ContextMode::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| weakseg::Error::Config(format!("unknown context mode {s:?}; expected original, blank, red or noise")).into())
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) -> Result<()> {
    if let Some(v) = o.csm {
        cfg.label.csm = v;
    }
    if let Some(v) = o.rho {
        cfg.label.rho = v;
    }
    if let Some(m) = &o.context_mode {
        cfg.context_mode = parse_context_mode(m)?;
    }
    if o.no_d2 {
        cfg.use_d2 = false;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(k) = o.k {
        cfg.k_contexts = k;
    }
    cfg.validate()?;
    Ok(())
}

fn context_map_for(data: &Dataset, k: usize) -> Result<ContextMap> {
    let path = data.root.join(CONTEXT_MAP_FILE);
    if path.exists() {
        let map = ContextMap::load(&path)?;
        if map.k == k {
            return Ok(map);
        }
        log::info!("{} was built with k={}, rebuilding with k={k}", path.display(), map.k);
    }
    Ok(build_context_map(&classify_tiles(&data.index), k)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, format!("{text}\n")).map_err(|e| weakseg::Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.scene.seed = seed;
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Synth { out } => {
            let (train_idx, test_idx) = generate_splits(&cfg.scene, &out)?;
            for (name, idx) in [(TRAIN_DIR, &train_idx), (TEST_DIR, &test_idx)] {
                let data = Dataset::load(out.join(name))?;
                let s = dataset_stats(idx, &data.gt);
                println!(
                    "{name}: {} positive, {} negative chips, {} objects, mean area {:.1} px",
                    s.positives, s.negatives, s.objects, s.mean_object_area
                );
            }
        }
        Command::Preprocess { data, k } => {
            let idx = load_index(data.join(INDEX_FILE))?;
            let map = build_context_map(&classify_tiles(&idx), k.unwrap_or(cfg.train.k_contexts))?;
            map.save(data.join(CONTEXT_MAP_FILE))?;
            println!("{} positive tiles mapped to contexts", map.entries.len());
        }
        Command::Train { data, out, resume: from, overrides } => {
            apply_overrides(&mut cfg.train, &overrides)?;
            let dataset = Dataset::load(&data)?;
            let map = context_map_for(&dataset, cfg.train.k_contexts)?;
            write_json(&cfg, &out.join("config.json"))?;
            let state = match from {
                Some(ck) => resume(&dataset, &map, &cfg.train, &ck, Some(&out))?,
                None => train(&dataset, &map, &cfg.train, Some(&out))?,
            };
            let last = state.history.last().copied().unwrap_or_default();
            println!(
                "trained {} steps; last l_d1 {:.4} l_d2 {:.4} l_g_adv {:.4} l_loc {:.4}; wrote {} and {}",
                state.step,
                last.l_d1,
                last.l_d2,
                last.l_g_adv,
                last.l_loc,
                out.join(CHECKPOINT_FILE).display(),
                out.join(LOSS_LOG_FILE).display()
            );
        }
        Command::Predict { checkpoint, data, out } => {
            let (state, train_cfg) = load_checkpoint(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let preds = predict_dataset(&state.seg, &dataset, &train_cfg.label)?;
            for (id, m) in &preds {
                save_soft_mask(m, out.join(format!("{}.png", id.key())))?;
            }
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval { checkpoint, data, out, threshold, aggregation } => {
            let (state, train_cfg) = load_checkpoint(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let agg = match aggregation.as_deref() {
                None => cfg.eval.aggregation,
                Some("micro") => Aggregation::Micro,
                Some("macro") => Aggregation::Macro,
                Some(other) => return Err(weakseg::Error::Config(format!("unknown aggregation {other:?}")).into()),
            };
            let tau = threshold.unwrap_or(cfg.eval.threshold);
            check_threshold(tau)?;
            let report = eval_dataset(&state.seg, &dataset, &train_cfg.label, tau, agg)?;
            report.save(&out.join("metrics.json"))?;
            println!(
                "dice {:.4} jaccard {:.4} precision {:.4} recall {:.4} over {} chips",
                report.dice, report.jaccard, report.precision, report.recall, report.n_chips
            );
        }
        Command::Polygonize { pred, out, threshold, tolerance } => {
            let tau = threshold.unwrap_or(cfg.polygonize.threshold);
            check_threshold(tau)?;
            let tol = tolerance.unwrap_or(cfg.polygonize.tolerance);
            let mut inputs = BTreeMap::new();
            let entries = std::fs::read_dir(&pred).map_err(|e| weakseg::Error::Io { path: pred.clone(), source: e })?;
            for entry in entries {
                let path = entry?.path();
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .filter(|_| path.extension().is_some_and(|e| e == "png"))
                    .and_then(TileId::parse_key);
                if let Some(id) = id {
                    inputs.insert(id, path);
                }
            }
            let mut polys = Vec::new();
            for (id, path) in &inputs {
                let mask = binarize(&load_soft_mask(path)?, tau);
                for p in mask_to_polygons(&mask) {
                    if let Some(p) = simplify(&p, tol)? {
                        polys.push((*id, p));
                    }
                }
            }
            to_geojson(&polys, &out)?;
            println!("wrote {} polygons from {} masks to {}", polys.len(), inputs.len(), out.display());
        }
        Command::Ablate { data, out, axis, seeds, overrides } => {
            let axis = Axis::parse(&axis)?;
            apply_overrides(&mut cfg.train, &overrides)?;
            if seeds.is_empty() {
                return Err(weakseg::Error::Config("at least one seed is required".into()).into());
            }
            let splits = Splits::new(Dataset::load(data.join(TRAIN_DIR))?, Dataset::load(data.join(TEST_DIR))?, cfg.train.k_contexts)?;
            let rows = run_ablation(&splits, &cfg.train, axis, &seeds, cfg.eval.threshold)?;
            let path = out.join("ablation_report.csv");
            write_ablation_csv(&rows, &path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
    }
    Ok(())
}

fn check_threshold(tau: f32) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(weakseg::Error::Config(format!("threshold must lie in (0, 1), got {tau}")).into())
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<weakseg::Error>() {
        Some(e) if !e.is_user_error() => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).expect("defaults serialize");
    let cmd = Cli::command().after_long_help(format!("Configuration keys and defaults (--config JSON):\n{defaults}"));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
