//! Train-then-evaluate runs and the seeded ablation sweeps built on them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{write_file, Dataset};
use crate::error::{Error, Result};
use crate::grid_context::{build_context_map, classify_tiles, ContextMap};
use crate::metrics::{eval_dataset, Aggregation, MetricsReport};
use crate::trainer::{train, ContextMode, Objective, TrainConfig, TrainState};

/// Training and held-out data with the training context map.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub map: ContextMap,
}

impl Splits {
    pub fn new(train: Dataset, test: Dataset, k: usize) -> Result<Self> {
        let map = build_context_map(&classify_tiles(&train.index), k)?;
        Ok(Self { train, test, map })
    }
}

/// Trains on the training split and scores the held-out split.
pub fn run_once(
    splits: &Splits,
    cfg: &TrainConfig,
    tau: f32,
    aggregation: Aggregation,
    out_dir: Option<&Path>,
) -> Result<(TrainState, MetricsReport)> {
    let state = train(&splits.train, &splits.map, cfg, out_dir)?;
    let report = eval_dataset(&state.seg, &splits.test, &cfg.label, tau, aggregation)?;
    Ok((state, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Negative discriminator on and off.
    D2,
    /// Centroid size multiplier sweep.
    Csm,
    /// Context transformations.
    Context,
    /// Weak-label training against cross entropy on ground truth.
    Supervision,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::D2 => "d2",
            Axis::Csm => "csm",
            Axis::Context => "context",
            Axis::Supervision => "supervision",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "d2" => Ok(Axis::D2),
            "csm" => Ok(Axis::Csm),
            "context" => Ok(Axis::Context),
            "supervision" => Ok(Axis::Supervision),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}; expected d2, csm, context or supervision"))),
        }
    }
}

pub const CSM_SWEEP: [f64; 5] = [6000.0, 7000.0, 8000.0, 9000.0, 10000.0];

/// Named configurations of one ablation axis, derived from `base`.
pub fn variants(axis: Axis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match axis {
        Axis::D2 => vec![
            ("on".into(), TrainConfig { use_d2: true, ..base.clone() }),
            ("off".into(), TrainConfig { use_d2: false, ..base.clone() }),
        ],
        Axis::Csm => CSM_SWEEP
            .iter()
            .map(|&csm| {
                let mut c = base.clone();
                c.label.csm = csm;
                (format!("{csm}"), c)
            })
            .collect(),
        Axis::Context => ContextMode::ALL
            .iter()
            .map(|&m| (m.name().to_string(), TrainConfig { context_mode: m, ..base.clone() }))
            .collect(),
        Axis::Supervision => vec![
            ("p2p".into(), TrainConfig { objective: Objective::Adversarial, ..base.clone() }),
            ("supervised".into(), TrainConfig { objective: Objective::Supervised, ..base.clone() }),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub seed: u64,
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Every variant of `axis` for every seed, scored with micro aggregation.
pub fn run_ablation(splits: &Splits, base: &TrainConfig, axis: Axis, seeds: &[u64], tau: f32) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in variants(axis, base) {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let (_, m) = run_once(splits, &cfg, tau, Aggregation::Micro, None)?;
            log::info!("{} {name} seed {seed}: dice {:.4} precision {:.4} recall {:.4}", axis.name(), m.dice, m.precision, m.recall);
            rows.push(AblationRow {
                axis: axis.name().into(),
                variant: name.clone(),
                seed,
                dice: m.dice,
                jaccard: m.jaccard,
                precision: m.precision,
                recall: m.recall,
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut s = String::from("axis,variant,seed,dice,jaccard,precision,recall\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.axis, r.variant, r.seed, r.dice, r.jaccard, r.precision, r.recall);
    }
    write_file(path, s.as_bytes())
}
