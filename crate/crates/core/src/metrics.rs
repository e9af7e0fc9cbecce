//! Pixel-level Dice, Jaccard, precision and recall.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{write_file, Dataset, TileId};
use crate::error::{Error, Result};
use crate::nn::SegNet;
use crate::pseudolabel::LabelConfig;
use crate::raster::{BinaryMask, SoftMask};
use crate::trainer::predict;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation: Aggregation,
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_chips: usize,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("plain struct serializes");
        write_file(path, format!("{json}\n").as_bytes())
    }
}

/// `1` wherever `y_hat >= tau`.
pub fn binarize(y_hat: &SoftMask, tau: f32) -> BinaryMask {
    BinaryMask::new(y_hat.height(), y_hat.width(), y_hat.values().iter().map(|&v| v >= tau).collect())
        .expect("same dimensions")
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Contract(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, vacuous: bool) -> f64 {
    if den == 0 {
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of one confusion table, reported as micro over a single chip.
pub fn metrics(c: &Confusion) -> MetricsReport {
    let vacuous = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    MetricsReport {
        aggregation: Aggregation::Micro,
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, vacuous),
        jaccard: ratio(c.tp, c.tp + c.fp + c.fn_, vacuous),
        precision: ratio(c.tp, c.tp + c.fp, vacuous),
        recall: ratio(c.tp, c.tp + c.fn_, vacuous),
        n_chips: 1,
    }
}

/// Aggregates per-chip confusion tables.
pub fn aggregate(per_chip: &[Confusion], aggregation: Aggregation) -> Result<MetricsReport> {
    if per_chip.is_empty() {
        return Err(Error::Eval("no chips to evaluate".into()));
    }
    let n = per_chip.len();
    let mut r = match aggregation {
        Aggregation::Micro => metrics(&per_chip.iter().fold(Confusion::default(), |a, &b| a + b)),
        Aggregation::Macro => {
            let all: Vec<MetricsReport> = per_chip.iter().map(metrics).collect();
            let mean = |f: fn(&MetricsReport) -> f64| all.iter().map(f).sum::<f64>() / n as f64;
            MetricsReport {
                aggregation,
                dice: mean(|m| m.dice),
                jaccard: mean(|m| m.jaccard),
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                n_chips: n,
            }
        }
    };
    r.aggregation = aggregation;
    r.n_chips = n;
    Ok(r)
}

/// Scores soft predictions against ground truth. Every prediction needs a mask.
pub fn eval_predictions(
    preds: &BTreeMap<TileId, SoftMask>,
    gt: &BTreeMap<TileId, BinaryMask>,
    tau: f32,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    let mut per_chip = Vec::with_capacity(preds.len());
    for (id, p) in preds {
        let g = gt.get(id).ok_or_else(|| Error::Eval(format!("chip {id} has no ground truth mask")))?;
        per_chip.push(confusion(&binarize(p, tau), g)?);
    }
    aggregate(&per_chip, aggregation)
}

/// Predicts every point-labelled chip of `data`.
pub fn predict_dataset(seg: &SegNet, data: &Dataset, label: &LabelConfig) -> Result<BTreeMap<TileId, SoftMask>> {
    let mut out = BTreeMap::new();
    for chip in data.index.positives() {
        out.insert(chip.tile_id, predict(seg, data.image(chip.tile_id)?, &chip.points, label)?);
    }
    Ok(out)
}

/// Predicts and scores every point-labelled chip of `data`.
pub fn eval_dataset(seg: &SegNet, data: &Dataset, label: &LabelConfig, tau: f32, aggregation: Aggregation) -> Result<MetricsReport> {
    for chip in data.index.positives() {
        if !data.gt.contains_key(&chip.tile_id) {
            return Err(Error::Eval(format!("chip {} has no ground truth mask", chip.tile_id)));
        }
    }
    eval_predictions(&predict_dataset(seg, data, label)?, &data.gt, tau, aggregation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(tp: u64, fp: u64, fn_: u64, tn: u64) -> Confusion {
        Confusion { tp, fp, fn_, tn }
    }

    #[test]
    fn binarize_tie_goes_positive() {
        assert!(binarize(&SoftMask::filled(3, 3, 0.5), 0.5).values().iter().all(|&b| b));
        assert!(binarize(&SoftMask::filled(3, 3, 0.49), 0.5).is_empty());
        let m = BinaryMask::from_fn(4, 4, |r, c| (r + c) % 3 == 0);
        assert_eq!(binarize(&m.to_soft(), 0.5), m);
    }

    #[test]
    fn confusion_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
            let b = BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.4));
            let mut o = Confusion::default();
            for r in 0..8 {
                for col in 0..8 {
                    let (p, g) = (a.get(r, col), b.get(r, col));
                    o.tp += (p && g) as u64;
                    o.fp += (p && !g) as u64;
                    o.fn_ += (!p && g) as u64;
                    o.tn += (!p && !g) as u64;
                }
            }
            assert_eq!(confusion(&a, &b).unwrap(), o);
        }
        let m = BinaryMask::from_fn(5, 5, |r, _| r < 2);
        let same = confusion(&m, &m).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let inv = confusion(&m.not(), &m).unwrap();
        assert_eq!((inv.tp, inv.tn), (0, 0));
        assert!(matches!(confusion(&m, &BinaryMask::empty(4, 5)), Err(Error::Contract(_))));
    }

    #[test]
    fn metric_examples() {
        let perfect = metrics(&c(5, 0, 0, 11));
        assert_eq!((perfect.dice, perfect.jaccard, perfect.precision, perfect.recall), (1.0, 1.0, 1.0, 1.0));
        let m = metrics(&c(1, 1, 1, 0));
        assert_eq!(m.dice, 0.5);
        assert!((m.jaccard - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.precision, m.recall), (0.5, 0.5));
        let empty = metrics(&c(0, 0, 0, 9));
        assert_eq!((empty.dice, empty.precision, empty.recall), (1.0, 1.0, 1.0));
        let missed = metrics(&c(0, 0, 4, 9));
        assert_eq!((missed.dice, missed.precision, missed.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn aggregation_examples() {
        let one = [c(3, 1, 2, 10)];
        let micro = aggregate(&one, Aggregation::Micro).unwrap();
        let macro_ = aggregate(&one, Aggregation::Macro).unwrap();
        assert_eq!((micro.dice, micro.jaccard), (macro_.dice, macro_.jaccard));
        let two = [c(4, 0, 0, 0), c(1, 1, 2, 0)];
        let micro = aggregate(&two, Aggregation::Micro).unwrap();
        assert_eq!(micro.dice, 10.0 / 13.0);
        assert_eq!(micro.precision, 5.0 / 6.0);
        assert_eq!(micro.recall, 5.0 / 7.0);
        let macro_ = aggregate(&two, Aggregation::Macro).unwrap();
        assert_eq!(macro_.dice, (1.0 + 2.0 / 5.0) / 2.0);
        assert_eq!(macro_.recall, (1.0 + 1.0 / 3.0) / 2.0);
        assert_eq!(macro_.n_chips, 2);
        assert!(matches!(aggregate(&[], Aggregation::Micro), Err(Error::Eval(_))));
    }

    #[test]
    fn missing_ground_truth_names_the_chip() {
        let mut preds = BTreeMap::new();
        preds.insert(TileId(2, 5), SoftMask::filled(2, 2, 0.9));
        let err = eval_predictions(&preds, &BTreeMap::new(), 0.5, Aggregation::Micro).unwrap_err();
        assert!(err.to_string().contains("(2, 5)") || err.to_string().contains("2_5"), "{err}");
    }

    #[test]
    fn metrics_json_field_names() {
        let r = aggregate(&[c(1, 1, 1, 1)], Aggregation::Micro).unwrap();
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        for k in ["aggregation", "dice", "jaccard", "precision", "recall", "n_chips"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["aggregation"], "micro");
    }

    proptest! {
        #[test]
        fn micro_identities_hold(tables in proptest::collection::vec((0u64..500, 0u64..500, 0u64..500, 0u64..500), 1..8)) {
            let t: Vec<Confusion> = tables.into_iter().map(|(a, b, d, e)| c(a, b, d, e)).collect();
            let r = aggregate(&t, Aggregation::Micro).unwrap();
            for v in [r.dice, r.jaccard, r.precision, r.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((r.jaccard - r.dice / (2.0 - r.dice)).abs() < 1e-12);
            if r.precision + r.recall > 0.0 {
                prop_assert!((r.dice - 2.0 * r.precision * r.recall / (r.precision + r.recall)).abs() < 1e-12);
            }
            let m = aggregate(&t, Aggregation::Macro).unwrap();
            for v in [m.dice, m.jaccard, m.precision, m.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
