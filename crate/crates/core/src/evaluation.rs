//! IoU bookkeeping and the Base / Novel / Mean / H-Mean / Base-w/-bg
//! aggregates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DiamError, Result};
use crate::labels::{LabelMask, IGNORE};
use crate::numeric::ClassPartition;

/// Per-class intersection and union pixel counts. Ignored pixels are never
/// counted. Accumulators over disjoint image sets merge by addition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self {
            intersection: vec![0; n_classes],
            union: vec![0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.union.len()
    }

    pub fn intersection(&self) -> &[u64] {
        &self.intersection
    }

    pub fn union(&self) -> &[u64] {
        &self.union
    }

    pub fn accumulate(&mut self, prediction: &LabelMask, truth: &LabelMask) -> Result<()> {
        if prediction.len() != truth.len() {
            return Err(shape_err(format!(
                "prediction has {} pixels, truth has {}",
                prediction.len(),
                truth.len()
            )));
        }
        let k = self.n_classes();
        for (j, (&p, &t)) in prediction.as_slice().iter().zip(truth.as_slice()).enumerate() {
            if t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(DiamError::Label(format!(
                    "pixel {j}: prediction {p} / truth {t} outside {k} classes"
                )));
            }
            self.union[p] += 1;
            if p == t {
                self.intersection[p] += 1;
            } else {
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(shape_err("cannot merge accumulators of different class counts"));
        }
        for k in 0..self.n_classes() {
            self.intersection[k] += other.intersection[k];
            self.union[k] += other.union[k];
        }
        Ok(())
    }

    /// `None` when the class never occurs in prediction or truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let u = *self.union.get(class)?;
        (u > 0).then(|| self.intersection[class] as f64 / u as f64)
    }

    fn group_mean(&self, classes: impl Iterator<Item = usize>) -> Option<f64> {
        let (sum, n) = classes
            .filter_map(|c| self.iou(c))
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Functional form of [`ConfusionAccumulator::accumulate`].
pub fn accumulate(
    mut acc: ConfusionAccumulator,
    prediction: &LabelMask,
    truth: &LabelMask,
) -> Result<ConfusionAccumulator> {
    acc.accumulate(prediction, truth)?;
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfssScores {
    pub per_class_iou: BTreeMap<usize, f64>,
    pub base: f64,
    pub novel: f64,
    pub mean: f64,
    pub h_mean: f64,
    pub base_w_bg: f64,
}

/// Capped at the arithmetic mean, which rounding can otherwise exceed by an
/// ulp when `a` and `b` are close.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        (2.0 * a * b / (a + b)).min((a + b) / 2.0)
    }
}

/// Base and novel mIoU, each `None` when no class of the group occurs.
pub fn group_mious(acc: &ConfusionAccumulator, partition: &ClassPartition) -> (Option<f64>, Option<f64>) {
    (
        acc.group_mean(partition.base_classes()),
        acc.group_mean(partition.novel_classes()),
    )
}

pub fn scores(acc: &ConfusionAccumulator, partition: &ClassPartition) -> Result<GfssScores> {
    if acc.n_classes() != partition.n_classes() {
        return Err(shape_err("accumulator does not match the partition"));
    }
    let (base, novel) = group_mious(acc, partition);
    let base = base.ok_or(DiamError::MetricUndefined("base"))?;
    let novel = novel.ok_or(DiamError::MetricUndefined("novel"))?;
    let base_w_bg = acc
        .group_mean(std::iter::once(0).chain(partition.base_classes()))
        .expect("base group is non-empty");
    let per_class_iou = (0..acc.n_classes())
        .filter_map(|c| acc.iou(c).map(|v| (c, v)))
        .collect();
    Ok(GfssScores {
        per_class_iou,
        base,
        novel,
        mean: (base + novel) / 2.0,
        h_mean: harmonic_mean(base, novel),
        base_w_bg,
    })
}

/// Spread of the aggregate fields across runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpread {
    pub base: f64,
    pub novel: f64,
    pub mean: f64,
    pub h_mean: f64,
    pub base_w_bg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub runs: usize,
    pub mean: GfssScores,
    /// Sample standard deviation; zero for a single run.
    pub std: ScoreSpread,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Averages each aggregate field across runs. Per-class IoUs are averaged
/// over the runs in which the class occurred.
pub fn aggregate_runs(per_run: &[GfssScores]) -> Result<AggregateScores> {
    if per_run.is_empty() {
        return Err(DiamError::Task("no runs to aggregate".into()));
    }
    let field = |f: fn(&GfssScores) -> f64| mean_std(&per_run.iter().map(f).collect::<Vec<_>>());
    let (base, base_sd) = field(|s| s.base);
    let (novel, novel_sd) = field(|s| s.novel);
    let (mean, mean_sd) = field(|s| s.mean);
    let (h_mean, h_sd) = field(|s| s.h_mean);
    let (base_w_bg, bwb_sd) = field(|s| s.base_w_bg);

    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in per_run {
        for (&c, &v) in &run.per_class_iou {
            per_class.entry(c).or_default().push(v);
        }
    }
    let per_class_iou = per_class
        .into_iter()
        .map(|(c, v)| (c, mean_std(&v).0))
        .collect();

    Ok(AggregateScores {
        runs: per_run.len(),
        mean: GfssScores {
            per_class_iou,
            base,
            novel,
            mean,
            h_mean,
            base_w_bg,
        },
        std: ScoreSpread {
            base: base_sd,
            novel: novel_sd,
            mean: mean_sd,
            h_mean: h_sd,
            base_w_bg: bwb_sd,
        },
    })
}
