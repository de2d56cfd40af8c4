//! Comparators: multi-class aggregation and fusion of per-class foreground
//! maps in the style of BAM, and named ablation presets of the solver.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DiamError, Result};
use crate::inference::SolverConfig;
use crate::labels::LabelMask;
use crate::numeric::ClassPartition;
use crate::prior::PriorKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub tau: f64,
}

impl FusionConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || !(0.0..=1.0).contains(&tau) {
            return Err(DiamError::Config(format!("tau must lie in [0, 1], got {tau}")));
        }
        Ok(Self { tau })
    }
}

/// Per-pixel argmax over the novel foreground maps (one row per novel
/// class), reported as global class indices, together with the winning
/// probability. Ties go to the lower novel index.
pub fn bam_aggregate(
    foreground_maps: &Array2<f64>,
    partition: &ClassPartition,
) -> Result<(LabelMask, Vec<f64>)> {
    if foreground_maps.nrows() == 0 {
        return Err(DiamError::Task("no foreground maps to aggregate".into()));
    }
    if foreground_maps.nrows() != partition.n_novel {
        return Err(shape_err(format!(
            "{} foreground maps for {} novel classes",
            foreground_maps.nrows(),
            partition.n_novel
        )));
    }
    if foreground_maps.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DiamError::Numeric("foreground maps must lie in [0, 1]".into()));
    }
    let first_novel = partition.n_old();
    let mut labels = Vec::with_capacity(foreground_maps.ncols());
    let mut probs = Vec::with_capacity(foreground_maps.ncols());
    for column in foreground_maps.axis_iter(Axis(1)) {
        let mut best = 0;
        for i in 1..column.len() {
            if column[i] > column[best] {
                best = i;
            }
        }
        labels.push((first_novel + best) as u8);
        probs.push(column[best]);
    }
    Ok((LabelMask::new(labels), probs))
}

/// Novel label where its probability exceeds `tau`, otherwise the base
/// learner's label, otherwise background.
pub fn bam_fuse(
    aggregated: &LabelMask,
    aggregated_probs: &[f64],
    base_map: &LabelMask,
    config: &FusionConfig,
) -> Result<LabelMask> {
    if aggregated.len() != aggregated_probs.len() || aggregated.len() != base_map.len() {
        return Err(shape_err(format!(
            "fusion inputs have {} / {} / {} pixels",
            aggregated.len(),
            aggregated_probs.len(),
            base_map.len()
        )));
    }
    let fused = aggregated
        .as_slice()
        .iter()
        .zip(aggregated_probs)
        .zip(base_map.as_slice())
        .map(|((&a, &pa), &b)| {
            if pa > config.tau {
                a
            } else if b != 0 {
                b
            } else {
                0
            }
        })
        .collect();
    Ok(LabelMask::new(fused))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Full,
    NoKd,
    FrozenBase,
    UniformPrior,
    OraclePrior,
    XentOnly,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Full,
        Preset::NoKd,
        Preset::FrozenBase,
        Preset::UniformPrior,
        Preset::OraclePrior,
        Preset::XentOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::NoKd => "no-kd",
            Preset::FrozenBase => "frozen-base",
            Preset::UniformPrior => "uniform-prior",
            Preset::OraclePrior => "oracle-prior",
            Preset::XentOnly => "xent-only",
        }
    }

    pub fn config(self) -> SolverConfig {
        let mut c = SolverConfig::default();
        match self {
            Preset::Full => {}
            Preset::NoKd => c.weights.beta = 0.0,
            Preset::FrozenBase => c.freeze_base = true,
            Preset::UniformPrior => c.prior_policy.kind = PriorKind::Uniform,
            Preset::OraclePrior => c.prior_policy.kind = PriorKind::Oracle,
            Preset::XentOnly => {
                c.weights.beta = 0.0;
                c.weights.query_entropy = 0.0;
                c.weights.marginal = 0.0;
            }
        }
        c
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = DiamError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                DiamError::Config(format!("unknown preset `{s}` (expected one of {names:?})"))
            })
    }
}

/// Default solver configuration with the named deviation applied.
pub fn ablation_preset(name: &str) -> Result<SolverConfig> {
    name.parse::<Preset>().map(Preset::config)
}
