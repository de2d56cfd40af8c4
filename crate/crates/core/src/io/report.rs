//! JSON run reports.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{DiamError, Result};
use crate::evaluation::{aggregate_runs, scores, AggregateScores, ConfusionAccumulator, GfssScores};
use crate::inference::{initial_state, predict, run_diam, IterationRecord, SolverConfig};
use crate::io::taskfile::TaskBundle;
use crate::labels::LabelMask;

pub const REPORT_FORMAT: &str = "diam-run-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    /// Scores of the adapted classifier; absent without query labels.
    pub scores: Option<GfssScores>,
    /// Scores of the initial classifier, before any update.
    pub initial_scores: Option<GfssScores>,
    pub trace: Vec<IterationRecord>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub seed: u64,
    pub preset: Option<String>,
    pub config: SolverConfig,
    pub tasks: Vec<TaskReport>,
    /// Mean and spread of the per-task scores, when every task was scored.
    pub aggregate: Option<AggregateScores>,
    pub initial_aggregate: Option<AggregateScores>,
    pub wall_ms: f64,
}

impl RunReport {
    pub fn new(config: SolverConfig, preset: Option<String>, tasks: Vec<TaskReport>, wall_ms: f64) -> Result<Self> {
        let collect = |pick: fn(&TaskReport) -> Option<&GfssScores>| -> Result<Option<AggregateScores>> {
            let all: Option<Vec<GfssScores>> = tasks.iter().map(|t| pick(t).cloned()).collect();
            match all {
                Some(v) if !v.is_empty() => aggregate_runs(&v).map(Some),
                _ => Ok(None),
            }
        };
        let aggregate = collect(|t| t.scores.as_ref())?;
        let initial_aggregate = collect(|t| t.initial_scores.as_ref())?;
        Ok(Self {
            format: REPORT_FORMAT.into(),
            seed: config.seed,
            preset,
            config,
            tasks,
            aggregate,
            initial_aggregate,
            wall_ms,
        })
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.wall_ms = 0.0;
        for t in &mut out.tasks {
            t.wall_ms = 0.0;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.format != REPORT_FORMAT {
            return Err(DiamError::Format(format!("unknown report format `{}`", report.format)));
        }
        Ok(report)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Scores a predicted map against ground truth, or `None` when the Base or
/// Novel group is empty for this image.
pub fn score_prediction(
    prediction: &LabelMask,
    truth: &LabelMask,
    partition: &crate::numeric::ClassPartition,
) -> Result<Option<GfssScores>> {
    let mut acc = ConfusionAccumulator::new(partition.n_classes());
    acc.accumulate(prediction, truth)?;
    match scores(&acc, partition) {
        Ok(s) => Ok(Some(s)),
        Err(DiamError::MetricUndefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Outcome of running the solver on one bundle.
#[derive(Clone, Debug)]
pub struct TaskRun {
    pub report: TaskReport,
    pub prediction: LabelMask,
}

pub fn run_task(name: &str, bundle: &TaskBundle, config: &SolverConfig) -> Result<TaskRun> {
    let start = Instant::now();
    let task = &bundle.task;
    let state = initial_state(task, &bundle.base_classifier)?;
    let (_, initial_labels) = predict(&state, &task.query, config.similarity)?;
    let (final_state, trace) = run_diam(task, state, config)?;
    let (_, prediction) = predict(&final_state, &task.query, config.similarity)?;
    let (scores, initial_scores) = match &task.query_labels {
        Some(truth) => (
            score_prediction(&prediction, truth, &task.partition)?,
            score_prediction(&initial_labels, truth, &task.partition)?,
        ),
        None => (None, None),
    };
    Ok(TaskRun {
        report: TaskReport {
            name: name.to_string(),
            scores,
            initial_scores,
            trace: trace.records,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        prediction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_task, SyntheticConfig};

    fn small_bundle(seed: u64) -> TaskBundle {
        let ep = gen_task(&SyntheticConfig {
            d: 16,
            n_base: 3,
            n_novel: 2,
            height: 8,
            width: 8,
            shots: 1,
            tile: 2,
            base_per_image: 2,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        TaskBundle {
            task: ep.task,
            base_classifier: ep.base_classifier,
            foreground_maps: None,
        }
    }

    fn small_report() -> RunReport {
        let config = SolverConfig {
            iterations: 5,
            ..SolverConfig::default()
        };
        let tasks = (0..2)
            .map(|s| run_task(&format!("t{s}"), &small_bundle(s), &config).unwrap().report)
            .collect();
        RunReport::new(config, Some("full".into()), tasks, 12.5).unwrap()
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let report = small_report();
        let back = RunReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_json().unwrap(), report.to_json().unwrap());
    }

    #[test]
    fn timing_fields_are_the_only_difference_between_runs() {
        let a = small_report();
        let b = small_report();
        assert_eq!(a.without_timing().to_json().unwrap(), b.without_timing().to_json().unwrap());
    }

    #[test]
    fn trace_and_aggregate_present() {
        let r = small_report();
        assert_eq!(r.tasks[0].trace.len(), 6);
        assert_eq!(r.aggregate.as_ref().map(|a| a.runs), Some(2));
        assert!(r.initial_aggregate.is_some());
    }

    #[test]
    fn unknown_format_rejected() {
        let text = small_report().to_json().unwrap().replace(REPORT_FORMAT, "other/9");
        assert!(matches!(RunReport::from_json(&text), Err(DiamError::Format(_))));
    }

    #[test]
    fn unlabeled_tasks_are_not_scored() {
        let mut b = small_bundle(3);
        b.task.query_labels = None;
        let run = run_task("u", &b, &SolverConfig { iterations: 2, ..SolverConfig::default() }).unwrap();
        assert!(run.report.scores.is_none());
        assert!(run.report.trace.iter().all(|r| r.base_miou.is_none()));
    }
}
