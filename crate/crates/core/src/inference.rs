//! Per-task optimization of the augmented prototype classifier.

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DiamError, Result};
use crate::evaluation::{group_mious, ConfusionAccumulator};
use crate::labels::{argmax_decode, encode_labels, LabelMask, IGNORE};
use crate::numeric::{forward_with, ClassPartition, FeatureMap, ProbMap, Similarity};
use crate::objective::{LossBreakdown, LossWeights, Objective, SupportExample};
use crate::prior::{
    estimate_prior, maybe_update, oracle_prior, uniform_prior, PriorKind, PriorPolicy, PriorVector,
};

/// Base rows (background first), novel rows, and the frozen copy of the
/// base rows taken when the state was created.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState {
    theta_base: Array2<f64>,
    theta_novel: Array2<f64>,
    base_snapshot: Array2<f64>,
}

impl ClassifierState {
    pub fn new(theta_base: Array2<f64>, theta_novel: Array2<f64>) -> Result<Self> {
        if theta_base.ncols() != theta_novel.ncols() {
            return Err(shape_err(format!(
                "base prototypes have d={} but novel prototypes d={}",
                theta_base.ncols(),
                theta_novel.ncols()
            )));
        }
        if theta_base.nrows() < 2 || theta_novel.nrows() == 0 {
            return Err(shape_err("need background, >= 1 base and >= 1 novel prototype"));
        }
        if theta_base.iter().chain(theta_novel.iter()).any(|v| !v.is_finite()) {
            return Err(DiamError::Numeric("prototypes contain NaN/Inf".into()));
        }
        Ok(Self {
            base_snapshot: theta_base.clone(),
            theta_base,
            theta_novel,
        })
    }

    pub fn theta_base(&self) -> &Array2<f64> {
        &self.theta_base
    }

    pub fn theta_novel(&self) -> &Array2<f64> {
        &self.theta_novel
    }

    /// Base classifier as it was before any optimization.
    pub fn base_snapshot(&self) -> &Array2<f64> {
        &self.base_snapshot
    }

    pub fn dim(&self) -> usize {
        self.theta_base.ncols()
    }

    pub fn partition(&self) -> Result<ClassPartition> {
        ClassPartition::new(self.theta_base.nrows() - 1, self.theta_novel.nrows())
    }

    /// `[theta_base; theta_novel]`.
    pub fn theta(&self) -> Array2<f64> {
        concatenate(Axis(0), &[self.theta_base.view(), self.theta_novel.view()])
            .expect("column counts checked at construction")
    }

    fn set_theta(&mut self, theta: &Array2<f64>) {
        let nb = self.theta_base.nrows();
        self.theta_base.assign(&theta.slice(s![..nb, ..]));
        self.theta_novel.assign(&theta.slice(s![nb.., ..]));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub weights: LossWeights,
    pub prior_policy: PriorPolicy,
    pub freeze_base: bool,
    #[serde(default)]
    pub similarity: Similarity,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.25e-3,
            iterations: 100,
            weights: LossWeights::default(),
            prior_policy: PriorPolicy::default(),
            freeze_base: false,
            similarity: Similarity::Dot,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(DiamError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Similarity::Cosine { temperature } = self.similarity {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(DiamError::Config(format!(
                    "cosine temperature must be positive, got {temperature}"
                )));
            }
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportImage {
    pub features: FeatureMap,
    pub labels: LabelMask,
}

/// One episode: annotated support images and a single query image.
///
/// `query_labels` is only used for scoring, and for the prior in the
/// explicit oracle-prior mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GfssTask {
    pub support: Vec<SupportImage>,
    pub query: FeatureMap,
    pub query_labels: Option<LabelMask>,
    pub partition: ClassPartition,
}

impl GfssTask {
    pub fn new(
        support: Vec<SupportImage>,
        query: FeatureMap,
        query_labels: Option<LabelMask>,
        partition: ClassPartition,
    ) -> Result<Self> {
        let task = Self {
            support,
            query,
            query_labels,
            partition,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(DiamError::Task("support set is empty".into()));
        }
        let d = self.query.dim();
        let mut seen = vec![false; self.partition.n_classes()];
        for (i, s) in self.support.iter().enumerate() {
            if s.features.dim() != d {
                return Err(shape_err(format!(
                    "support image {i} has d={} but query has d={d}",
                    s.features.dim()
                )));
            }
            if s.labels.len() != s.features.n_pixels() {
                return Err(shape_err(format!(
                    "support image {i}: {} labels for {} pixels",
                    s.labels.len(),
                    s.features.n_pixels()
                )));
            }
            s.labels.validate_support(&self.partition)?;
            for &v in s.labels.as_slice() {
                if v != IGNORE {
                    seen[v as usize] = true;
                }
            }
        }
        if let Some(c) = self.partition.novel_classes().find(|&c| !seen[c]) {
            return Err(DiamError::Task(format!(
                "novel class {c} has no labeled support pixel"
            )));
        }
        if let Some(labels) = &self.query_labels {
            if labels.len() != self.query.n_pixels() {
                return Err(shape_err("query labels do not match query pixels"));
            }
            labels.validate(&self.partition)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub base_miou: Option<f64>,
    pub novel_miou: Option<f64>,
}

/// One record per iteration `0..=iterations`, plus the final query map.
#[derive(Clone, Debug)]
pub struct InferenceTrace {
    pub records: Vec<IterationRecord>,
    pub final_probs: ProbMap,
}

impl InferenceTrace {
    pub fn initial(&self) -> &IterationRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("trace always holds iteration 0")
    }
}

/// Masked-average imprinting: each novel prototype is the mean support
/// feature over pixels labeled with that class.
pub fn init_novel_prototypes(task: &GfssTask) -> Result<Array2<f64>> {
    let part = &task.partition;
    let d = task.query.dim();
    let mut sums = Array2::<f64>::zeros((part.n_novel, d));
    let mut counts = vec![0usize; part.n_novel];
    for s in &task.support {
        for (j, &v) in s.labels.as_slice().iter().enumerate() {
            if v == IGNORE || !part.is_novel(v as usize) {
                continue;
            }
            let slot = v as usize - part.n_old();
            counts[slot] += 1;
            let mut row = sums.row_mut(slot);
            row += &s.features.pixels().row(j);
        }
    }
    for (slot, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(DiamError::Task(format!(
                "novel class {} has no labeled support pixel",
                slot + part.n_old()
            )));
        }
        sums.row_mut(slot).mapv_inplace(|v| v / c as f64);
    }
    Ok(sums)
}

/// Starting state: the trained base classifier plus imprinted novel rows.
pub fn initial_state(task: &GfssTask, base_classifier: &Array2<f64>) -> Result<ClassifierState> {
    if base_classifier.dim() != (task.partition.n_old(), task.query.dim()) {
        return Err(shape_err(format!(
            "base classifier is {:?}, expected ({}, {})",
            base_classifier.dim(),
            task.partition.n_old(),
            task.query.dim()
        )));
    }
    ClassifierState::new(base_classifier.clone(), init_novel_prototypes(task)?)
}

/// Predictions of the frozen base classifier over `1 + n_base` classes.
pub fn snapshot_old_predictions(
    state: &ClassifierState,
    query: &FeatureMap,
    similarity: Similarity,
) -> Result<ProbMap> {
    forward_with(query, state.base_snapshot(), similarity)
}

pub fn predict(
    state: &ClassifierState,
    query: &FeatureMap,
    similarity: Similarity,
) -> Result<(ProbMap, LabelMask)> {
    let probs = forward_with(query, &state.theta(), similarity)?;
    let labels = argmax_decode(&probs);
    Ok((probs, labels))
}

fn initial_prior(task: &GfssTask, policy: &PriorPolicy) -> Result<PriorVector> {
    match policy.kind {
        PriorKind::Oracle => {
            let labels = task.query_labels.as_ref().ok_or_else(|| {
                DiamError::Task("oracle prior requested but the task has no query labels".into())
            })?;
            oracle_prior(labels, &task.partition)
        }
        // A self-estimated prior is replaced at its first scheduled update.
        PriorKind::Uniform | PriorKind::SelfEstimated => Ok(uniform_prior(&task.partition)),
    }
}

fn score_iteration(
    query_probs: &ProbMap,
    truth: Option<&LabelMask>,
    partition: &ClassPartition,
) -> Result<(Option<f64>, Option<f64>)> {
    let Some(truth) = truth else {
        return Ok((None, None));
    };
    let mut acc = ConfusionAccumulator::new(partition.n_classes());
    acc.accumulate(&argmax_decode(query_probs), truth)?;
    Ok(group_mious(&acc, partition))
}

fn diverged(iteration: usize) -> impl Fn(DiamError) -> DiamError {
    move |e| match e {
        DiamError::Numeric(detail) => DiamError::Divergence { iteration, detail },
        other => other,
    }
}

/// Plain full-batch gradient descent on the prototype matrix.
pub fn run_diam(
    task: &GfssTask,
    mut state: ClassifierState,
    config: &SolverConfig,
) -> Result<(ClassifierState, InferenceTrace)> {
    config.validate()?;
    task.validate()?;
    if state.dim() != task.query.dim() {
        return Err(shape_err(format!(
            "classifier d={} but task features d={}",
            state.dim(),
            task.query.dim()
        )));
    }
    if state.partition()? != task.partition {
        return Err(shape_err("classifier rows do not match the task partition"));
    }

    let partition = task.partition;
    let similarity = config.similarity;
    let old_probs = snapshot_old_predictions(&state, &task.query, similarity)?;
    let support: Vec<SupportExample> = task
        .support
        .iter()
        .map(|s| {
            Ok(SupportExample {
                features: s.features.clone(),
                labels: encode_labels(&s.labels, &partition)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut prior = initial_prior(task, &config.prior_policy)?;
    let mut theta = state.theta();
    let n_old = partition.n_old();
    let mut records = Vec::with_capacity(config.iterations + 1);
    let mut final_probs = None;

    for iteration in 0..=config.iterations {
        if config.prior_policy.kind == PriorKind::SelfEstimated
            && config.prior_policy.update_iterations.contains(&iteration)
        {
            let query_probs =
                forward_with(&task.query, &theta, similarity).map_err(diverged(iteration))?;
            prior = maybe_update(&config.prior_policy, iteration, &query_probs, prior);
            debug_assert_eq!(prior, estimate_prior(&query_probs));
        }

        let objective = Objective {
            support: &support,
            query: &task.query,
            prior: &prior,
            old_probs: &old_probs,
            partition,
            weights: config.weights,
            similarity,
        };

        let last = iteration == config.iterations;
        let evaluated = if last {
            objective
                .predict(&theta)
                .and_then(|p| Ok((objective.breakdown(&p)?, p, None)))
        } else {
            objective.loss_and_grad(&theta).map(|(l, p, g)| (l, p, Some(g)))
        };
        let (loss, predictions, grad) = evaluated.map_err(diverged(iteration))?;

        if !loss.is_finite() {
            return Err(DiamError::Divergence {
                iteration,
                detail: format!("non-finite loss {loss:?}"),
            });
        }
        let (base_miou, novel_miou) =
            score_iteration(&predictions.query, task.query_labels.as_ref(), &partition)?;
        records.push(IterationRecord {
            iteration,
            loss,
            base_miou,
            novel_miou,
        });

        if let Some(mut grad) = grad {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(DiamError::Divergence {
                    iteration,
                    detail: "non-finite gradient".into(),
                });
            }
            if config.freeze_base {
                grad.slice_mut(s![..n_old, ..]).fill(0.0);
            }
            theta.scaled_add(-config.learning_rate, &grad);
        } else {
            final_probs = Some(predictions.query);
        }
    }

    state.set_theta(&theta);
    let trace = InferenceTrace {
        records,
        final_probs: final_probs.expect("loop always reaches the last iteration"),
    };
    Ok((state, trace))
}
