//! Random small problems for checking the analytic gradient against
//! central finite differences.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::labels::{encode_labels, LabelMask, IGNORE};
use crate::numeric::{softmax_rows, ClassPartition, FeatureMap, LogitMap, ProbMap, Similarity};
use crate::objective::{finite_diff_grad, grad_total, LossWeights, Objective, SupportExample};
use crate::prior::PriorVector;

/// Gradient entries with magnitude at or below this are not compared.
pub const GRAD_FLOOR: f64 = 1e-8;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// An owned objective plus the point at which it is differentiated.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub support: Vec<SupportExample>,
    pub query: FeatureMap,
    pub prior: PriorVector,
    pub old_probs: ProbMap,
    pub partition: ClassPartition,
    pub weights: LossWeights,
    pub similarity: Similarity,
    pub theta: Array2<f64>,
}

impl GradCase {
    pub fn objective(&self) -> Objective<'_> {
        Objective {
            support: &self.support,
            query: &self.query,
            prior: &self.prior,
            old_probs: &self.old_probs,
            partition: self.partition,
            weights: self.weights,
            similarity: self.similarity,
        }
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ProbMap {
    let z = normal_matrix(rng, rows, cols, 1.5);
    softmax_rows(&LogitMap::new(z).expect("finite")).expect("finite")
}

/// Draws a random case with `K <= 8`, `d <= 16`, `|pixels| <= 64` and at
/// most three support images.
pub fn random_case(rng: &mut ChaCha8Rng) -> GradCase {
    let n_base = rng.random_range(1..=4);
    let n_novel = rng.random_range(1..=(7 - n_base).min(3));
    let partition = ClassPartition::new(n_base, n_novel).expect("valid partition");
    let k = partition.n_classes();
    let d = rng.random_range(2..=16);
    let height = rng.random_range(1..=8);
    let width = rng.random_range(1..=8);
    let n = height * width;
    let shots = rng.random_range(1..=3);

    let novel: Vec<u8> = partition.novel_classes().map(|c| c as u8).collect();
    let support = (0..shots)
        .map(|_| {
            let features = FeatureMap::new(normal_matrix(rng, n, d, 1.0), height, width)
                .expect("finite features");
            let labels: Vec<u8> = (0..n)
                .map(|_| match rng.random_range(0..10) {
                    0 => IGNORE,
                    1..=4 => 0,
                    _ => novel[rng.random_range(0..novel.len())],
                })
                .collect();
            let labels = encode_labels(&LabelMask::new(labels), &partition).expect("valid labels");
            SupportExample { features, labels }
        })
        .collect();

    let query = FeatureMap::new(normal_matrix(rng, n, d, 1.0), height, width).expect("finite");
    let prior_row = random_probs(rng, 1, k);
    let prior = PriorVector::new(prior_row.row(0).to_vec()).expect("simplex");
    let old_probs = random_probs(rng, n, partition.n_old());
    let weights = LossWeights::new(rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
    let similarity = if rng.random_bool(0.5) {
        Similarity::Dot
    } else {
        Similarity::Cosine {
            temperature: rng.random_range(1.0..10.0),
        }
    };
    let theta = normal_matrix(rng, k, d, 0.5);

    GradCase {
        support,
        query,
        prior,
        old_probs,
        partition,
        weights,
        similarity,
        theta,
    }
}

/// Largest element-wise relative error between two gradients, considering
/// only entries where either side exceeds [`GRAD_FLOOR`] in magnitude.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .filter_map(|(&a, &b)| {
            let scale = a.abs().max(b.abs());
            (scale > GRAD_FLOOR).then(|| (a - b).abs() / scale)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tasks: usize,
    pub seed: u64,
    pub step: f64,
    pub max_relative_error: f64,
    pub worst_task: usize,
    pub compared_entries: usize,
}

pub fn run_suite(tasks: usize, seed: u64, step: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, 0);
    let mut compared = 0;
    for t in 0..tasks {
        let case = random_case(&mut rng);
        let obj = case.objective();
        let analytic = grad_total(&obj, &case.theta)?;
        let numeric = finite_diff_grad(&obj, &case.theta, step)?;
        compared += analytic
            .iter()
            .zip(numeric.iter())
            .filter(|(a, b)| a.abs().max(b.abs()) > GRAD_FLOOR)
            .count();
        let err = max_relative_error(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, t);
        }
    }
    Ok(GradcheckReport {
        tasks,
        seed,
        step,
        max_relative_error: worst.0,
        worst_task: worst.1,
        compared_entries: compared,
    })
}
