//! Dense kernels shared by every other module: the classifier forward pass,
//! row softmax, clamped logarithms, entropies, KL divergence and marginals.
//!
//! Reductions are written as explicit row-major loops with `f64`
//! accumulators so that repeated runs are bitwise identical.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DiamError, Result};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Row-sum tolerance for the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// `ln(max(x, LOG_FLOOR))`.
#[inline]
pub fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Derivative of [`clamped_ln`]; zero on the clamped plateau.
#[inline]
pub fn clamped_ln_deriv(x: f64) -> f64 {
    if x > LOG_FLOOR {
        1.0 / x
    } else {
        0.0
    }
}

/// Split of the label space into background, base and novel classes.
///
/// Class index layout: `0` is background, `1..=n_base` are base classes and
/// `n_base + 1..=n_base + n_novel` are novel classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub n_base: usize,
    pub n_novel: usize,
}

impl ClassPartition {
    pub fn new(n_base: usize, n_novel: usize) -> Result<Self> {
        if n_base == 0 || n_novel == 0 {
            return Err(DiamError::Config(format!(
                "partition needs at least one base and one novel class (got {n_base}/{n_novel})"
            )));
        }
        if 1 + n_base + n_novel > 255 {
            return Err(DiamError::Config(format!(
                "{} classes do not fit the u8 label encoding",
                1 + n_base + n_novel
            )));
        }
        Ok(Self { n_base, n_novel })
    }

    /// Background + base + novel.
    pub fn n_classes(&self) -> usize {
        1 + self.n_base + self.n_novel
    }

    /// Size of the label space seen by the base model (background + base).
    pub fn n_old(&self) -> usize {
        1 + self.n_base
    }

    pub fn base_classes(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.n_base
    }

    pub fn novel_classes(&self) -> std::ops::Range<usize> {
        self.n_old()..self.n_classes()
    }

    pub fn is_novel(&self, class: usize) -> bool {
        class >= self.n_old() && class < self.n_classes()
    }

    pub fn is_base(&self, class: usize) -> bool {
        class >= 1 && class <= self.n_base
    }
}

/// Frozen per-pixel features of one image, stored row-major `(n_pixels, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pixels: Array2<f64>,
    height: usize,
    width: usize,
}

impl FeatureMap {
    pub fn new(pixels: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        let (n, d) = pixels.dim();
        if height == 0 || width == 0 || d == 0 {
            return Err(shape_err(format!(
                "feature map must be non-empty (height {height}, width {width}, d {d})"
            )));
        }
        if n != height * width {
            return Err(shape_err(format!(
                "feature map has {n} rows but grid is {height}x{width}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(DiamError::Numeric("feature map contains NaN/Inf".into()));
        }
        Ok(Self {
            pixels,
            height,
            width,
        })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn dim(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Pre-softmax classifier scores `(n_pixels, n_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap(Array2<f64>);

impl LogitMap {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(DiamError::Numeric("logits contain NaN/Inf".into()));
        }
        Ok(Self(rows))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Per-pixel class distributions `(n_pixels, n_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Array2<f64>);

impl ProbMap {
    /// Validates that every row lies on the probability simplex.
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.ncols() == 0 {
            return Err(shape_err("probability map needs at least one class"));
        }
        for (j, row) in rows.axis_iter(Axis(0)).enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(DiamError::Numeric(format!(
                        "row {j} has entry {v} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(DiamError::Numeric(format!("row {j} sums to {sum}")));
            }
        }
        Ok(Self(rows))
    }

    pub(crate) fn from_array_unchecked(rows: Array2<f64>) -> Self {
        Self(rows)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn row(&self, j: usize) -> ArrayView1<'_, f64> {
        self.0.row(j)
    }

    pub fn n_pixels(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }
}

/// How prototype rows are scored against features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Similarity {
    /// `logit = <prototype, feature>`, no bias.
    #[default]
    Dot,
    /// `logit = temperature * cos(prototype, feature)`.
    Cosine { temperature: f64 },
}

impl Similarity {
    pub const DEFAULT_COSINE_TEMPERATURE: f64 = 10.0;

    pub fn cosine() -> Self {
        Similarity::Cosine {
            temperature: Self::DEFAULT_COSINE_TEMPERATURE,
        }
    }
}

/// Row-normalized copy; zero rows stay zero.
pub(crate) fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mut sq = 0.0;
        for &v in row.iter() {
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
        norms.push(norm);
    }
    (out, norms)
}

/// Classifier scores for every pixel against every prototype row.
pub fn logits(
    features: &FeatureMap,
    weights: &Array2<f64>,
    similarity: Similarity,
) -> Result<LogitMap> {
    if weights.ncols() != features.dim() {
        return Err(shape_err(format!(
            "prototype dimension {} does not match feature dimension {}",
            weights.ncols(),
            features.dim()
        )));
    }
    let scores = match similarity {
        Similarity::Dot => features.pixels().dot(&weights.t()),
        Similarity::Cosine { temperature } => {
            let (f, _) = normalize_rows(features.pixels());
            let (w, _) = normalize_rows(weights);
            let mut s = f.dot(&w.t());
            s.mapv_inplace(|v| v * temperature);
            s
        }
    };
    LogitMap::new(scores)
}

/// Numerically stable softmax over each row.
pub fn softmax_rows(logits: &LogitMap) -> Result<ProbMap> {
    let mut out = logits.as_array().clone();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DiamError::Numeric("logits contain NaN/Inf".into()));
    }
    softmax_in_place(&mut out);
    Ok(ProbMap(out))
}

pub(crate) fn softmax_in_place(rows: &mut Array2<f64>) {
    for mut row in rows.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Dot-product classifier followed by a row softmax.
pub fn forward(features: &FeatureMap, weights: &Array2<f64>) -> Result<ProbMap> {
    forward_with(features, weights, Similarity::Dot)
}

pub fn forward_with(
    features: &FeatureMap,
    weights: &Array2<f64>,
    similarity: Similarity,
) -> Result<ProbMap> {
    softmax_rows(&logits(features, weights, similarity)?)
}

/// Mean Shannon entropy of the rows.
pub fn entropy_rows(p: &ProbMap) -> f64 {
    let n = p.n_pixels();
    let mut total = 0.0;
    for row in p.0.axis_iter(Axis(0)) {
        for &v in row {
            total -= v * clamped_ln(v);
        }
    }
    total / n as f64
}

/// Pixel-averaged cross entropy `-(1/n) sum_j sum_k p(j,k) ln q(j,k)`.
pub fn cross_entropy(p: &ProbMap, q: &ProbMap) -> Result<f64> {
    if p.0.dim() != q.0.dim() {
        return Err(shape_err(format!(
            "cross entropy between {:?} and {:?}",
            p.0.dim(),
            q.0.dim()
        )));
    }
    Ok(cross_entropy_sum(p.view(), q.view()) / p.n_pixels() as f64)
}

/// Unnormalized `-sum p ln q`; callers pick the normalizer.
pub(crate) fn cross_entropy_sum(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for (prow, qrow) in p.axis_iter(Axis(0)).zip(q.axis_iter(Axis(0))) {
        for (&a, &b) in prow.iter().zip(qrow.iter()) {
            if a != 0.0 {
                total -= a * clamped_ln(b);
            }
        }
    }
    total
}

/// `KL(a || b) = sum_k a_k (ln a_k - ln b_k)` with clamped logarithms.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(format!(
            "KL between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(kl_unchecked(a.iter().copied(), b.iter().copied()))
}

pub(crate) fn kl_unchecked(
    a: impl Iterator<Item = f64>,
    b: impl Iterator<Item = f64>,
) -> f64 {
    let mut total = 0.0;
    for (x, y) in a.zip(b) {
        total += x * (clamped_ln(x) - clamped_ln(y));
    }
    total
}

/// Average of the rows.
pub fn marginal(p: &ProbMap) -> Vec<f64> {
    let mut acc = vec![0.0; p.n_classes()];
    for row in p.0.axis_iter(Axis(0)) {
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    let n = p.n_pixels() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}
