//! The transductive objective and its gradient with respect to the
//! prototype matrix.
//!
//! Implemented total:
//!
//! ```text
//! total = alpha * xent + H(query) + KL(marginal(query) || prior) + beta * kd
//! ```
//!
//! where `xent` sums, over support images, the cross entropy between the
//! novel-only labels and the support-projected predictions, and `kd` is the
//! pixel-averaged KL between the new-to-old projection of the query
//! predictions and the frozen base model's predictions. The additive
//! constant of the marginal-entropy term is dropped; it does not move the
//! optimizer. The prior, the old predictions and the labels are constants.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DiamError, Result};
use crate::labels::{project_new2old, project_support, OneHotMap};
use crate::numeric::{
    clamped_ln, clamped_ln_deriv, cross_entropy_sum, entropy_rows, forward_with, kl_unchecked,
    marginal, normalize_rows, ClassPartition, FeatureMap, ProbMap, Similarity,
};
use crate::prior::PriorVector;

/// Term weights. `query_entropy` and `marginal` are 1 in the standard
/// objective; they exist so ablations can switch those terms off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "one")]
    pub query_entropy: f64,
    #[serde(default = "one")]
    pub marginal: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 100.0,
            query_entropy: 1.0,
            marginal: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.query_entropy, self.marginal];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DiamError::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub xent: f64,
    pub query_entropy: f64,
    pub marginal_kl: f64,
    pub kd: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(xent: f64, query_entropy: f64, marginal_kl: f64, kd: f64, w: &LossWeights) -> Self {
        Self {
            xent,
            query_entropy,
            marginal_kl,
            kd,
            total: w.alpha * xent + w.query_entropy * query_entropy + w.marginal * marginal_kl
                + w.beta * kd,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.xent, self.query_entropy, self.marginal_kl, self.kd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Support features with their encoded labels.
#[derive(Clone, Debug)]
pub struct SupportExample {
    pub features: FeatureMap,
    pub labels: OneHotMap,
}

/// Model predictions for every image of a task.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub support: Vec<ProbMap>,
    pub query: ProbMap,
}

/// Support supervised entropy: an unweighted sum over support images, each
/// term averaged over its non-ignored pixels.
pub fn loss_xent(
    support_probs: &[ProbMap],
    support_labels: &[OneHotMap],
    partition: &ClassPartition,
) -> Result<f64> {
    if support_probs.is_empty() {
        return Err(DiamError::Task("support set is empty".into()));
    }
    if support_probs.len() != support_labels.len() {
        return Err(shape_err(format!(
            "{} support predictions for {} label maps",
            support_probs.len(),
            support_labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, y) in support_probs.iter().zip(support_labels) {
        if p.as_array().dim() != y.as_array().dim() {
            return Err(shape_err(format!(
                "support prediction {:?} vs labels {:?}",
                p.as_array().dim(),
                y.as_array().dim()
            )));
        }
        if y.valid_pixels() == 0 {
            continue;
        }
        let projected = project_support(p, partition)?;
        total += cross_entropy_sum(y.as_array().view(), projected.view()) / y.valid_pixels() as f64;
    }
    Ok(total)
}

pub fn loss_query_entropy(query_probs: &ProbMap) -> f64 {
    entropy_rows(query_probs)
}

/// `KL(marginal(query) || prior)`.
pub fn loss_marginal_kl(query_probs: &ProbMap, prior: &PriorVector) -> Result<f64> {
    if prior.len() != query_probs.n_classes() {
        return Err(shape_err(format!(
            "prior has {} entries, predictions have {} classes",
            prior.len(),
            query_probs.n_classes()
        )));
    }
    let m = marginal(query_probs);
    Ok(kl_unchecked(m.into_iter(), prior.as_slice().iter().copied()))
}

/// Pixel-averaged `KL(new2old(p) || p_old)` on the query.
pub fn loss_kd(
    query_probs: &ProbMap,
    old_probs: &ProbMap,
    partition: &ClassPartition,
) -> Result<f64> {
    if old_probs.n_classes() != partition.n_old() || old_probs.n_pixels() != query_probs.n_pixels()
    {
        return Err(shape_err(format!(
            "old predictions {:?} incompatible with query {:?}",
            old_probs.as_array().dim(),
            query_probs.as_array().dim()
        )));
    }
    let projected = project_new2old(query_probs, partition)?;
    let mut total = 0.0;
    for (q, o) in projected
        .as_array()
        .axis_iter(Axis(0))
        .zip(old_probs.as_array().axis_iter(Axis(0)))
    {
        total += kl_unchecked(q.iter().copied(), o.iter().copied());
    }
    Ok(total / query_probs.n_pixels() as f64)
}

pub fn loss_total(
    predictions: &Predictions,
    support_labels: &[OneHotMap],
    prior: &PriorVector,
    old_probs: &ProbMap,
    partition: &ClassPartition,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let xent = loss_xent(&predictions.support, support_labels, partition)?;
    let ent = loss_query_entropy(&predictions.query);
    let marg = loss_marginal_kl(&predictions.query, prior)?;
    let kd = loss_kd(&predictions.query, old_probs, partition)?;
    Ok(LossBreakdown::combine(xent, ent, marg, kd, weights))
}

/// Everything the loss depends on apart from the prototypes.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub support: &'a [SupportExample],
    pub query: &'a FeatureMap,
    pub prior: &'a PriorVector,
    pub old_probs: &'a ProbMap,
    pub partition: ClassPartition,
    pub weights: LossWeights,
    pub similarity: Similarity,
}

impl<'a> Objective<'a> {
    pub fn validate(&self, theta: &Array2<f64>) -> Result<()> {
        let k = self.partition.n_classes();
        let d = self.query.dim();
        if theta.dim() != (k, d) {
            return Err(shape_err(format!(
                "prototype matrix is {:?}, expected ({k}, {d})",
                theta.dim()
            )));
        }
        if self.support.is_empty() {
            return Err(DiamError::Task("support set is empty".into()));
        }
        for (i, s) in self.support.iter().enumerate() {
            if s.features.dim() != d
                || s.labels.n_pixels() != s.features.n_pixels()
                || s.labels.n_classes() != k
            {
                return Err(shape_err(format!("support image {i} is inconsistent")));
            }
        }
        if self.prior.len() != k {
            return Err(shape_err(format!("prior length {} != {k}", self.prior.len())));
        }
        if self.old_probs.n_pixels() != self.query.n_pixels()
            || self.old_probs.n_classes() != self.partition.n_old()
        {
            return Err(shape_err("old predictions do not match the query"));
        }
        self.weights.validate()
    }

    pub fn predict(&self, theta: &Array2<f64>) -> Result<Predictions> {
        let support = self
            .support
            .iter()
            .map(|s| forward_with(&s.features, theta, self.similarity))
            .collect::<Result<Vec<_>>>()?;
        let query = forward_with(self.query, theta, self.similarity)?;
        Ok(Predictions { support, query })
    }

    pub fn breakdown(&self, predictions: &Predictions) -> Result<LossBreakdown> {
        let labels: Vec<OneHotMap> = self.support.iter().map(|s| s.labels.clone()).collect();
        loss_total(
            predictions,
            &labels,
            self.prior,
            self.old_probs,
            &self.partition,
            &self.weights,
        )
    }

    pub fn loss(&self, theta: &Array2<f64>) -> Result<LossBreakdown> {
        self.validate(theta)?;
        self.breakdown(&self.predict(theta)?)
    }

    /// Loss, predictions and analytic gradient in a single pass.
    pub fn loss_and_grad(
        &self,
        theta: &Array2<f64>,
    ) -> Result<(LossBreakdown, Predictions, Array2<f64>)> {
        self.validate(theta)?;
        let predictions = self.predict(theta)?;
        let loss = self.breakdown(&predictions)?;
        let grad = self.gradient_from(theta, &predictions)?;
        Ok((loss, predictions, grad))
    }

    fn gradient_from(&self, theta: &Array2<f64>, predictions: &Predictions) -> Result<Array2<f64>> {
        let k = self.partition.n_classes();
        // Accumulated sum over images of dL/dlogits^T * (possibly normalized) features.
        let mut acc = Array2::<f64>::zeros((k, self.query.dim()));

        for (s, p) in self.support.iter().zip(&predictions.support) {
            if s.labels.valid_pixels() == 0 || self.weights.alpha == 0.0 {
                continue;
            }
            let scale = self.weights.alpha / s.labels.valid_pixels() as f64;
            let mut g = support_prob_grad(p, &s.labels, &self.partition, scale);
            softmax_backward(p, &mut g);
            self.accumulate(&mut acc, &g, &s.features);
        }

        let mut g = self.query_prob_grad(&predictions.query);
        softmax_backward(&predictions.query, &mut g);
        self.accumulate(&mut acc, &g, self.query);

        Ok(match self.similarity {
            Similarity::Dot => acc,
            Similarity::Cosine { temperature } => cosine_backward(theta, acc, temperature),
        })
    }

    fn accumulate(&self, acc: &mut Array2<f64>, dlogits: &Array2<f64>, features: &FeatureMap) {
        match self.similarity {
            Similarity::Dot => {
                ndarray::linalg::general_mat_mul(1.0, &dlogits.t(), features.pixels(), 1.0, acc)
            }
            Similarity::Cosine { .. } => {
                let (f, _) = normalize_rows(features.pixels());
                ndarray::linalg::general_mat_mul(1.0, &dlogits.t(), &f, 1.0, acc)
            }
        }
    }

    /// dL/dp on the query for the entropy, marginal and distillation terms.
    fn query_prob_grad(&self, p: &ProbMap) -> Array2<f64> {
        let part = &self.partition;
        let w = &self.weights;
        let n = p.n_pixels() as f64;
        let probs = p.as_array();
        let mut g = Array2::<f64>::zeros(probs.dim());

        if w.query_entropy != 0.0 {
            let c = w.query_entropy / n;
            g.zip_mut_with(probs, |gv, &pv| {
                *gv -= c * (clamped_ln(pv) + pv * clamped_ln_deriv(pv));
            });
        }

        if w.marginal != 0.0 {
            let m = marginal(p);
            let coeff: Vec<f64> = m
                .iter()
                .zip(self.prior.as_slice())
                .map(|(&mk, &pk)| {
                    w.marginal / n * (clamped_ln(mk) - clamped_ln(pk) + mk * clamped_ln_deriv(mk))
                })
                .collect();
            for mut row in g.axis_iter_mut(Axis(0)) {
                for (gv, c) in row.iter_mut().zip(&coeff) {
                    *gv += c;
                }
            }
        }

        if w.beta != 0.0 {
            let c = w.beta / n;
            let old = self.old_probs.as_array();
            let mut dq = vec![0.0; part.n_old()];
            for ((prow, orow), mut grow) in probs
                .axis_iter(Axis(0))
                .zip(old.axis_iter(Axis(0)))
                .zip(g.axis_iter_mut(Axis(0)))
            {
                let mut q0 = prow[0];
                for kk in part.novel_classes() {
                    q0 += prow[kk];
                }
                for (m, dqm) in dq.iter_mut().enumerate() {
                    let qm = if m == 0 { q0 } else { prow[m] };
                    *dqm = c * (clamped_ln(qm) - clamped_ln(orow[m]) + qm * clamped_ln_deriv(qm));
                }
                for (m, dqm) in dq.iter().enumerate() {
                    grow[m] += dqm;
                }
                for kk in part.novel_classes() {
                    grow[kk] += dq[0];
                }
            }
        }
        g
    }
}

/// dL/dp for one support image: `-scale * sum_k y_k ln(proj(p)_k)`.
fn support_prob_grad(
    p: &ProbMap,
    labels: &OneHotMap,
    partition: &ClassPartition,
    scale: f64,
) -> Array2<f64> {
    let probs = p.as_array();
    let mut g = Array2::<f64>::zeros(probs.dim());
    let n_old = partition.n_old();
    for ((prow, yrow), mut grow) in probs
        .axis_iter(Axis(0))
        .zip(labels.as_array().axis_iter(Axis(0)))
        .zip(g.axis_iter_mut(Axis(0)))
    {
        let y_bg = yrow[0];
        if y_bg != 0.0 {
            let mut merged = 0.0;
            for kk in 0..n_old {
                merged += prow[kk];
            }
            let d = -scale * y_bg * clamped_ln_deriv(merged);
            for kk in 0..n_old {
                grow[kk] += d;
            }
        }
        for kk in partition.novel_classes() {
            if yrow[kk] != 0.0 {
                grow[kk] -= scale * yrow[kk] * clamped_ln_deriv(prow[kk]);
            }
        }
    }
    g
}

/// Converts dL/dp into dL/dlogits in place: `p * (g - <p, g>)` per row.
fn softmax_backward(p: &ProbMap, g: &mut Array2<f64>) {
    for (prow, mut grow) in p.as_array().axis_iter(Axis(0)).zip(g.axis_iter_mut(Axis(0))) {
        let mut dot = 0.0;
        for (&pv, &gv) in prow.iter().zip(grow.iter()) {
            dot += pv * gv;
        }
        for (gv, &pv) in grow.iter_mut().zip(prow.iter()) {
            *gv = pv * (*gv - dot);
        }
    }
}

/// Chain rule through `temperature * <theta_k / |theta_k|, f_hat>`.
fn cosine_backward(theta: &Array2<f64>, acc: Array2<f64>, temperature: f64) -> Array2<f64> {
    let (unit, norms) = normalize_rows(theta);
    let mut out = acc;
    for ((mut row, u), &norm) in out.axis_iter_mut(Axis(0)).zip(unit.axis_iter(Axis(0))).zip(&norms) {
        if norm == 0.0 {
            row.fill(0.0);
            continue;
        }
        let mut proj = 0.0;
        for (&a, &b) in row.iter().zip(u.iter()) {
            proj += a * b;
        }
        for (a, &b) in row.iter_mut().zip(u.iter()) {
            *a = temperature / norm * (*a - proj * b);
        }
    }
    out
}

/// Analytic gradient of [`loss_total`] with respect to every prototype row.
pub fn grad_total(objective: &Objective<'_>, theta: &Array2<f64>) -> Result<Array2<f64>> {
    objective.loss_and_grad(theta).map(|(_, _, g)| g)
}

/// Central differences of an arbitrary scalar function of a matrix.
pub fn central_differences<F>(f: F, point: &Array2<f64>, step: f64) -> Result<Array2<f64>>
where
    F: Fn(&Array2<f64>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(DiamError::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut grad = Array2::zeros(point.dim());
    let mut probe = point.clone();
    for idx in ndarray::indices(point.dim()) {
        let orig = point[idx];
        probe[idx] = orig + step;
        let plus = f(&probe)?;
        probe[idx] = orig - step;
        let minus = f(&probe)?;
        probe[idx] = orig;
        grad[idx] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Finite-difference counterpart of [`grad_total`].
pub fn finite_diff_grad(
    objective: &Objective<'_>,
    theta: &Array2<f64>,
    step: f64,
) -> Result<Array2<f64>> {
    objective.validate(theta)?;
    central_differences(|t| objective.loss(t).map(|l| l.total), theta, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{encode_labels, LabelMask};
    use crate::prior::uniform_prior;
    use ndarray::array;

    fn part(b: usize, n: usize) -> ClassPartition {
        ClassPartition::new(b, n).unwrap()
    }

    fn probs(a: Array2<f64>) -> ProbMap {
        ProbMap::new(a).unwrap()
    }

    #[test]
    fn xent_zero_when_fit() {
        let partition = part(1, 1);
        let p = probs(array![[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]);
        let y = encode_labels(&LabelMask::new(vec![0, 2]), &partition).unwrap();
        let v = loss_xent(&[p], &[y], &partition).unwrap();
        assert!(v >= 0.0 && v <= -(1.0 - 1e-10f64).ln());
    }

    #[test]
    fn xent_is_additive_over_images() {
        let partition = part(1, 1);
        let p = probs(array![[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]]);
        let y = encode_labels(&LabelMask::new(vec![0, 2]), &partition).unwrap();
        let one = loss_xent(&[p.clone()], &[y.clone()], &partition).unwrap();
        let two = loss_xent(&[p.clone(), p], &[y.clone(), y], &partition).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn xent_single_novel_pixel() {
        let partition = part(2, 1);
        let p = probs(array![[0.25, 0.25, 0.25, 0.25]]);
        let y = encode_labels(&LabelMask::new(vec![3]), &partition).unwrap();
        let v = loss_xent(&[p], &[y], &partition).unwrap();
        assert!((v + 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_requires_support() {
        assert!(matches!(
            loss_xent(&[], &[], &part(1, 1)),
            Err(DiamError::Task(_))
        ));
    }

    #[test]
    fn xent_skips_ignored_pixels_in_normalizer() {
        let partition = part(1, 1);
        let p = probs(array![[0.1, 0.1, 0.8], [0.3, 0.3, 0.4]]);
        let y = encode_labels(&LabelMask::new(vec![2, crate::labels::IGNORE]), &partition).unwrap();
        let v = loss_xent(&[p], &[y], &partition).unwrap();
        assert!((v + 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn query_entropy_cases() {
        assert_eq!(loss_query_entropy(&probs(array![[0.0, 1.0, 0.0]])), 0.0);
        let u = probs(Array2::from_elem((2, 4), 0.25));
        assert!((loss_query_entropy(&u) - 4f64.ln()).abs() < 1e-12);
        let m = probs(array![[0.5, 0.5], [1.0, 0.0]]);
        assert!((loss_query_entropy(&m) - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_kl_cases() {
        let q = probs(array![[0.2, 0.8], [0.4, 0.6]]);
        let prior = PriorVector::new(vec![0.3, 0.7]).unwrap();
        assert!(loss_marginal_kl(&q, &prior).unwrap().abs() < 1e-12);

        let q = probs(array![[1.0, 0.0], [1.0, 0.0]]);
        let prior = PriorVector::new(vec![0.5, 0.5]).unwrap();
        assert!((loss_marginal_kl(&q, &prior).unwrap() - 2f64.ln()).abs() < 1e-12);

        let bad = PriorVector::new(vec![1.0]).unwrap();
        assert!(loss_marginal_kl(&q, &bad).is_err());
    }

    #[test]
    fn marginal_kl_with_uniform_prior_is_entropy_complement() {
        let q = probs(array![[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1]]);
        let prior = uniform_prior(&part(2, 1));
        let m = marginal(&q);
        let h: f64 = m.iter().map(|v| -v * v.ln()).sum();
        let kl = loss_marginal_kl(&q, &prior).unwrap();
        assert!((kl - (4f64.ln() - h)).abs() < 1e-12);
    }

    #[test]
    fn kd_cases() {
        let partition = part(2, 1);
        let q = probs(array![[0.1, 0.3, 0.2, 0.4]]);
        let old = probs(array![[0.5, 0.3, 0.2]]);
        assert!(loss_kd(&q, &old, &partition).unwrap().abs() < 1e-12);

        // All novel mass lands in the background slot.
        let q = probs(array![[0.0, 0.1, 0.1, 0.8]]);
        let old = probs(array![[0.8, 0.1, 0.1]]);
        assert!(loss_kd(&q, &old, &partition).unwrap().abs() < 1e-12);

        let q = probs(array![[0.6, 0.0, 0.0, 0.4]]);
        let old = probs(array![[0.5, 0.25, 0.25]]);
        assert!((loss_kd(&q, &old, &partition).unwrap() - 2f64.ln()).abs() < 1e-12);

        assert!(loss_kd(&q, &probs(array![[0.5, 0.5]]), &partition).is_err());
    }

    #[test]
    fn zero_weights_leave_unsupervised_terms() {
        let partition = part(1, 1);
        let preds = Predictions {
            support: vec![probs(array![[0.2, 0.3, 0.5]])],
            query: probs(array![[0.1, 0.6, 0.3], [0.5, 0.25, 0.25]]),
        };
        let labels = vec![encode_labels(&LabelMask::new(vec![2]), &partition).unwrap()];
        let prior = PriorVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let old = probs(array![[0.3, 0.7], [0.9, 0.1]]);
        let w = LossWeights::new(0.0, 0.0);
        let l = loss_total(&preds, &labels, &prior, &old, &partition, &w).unwrap();
        assert!((l.total - (l.query_entropy + l.marginal_kl)).abs() < 1e-15);
        assert!(l.xent > 0.0 && l.kd > 0.0);
    }

    #[test]
    fn all_terms_vanish_together() {
        let partition = part(1, 1);
        let preds = Predictions {
            support: vec![probs(array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])],
            query: probs(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        };
        let labels = vec![encode_labels(&LabelMask::new(vec![2, 0]), &partition).unwrap()];
        let prior = PriorVector::new(vec![0.5, 0.5, 0.0]).unwrap();
        let old = probs(array![[1.0, 0.0], [0.0, 1.0]]);
        let l = loss_total(&preds, &labels, &prior, &old, &partition, &LossWeights::default())
            .unwrap();
        assert!(l.total.abs() < 1e-6, "{l:?}");
    }

    #[test]
    fn quadratic_surrogate_differentiates_exactly() {
        let point = array![[0.5, -1.0], [2.0, 0.25]];
        let f = |m: &Array2<f64>| -> Result<f64> {
            Ok(m.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum())
        };
        let g = central_differences(f, &point, 1e-3).unwrap();
        for (i, (&gv, &pv)) in g.iter().zip(point.iter()).enumerate() {
            assert!((gv - 2.0 * (i as f64 + 1.0) * pv).abs() < 1e-9);
        }
        assert!(central_differences(f, &point, 0.0).is_err());
    }
}
