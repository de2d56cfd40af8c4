//! Label encodings and the two probability-space projections.
//!
//! Support masks follow the novel-only annotation convention: base objects
//! in a support image carry the background label.

use ndarray::{Array2, Axis};

use crate::error::{shape_err, DiamError, Result};
use crate::numeric::{ClassPartition, ProbMap};

/// Sentinel for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Per-pixel class indices in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask(Vec<u8>);

impl LabelMask {
    pub fn new(labels: Vec<u8>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ignored(&self) -> usize {
        self.0.iter().filter(|&&v| v == IGNORE).count()
    }

    /// Every non-sentinel label is a valid class of `partition`.
    pub fn validate(&self, partition: &ClassPartition) -> Result<()> {
        let k = partition.n_classes();
        match self.0.iter().position(|&v| v != IGNORE && v as usize >= k) {
            Some(j) => Err(DiamError::Label(format!(
                "pixel {j} has class {} but only {k} classes exist",
                self.0[j]
            ))),
            None => Ok(()),
        }
    }

    /// Support masks may only contain background, novel classes or ignores.
    pub fn validate_support(&self, partition: &ClassPartition) -> Result<()> {
        self.validate(partition)?;
        match self
            .0
            .iter()
            .position(|&v| v != IGNORE && partition.is_base(v as usize))
        {
            Some(j) => Err(DiamError::Label(format!(
                "support pixel {j} carries base class {}; base objects must be labeled background",
                self.0[j]
            ))),
            None => Ok(()),
        }
    }
}

/// One-hot rows in the full label layout; ignored pixels are all-zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMap {
    rows: Array2<f64>,
    ignored: usize,
}

impl OneHotMap {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn ignored(&self) -> usize {
        self.ignored
    }

    /// Pixels that take part in loss normalization.
    pub fn valid_pixels(&self) -> usize {
        self.rows.nrows() - self.ignored
    }

    pub fn n_pixels(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.rows.ncols()
    }
}

pub fn encode_labels(mask: &LabelMask, partition: &ClassPartition) -> Result<OneHotMap> {
    mask.validate(partition)?;
    let mut rows = Array2::zeros((mask.len(), partition.n_classes()));
    let mut ignored = 0;
    for (j, &v) in mask.as_slice().iter().enumerate() {
        if v == IGNORE {
            ignored += 1;
        } else {
            rows[[j, v as usize]] = 1.0;
        }
    }
    Ok(OneHotMap { rows, ignored })
}

fn check_columns(p: &ProbMap, partition: &ClassPartition) -> Result<()> {
    if p.n_classes() != partition.n_classes() {
        return Err(shape_err(format!(
            "probability map has {} columns, partition expects {}",
            p.n_classes(),
            partition.n_classes()
        )));
    }
    Ok(())
}

/// Merges background and base mass into slot 0 and zeroes the base slots,
/// aligning predictions with novel-only support labels.
pub fn project_support(p: &ProbMap, partition: &ClassPartition) -> Result<ProbMap> {
    check_columns(p, partition)?;
    let mut out = Array2::zeros(p.as_array().dim());
    for (src, mut dst) in p.as_array().axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let mut merged = 0.0;
        for k in 0..partition.n_old() {
            merged += src[k];
        }
        dst[0] = merged;
        for k in partition.novel_classes() {
            dst[k] = src[k];
        }
    }
    Ok(ProbMap::from_array_unchecked(out))
}

/// Folds novel mass into background, giving a map over the base model's
/// `1 + n_base` classes.
pub fn project_new2old(p: &ProbMap, partition: &ClassPartition) -> Result<ProbMap> {
    check_columns(p, partition)?;
    let mut out = Array2::zeros((p.n_pixels(), partition.n_old()));
    for (src, mut dst) in p.as_array().axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let mut bg = src[0];
        for k in partition.novel_classes() {
            bg += src[k];
        }
        dst[0] = bg;
        for k in partition.base_classes() {
            dst[k] = src[k];
        }
    }
    Ok(ProbMap::from_array_unchecked(out))
}

/// Hard per-pixel prediction; ties go to the lowest class index.
pub fn argmax_decode(p: &ProbMap) -> LabelMask {
    let labels = p
        .as_array()
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask(labels)
}
