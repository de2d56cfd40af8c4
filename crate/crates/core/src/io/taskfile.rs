//! Binary task container.
//!
//! Little-endian throughout:
//!
//! ```text
//! "DIAM"  u16 version
//! u32 d, n_base, n_novel, height, width, n_support, flags
//! sections, each as u64 byte length followed by the payload:
//!   base classifier    f32  (1 + n_base) x d
//!   support features   f32  n_support x height x width x d
//!   support masks      u8   n_support x height x width
//!   query features     f32  height x width x d
//!   query labels       u8   height x width              (flags bit 0)
//!   foreground maps    f32  n_novel x height x width    (flags bit 1)
//! ```
//!
//! Bytes after the last declared section are ignored.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{shape_err, DiamError, Result};
use crate::inference::{GfssTask, SupportImage};
use crate::labels::LabelMask;
use crate::numeric::{ClassPartition, FeatureMap};

pub const TASK_MAGIC: &[u8; 4] = b"DIAM";
pub const TASK_VERSION: u16 = 1;

pub const FLAG_QUERY_LABELS: u32 = 1;
pub const FLAG_FOREGROUND_MAPS: u32 = 1 << 1;
const KNOWN_FLAGS: u32 = FLAG_QUERY_LABELS | FLAG_FOREGROUND_MAPS;

/// Everything a task file carries.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBundle {
    pub task: GfssTask,
    /// `(1 + n_base, d)` trained base classifier, background row first.
    pub base_classifier: Array2<f64>,
    /// `(n_novel, n_pixels)` per-class foreground probabilities on the query.
    pub foreground_maps: Option<Array2<f64>>,
}

impl TaskBundle {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let part = &self.task.partition;
        let (h, w, d) = (self.task.query.height(), self.task.query.width(), self.task.query.dim());
        if self.base_classifier.dim() != (part.n_old(), d) {
            return Err(shape_err(format!(
                "base classifier is {:?}, expected ({}, {d})",
                self.base_classifier.dim(),
                part.n_old()
            )));
        }
        for (i, s) in self.task.support.iter().enumerate() {
            if (s.features.height(), s.features.width()) != (h, w) {
                return Err(shape_err(format!(
                    "support image {i} is {}x{}, query is {h}x{w}",
                    s.features.height(),
                    s.features.width()
                )));
            }
        }
        if let Some(maps) = &self.foreground_maps {
            if maps.dim() != (part.n_novel, h * w) {
                return Err(shape_err(format!(
                    "foreground maps are {:?}, expected ({}, {})",
                    maps.dim(),
                    part.n_novel,
                    h * w
                )));
            }
            if maps.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DiamError::Numeric("foreground maps must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DiamError::Format(format!("{what} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s<'a>(out: &mut Vec<u8>, len: usize, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    out.extend_from_slice(&(len as u64 * 4).to_le_bytes());
    for &v in values {
        let x = v as f32;
        if !x.is_finite() {
            return Err(DiamError::Numeric(format!("{v} is not representable as f32")));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Serializes a bundle. Values are stored as f32.
pub fn encode_task(bundle: &TaskBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let task = &bundle.task;
    let part = &task.partition;
    let q = &task.query;
    let mut flags = 0;
    if task.query_labels.is_some() {
        flags |= FLAG_QUERY_LABELS;
    }
    if bundle.foreground_maps.is_some() {
        flags |= FLAG_FOREGROUND_MAPS;
    }

    let mut out = Vec::new();
    out.extend_from_slice(TASK_MAGIC);
    out.extend_from_slice(&TASK_VERSION.to_le_bytes());
    for (v, what) in [
        (q.dim(), "d"),
        (part.n_base, "n_base"),
        (part.n_novel, "n_novel"),
        (q.height(), "height"),
        (q.width(), "width"),
        (task.support.len(), "support count"),
        (flags as usize, "flags"),
    ] {
        put_u32(&mut out, v, what)?;
    }

    put_f32s(&mut out, bundle.base_classifier.len(), bundle.base_classifier.iter())?;
    let support_len = task.support.iter().map(|s| s.features.pixels().len()).sum();
    put_f32s(&mut out, support_len, task.support.iter().flat_map(|s| s.features.pixels().iter()))?;
    let masks: Vec<u8> = task
        .support
        .iter()
        .flat_map(|s| s.labels.as_slice().iter().copied())
        .collect();
    put_bytes(&mut out, &masks);
    put_f32s(&mut out, q.pixels().len(), q.pixels().iter())?;
    if let Some(labels) = &task.query_labels {
        put_bytes(&mut out, labels.as_slice());
    }
    if let Some(maps) = &bundle.foreground_maps {
        put_f32s(&mut out, maps.len(), maps.iter())?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(DiamError::Corruption {
                section,
                detail: format!("truncated: {rest} of {n} bytes present"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4, "header")?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn section(&mut self, section: &'static str, expected: usize) -> Result<&'a [u8]> {
        let b = self.take(8, section)?;
        let declared = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        if declared != expected as u64 {
            return Err(DiamError::Corruption {
                section,
                detail: format!("declared {declared} bytes, header implies {expected}"),
            });
        }
        self.take(expected, section)
    }

    fn f32s(&mut self, section: &'static str, count: usize) -> Result<Vec<f64>> {
        let b = self.section(section, checked_bytes(section, count, 4)?)?;
        b.chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(DiamError::Corruption {
                        section,
                        detail: "non-finite value".into(),
                    })
                }
            })
            .collect()
    }
}

fn checked_bytes(section: &'static str, count: usize, width: usize) -> Result<usize> {
    count.checked_mul(width).ok_or(DiamError::Corruption {
        section,
        detail: "declared dimensions overflow".into(),
    })
}

fn dims(section: &'static str, factors: &[usize]) -> Result<usize> {
    factors.iter().try_fold(1usize, |acc, &f| {
        acc.checked_mul(f).ok_or(DiamError::Corruption {
            section,
            detail: "declared dimensions overflow".into(),
        })
    })
}

/// Parses and fully validates a task file image.
pub fn decode_task(bytes: &[u8]) -> Result<TaskBundle> {
    if bytes.len() < 6 || &bytes[..4] != TASK_MAGIC {
        return Err(DiamError::Format("missing DIAM magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TASK_VERSION {
        return Err(DiamError::Format(format!(
            "unsupported version {version} (expected {TASK_VERSION})"
        )));
    }
    let mut r = Reader { bytes, pos: 6 };
    let d = r.u32()?;
    let n_base = r.u32()?;
    let n_novel = r.u32()?;
    let height = r.u32()?;
    let width = r.u32()?;
    let n_support = r.u32()?;
    let flags = r.u32()? as u32;
    let header_err = |detail: String| DiamError::Corruption {
        section: "header",
        detail,
    };
    if flags & !KNOWN_FLAGS != 0 {
        return Err(header_err(format!("unknown flag bits {flags:#x}")));
    }
    if d == 0 || height == 0 || width == 0 || n_support == 0 {
        return Err(header_err(format!(
            "zero dimension in d={d} height={height} width={width} support={n_support}"
        )));
    }
    let partition = ClassPartition::new(n_base, n_novel).map_err(|e| header_err(e.to_string()))?;
    let n = dims("header", &[height, width])?;

    let base = r.f32s("base_classifier", dims("base_classifier", &[partition.n_old(), d])?)?;
    let support_features = r.f32s("support_features", dims("support_features", &[n_support, n, d])?)?;
    let masks = r.section("support_masks", dims("support_masks", &[n_support, n])?)?;
    let query = r.f32s("query_features", dims("query_features", &[n, d])?)?;
    let query_labels = if flags & FLAG_QUERY_LABELS != 0 {
        Some(LabelMask::new(r.section("query_labels", n)?.to_vec()))
    } else {
        None
    };
    let foreground_maps = if flags & FLAG_FOREGROUND_MAPS != 0 {
        let maps = r.f32s("foreground_maps", dims("foreground_maps", &[n_novel, n])?)?;
        Some(Array2::from_shape_vec((n_novel, n), maps).expect("length checked"))
    } else {
        None
    };

    let support = support_features
        .chunks_exact(n * d)
        .zip(masks.chunks_exact(n))
        .map(|(f, m)| {
            let pixels = Array2::from_shape_vec((n, d), f.to_vec()).expect("length checked");
            Ok(SupportImage {
                features: FeatureMap::new(pixels, height, width)?,
                labels: LabelMask::new(m.to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let query = FeatureMap::new(
        Array2::from_shape_vec((n, d), query).expect("length checked"),
        height,
        width,
    )?;

    let bundle = TaskBundle {
        task: GfssTask::new(support, query, query_labels, partition)?,
        base_classifier: Array2::from_shape_vec((partition.n_old(), d), base).expect("length checked"),
        foreground_maps,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_task(path: impl AsRef<Path>, bundle: &TaskBundle) -> Result<()> {
    fs::write(path, encode_task(bundle)?)?;
    Ok(())
}

pub fn read_task(path: impl AsRef<Path>) -> Result<TaskBundle> {
    decode_task(&fs::read(path)?)
}

pub const PREDICTION_MAGIC: &[u8; 4] = b"DIMP";
pub const PREDICTION_VERSION: u16 = 1;

/// A stored label map: `"DIMP"`, u16 version, u32 height, u32 width, then
/// one u8 label per pixel in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionMap {
    pub height: usize,
    pub width: usize,
    pub labels: LabelMask,
}

impl PredictionMap {
    pub fn new(labels: LabelMask, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err(format!(
                "{} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(14 + self.labels.len());
        out.extend_from_slice(PREDICTION_MAGIC);
        out.extend_from_slice(&PREDICTION_VERSION.to_le_bytes());
        put_u32(&mut out, self.height, "height")?;
        put_u32(&mut out, self.width, "width")?;
        out.extend_from_slice(self.labels.as_slice());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != PREDICTION_MAGIC {
            return Err(DiamError::Format("missing DIMP magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PREDICTION_VERSION {
            return Err(DiamError::Format(format!("unsupported prediction version {version}")));
        }
        let mut r = Reader { bytes, pos: 6 };
        let height = r.u32()?;
        let width = r.u32()?;
        let n = dims("labels", &[height, width])?;
        let labels = r.take(n, "labels")?.to_vec();
        Self::new(LabelMask::new(labels), height, width)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
