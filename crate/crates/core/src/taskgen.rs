//! Synthetic episodes: isotropic Gaussian class clusters laid out as
//! rectangular regions on a tile grid, with a base classifier that plays
//! the role of a trained model.
//!
//! Class means are `separation / sqrt(2)` times random orthonormal
//! directions, so every pair of means is exactly `separation` apart in units
//! of the unit within-class standard deviation.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DiamError, Result};
use crate::inference::{GfssTask, SupportImage};
use crate::labels::LabelMask;
use crate::numeric::{softmax_in_place, ClassPartition, FeatureMap};

/// How the synthetic "pretrained" base classifier is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseClassifierMode {
    /// Rows are the planted means. The background row also carries the
    /// novel means, as a classifier trained with unannotated novel objects
    /// labeled background would.
    Planted,
    /// A few gradient steps of softmax cross entropy from zero on
    /// base-annotated synthetic images (novel objects labeled background).
    Fitted {
        images: usize,
        steps: usize,
        learning_rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub d: usize,
    pub n_base: usize,
    pub n_novel: usize,
    pub height: usize,
    pub width: usize,
    /// Support images per novel class.
    pub shots: usize,
    pub separation: f64,
    pub background_fraction: f64,
    /// Side of the square tiles that make up class regions.
    pub tile: usize,
    /// Base classes placed in every image next to the novel content.
    pub base_per_image: usize,
    /// Weight of each novel mean folded into the planted background row.
    pub novel_in_background: f64,
    pub base_classifier: BaseClassifierMode,
    pub foreground_maps: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d: 512,
            n_base: 15,
            n_novel: 5,
            height: 32,
            width: 32,
            shots: 5,
            separation: 6.0,
            background_fraction: 0.5,
            tile: 4,
            base_per_image: 15,
            novel_in_background: 0.5,
            base_classifier: BaseClassifierMode::Planted,
            foreground_maps: false,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn partition(&self) -> Result<ClassPartition> {
        ClassPartition::new(self.n_base, self.n_novel)
    }

    fn tiles(&self) -> (usize, usize) {
        (self.height / self.tile, self.width / self.tile)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DiamError::Config(m));
        let partition = self.partition()?;
        if self.d == 0 || self.height == 0 || self.width == 0 || self.shots == 0 || self.tile == 0 {
            return err(format!("dimensions, grid, tile and shots must be positive: {self:?}"));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return err(format!("separation must be positive, got {}", self.separation));
        }
        if !(self.background_fraction > 0.0 && self.background_fraction < 1.0) {
            return err(format!(
                "background fraction must lie in (0, 1), got {}",
                self.background_fraction
            ));
        }
        if self.height % self.tile != 0 || self.width % self.tile != 0 {
            return err(format!(
                "grid {}x{} is not divisible by tile {}",
                self.height, self.width, self.tile
            ));
        }
        if partition.n_classes() > self.d {
            return err(format!(
                "{} classes cannot have orthogonal means in d={}",
                partition.n_classes(),
                self.d
            ));
        }
        let (ty, tx) = self.tiles();
        let crowded = self.n_novel + self.base_per_image.min(self.n_base);
        if crowded > ty * tx {
            return err(format!("{crowded} classes do not fit in {} tiles", ty * tx));
        }
        if let BaseClassifierMode::Fitted {
            images,
            learning_rate,
            ..
        } = self.base_classifier
        {
            if images == 0 || !(learning_rate > 0.0) {
                return err("fitted base classifier needs images > 0 and a positive rate".into());
            }
        }
        Ok(())
    }
}

/// Ground truth kept by the generator for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedStats {
    /// `(n_classes, d)` class means.
    pub means: Array2<f64>,
    /// Query class proportions from the layout's tile counts.
    pub query_proportions: Vec<f64>,
    /// Labeled support pixel count per novel class.
    pub novel_support_pixels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticEpisode {
    pub task: GfssTask,
    pub base_classifier: Array2<f64>,
    pub stats: PlantedStats,
    /// `(n_novel, n_pixels)` per-class foreground probabilities on the query.
    pub foreground_maps: Option<Array2<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows, d));
    let mut r = 0;
    while r < rows {
        let mut v: Array1<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for prev in out.axis_iter(Axis(0)).take(r) {
            let proj = v.dot(&prev);
            v.scaled_add(-proj, &prev);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.mapv_inplace(|x| x / norm);
        out.row_mut(r).assign(&v);
        r += 1;
    }
    out
}

struct Layout {
    labels: Vec<u8>,
    tile_counts: Vec<usize>,
}

/// Serpentine tile order keeps consecutive tiles adjacent.
fn serpentine(ty: usize, tx: usize) -> Vec<(usize, usize)> {
    (0..ty)
        .flat_map(|y| {
            let row: Vec<_> = if y % 2 == 0 {
                (0..tx).map(|x| (y, x)).collect()
            } else {
                (0..tx).rev().map(|x| (y, x)).collect()
            };
            row
        })
        .collect()
}

/// Places each present class as one contiguous run of tiles, with
/// background tiles scattered between runs.
fn layout(
    rng: &mut ChaCha8Rng,
    config: &SyntheticConfig,
    present: &[usize],
    n_classes: usize,
) -> Layout {
    let (ty, tx) = config.tiles();
    let total = ty * tx;
    let bg_tiles = ((config.background_fraction * total as f64).round() as usize)
        .min(total - present.len());
    let object_tiles = total - bg_tiles;

    let mut order: Vec<usize> = present.to_vec();
    order.shuffle(rng);
    let mut blocks: Vec<(usize, usize)> = order
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let extra = usize::from(i < object_tiles % present.len());
            (c, object_tiles / present.len() + extra)
        })
        .collect();
    blocks.extend(std::iter::repeat_n((0, 1), bg_tiles));
    blocks.shuffle(rng);

    let mut tile_counts = vec![0usize; n_classes];
    let mut tile_labels = vec![0u8; total];
    let cells = serpentine(ty, tx);
    let mut cursor = 0;
    for (class, len) in blocks {
        for _ in 0..len {
            let (y, x) = cells[cursor];
            tile_labels[y * tx + x] = class as u8;
            cursor += 1;
        }
        tile_counts[class] += len;
    }

    let mut labels = vec![0u8; config.height * config.width];
    for (i, l) in labels.iter_mut().enumerate() {
        let (py, px) = (i / config.width, i % config.width);
        *l = tile_labels[(py / config.tile) * tx + px / config.tile];
    }
    Layout {
        labels,
        tile_counts,
    }
}

fn sample_features(
    rng: &mut ChaCha8Rng,
    labels: &[u8],
    means: &Array2<f64>,
    height: usize,
    width: usize,
) -> FeatureMap {
    let d = means.ncols();
    let mut pixels = Array2::<f64>::zeros((labels.len(), d));
    for (mut row, &l) in pixels.axis_iter_mut(Axis(0)).zip(labels) {
        let mean = means.row(l as usize);
        for (v, &m) in row.iter_mut().zip(mean.iter()) {
            *v = m + gaussian(rng);
        }
    }
    FeatureMap::new(pixels, height, width).expect("finite synthetic features")
}

fn pick_base(rng: &mut ChaCha8Rng, partition: &ClassPartition, count: usize) -> Vec<usize> {
    let mut base: Vec<usize> = partition.base_classes().collect();
    base.shuffle(rng);
    base.truncate(count.min(partition.n_base));
    base
}

fn relabel_for_base_model(labels: &[u8], partition: &ClassPartition) -> Vec<u8> {
    labels
        .iter()
        .map(|&l| if partition.is_novel(l as usize) { 0 } else { l })
        .collect()
}

fn fit_base_classifier(
    rng: &mut ChaCha8Rng,
    config: &SyntheticConfig,
    means: &Array2<f64>,
    partition: &ClassPartition,
    images: usize,
    steps: usize,
    learning_rate: f64,
) -> Array2<f64> {
    let all: Vec<usize> = (1..partition.n_classes()).collect();
    let data: Vec<(FeatureMap, Vec<u8>)> = (0..images)
        .map(|_| {
            let mut present = all.clone();
            present.shuffle(rng);
            present.truncate(config.base_per_image.max(1) + 1);
            let lay = layout(rng, config, &present, partition.n_classes());
            let feats = sample_features(rng, &lay.labels, means, config.height, config.width);
            (feats, relabel_for_base_model(&lay.labels, partition))
        })
        .collect();

    let n_total: usize = data.iter().map(|(f, _)| f.n_pixels()).sum();
    let mut theta = Array2::<f64>::zeros((partition.n_old(), config.d));
    for _ in 0..steps {
        let mut grad = Array2::<f64>::zeros(theta.dim());
        for (feats, labels) in &data {
            let mut p = feats.pixels().dot(&theta.t());
            softmax_in_place(&mut p);
            for (mut row, &l) in p.axis_iter_mut(Axis(0)).zip(labels) {
                row[l as usize] -= 1.0;
            }
            ndarray::linalg::general_mat_mul(
                1.0 / n_total as f64,
                &p.t(),
                feats.pixels(),
                1.0,
                &mut grad,
            );
        }
        theta.scaled_add(-learning_rate, &grad);
    }
    theta
}

fn foreground_maps(query: &FeatureMap, means: &Array2<f64>, partition: &ClassPartition) -> Array2<f64> {
    let mut maps = Array2::<f64>::zeros((partition.n_novel, query.n_pixels()));
    for (slot, class) in partition.novel_classes().enumerate() {
        let mean = means.row(class);
        let norm = mean.dot(&mean).sqrt();
        for (j, x) in query.pixels().axis_iter(Axis(0)).enumerate() {
            let score = x.dot(&mean) / norm - norm / 2.0;
            maps[[slot, j]] = 1.0 / (1.0 + (-2.0 * score).exp());
        }
    }
    maps
}

pub fn gen_task(config: &SyntheticConfig) -> Result<SyntheticEpisode> {
    config.validate()?;
    let partition = config.partition()?;
    let k = partition.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let scale = config.separation / std::f64::consts::SQRT_2;
    let means = orthonormal_rows(&mut rng, k, config.d) * scale;

    // Query: every novel class plus a few base classes.
    let mut present: Vec<usize> = partition.novel_classes().collect();
    present.extend(pick_base(&mut rng, &partition, config.base_per_image));
    let query_layout = layout(&mut rng, config, &present, k);
    let query = sample_features(&mut rng, &query_layout.labels, &means, config.height, config.width);
    let n_tiles = (config.tiles().0 * config.tiles().1) as f64;
    let query_proportions = query_layout
        .tile_counts
        .iter()
        .map(|&c| c as f64 / n_tiles)
        .collect();

    // Support: `shots` images per novel class, base objects labeled background.
    let mut support = Vec::with_capacity(config.shots * config.n_novel);
    let mut novel_support_pixels = vec![0usize; config.n_novel];
    for (slot, class) in partition.novel_classes().enumerate() {
        for _ in 0..config.shots {
            let mut present = vec![class];
            present.extend(pick_base(&mut rng, &partition, config.base_per_image));
            let lay = layout(&mut rng, config, &present, k);
            let features = sample_features(&mut rng, &lay.labels, &means, config.height, config.width);
            let labels: Vec<u8> = lay
                .labels
                .iter()
                .map(|&l| if partition.is_base(l as usize) { 0 } else { l })
                .collect();
            novel_support_pixels[slot] += labels.iter().filter(|&&l| l as usize == class).count();
            support.push(SupportImage {
                features,
                labels: LabelMask::new(labels),
            });
        }
    }

    let base_classifier = match config.base_classifier {
        BaseClassifierMode::Planted => {
            let mut rows = means.slice(ndarray::s![..partition.n_old(), ..]).to_owned();
            for class in partition.novel_classes() {
                rows.row_mut(0)
                    .scaled_add(config.novel_in_background, &means.row(class));
            }
            rows
        }
        BaseClassifierMode::Fitted {
            images,
            steps,
            learning_rate,
        } => fit_base_classifier(&mut rng, config, &means, &partition, images, steps, learning_rate),
    };

    let fg = config
        .foreground_maps
        .then(|| foreground_maps(&query, &means, &partition));

    let task = GfssTask::new(
        support,
        query,
        Some(LabelMask::new(query_layout.labels)),
        partition,
    )?;
    Ok(SyntheticEpisode {
        task,
        base_classifier,
        stats: PlantedStats {
            means,
            query_proportions,
            novel_support_pixels,
        },
        foreground_maps: fg,
    })
}

/// Seed of task `index` in a suite seeded with `suite_seed`.
pub fn derive_task_seed(suite_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(suite_seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

pub fn gen_suite(template: &SyntheticConfig, n_tasks: usize, seed: u64) -> Result<Vec<SyntheticEpisode>> {
    if n_tasks == 0 {
        return Err(DiamError::Config("a suite needs at least one task".into()));
    }
    (0..n_tasks)
        .map(|i| {
            gen_task(&SyntheticConfig {
                seed: derive_task_seed(seed, i),
                ..template.clone()
            })
        })
        .collect()
}
