//! Anchor shapes, anchor generation, IoU and the differential-evolution
//! search for lesion-specific anchor sizes and aspect ratios.
//!
//! Sizes are absolute pixels. A `(size, ratio)` pair gives the shape
//! `w = size * sqrt(ratio)`, `h = size / sqrt(ratio)`, so area is `size^2`
//! and `w / h = ratio`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("anchor size and ratio must be positive, got size {size}, ratio {ratio}")]
    NonPositiveInput { size: f64, ratio: f64 },
    #[error("anchor config has no sizes, ratios or levels")]
    EmptyConfig,
    #[error("invalid anchor config: {0}")]
    InvalidConfig(String),
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("invalid differential evolution parameters: {0}")]
    InvalidDeParams(String),
    #[error("image must be at least 1x1, got {0}x{1}")]
    EmptyImage(usize, usize),
}

/// Axis-aligned box `[x1, x2] x [y1, y2]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> Box<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Box of size `w x h` centred on `(cx, cy)`.
    pub fn centered(cx: T, cy: T, w: T, h: T) -> Self {
        let two = T::lit(2.0);
        Self::new(cx - w / two, cy - h / two, cx + w / two, cy + h / two)
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let two = T::lit(2.0);
        ((self.x1 + self.x2) / two, (self.y1 + self.y2) / two)
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &Box<T>, b: &Box<T>) -> T {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// IoU of two shapes placed on a common centre.
#[inline]
pub fn centered_iou<T: Scalar>(w1: T, h1: T, w2: T, h2: T) -> T {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Width and height of the anchor with the given size and aspect ratio.
pub fn anchor_shape<T: Scalar>(size: T, ratio: T) -> Result<(T, T), AnchorError> {
    if !(size > T::zero() && ratio > T::zero() && size.is_finite() && ratio.is_finite()) {
        return Err(AnchorError::NonPositiveInput {
            size: size.as_f64(),
            ratio: ratio.as_f64(),
        });
    }
    let root = ratio.sqrt();
    Ok((size * root, size / root))
}

/// Pyramid level with its feature stride in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub name: String,
    pub stride: u32,
}

/// Anchor sizes, aspect ratios and pyramid levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub sizes: Vec<f64>,
    pub ratios: Vec<f64>,
    pub levels: Vec<PyramidLevel>,
}

/// `P2..` levels with strides `4, 8, 16, ...`.
pub fn pyramid_levels(count: usize) -> Vec<PyramidLevel> {
    (0..count)
        .map(|i| PyramidLevel {
            name: format!("P{}", i + 2),
            stride: 4u32 << i,
        })
        .collect()
}

impl AnchorConfig {
    /// Generic detector defaults, before any lesion-specific search.
    pub fn default_detector() -> Self {
        Self {
            sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            ratios: vec![0.5, 1.0, 2.0],
            levels: pyramid_levels(5),
        }
    }

    /// Sizes and ratios reported for DeepLesion, one pair per level P2..P6.
    pub fn lesion_reported() -> Self {
        Self {
            sizes: vec![16.0, 24.0, 64.0, 128.0, 256.0],
            ratios: vec![3.27, 1.78, 1.0, 0.56, 0.30],
            levels: pyramid_levels(5),
        }
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.sizes.is_empty() || self.ratios.is_empty() {
            return Err(AnchorError::EmptyConfig);
        }
        for (&s, &r) in self.sizes.iter().zip(self.ratios.iter().cycle()) {
            anchor_shape(s, r)?;
        }
        for &r in &self.ratios {
            anchor_shape(1.0, r)?;
        }
        if self.levels.iter().any(|l| l.stride == 0) {
            return Err(AnchorError::InvalidConfig("zero stride".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    /// Every pixel gets `{(s_1, r_j)} ∪ {(s_i, r_1)}`: `n + m - 1` shapes.
    Dense,
    /// Level `j` uses size `s_j` with every ratio at stride-spaced centres.
    Fpn,
}

/// Tiles anchors over a `width x height` image. Boxes are centred on pixel
/// or cell centres and are not clipped to the frame.
pub fn generate_anchors(
    cfg: &AnchorConfig,
    image: (usize, usize),
    mode: AnchorMode,
) -> Result<Vec<Box<f64>>, AnchorError> {
    cfg.validate()?;
    let (width, height) = image;
    if width == 0 || height == 0 {
        return Err(AnchorError::EmptyImage(width, height));
    }
    match mode {
        AnchorMode::Dense => {
            let mut shapes = Vec::with_capacity(cfg.sizes.len() + cfg.ratios.len() - 1);
            for &r in &cfg.ratios {
                shapes.push(anchor_shape(cfg.sizes[0], r)?);
            }
            for &s in &cfg.sizes[1..] {
                shapes.push(anchor_shape(s, cfg.ratios[0])?);
            }
            let mut out = Vec::with_capacity(width * height * shapes.len());
            for y in 0..height {
                for x in 0..width {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    out.extend(shapes.iter().map(|&(w, h)| Box::centered(cx, cy, w, h)));
                }
            }
            Ok(out)
        }
        AnchorMode::Fpn => {
            if cfg.levels.is_empty() {
                return Err(AnchorError::EmptyConfig);
            }
            if cfg.levels.len() != cfg.sizes.len() {
                return Err(AnchorError::InvalidConfig(format!(
                    "{} levels for {} sizes",
                    cfg.levels.len(),
                    cfg.sizes.len()
                )));
            }
            let mut out = Vec::new();
            for (level, &size) in cfg.levels.iter().zip(&cfg.sizes) {
                let stride = level.stride as usize;
                let shapes = cfg
                    .ratios
                    .iter()
                    .map(|&r| anchor_shape(size, r))
                    .collect::<Result<Vec<_>, _>>()?;
                let stride_f = stride as f64;
                for gy in 0..height.div_ceil(stride) {
                    for gx in 0..width.div_ceil(stride) {
                        let cx = (gx as f64 + 0.5) * stride_f;
                        let cy = (gy as f64 + 0.5) * stride_f;
                        out.extend(shapes.iter().map(|&(w, h)| Box::centered(cx, cy, w, h)));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Mean over ground-truth boxes of the best centre-aligned IoU against any
/// `(size, ratio)` shape in the cross product.
pub fn anchor_fitness(sizes: &[f64], ratios: &[f64], gt: &[Box<f64>]) -> Result<f64, AnchorError> {
    if gt.is_empty() {
        return Err(AnchorError::EmptyGroundTruth);
    }
    if sizes.is_empty() || ratios.is_empty() {
        return Err(AnchorError::EmptyConfig);
    }
    let shapes = sizes
        .iter()
        .flat_map(|&s| ratios.iter().map(move |&r| anchor_shape(s, r)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(shape_fitness(&shapes, gt))
}

fn shape_fitness(shapes: &[(f64, f64)], gt: &[Box<f64>]) -> f64 {
    let total: f64 = gt
        .iter()
        .map(|b| {
            let (w, h) = (b.width(), b.height());
            shapes
                .iter()
                .map(|&(aw, ah)| centered_iou(w, h, aw, ah))
                .fold(0.0, f64::max)
        })
        .sum();
    total / gt.len() as f64
}

/// DE/rand/1/bin settings for the anchor search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeParams {
    pub population: usize,
    pub mutation: f64,
    pub crossover: f64,
    pub generations: usize,
    /// Number of leading genes that are sizes; the rest are ratios.
    pub n_sizes: usize,
    /// `(lo, hi)` per gene.
    pub bounds: Vec<(f64, f64)>,
    pub seed: u64,
}

pub const SIZE_BOUNDS: (f64, f64) = (4.0, 512.0);
pub const RATIO_BOUNDS: (f64, f64) = (0.2, 5.0);

impl DeParams {
    /// Standard settings: NP = 50, F = 0.5, CR = 0.9, 200 generations.
    pub fn with_shape(n_sizes: usize, n_ratios: usize, seed: u64) -> Self {
        let mut bounds = vec![SIZE_BOUNDS; n_sizes];
        bounds.extend(std::iter::repeat_n(RATIO_BOUNDS, n_ratios));
        Self {
            population: 50,
            mutation: 0.5,
            crossover: 0.9,
            generations: 200,
            n_sizes,
            bounds,
            seed,
        }
    }

    /// Five sizes and five ratios.
    pub fn standard(seed: u64) -> Self {
        Self::with_shape(5, 5, seed)
    }

    pub fn n_ratios(&self) -> usize {
        self.bounds.len().saturating_sub(self.n_sizes)
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        let bad = |m: String| Err(AnchorError::InvalidDeParams(m));
        if self.population < 4 {
            return bad(format!("population {} < 4", self.population));
        }
        if !(self.mutation > 0.0 && self.mutation <= 2.0) {
            return bad(format!("mutation {} outside (0, 2]", self.mutation));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return bad(format!("crossover {} outside [0, 1]", self.crossover));
        }
        if self.n_sizes == 0 || self.n_ratios() == 0 {
            return bad("need at least one size gene and one ratio gene".into());
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
                return bad(format!("gene {i}: bounds ({lo}, {hi}) must satisfy 0 < lo < hi"));
            }
        }
        Ok(())
    }
}

/// Result of [`optimize_anchors_de`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeOutcome {
    /// Best individual: sizes ascending, ratios descending.
    pub config: AnchorConfig,
    pub fitness: f64,
    /// Best fitness after initialisation (entry 0) and after each generation.
    pub history: Vec<f64>,
}

/// Default detector anchors laid out as one individual, cycling the default
/// lists to fill the genome.
fn seed_individual(p: &DeParams) -> Vec<f64> {
    let defaults = AnchorConfig::default_detector();
    let sizes = defaults.sizes.iter().cycle().take(p.n_sizes);
    let ratios = defaults.ratios.iter().cycle().take(p.n_ratios());
    sizes
        .chain(ratios)
        .zip(&p.bounds)
        .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
        .collect()
}

fn genome_fitness(genome: &[f64], n_sizes: usize, gt: &[Box<f64>]) -> f64 {
    let (sizes, ratios) = genome.split_at(n_sizes);
    let shapes: Vec<(f64, f64)> = sizes
        .iter()
        .flat_map(|&s| ratios.iter().map(move |&r| (s * r.sqrt(), s / r.sqrt())))
        .collect();
    shape_fitness(&shapes, gt)
}

/// Searches anchor sizes and ratios maximising [`anchor_fitness`] with
/// DE/rand/1/bin.
///
/// The initial population holds the default detector anchors plus uniform
/// draws inside the bounds. Each generation builds all trial vectors from
/// the seeded RNG first, then scores them (in parallel) and applies greedy
/// selection, so the result depends only on `p`.
pub fn optimize_anchors_de(gt: &[Box<f64>], p: &DeParams) -> Result<DeOutcome, AnchorError> {
    if gt.is_empty() {
        return Err(AnchorError::EmptyGroundTruth);
    }
    if let Some(b) = gt.iter().find(|b| !b.is_valid()) {
        return Err(AnchorError::InvalidConfig(format!("invalid ground-truth box {b:?}")));
    }
    p.validate()?;
    let dim = p.bounds.len();
    let np = p.population;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let mut pop: Vec<Vec<f64>> = Vec::with_capacity(np);
    pop.push(seed_individual(p));
    while pop.len() < np {
        pop.push(p.bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect());
    }
    let mut fit: Vec<f64> = pop
        .par_iter()
        .map(|g| genome_fitness(g, p.n_sizes, gt))
        .collect();

    let best_of = |fit: &[f64]| {
        fit.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &f)| if f > acc.1 { (i, f) } else { acc })
    };
    let mut history = Vec::with_capacity(p.generations + 1);
    history.push(best_of(&fit).1);

    for _ in 0..p.generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let picks = loop {
                    let idx = sample(&mut rng, np, 3).into_vec();
                    if !idx.contains(&i) {
                        break idx;
                    }
                };
                let (a, b, c) = (&pop[picks[0]], &pop[picks[1]], &pop[picks[2]]);
                let forced = rng.gen_range(0..dim);
                (0..dim)
                    .map(|j| {
                        if j == forced || rng.gen::<f64>() < p.crossover {
                            let (lo, hi) = p.bounds[j];
                            (a[j] + p.mutation * (b[j] - c[j])).clamp(lo, hi)
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_fit: Vec<f64> = trials
            .par_iter()
            .map(|g| genome_fitness(g, p.n_sizes, gt))
            .collect();
        for (i, (trial, f)) in trials.into_iter().zip(trial_fit).enumerate() {
            if f >= fit[i] {
                pop[i] = trial;
                fit[i] = f;
            }
        }
        history.push(best_of(&fit).1);
    }

    let (best, fitness) = best_of(&fit);
    let (sizes, ratios) = pop[best].split_at(p.n_sizes);
    let mut sizes = sizes.to_vec();
    let mut ratios = ratios.to_vec();
    sizes.sort_by(f64::total_cmp);
    ratios.sort_by(|a, b| b.total_cmp(a));
    let levels = pyramid_levels(sizes.len());
    Ok(DeOutcome {
        config: AnchorConfig {
            sizes,
            ratios,
            levels,
        },
        fitness,
        history,
    })
}

/// Reads boxes from a plain `x1,y1,x2,y2` per-line file. Blank lines and
/// `#` comments are ignored.
pub fn parse_box_lines(text: &str) -> Result<Vec<Box<f64>>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        if vals.len() != 4 {
            return Err(format!("line {}: expected 4 values, found {}", i + 1, vals.len()));
        }
        let b = Box::new(vals[0], vals[1], vals[2], vals[3]);
        if !b.is_valid() {
            return Err(format!("line {}: box needs x2 > x1 and y2 > y1", i + 1));
        }
        out.push(b);
    }
    Ok(out)
}
