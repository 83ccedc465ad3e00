//! Corrupted stand-ins for a motion estimator and a semantic segmenter.
//!
//! Both oracles start from ground truth and add seeded noise, so every
//! output is a deterministic function of the inputs, the seed and the frame
//! index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::grid::{FlowField, Image, LabelMap};
use crate::synth::Sequence;

/// Side length of the square blocks hit by flow dropout.
pub const DROPOUT_BLOCK: usize = 8;
/// Dropout replaces a block's flow error with a uniform offset in `±` this many pixels.
pub const DROPOUT_MAX_OFFSET: f32 = 3.0;

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Later frame gathers from the earlier one (`flows`).
    Forward,
    /// Earlier frame gathers from the later one (`rev_flows`).
    Backward,
}

impl Direction {
    pub fn sign(self) -> i64 {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }
    pub fn reversed(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionNoiseConfig {
    /// Per-component Gaussian noise, in pixels.
    pub gaussian_sigma: f32,
    /// Probability that an 8x8 block gets a uniform random offset instead.
    pub block_dropout_rate: f32,
    pub seed: u64,
}

impl MotionNoiseConfig {
    pub fn perfect() -> Self {
        Self { gaussian_sigma: 0.0, block_dropout_rate: 0.0, seed: 0 }
    }

    pub fn standard(seed: u64) -> Self {
        Self { gaussian_sigma: 0.5, block_dropout_rate: 0.05, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(Error::Config(format!("gaussian_sigma {} must be >= 0", self.gaussian_sigma)));
        }
        if !(0.0..=1.0).contains(&self.block_dropout_rate) {
            return Err(Error::Config(format!(
                "block_dropout_rate {} outside [0, 1]",
                self.block_dropout_rate
            )));
        }
        Ok(())
    }
}

/// Noisy flow estimate for frame `k`: `flows[k]` when moving forward in
/// time, `rev_flows[k]` when moving backward.
pub fn motion_oracle(
    seq: &Sequence,
    cfg: &MotionNoiseConfig,
    k: usize,
    direction: Direction,
) -> Result<FlowField> {
    cfg.validate()?;
    let gt = seq.flow_into_neighbor(k, direction == Direction::Forward).ok_or_else(|| {
        Error::Range(format!(
            "no {direction:?} flow for frame {k} in a {}-frame sequence",
            seq.len()
        ))
    })?;
    Ok(perturb_flow(gt, cfg, k, direction))
}

pub fn perturb_flow(gt: &FlowField, cfg: &MotionNoiseConfig, k: usize, direction: Direction) -> FlowField {
    if cfg.gaussian_sigma == 0.0 && cfg.block_dropout_rate == 0.0 {
        return gt.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, k as u64, direction as u64 + 1));
    let (w, h) = gt.dims();
    let (bw, bh) = (w.div_ceil(DROPOUT_BLOCK), h.div_ceil(DROPOUT_BLOCK));
    let blocks: Vec<Option<[f32; 2]>> = (0..bw * bh)
        .map(|_| {
            let hit = rng.random::<f32>() < cfg.block_dropout_rate;
            let off = [
                rng.random_range(-DROPOUT_MAX_OFFSET..=DROPOUT_MAX_OFFSET),
                rng.random_range(-DROPOUT_MAX_OFFSET..=DROPOUT_MAX_OFFSET),
            ];
            hit.then_some(off)
        })
        .collect();
    let normal = Normal::new(0.0f32, cfg.gaussian_sigma.max(0.0)).expect("sigma is finite");
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let [u, v] = gt.get(x, y);
            let d = match blocks[(y / DROPOUT_BLOCK) * bw + x / DROPOUT_BLOCK] {
                Some(off) => [u + off[0], v + off[1]],
                None if cfg.gaussian_sigma > 0.0 => {
                    [u + normal.sample(&mut rng), v + normal.sample(&mut rng)]
                }
                None => [u, v],
            };
            data.push(d);
        }
    }
    FlowField::new(w, h, data).expect("finite perturbation of a finite field")
}

/// Confidence ranges per corruption event; values are drawn uniformly.
///
/// These are repository constants standing in for a calibrated teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceModel {
    pub clean: f32,
    pub boundary: (f32, f32),
    pub corrupted: (f32, f32),
    pub ignore: (f32, f32),
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self { clean: 1.0, boundary: (0.85, 1.0), corrupted: (0.3, 0.92), ignore: (0.2, 0.6) }
    }
}

impl ConfidenceModel {
    fn validate(&self) -> Result<()> {
        let ok = |r: (f32, f32)| 0.0 <= r.0 && r.0 <= r.1 && r.1 <= 1.0;
        if !(0.0..=1.0).contains(&self.clean) || ![self.boundary, self.corrupted, self.ignore].into_iter().all(ok) {
            return Err(Error::Config("confidence ranges must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticNoiseConfig {
    /// Probability a pixel's class is replaced by its confusion partner.
    pub confusion_rate: f32,
    /// Pixels within this Chebyshev distance of a class boundary get degraded confidence.
    pub boundary_erosion_px: usize,
    /// Probability a pixel of a structure at most 2 px thick is mispredicted.
    pub thin_structure_miss_rate: f32,
    #[serde(default)]
    pub confidence_model: ConfidenceModel,
    /// Pixels with confidence at or below this are dropped by thresholding.
    pub threshold: f32,
    /// Partner class per class id; empty selects [`default_confusion_table`].
    #[serde(default)]
    pub confusion_table: Vec<u8>,
    pub seed: u64,
}

impl SemanticNoiseConfig {
    pub fn perfect() -> Self {
        Self {
            confusion_rate: 0.0,
            boundary_erosion_px: 0,
            thin_structure_miss_rate: 0.0,
            confidence_model: ConfidenceModel::default(),
            threshold: 0.9,
            confusion_table: Vec::new(),
            seed: 0,
        }
    }

    pub fn standard(seed: u64) -> Self {
        Self {
            confusion_rate: 0.15,
            boundary_erosion_px: 2,
            thin_structure_miss_rate: 0.5,
            seed,
            ..Self::perfect()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (name, r) in [
            ("confusion_rate", self.confusion_rate),
            ("thin_structure_miss_rate", self.thin_structure_miss_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !self.confusion_table.is_empty()
            && (self.confusion_table.len() != num_classes
                || self.confusion_table.iter().any(|&c| c as usize >= num_classes))
        {
            return Err(Error::Config(format!(
                "confusion table must map each of {num_classes} classes to a class"
            )));
        }
        self.confidence_model.validate()
    }

    pub fn table(&self, num_classes: usize) -> Vec<u8> {
        if self.confusion_table.is_empty() {
            default_confusion_table(num_classes)
        } else {
            self.confusion_table.clone()
        }
    }
}

/// Pairs neighbouring class ids (0<->1, 2<->3, ...); an odd last class maps to 0.
pub fn default_confusion_table(num_classes: usize) -> Vec<u8> {
    (0..num_classes)
        .map(|c| {
            let p = c ^ 1;
            if p < num_classes {
                p as u8
            } else if num_classes > 1 {
                0
            } else {
                c as u8
            }
        })
        .collect()
}

/// Per-pixel confidence in `[0, 1]`, same layout as a single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height || data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("confidence map must hold w*h values in [0, 1]".into()));
        }
        Ok(Self { width, height, data })
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPrediction {
    /// Raw prediction; never contains the ignore id.
    pub labels: LabelMap,
    pub confidence: ConfidenceMap,
}

impl SemanticPrediction {
    /// Drops pixels whose confidence does not exceed `threshold` to ignore.
    pub fn thresholded(&self, threshold: f32) -> LabelMap {
        let ignore = self.labels.ignore_id();
        let data = self
            .labels
            .data()
            .iter()
            .zip(self.confidence.data())
            .map(|(&l, &c)| if c > threshold { l } else { ignore })
            .collect();
        LabelMap::from_raw(&self.labels, data)
    }
}

/// Pixels belonging to a same-class run of at most 2 px horizontally or vertically.
pub fn thin_structure_mask(labels: &LabelMap) -> Vec<bool> {
    let (w, h) = labels.dims();
    let d = labels.data();
    let mut thin = vec![false; w * h];
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let start = x;
            while x < w && d[y * w + x] == d[y * w + start] {
                x += 1;
            }
            if x - start <= 2 {
                (start..x).for_each(|i| thin[y * w + i] = true);
            }
        }
    }
    for x in 0..w {
        let mut y = 0;
        while y < h {
            let start = y;
            while y < h && d[y * w + x] == d[start * w + x] {
                y += 1;
            }
            if y - start <= 2 {
                (start..y).for_each(|j| thin[j * w + x] = true);
            }
        }
    }
    thin
}

/// Pixels within Chebyshev distance `radius` of a pixel with a different label.
pub fn boundary_band(labels: &LabelMap, radius: usize) -> Vec<bool> {
    let (w, h) = labels.dims();
    let mut band = vec![false; w * h];
    if radius == 0 {
        return band;
    }
    let r = radius as i64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let c = labels.get(x as usize, y as usize);
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64
                        && labels.get(nx as usize, ny as usize) != c
                    {
                        band[y as usize * w + x as usize] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    band
}

fn dominant_neighbor(labels: &LabelMap, x: usize, y: usize, exclude: u8) -> Option<u8> {
    let (w, h) = labels.dims();
    let mut counts = vec![0u32; labels.num_classes()];
    for ny in y.saturating_sub(1)..(y + 2).min(h) {
        for nx in x.saturating_sub(1)..(x + 2).min(w) {
            let c = labels.get(nx, ny);
            if c != exclude && (c as usize) < counts.len() {
                counts[c as usize] += 1;
            }
        }
    }
    let (best, n) = counts.iter().enumerate().max_by_key(|&(c, &n)| (n, std::cmp::Reverse(c)))?;
    (*n > 0).then_some(best as u8)
}

/// Corrupted segmentation of `image` derived from its ground truth.
///
/// Event order per pixel: ground-truth ignore is always predicted as a
/// random class with low confidence; a missed thin-structure pixel takes the
/// dominant neighbouring class; otherwise the class is swapped to its
/// confusion partner with probability `confusion_rate`. Correct pixels in
/// the boundary band get degraded confidence.
pub fn semantic_oracle(
    labels_gt: &LabelMap,
    image: &Image,
    cfg: &SemanticNoiseConfig,
    frame_index: usize,
) -> Result<SemanticPrediction> {
    ensure_same_dims("semantic_oracle", labels_gt.dims(), image.dims())?;
    let c = labels_gt.num_classes();
    cfg.validate(c)?;
    let table = cfg.table(c);
    let model = &cfg.confidence_model;
    let ignore = labels_gt.ignore_id();
    let (w, h) = labels_gt.dims();
    let thin = if cfg.thin_structure_miss_rate > 0.0 {
        thin_structure_mask(labels_gt)
    } else {
        vec![false; w * h]
    };
    let band = boundary_band(labels_gt, cfg.boundary_erosion_px);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, frame_index as u64, 0x5e4a));
    let draw = |rng: &mut ChaCha8Rng, r: (f32, f32)| {
        if r.0 == r.1 {
            r.0
        } else {
            rng.random_range(r.0..r.1)
        }
    };

    let mut pred = Vec::with_capacity(w * h);
    let mut conf = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let gt = labels_gt.get(x, y);
            let (p, q) = if gt == ignore {
                let p = rng.random_range(0..c) as u8;
                (p, draw(&mut rng, model.ignore))
            } else if thin[i] && rng.random::<f32>() < cfg.thin_structure_miss_rate {
                let p = dominant_neighbor(labels_gt, x, y, gt)
                    .filter(|&p| p != ignore)
                    .unwrap_or(table[gt as usize]);
                (p, draw(&mut rng, model.corrupted))
            } else if cfg.confusion_rate > 0.0 && rng.random::<f32>() < cfg.confusion_rate {
                (table[gt as usize], draw(&mut rng, model.corrupted))
            } else if band[i] {
                (gt, draw(&mut rng, model.boundary))
            } else {
                (gt, model.clean)
            };
            pred.push(p);
            conf.push(q);
        }
    }
    Ok(SemanticPrediction {
        labels: LabelMap::new(w, h, c, ignore, pred)?,
        confidence: ConfidenceMap::new(w, h, conf)?,
    })
}

/// Runs the semantic oracle on frame `k` of a sequence.
pub fn semantic_for_frame(seq: &Sequence, cfg: &SemanticNoiseConfig, k: usize) -> Result<SemanticPrediction> {
    let (labels, image) = seq
        .labels
        .get(k)
        .zip(seq.frames.get(k))
        .ok_or_else(|| Error::Range(format!("frame {k} outside {}-frame sequence", seq.len())))?;
    semantic_oracle(labels, image, cfg, k)
}

/// Both noise models together, as consumed by the propagation engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracles {
    pub motion: MotionNoiseConfig,
    pub semantic: SemanticNoiseConfig,
}

impl Oracles {
    pub fn perfect() -> Self {
        Self { motion: MotionNoiseConfig::perfect(), semantic: SemanticNoiseConfig::perfect() }
    }

    pub fn standard(seed: u64) -> Self {
        Self {
            motion: MotionNoiseConfig::standard(mix_seed(seed, 1, 0)),
            semantic: SemanticNoiseConfig::standard(mix_seed(seed, 2, 0)),
        }
    }

    /// Standard noise levels with the confusion table of the standard benchmark.
    pub fn benchmark(seed: u64) -> Self {
        let mut o = Self::standard(seed);
        o.semantic.confusion_table = crate::synth::STANDARD_CONFUSION_TABLE.to_vec();
        o
    }

    /// Same noise levels with both seeds re-derived from `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut o = self.clone();
        o.motion.seed = mix_seed(seed, 1, 0);
        o.semantic.seed = mix_seed(seed, 2, 0);
        o
    }
}
