//! Raster types shared by every stage of the pipeline.
//!
//! All grids are row-major with `(x, y) = (column, row)` addressing and the
//! origin at the top-left corner. Values are immutable once constructed;
//! operations return new grids.

use crate::error::{ensure_same_dims, Error, Result};

/// Conventional id for pixels without a semantic definition.
pub const DEFAULT_IGNORE_ID: u8 = 255;

/// Dense map of hard class ids, `[0, num_classes)` plus a reserved ignore id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    num_classes: usize,
    ignore_id: u8,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(
        width: usize,
        height: usize,
        num_classes: usize,
        ignore_id: u8,
        data: Vec<u8>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("label map must be non-empty".into()));
        }
        if num_classes == 0 || num_classes > ignore_id as usize {
            return Err(Error::Validation(format!(
                "class count {num_classes} incompatible with ignore id {ignore_id}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "label data has {} entries, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|&&v| (v as usize) >= num_classes && v != ignore_id)
        {
            return Err(Error::Validation(format!(
                "class id {bad} outside [0, {num_classes}) and not ignore ({ignore_id})"
            )));
        }
        Ok(Self { width, height, num_classes, ignore_id, data })
    }

    pub fn filled(width: usize, height: usize, num_classes: usize, ignore_id: u8, value: u8) -> Result<Self> {
        Self::new(width, height, num_classes, ignore_id, vec![value; width * height])
    }

    /// Builds a map without re-validating ids; callers guarantee the invariant.
    pub(crate) fn from_raw(like: &LabelMap, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), like.data.len());
        debug_assert!(data
            .iter()
            .all(|&v| (v as usize) < like.num_classes || v == like.ignore_id));
        Self {
            width: like.width,
            height: like.height,
            num_classes: like.num_classes,
            ignore_id: like.ignore_id,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn ignore_id(&self) -> u8 {
        self.ignore_id
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_ignore(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == self.ignore_id
    }
}

/// Per-pixel class distributions. The all-zero vector stands for ignore.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMap {
    width: usize,
    height: usize,
    num_classes: usize,
    data: Vec<f32>,
}

impl SoftLabelMap {
    pub fn new(width: usize, height: usize, num_classes: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || num_classes == 0 {
            return Err(Error::Validation("soft label map must be non-empty".into()));
        }
        if data.len() != width * height * num_classes {
            return Err(Error::Validation(format!(
                "soft label data has {} entries, expected {}",
                data.len(),
                width * height * num_classes
            )));
        }
        for (i, px) in data.chunks_exact(num_classes).enumerate() {
            if px.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Validation(format!("pixel {i} has a negative or non-finite entry")));
            }
            let sum: f32 = px.iter().sum();
            if sum != 0.0 && (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Validation(format!("pixel {i} sums to {sum}")));
            }
        }
        Ok(Self { width, height, num_classes, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.num_classes;
        &self.data[i..i + self.num_classes]
    }
}

/// Interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Validation("image must be non-empty".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Validation(format!(
                "image data has {} entries, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Target-to-source displacement field: pixel `(x, y)` of the target frame
/// samples the source frame at `(x + u, y + v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<[f32; 2]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("flow field must be non-empty".into()));
        }
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "flow data has {} entries, expected {}",
                data.len(),
                width * height
            )));
        }
        if data.iter().any(|d| !d[0].is_finite() || !d[1].is_finite()) {
            return Err(Error::Validation("flow contains non-finite values".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 2]; width * height] }
    }

    pub fn uniform(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self { width, height, data: vec![[u, v]; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[[f32; 2]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl GateMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "mask data has {} entries, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// One-hot encoding; ignore pixels become the zero vector.
pub fn onehot_encode(labels: &LabelMap) -> SoftLabelMap {
    let c = labels.num_classes;
    let mut data = vec![0.0f32; labels.data.len() * c];
    for (i, &id) in labels.data.iter().enumerate() {
        if id != labels.ignore_id {
            data[i * c + id as usize] = 1.0;
        }
    }
    SoftLabelMap { width: labels.width, height: labels.height, num_classes: c, data }
}

/// Per-pixel argmax, lowest index on ties, zero vectors decode to `ignore_id`.
pub fn argmax_decode(soft: &SoftLabelMap, ignore_id: u8) -> Result<LabelMap> {
    if soft.num_classes > ignore_id as usize {
        return Err(Error::Validation(format!(
            "ignore id {ignore_id} collides with {} classes",
            soft.num_classes
        )));
    }
    let data = soft
        .data
        .chunks_exact(soft.num_classes)
        .map(|px| argmax_pixel(px).map_or(ignore_id, |c| c as u8))
        .collect();
    Ok(LabelMap {
        width: soft.width,
        height: soft.height,
        num_classes: soft.num_classes,
        ignore_id,
        data,
    })
}

/// Index of the first maximal entry, `None` for an all-zero vector.
pub(crate) fn argmax_pixel(px: &[f32]) -> Option<usize> {
    let mut best = 0usize;
    let mut best_v = 0.0f32;
    let mut any = false;
    for (c, &v) in px.iter().enumerate() {
        if v != 0.0 {
            any = true;
        }
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    any.then_some(best)
}

/// Euclidean distance between the channel vectors of two images at `(x, y)`.
pub fn pixel_distance(a: &Image, b: &Image, x: usize, y: usize) -> Result<f32> {
    ensure_same_dims("pixel_distance", a.dims(), b.dims())?;
    if a.channels != b.channels {
        return Err(Error::Shape(format!(
            "pixel_distance: {} vs {} channels",
            a.channels, b.channels
        )));
    }
    if x >= a.width || y >= a.height {
        return Err(Error::Range(format!("pixel ({x}, {y}) outside {}x{}", a.width, a.height)));
    }
    Ok(pixel_distance_unchecked(a.pixel(x, y), b.pixel(x, y)))
}

#[inline]
pub(crate) fn pixel_distance_unchecked(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f32>()
        .sqrt()
}
