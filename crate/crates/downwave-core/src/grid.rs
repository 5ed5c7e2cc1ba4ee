//! Raster reflectivity fields and resampling primitives.
//!
//! A [`GridField`] is a rectangular raster of reflectivity values (dBZ).
//! Physical fields live in `[0, value_max]` (default 80 dBZ); normalized
//! fields (zero mean, unit variance over the training split) may take any
//! finite value and carry the same metadata so they can be denormalized.
//!
//! This module owns the resampling pair used throughout the pipeline:
//! block-average downsampling (the coarsening operator that produces the
//! low-resolution conditioning input) and bicubic upsampling (the
//! interpolation baseline and the conditioning pre-processor).

use ndarray::Array2;

use crate::error::{CoreError, Result};

/// Default physical ceiling for reflectivity fields, in dBZ.
pub const DEFAULT_VALUE_MAX: f32 = 80.0;

// =========================================================================
// Core types
// =========================================================================

/// A rectangular raster of finite reflectivity values plus range metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    values: Array2<f32>,
    value_max: f32,
}

impl GridField {
    /// Wraps a raster, rejecting non-finite entries.
    pub fn new(values: Array2<f32>, value_max: f32) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Argument(
                "grid field contains non-finite values".into(),
            ));
        }
        if !(value_max.is_finite() && value_max > 0.0) {
            return Err(CoreError::Argument(format!(
                "value_max must be positive and finite, got {value_max}"
            )));
        }
        Ok(Self { values, value_max })
    }

    /// Wraps a raster with the default 80 dBZ ceiling.
    pub fn from_values(values: Array2<f32>) -> Result<Self> {
        Self::new(values, DEFAULT_VALUE_MAX)
    }

    /// A zero field of the given shape.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
            value_max: DEFAULT_VALUE_MAX,
        }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn value_max(&self) -> f32 {
        self.value_max
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    /// Consumes the field, returning the raw raster.
    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    /// Replaces the raster in place through a closure; re-checks finiteness.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.values.mapv(&f), self.value_max)
    }

    /// True when every value lies in the physical range `[0, value_max]`.
    pub fn is_physical(&self) -> bool {
        self.values
            .iter()
            .all(|&v| (0.0..=self.value_max).contains(&v))
    }

    /// Clamps all values into the physical range `[0, value_max]`.
    pub fn clip_physical(&self) -> Self {
        Self {
            values: self.values.mapv(|v| v.clamp(0.0, self.value_max)),
            value_max: self.value_max,
        }
    }

    /// Center-crops to `(height, width)`; errors if the target is larger.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height() || width > self.width() || height == 0 || width == 0 {
            return Err(CoreError::Dimension(format!(
                "cannot crop {}x{} out of {}x{}",
                height,
                width,
                self.height(),
                self.width()
            )));
        }
        let r0 = (self.height() - height) / 2;
        let c0 = (self.width() - width) / 2;
        let values = self
            .values
            .slice(ndarray::s![r0..r0 + height, c0..c0 + width])
            .to_owned();
        Ok(Self {
            values,
            value_max: self.value_max,
        })
    }
}

/// Normalization statistics computed once over the training split and reused
/// verbatim for validation/test data and at sampling time.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl NormStats {
    pub fn new(mean: f32, std: f32) -> Result<Self> {
        if !(std.is_finite() && std > 0.0) || !mean.is_finite() {
            return Err(CoreError::Argument(format!(
                "normalization stats need finite mean and positive std, got mean={mean}, std={std}"
            )));
        }
        Ok(Self { mean, std })
    }

    /// Pooled mean/std over every pixel of every field (population variance,
    /// accumulated in f64 for exactness).
    pub fn from_fields<'a>(fields: impl IntoIterator<Item = &'a GridField>) -> Result<Self> {
        let mut n = 0u64;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for f in fields {
            for &v in f.values() {
                n += 1;
                sum += v as f64;
                sumsq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Err(CoreError::Argument(
                "cannot compute normalization stats over an empty set".into(),
            ));
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        Self::new(mean as f32, (var.sqrt() as f32).max(f32::MIN_POSITIVE))
    }
}

/// A matched high/low-resolution training pair.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub hr: GridField,
    pub lr: GridField,
    pub factor: usize,
}

impl PairSample {
    pub fn new(hr: GridField, lr: GridField, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(CoreError::Argument("pair factor must be positive".into()));
        }
        if hr.height() != lr.height() * factor || hr.width() != lr.width() * factor {
            return Err(CoreError::Dimension(format!(
                "pair dims {}x{} vs {}x{} are not related by factor {}",
                hr.height(),
                hr.width(),
                lr.height(),
                lr.width(),
                factor
            )));
        }
        Ok(Self { hr, lr, factor })
    }

    /// Builds a pair by block-averaging the high-resolution field.
    pub fn from_hr(hr: GridField, factor: usize) -> Result<Self> {
        let lr = block_average_downsample(&hr, factor)?;
        Self::new(hr, lr, factor)
    }
}

// =========================================================================
// Resampling
// =========================================================================

/// Coarsens a field by replacing every `factor`×`factor` block with its
/// arithmetic mean. Preserves the global mean exactly.
pub fn block_average_downsample(field: &GridField, factor: usize) -> Result<GridField> {
    if factor == 0 {
        return Err(CoreError::Argument(
            "downsampling factor must be positive".into(),
        ));
    }
    let (h, w) = (field.height(), field.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(CoreError::Dimension(format!(
            "dims {h}x{w} not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = field.values();
    let norm = 1.0f64 / (factor * factor) as f64;
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0f64;
            for di in 0..factor {
                for dj in 0..factor {
                    acc += src[[i * factor + di, j * factor + dj]] as f64;
                }
            }
            out[[i, j]] = (acc * norm) as f32;
        }
    }
    GridField::new(out, field.value_max())
}

/// Cubic convolution kernel (sharpness a = −0.75), the classic four-tap
/// interpolator. Weights sum to 1 and reproduce polynomials up to degree 1,
/// so constants and linear ramps pass through exactly.
fn cubic_kernel(x: f32) -> f32 {
    const A: f32 = -0.75;
    let ax = x.abs();
    if ax <= 1.0 {
        ((A + 2.0) * ax - (A + 3.0)) * ax * ax + 1.0
    } else if ax < 2.0 {
        (((ax - 5.0) * ax + 8.0) * ax - 4.0) * A
    } else {
        0.0
    }
}

/// Magnifies a field by an integer factor using cubic convolution with
/// replicated borders. Output position `i` maps to source position `i/factor`,
/// so every aligned source sample is reproduced exactly.
pub fn bicubic_upsample(field: &GridField, factor: usize) -> Result<GridField> {
    if factor == 0 {
        return Err(CoreError::Argument(
            "upsampling factor must be positive".into(),
        ));
    }
    if factor == 1 {
        return Ok(field.clone());
    }
    let (h, w) = (field.height(), field.width());
    let (oh, ow) = (h * factor, w * factor);

    // The fractional offset of output index i is (i mod factor)/factor, so a
    // single table of `factor` four-tap weight rows covers the whole axis.
    let weights: Vec<[f32; 4]> = (0..factor)
        .map(|p| {
            let frac = p as f32 / factor as f32;
            [
                cubic_kernel(frac + 1.0),
                cubic_kernel(frac),
                cubic_kernel(1.0 - frac),
                cubic_kernel(2.0 - frac),
            ]
        })
        .collect();

    let clamp = |idx: isize, n: usize| idx.clamp(0, n as isize - 1) as usize;

    // Separable pass 1: widen rows.
    let src = field.values();
    let mut rows = Array2::<f32>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let base = (j / factor) as isize;
            let wts = &weights[j % factor];
            let mut acc = 0.0f32;
            for (k, &wt) in wts.iter().enumerate() {
                acc += wt * src[[i, clamp(base + k as isize - 1, w)]];
            }
            rows[[i, j]] = acc;
        }
    }

    // Separable pass 2: stretch columns.
    let mut out = Array2::<f32>::zeros((oh, ow));
    for i in 0..oh {
        let base = (i / factor) as isize;
        let wts = &weights[i % factor];
        for j in 0..ow {
            let mut acc = 0.0f32;
            for (k, &wt) in wts.iter().enumerate() {
                acc += wt * rows[[clamp(base + k as isize - 1, h), j]];
            }
            out[[i, j]] = acc;
        }
    }
    GridField::new(out, field.value_max())
}

// =========================================================================
// Normalization and filtering
// =========================================================================

/// Maps a field to zero-mean/unit-variance coordinates: `(x − mean) / std`.
pub fn normalize(field: &GridField, stats: &NormStats) -> GridField {
    GridField {
        values: field.values().mapv(|v| (v - stats.mean) / stats.std),
        value_max: field.value_max(),
    }
}

/// Inverse of [`normalize`]: `x · std + mean`.
pub fn denormalize(field: &GridField, stats: &NormStats) -> GridField {
    GridField {
        values: field.values().mapv(|v| v * stats.std + stats.mean),
        value_max: field.value_max(),
    }
}

/// True when the fraction of strictly positive pixels reaches `min_fraction`
/// (boundary inclusive). Used to keep only "eventful" fields in the dataset.
pub fn passes_event_filter(field: &GridField, min_fraction: f32) -> bool {
    let total = field.height() * field.width();
    if total == 0 {
        return false;
    }
    let nonzero = field.values().iter().filter(|&&v| v > 0.0).count();
    nonzero as f32 / total as f32 >= min_fraction
}

// =========================================================================
// Tests
// =========================================================================
