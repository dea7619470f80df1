//! Gramian angular difference field (GADF) encoding of signal windows.
//!
//! A window becomes an image in four steps: min-max rescale to `[-1, 1]`,
//! piecewise-aggregate downsampling to the image size, polar-angle transform
//! `phi = arccos(t)`, and the pairwise difference field
//! `G[i][j] = sin(phi_i - phi_j)`. The result is antisymmetric with a zero
//! diagonal and all entries in `[-1, 1]` — the encoder guarantees these
//! exactly by computing one triangle and mirroring.

use crate::container::{self, ContainerError};
use crate::dataio::SignalWindow;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Encoding name stored in image-set containers. The summation-field
/// variant (GASF) is deliberately not implemented; the constant leaves room
/// for it in the format.
pub const ENCODING_GADF: &str = "GADF";

/// Absolute tolerance for clamping values marginally outside the arccos
/// domain. Wide enough for accumulated rounding, narrow enough that real
/// range violations still fail loudly.
pub const POLAR_CLAMP_TOL: f64 = 1e-12;

const IMAGE_SET_SCHEMA: &str = "gaf-image-set";

#[derive(Debug, Error)]
pub enum GafError {
    #[error("constant input: min == max, cannot rescale")]
    DegenerateRange,
    #[error("bad PAA target {target} for length {len} (need 2 <= target <= len)")]
    BadTarget { target: usize, len: usize },
    #[error("value {value} at index {index} outside [-1, 1] beyond tolerance")]
    DomainError { index: usize, value: f64 },
    #[error("vector {index} has length {got}, expected {expected}")]
    LengthMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("image set: {reason}")]
    BadImageSet { reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("png export: {0}")]
    Png(#[from] image::ImageError),
}

/// A series rescaled into `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct NormalizedSeries {
    pub values: Vec<f64>,
    pub source: String,
    /// Extrema of the raw series, kept for provenance.
    pub raw_min: f64,
    pub raw_max: f64,
}

/// Polar-angle form of a normalized series.
#[derive(Debug, Clone)]
pub struct PolarSeries {
    /// `arccos` of each value, in `[0, pi]`.
    pub angles: Vec<f64>,
    /// `a_i = i / M` (1-based), strictly increasing. Recorded for fidelity
    /// to the encoding definition; the difference field never reads them.
    pub radii: Vec<f64>,
    pub m: usize,
    pub source: String,
}

/// Per-image provenance and encoding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GafMeta {
    pub source_path: String,
    pub channel: String,
    /// Sample offset of the source window within its record.
    pub offset: usize,
    /// Samples per PAA segment.
    pub paa_factor: usize,
    pub norm_min: f64,
    pub norm_max: f64,
    /// True for generator output, false for encoded measurements.
    pub synthetic: bool,
}

impl GafMeta {
    fn unknown() -> Self {
        GafMeta {
            source_path: String::new(),
            channel: String::new(),
            offset: 0,
            paa_factor: 1,
            norm_min: -1.0,
            norm_max: 1.0,
            synthetic: false,
        }
    }
}

/// A `P x P` GADF image with label and provenance.
#[derive(Debug, Clone)]
pub struct GafImage {
    pub pixels: Array2<f64>,
    pub label: usize,
    pub label_name: String,
    pub meta: GafMeta,
}

impl GafImage {
    pub fn p(&self) -> usize {
        self.pixels.nrows()
    }
}

/// Rescale to `[-1, 1]` with the two-sided affine map
/// `t = ((t - max) + (t - min)) / (max - min)`.
///
/// The paper prints the numerator as `(t - min) + (t - min)`, which maps the
/// extrema to 0 and 2, contradicting its own `[-1, 1]` target and the arccos
/// domain of the next step; the corrected form is used. Evaluated literally,
/// it maps the minimum to exactly -1.0 and the maximum to exactly +1.0, and
/// every output stays inside `[-1, 1]` (monotone rounding).
pub fn minmax_rescale(values: &[f64], source: &str) -> Result<NormalizedSeries, GafError> {
    assert!(values.len() >= 2, "rescale needs at least 2 values");
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if !(max > min) {
        return Err(GafError::DegenerateRange);
    }
    let range = max - min;
    let out: Vec<f64> = values
        .iter()
        .map(|&t| ((t - max) + (t - min)) / range)
        .collect();
    Ok(NormalizedSeries {
        values: out,
        source: source.to_string(),
        raw_min: min,
        raw_max: max,
    })
}

/// Piecewise-aggregate approximation: mean of each contiguous segment.
///
/// When the length is not divisible by `target_len`, the series is padded by
/// repeating its last value up to the next multiple, so every segment has
/// the same width `ceil(len / target_len)`.
pub fn paa_downsample(values: &[f64], target_len: usize) -> Result<Vec<f64>, GafError> {
    let len = values.len();
    if target_len < 2 || target_len > len {
        return Err(GafError::BadTarget {
            target: target_len,
            len,
        });
    }
    let seg = len.div_ceil(target_len);
    let last = *values.last().expect("len >= 2");
    let mut out = Vec::with_capacity(target_len);
    for s in 0..target_len {
        // Sum over the virtually padded series in index order. Sequential
        // accumulation keeps equal segment contents bit-identical whether
        // the copies of the final value are real or padding, which matters
        // for exact invariance properties of the downstream encoding.
        let mut sum = 0.0;
        for k in s * seg..(s + 1) * seg {
            sum += if k < len { values[k] } else { last };
        }
        out.push(sum / seg as f64);
    }
    Ok(out)
}

/// Polar transform: `phi_i = arccos(t_i)`, radius `a_i = i / M` (1-based).
///
/// Values within [`POLAR_CLAMP_TOL`] of the `[-1, 1]` boundary are clamped;
/// anything further out is a [`GafError::DomainError`].
pub fn to_polar(series: &NormalizedSeries, m: usize) -> Result<PolarSeries, GafError> {
    let n = series.values.len();
    assert!(m >= n, "polar constant M must be at least the series length");
    let mut angles = Vec::with_capacity(n);
    for (index, &v) in series.values.iter().enumerate() {
        let clamped = if v.abs() <= 1.0 {
            v
        } else if v > 1.0 && v - 1.0 <= POLAR_CLAMP_TOL {
            1.0
        } else if v < -1.0 && -1.0 - v <= POLAR_CLAMP_TOL {
            -1.0
        } else {
            return Err(GafError::DomainError { index, value: v });
        };
        angles.push(clamped.acos());
    }
    let radii = (1..=n).map(|i| i as f64 / m as f64).collect();
    Ok(PolarSeries {
        angles,
        radii,
        m,
        source: series.source.clone(),
    })
}

/// Difference field `G[i][j] = sin(phi_i - phi_j)`.
///
/// The upper triangle is evaluated directly and mirrored with negation, so
/// antisymmetry and the zero diagonal hold exactly, not just to rounding.
pub fn gadf_encode(polar: &PolarSeries) -> GafImage {
    let p = polar.angles.len();
    let mut pixels = Array2::zeros((p, p));
    for i in 0..p {
        for j in (i + 1)..p {
            let v = (polar.angles[i] - polar.angles[j]).sin();
            pixels[(i, j)] = v;
            pixels[(j, i)] = -v;
        }
    }
    GafImage {
        pixels,
        label: 0,
        label_name: String::new(),
        meta: GafMeta {
            source_path: polar.source.clone(),
            ..GafMeta::unknown()
        },
    }
}

/// The algebraic form of the same field,
/// `sqrt(1 - t_i^2) t_j - t_i sqrt(1 - t_j^2)`, evaluated from the
/// normalized values directly. Agrees with [`gadf_encode`] to 1e-12; kept as
/// an independent cross-check path.
pub fn gadf_encode_algebraic(series: &NormalizedSeries) -> Array2<f64> {
    let t = &series.values;
    let p = t.len();
    let root: Vec<f64> = t.iter().map(|&v| (1.0 - v * v).max(0.0).sqrt()).collect();
    let mut pixels = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            pixels[(i, j)] = root[i] * t[j] - t[i] * root[j];
        }
    }
    pixels
}

/// Matrix of pairwise inner products.
pub fn gram_matrix(vectors: &[Vec<f64>]) -> Result<Array2<f64>, GafError> {
    assert!(!vectors.is_empty(), "gram_matrix needs at least one vector");
    let d = vectors[0].len();
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(GafError::LengthMismatch {
                index,
                got: v.len(),
                expected: d,
            });
        }
    }
    let n = vectors.len();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            out[(i, j)] = dot;
            out[(j, i)] = dot;
        }
    }
    Ok(out)
}

/// Full encoding pipeline for one window: rescale, PAA to `image_size`,
/// polar transform, difference field. Provenance travels with the image.
pub fn encode_window(window: &SignalWindow, image_size: usize) -> Result<GafImage, GafError> {
    assert!(image_size >= 2, "image size must be at least 2");
    let normalized = minmax_rescale(&window.values, &window.record_ref.source_path)?;
    let reduced = paa_downsample(&normalized.values, image_size)?;
    let paa_factor = window.values.len().div_ceil(image_size);
    let reduced_series = NormalizedSeries {
        values: reduced,
        source: normalized.source.clone(),
        raw_min: normalized.raw_min,
        raw_max: normalized.raw_max,
    };
    let polar = to_polar(&reduced_series, reduced_series.values.len())?;
    let mut image = gadf_encode(&polar);
    image.label = window.label;
    image.label_name = window.label_name.clone();
    image.meta = GafMeta {
        source_path: window.record_ref.source_path.clone(),
        channel: window.record_ref.channel.to_string(),
        offset: window.record_ref.offset,
        paa_factor,
        norm_min: normalized.raw_min,
        norm_max: normalized.raw_max,
        synthetic: false,
    };
    Ok(image)
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    label: usize,
    label_name: String,
    #[serde(flatten)]
    meta: GafMeta,
}

/// Write an image set to the versioned container format.
///
/// Pixels are stored as little-endian `f32` row-major; loading reproduces
/// the stored values bit-exactly (an `f64`-to-`f32` narrowing happens once,
/// at save time). All images must share the same size. An empty set is a
/// valid container.
pub fn serialize_images(images: &[GafImage], path: &Path) -> Result<(), GafError> {
    let p = images.first().map(|im| im.p()).unwrap_or(0);
    for im in images {
        if im.p() != p || im.pixels.ncols() != p {
            return Err(GafError::BadImageSet {
                reason: format!("mixed image sizes: {} vs {}", im.p(), p),
            });
        }
    }
    let entries: Vec<ImageEntry> = images
        .iter()
        .map(|im| ImageEntry {
            label: im.label,
            label_name: im.label_name.clone(),
            meta: im.meta.clone(),
        })
        .collect();
    let meta = serde_json::json!({
        "schema": IMAGE_SET_SCHEMA,
        "encoding": ENCODING_GADF,
        "dtype": "f32le",
        "p": p,
        "count": images.len(),
        "images": entries,
    });
    let mut payload = Vec::with_capacity(images.len() * p * p);
    for im in images {
        let std = im.pixels.as_standard_layout();
        payload.extend(std.iter().map(|&v| v as f32));
    }
    container::write_container(path, &meta, &payload)?;
    Ok(())
}

/// Inverse of [`serialize_images`].
pub fn load_images(path: &Path) -> Result<Vec<GafImage>, GafError> {
    let c = container::read_container(path)?;
    let bad = |reason: String| GafError::BadImageSet { reason };
    if c.meta["schema"] != IMAGE_SET_SCHEMA {
        return Err(bad(format!(
            "schema {} is not {IMAGE_SET_SCHEMA:?}",
            c.meta["schema"]
        )));
    }
    let p = c.meta["p"].as_u64().ok_or_else(|| bad("missing p".into()))? as usize;
    let entries: Vec<ImageEntry> = serde_json::from_value(c.meta["images"].clone())
        .map_err(|e| bad(format!("image entries: {e}")))?;
    if c.payload.len() != entries.len() * p * p {
        return Err(bad(format!(
            "payload has {} values, expected {} images of {p}x{p}",
            c.payload.len(),
            entries.len()
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    for (k, e) in entries.into_iter().enumerate() {
        let chunk = &c.payload[k * p * p..(k + 1) * p * p];
        let pixels =
            Array2::from_shape_vec((p, p), chunk.iter().map(|&v| v as f64).collect())
                .expect("checked length");
        out.push(GafImage {
            pixels,
            label: e.label,
            label_name: e.label_name,
            meta: e.meta,
        });
    }
    Ok(out)
}

/// Export one image as an 8-bit grayscale PNG (`[-1, 1]` mapped linearly to
/// 0..255). For human inspection only — never read back.
pub fn write_png(image: &GafImage, path: &Path) -> Result<(), GafError> {
    let p = image.p();
    let mut img = image::GrayImage::new(p as u32, p as u32);
    for ((i, j), &v) in image.pixels.indexed_iter() {
        let byte = (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8;
        img.put_pixel(j as u32, i as u32, image::Luma([byte]));
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests;
