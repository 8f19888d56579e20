//! Gaze trajectories to Gaussian heatmaps and loss weight masks.

use std::fs;
use std::path::Path;

use crate::dataset::{GazeTrajectory, MIN_IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const GZH1_MAGIC: &[u8; 4] = b"GZH1";

/// Max-normalized gaze attention field.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeHeatmap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> GazeHeatmap<T> {
    pub fn from_values(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} heatmap values for {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::Format("heatmap values must be finite and nonnegative".into()));
        }
        Ok(GazeHeatmap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }
}

/// Per-pixel loss weights in `[w_floor, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMask<T> {
    height: usize,
    width: usize,
    floor: T,
    values: Vec<T>,
}

impl<T: Scalar> WeightMask<T> {
    /// Constant mask, mostly useful for tests and ablations.
    pub fn constant(height: usize, width: usize, value: T) -> Result<Self> {
        if !(value > T::zero() && value <= T::one()) {
            return Err(Error::BadWeightFloor(value.as_f64()));
        }
        Ok(WeightMask {
            height,
            width,
            floor: value,
            values: vec![value; height * width],
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn floor(&self) -> T {
        self.floor
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Sum of isotropic Gaussians at each gaze sample, divided by its maximum.
pub fn rasterize_heatmap<T: Scalar>(
    traj: &GazeTrajectory,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<GazeHeatmap<T>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::BadKernelWidth(sigma));
    }
    if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
        return Err(Error::ShapeMismatch(format!(
            "heatmap must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
        )));
    }
    let mut values = vec![T::zero(); height * width];
    if traj.is_empty() {
        return Ok(GazeHeatmap {
            height,
            width,
            values,
        });
    }

    // Canonical order makes the floating-point sum independent of sample order.
    let mut centers: Vec<(f64, f64)> = traj
        .samples()
        .iter()
        .map(|s| (s.x * (width - 1) as f64, s.y * (height - 1) as f64))
        .collect();
    centers.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let inv = T::lit(-0.5 / (sigma * sigma));
    let mut gx = vec![T::zero(); width];
    let mut gy = vec![T::zero(); height];
    for &(cx, cy) in &centers {
        let (cx, cy) = (T::lit(cx), T::lit(cy));
        for (c, g) in gx.iter_mut().enumerate() {
            let d = T::lit(c as f64) - cx;
            *g = (d * d * inv).exp();
        }
        for (r, g) in gy.iter_mut().enumerate() {
            let d = T::lit(r as f64) - cy;
            *g = (d * d * inv).exp();
        }
        for r in 0..height {
            let row = &mut values[r * width..(r + 1) * width];
            for (v, &g) in row.iter_mut().zip(&gx) {
                *v += gy[r] * g;
            }
        }
    }
    let max = values.iter().fold(T::zero(), |m, &v| m.max(v));
    if max > T::zero() {
        for v in &mut values {
            *v = *v / max;
        }
    }
    Ok(GazeHeatmap {
        height,
        width,
        values,
    })
}

/// `w = w_floor + (1 - w_floor) * h`.
pub fn regularize_to_weights<T: Scalar>(h: &GazeHeatmap<T>, w_floor: f64) -> Result<WeightMask<T>> {
    if !(w_floor > 0.0 && w_floor <= 1.0) {
        return Err(Error::BadWeightFloor(w_floor));
    }
    let floor = T::lit(w_floor);
    let span = T::one() - floor;
    let values = h
        .values
        .iter()
        .map(|&v| (floor + span * v).min(T::one()).max(floor))
        .collect();
    Ok(WeightMask {
        height: h.height,
        width: h.width,
        floor,
        values,
    })
}

/// Encode a single-channel map: `GZH1`, u32 height, u32 width, f32 values (LE).
pub fn encode_gzh1(height: usize, width: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(values.len(), height * width);
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(GZH1_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_gzh1(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 12 || &bytes[..4] != GZH1_MAGIC {
        return Err(Error::Format("missing GZH1 header".into()));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * height * width {
        return Err(Error::Format(format!(
            "GZH1 body has {} bytes, expected {}",
            body.len(),
            4 * height * width
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((height, width, values))
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

pub fn write_heatmap<T: Scalar>(h: &GazeHeatmap<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_gzh1(h.height, h.width, &to_f32(&h.values))).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap<T: Scalar>(path: &Path) -> Result<GazeHeatmap<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (height, width, values) = decode_gzh1(&bytes)?;
    GazeHeatmap::from_values(height, width, values.into_iter().map(|v| T::lit(v as f64)).collect())
}

pub fn write_weights<T: Scalar>(w: &WeightMask<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_gzh1(w.height, w.width, &to_f32(&w.values))).map_err(|e| Error::io(path, e))
}

/// Reads a weight mask; the floor is recovered as the smallest stored value.
pub fn read_weights<T: Scalar>(path: &Path) -> Result<WeightMask<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (height, width, raw) = decode_gzh1(&bytes)?;
    let values: Vec<T> = raw.into_iter().map(|v| T::lit(v as f64)).collect();
    if values.iter().any(|v| !(*v > T::zero() && *v <= T::one())) {
        return Err(Error::BadWeightMask);
    }
    let floor = values.iter().fold(T::one(), |m, &v| m.min(v));
    Ok(WeightMask {
        height,
        width,
        floor,
        values,
    })
}
