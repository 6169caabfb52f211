//! Two-dimensional sinusoidal positional encoding of a feature grid.
//!
//! Every pixel gets `2 * d_model` channels: the first `d_model` encode the
//! horizontal position and the last `d_model` the vertical one. The relative
//! mode rescales positions to `c * pos / extent`, so a pixel's encoding depends
//! only on where it sits relative to the grid, not on the grid size.

use serde::{Deserialize, Serialize};

use crate::diffmath::{resize_forward, Tensor};
use crate::error::{Error, Result};

/// Width of each directional encoding.
pub const D_MODEL: usize = 300;
/// Scale applied to relative positions.
pub const RPE_SCALE: f64 = 512.0;
const WAVELENGTH_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeMode {
    /// Relative positions `c * pos / extent`.
    Rpe,
    /// Raw zero-based pixel indices.
    Ape,
    /// Absolute encoding computed at the training extent, bilinearly resized.
    ApeInterp,
}

/// Positional-encoding field over an `H x W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PeMap {
    pub mode: PeMode,
    pub d_model: usize,
    pub c: f64,
    /// `[2 * d_model, H, W]`.
    pub values: Tensor,
}

impl PeMap {
    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// The `2 * d_model` encoding of pixel `(row, col)`.
    pub fn column(&self, row: usize, col: usize) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        (0..2 * self.d_model)
            .map(|ch| self.values.data()[(ch * h + row) * w + col])
            .collect()
    }
}

/// `c * pos / extent`.
pub fn relative_position(pos: usize, extent: usize, c: f64) -> Result<f64> {
    if extent == 0 || pos >= extent {
        return Err(Error::Domain(format!("position {pos} outside [0, {extent})")));
    }
    if c <= 0.0 {
        return Err(Error::Domain(format!("scale c must be positive, got {c}")));
    }
    Ok(c * pos as f64 / extent as f64)
}

/// Interleaved `sin, cos` pairs at geometrically spaced wavelengths.
pub fn sinusoid_vector(pos: f64, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Domain(format!("d_model must be even and positive, got {d_model}")));
    }
    let mut out = Vec::with_capacity(d_model);
    for pair in 0..d_model / 2 {
        let angle = pos / WAVELENGTH_BASE.powf((2 * pair) as f64 / d_model as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

fn fill(h: usize, w: usize, d_model: usize, horiz: &[Vec<f64>], vert: &[Vec<f64>]) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; 2 * d_model * plane];
    for ch in 0..d_model {
        for row in 0..h {
            for col in 0..w {
                data[ch * plane + row * w + col] = horiz[col][ch];
                data[(d_model + ch) * plane + row * w + col] = vert[row][ch];
            }
        }
    }
    Tensor::from_parts(vec![2 * d_model, h, w], data)
}

fn absolute(h: usize, w: usize) -> Result<Tensor> {
    let horiz = (0..w).map(|u| sinusoid_vector(u as f64, D_MODEL)).collect::<Result<Vec<_>>>()?;
    let vert = (0..h).map(|v| sinusoid_vector(v as f64, D_MODEL)).collect::<Result<Vec<_>>>()?;
    Ok(fill(h, w, D_MODEL, &horiz, &vert))
}

/// Build the encoding field for an `h x w` grid.
///
/// `train_size` is the `(H, W)` grid the absolute encoding was computed for and
/// must be given exactly when `mode` is [`PeMode::ApeInterp`].
pub fn build_pe_map(h: usize, w: usize, mode: PeMode, train_size: Option<(usize, usize)>) -> Result<PeMap> {
    if h == 0 || w == 0 {
        return Err(Error::Domain(format!("grid extent {h}x{w}")));
    }
    let values = match (mode, train_size) {
        (PeMode::Rpe, None) => {
            let horiz = (0..w)
                .map(|u| sinusoid_vector(relative_position(u, w, RPE_SCALE)?, D_MODEL))
                .collect::<Result<Vec<_>>>()?;
            let vert = (0..h)
                .map(|v| sinusoid_vector(relative_position(v, h, RPE_SCALE)?, D_MODEL))
                .collect::<Result<Vec<_>>>()?;
            fill(h, w, D_MODEL, &horiz, &vert)
        }
        (PeMode::Ape, None) => absolute(h, w)?,
        (PeMode::ApeInterp, Some((h0, w0))) => {
            if h0 == 0 || w0 == 0 {
                return Err(Error::Domain(format!("training grid extent {h0}x{w0}")));
            }
            resize_forward(&absolute(h0, w0)?, h, w, true)
        }
        (PeMode::ApeInterp, None) => {
            return Err(Error::Domain("ape-interp needs the training grid size".into()))
        }
        (_, Some(_)) => {
            return Err(Error::Domain(format!("training grid size only applies to ape-interp, not {mode:?}")))
        }
    };
    Ok(PeMap {
        mode,
        d_model: D_MODEL,
        c: RPE_SCALE,
        values,
    })
}
