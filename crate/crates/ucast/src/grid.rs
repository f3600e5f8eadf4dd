//! Lat-lon raster geometry and latitude area weights.
//!
//! Longitude is periodic (`n_lon * lon_step == 360`); latitude rows tile
//! `[-90, +90]` without overlap. Angles are stored in degrees and converted
//! to radians only inside trigonometric calls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of an equiangular lat-lon grid, immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Lower latitude bound of each row, degrees, ordered south to north.
    pub lat_lower: Vec<f64>,
    /// Upper latitude bound of each row, degrees.
    pub lat_upper: Vec<f64>,
    /// Degrees of longitude per column.
    pub lon_step: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_lat == 0 || self.n_lon == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if self.lat_lower.len() != self.n_lat || self.lat_upper.len() != self.n_lat {
            return Err(Error::invalid("latitude bound length != n_lat"));
        }
        if (self.n_lon as f64 * self.lon_step - 360.0).abs() > 1e-9 {
            return Err(Error::invalid("n_lon * lon_step must equal 360 degrees"));
        }
        for h in 0..self.n_lat {
            if self.lat_lower[h] >= self.lat_upper[h] {
                return Err(Error::invalid(format!(
                    "row {h}: lat_lower {} >= lat_upper {}",
                    self.lat_lower[h], self.lat_upper[h]
                )));
            }
            if h + 1 < self.n_lat && (self.lat_upper[h] - self.lat_lower[h + 1]).abs() > 1e-9 {
                return Err(Error::invalid(format!("rows {h},{} overlap or gap", h + 1)));
            }
        }
        if (self.lat_lower[0] + 90.0).abs() > 1e-9 || (self.lat_upper[self.n_lat - 1] - 90.0).abs() > 1e-9
        {
            return Err(Error::invalid("rows must tile [-90, +90]"));
        }
        Ok(())
    }

    /// Latitude of the cell center of row `h`, degrees.
    pub fn lat_center(&self, h: usize) -> f64 {
        0.5 * (self.lat_lower[h] + self.lat_upper[h])
    }

    /// Row indices whose centers fall inside `[lo, hi]` degrees.
    pub fn rows_in_band(&self, lo: f64, hi: f64) -> Vec<usize> {
        (0..self.n_lat)
            .filter(|&h| {
                let c = self.lat_center(h);
                c >= lo && c <= hi
            })
            .collect()
    }
}

/// Per-row spherical area weights: raw `sin(phi_u) - sin(phi_l)` and the
/// mean-one normalization used by every loss and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Equal-angle bands over `[-90, 90]`, cell-centered (no pole rows).
pub fn make_equiangular_grid(n_lat: usize, n_lon: usize) -> Result<GridSpec> {
    if n_lat < 1 {
        return Err(Error::invalid("n_lat must be >= 1"));
    }
    if n_lon < 2 {
        return Err(Error::invalid("n_lon must be >= 2"));
    }
    let band = 180.0 / n_lat as f64;
    let lat_lower: Vec<f64> = (0..n_lat).map(|h| -90.0 + band * h as f64).collect();
    let lat_upper: Vec<f64> = (0..n_lat).map(|h| -90.0 + band * (h + 1) as f64).collect();
    let grid = GridSpec {
        n_lat,
        n_lon,
        lat_lower,
        lat_upper,
        lon_step: 360.0 / n_lon as f64,
    };
    grid.validate()?;
    Ok(grid)
}

/// Raw weight `sin(phi_u) - sin(phi_l)` per row, normalized to unit mean.
pub fn area_weights(grid: &GridSpec) -> Result<AreaWeights> {
    grid.validate()?;
    let raw: Vec<f64> = (0..grid.n_lat)
        .map(|h| grid.lat_upper[h].to_radians().sin() - grid.lat_lower[h].to_radians().sin())
        .collect();
    let mean = raw.iter().sum::<f64>() / grid.n_lat as f64;
    let normalized = raw.iter().map(|&a| a / mean).collect();
    Ok(AreaWeights { raw, normalized })
}
