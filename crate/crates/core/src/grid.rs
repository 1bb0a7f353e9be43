//! Equiangular latitude/longitude grids with cosine-latitude weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    /// Cell-centre latitudes in degrees, south to north.
    pub lat_centers: Vec<f64>,
    /// Cell-centre longitudes in degrees, eastward from 0.
    pub lon_centers: Vec<f64>,
    /// `cos(lat) / mean(cos(lat))`, one entry per latitude row.
    pub lat_weights: Vec<f64>,
}

impl Grid {
    /// Cell centres of an equiangular `h x w` grid. For `h = 32` the rows are
    /// spaced 5.625 degrees apart starting at -87.1875.
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("grid must be non-empty, got {h}x{w}")));
        }
        let dlat = 180.0 / h as f64;
        let dlon = 360.0 / w as f64;
        let lat_centers: Vec<f64> = (0..h).map(|j| -90.0 + dlat * (j as f64 + 0.5)).collect();
        let lon_centers = (0..w).map(|i| dlon * (i as f64 + 0.5)).collect();
        let cos: Vec<f64> = lat_centers.iter().map(|l| l.to_radians().cos()).collect();
        let mean = cos.iter().sum::<f64>() / h as f64;
        let lat_weights = cos.iter().map(|c| c / mean).collect();
        Ok(Self {
            h,
            w,
            lat_centers,
            lon_centers,
            lat_weights,
        })
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn lat_weights_as<T: Scalar>(&self) -> Vec<T> {
        self.lat_weights.iter().map(|&v| T::from_f64_lossy(v)).collect()
    }
}
