//! Buffered pseudo labels from point annotations.
//!
//! Each point is splatted as a normalized bivariate Gaussian evaluated at
//! pixel centres `(col + 0.5, row + 0.5)`; the canvas keeps the element-wise
//! maximum over points, is scaled by the centroid size multiplier `csm` and
//! thresholded at `gamma`.

use serde::{Deserialize, Serialize};

use crate::dataio::Point;
use crate::error::{Error, Result};
use crate::raster::PseudoMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// 2x2 covariance in px^2.
    pub sigma: [[f64; 2]; 2],
    /// Centroid size multiplier.
    pub csm: f64,
    /// Threshold on `csm * density`.
    pub gamma: f64,
    /// Cap on the localization loss, in nats.
    pub rho: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            sigma: [[16.0, 0.0], [0.0, 16.0]],
            csm: 8000.0,
            gamma: 12.0,
            rho: 0.7,
        }
    }
}

impl LabelConfig {
    pub fn isotropic(sigma: f64, csm: f64, gamma: f64, rho: f64) -> Self {
        Self {
            sigma: [[sigma * sigma, 0.0], [0.0, sigma * sigma]],
            csm,
            gamma,
            rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Covariance::new(self.sigma)?;
        for (name, v) in [("csm", self.csm), ("gamma", self.gamma), ("rho", self.rho)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Buffer radius for an isotropic covariance, `None` when the threshold
    /// exceeds the splat peak.
    pub fn isotropic_radius(&self) -> Option<f64> {
        let var = self.sigma[0][0];
        let ratio = self.csm / (2.0 * std::f64::consts::PI * var * self.gamma);
        (ratio > 1.0).then(|| (2.0 * var * ratio.ln()).sqrt())
    }
}

/// Precomputed inverse and normalization of an SPD 2x2 covariance.
#[derive(Debug, Clone, Copy)]
struct Covariance {
    inv: [[f64; 2]; 2],
    norm: f64,
}

impl Covariance {
    fn new(s: [[f64; 2]; 2]) -> Result<Self> {
        let [[a, b], [c, d]] = s;
        let all_finite = [a, b, c, d].iter().all(|v| v.is_finite());
        let det = a * d - b * c;
        if !all_finite || (b - c).abs() > 1e-12 * (1.0 + b.abs()) || a <= 0.0 || det <= 0.0 {
            return Err(Error::Config(format!(
                "sigma {s:?} is not symmetric positive definite"
            )));
        }
        Ok(Self {
            inv: [[d / det, -b / det], [-c / det, a / det]],
            norm: 1.0 / (2.0 * std::f64::consts::PI * det.sqrt()),
        })
    }

    #[inline]
    fn density(&self, dx: f64, dy: f64) -> f64 {
        let q = dx * (self.inv[0][0] * dx + self.inv[0][1] * dy) + dy * (self.inv[1][0] * dx + self.inv[1][1] * dy);
        self.norm * (-0.5 * q).exp()
    }
}

/// Element-wise maximum of per-point Gaussian densities.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidCanvas {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl CentroidCanvas {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

pub fn gaussian_splat(points: &[Point], sigma: [[f64; 2]; 2], h: usize, w: usize) -> Result<CentroidCanvas> {
    let cov = Covariance::new(sigma)?;
    let mut values = vec![0.0f64; h * w];
    for p in points {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(Error::Contract(format!("non-finite point ({}, {})", p.x, p.y)));
        }
        for r in 0..h {
            let dy = r as f64 + 0.5 - p.y;
            let row = &mut values[r * w..(r + 1) * w];
            for (c, v) in row.iter_mut().enumerate() {
                let d = cov.density(c as f64 + 0.5 - p.x, dy);
                if d > *v {
                    *v = d;
                }
            }
        }
    }
    Ok(CentroidCanvas { height: h, width: w, values })
}

/// `1` wherever `csm * canvas >= gamma`.
pub fn make_pseudo_label(points: &[Point], cfg: &LabelConfig, h: usize, w: usize) -> Result<PseudoMask> {
    cfg.validate()?;
    let canvas = gaussian_splat(points, cfg.sigma, h, w)?;
    PseudoMask::new(h, w, canvas.values.iter().map(|v| cfg.csm * v >= cfg.gamma).collect())
}
