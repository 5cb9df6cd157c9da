//! Effect-curve confidence bands and their inversion into MED intervals.

mod bootstrap;
mod profile;

pub use bootstrap::{bootstrap_effects, percentile_bootstrap_band, BootstrapConfig, BootstrapSamples};
pub use profile::{profile_deviance, profile_likelihood_band, profile_med_ci};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::med::{MedEstimate, MedMethod};
use crate::models::DoseDesign;

pub const DEFAULT_BAND_POINTS: usize = 201;

/// Pointwise bounds on the effect `mu(d) - mu(d0)` over a dose grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurveBand {
    pub grid: Vec<f64>,
    pub fitted: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub method: MedMethod,
}

impl EffectCurveBand {
    pub fn validate(&self) -> Result<()> {
        let g = self.grid.len();
        if self.fitted.len() != g || self.lower.len() != g || self.upper.len() != g {
            return Err(Error::InvalidInput("band columns differ in length".into()));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("band grid must be strictly ascending".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidInput("band lower bound exceeds upper bound".into()));
        }
        Ok(())
    }

    /// `dose,lower,fitted,upper` rows.
    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["dose", "lower", "fitted", "upper"])?;
        for i in 0..self.grid.len() {
            w.write_record([
                self.grid[i].to_string(),
                self.lower[i].to_string(),
                self.fitted[i].to_string(),
                self.upper[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Equispaced band grid over `[d0, dk]`.
pub fn band_grid(design: &DoseDesign, points: usize) -> Result<Vec<f64>> {
    if points < 11 {
        return Err(Error::InvalidInput(format!("band grid needs at least 11 points, got {points}")));
    }
    Ok(crate::med::screen_grid(design, points))
}

/// MED interval from the first crossings of `delta`: the upper band gives
/// the lower bound, the lower band the upper bound.
pub fn invert_band_for_med(band: &EffectCurveBand, delta: f64) -> MedEstimate {
    let first = |v: &[f64]| band.grid.iter().zip(v).find(|(_, &e)| e > delta).map(|(&d, _)| d);
    MedEstimate {
        value: first(&band.fitted),
        method: band.method,
        lower: first(&band.upper),
        upper: first(&band.lower),
        se: None,
    }
}
