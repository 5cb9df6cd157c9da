//! Target-dose weight functions.
//!
//! Each weight peaks at the current MED estimate and decays with the
//! standardized distance `z` from it. `W1`/`W2` scale by the MED itself,
//! `W3`/`W4` by the distance to the closest active dose and `W5`/`W6` by the
//! distance to the second closest. `W7` is a two-level step weight.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DoseDesign;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightTag {
    W1,
    W2,
    W3,
    W4,
    W5,
    W6,
    W7,
    /// Constant weight one. Reduces every weighted estimator to least squares.
    Uniform,
}

impl WeightTag {
    /// Continuously differentiable in the MED away from the clip region.
    pub fn is_continuous(self) -> bool {
        !matches!(self, WeightTag::W7)
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightTag::W1 => "w1",
            WeightTag::W2 => "w2",
            WeightTag::W3 => "w3",
            WeightTag::W4 => "w4",
            WeightTag::W5 => "w5",
            WeightTag::W6 => "w6",
            WeightTag::W7 => "w7",
            WeightTag::Uniform => "uniform",
        }
    }
}

impl fmt::Display for WeightTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w1" => Ok(WeightTag::W1),
            "w2" => Ok(WeightTag::W2),
            "w3" => Ok(WeightTag::W3),
            "w4" => Ok(WeightTag::W4),
            "w5" => Ok(WeightTag::W5),
            "w6" => Ok(WeightTag::W6),
            "w7" => Ok(WeightTag::W7),
            "uniform" | "w0" | "none" => Ok(WeightTag::Uniform),
            other => Err(Error::InvalidInput(format!("unknown weight '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub tag: WeightTag,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_k1")]
    pub k1: u32,
    #[serde(default = "default_k2")]
    pub k2: u32,
}

fn default_clip() -> f64 {
    0.9999
}
fn default_k1() -> u32 {
    5
}
fn default_k2() -> u32 {
    1
}

impl WeightSpec {
    pub fn new(tag: WeightTag) -> Self {
        WeightSpec { tag, clip: default_clip(), k1: default_k1(), k2: default_k2() }
    }

    pub fn uniform() -> Self {
        WeightSpec::new(WeightTag::Uniform)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidInput(format!("clip {} must lie in (0, 1)", self.clip)));
        }
        if self.k2 < 1 || self.k1 <= self.k2 {
            return Err(Error::InvalidInput(format!(
                "w7 levels need k1 > k2 >= 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        Ok(())
    }
}

impl From<WeightTag> for WeightSpec {
    fn from(tag: WeightTag) -> Self {
        WeightSpec::new(tag)
    }
}

/// Weight of dose `d` given the current MED estimate `d_med`.
pub fn compute_weight(spec: &WeightSpec, d: f64, d_med: f64, design: &DoseDesign) -> Result<f64> {
    if !(d_med > 0.0) || !d_med.is_finite() {
        return Err(Error::Domain(format!("MED estimate {d_med} must be positive")));
    }
    if !(d >= 0.0) {
        return Err(Error::Domain(format!("dose {d} must be nonnegative")));
    }
    let active = design.active_doses();
    let scale = match spec.tag {
        WeightTag::Uniform => return Ok(1.0),
        WeightTag::W7 => {
            let closest = closest_active(active, d_med)
                .ok_or_else(|| Error::InvalidInput("design has no active dose".into()))?;
            return Ok(if d == closest { spec.k1 as f64 } else { spec.k2 as f64 });
        }
        WeightTag::W1 | WeightTag::W2 => d_med,
        WeightTag::W3 | WeightTag::W4 => nearest_distances(active, d_med)
            .map(|(first, _)| first)
            .ok_or_else(|| Error::InvalidInput("design has no active dose".into()))?,
        WeightTag::W5 | WeightTag::W6 => nearest_distances(active, d_med)
            .map(|(first, second)| second.unwrap_or(first))
            .ok_or_else(|| Error::InvalidInput("design has no active dose".into()))?,
    };
    let gap = d_med - d;
    let z = if scale > 0.0 {
        (gap / scale).abs().min(spec.clip)
    } else if gap == 0.0 {
        0.0
    } else {
        spec.clip
    };
    let w = 1.0 - z * z;
    Ok(match spec.tag {
        WeightTag::W2 | WeightTag::W4 | WeightTag::W6 => w * w,
        _ => w,
    })
}

/// Per-dose weights for every dose in the design.
pub fn design_weights(spec: &WeightSpec, d_med: f64, design: &DoseDesign) -> Result<Vec<f64>> {
    design.doses().iter().map(|&d| compute_weight(spec, d, d_med, design)).collect()
}

/// Active dose closest to `target`; ties go to the smaller dose.
fn closest_active(active: &[f64], target: f64) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &d in active {
        let dist = (d - target).abs();
        match best {
            Some((_, bd)) if dist >= bd => {}
            _ => best = Some((d, dist)),
        }
    }
    best.map(|(d, _)| d)
}

/// Smallest and second smallest distances from `target` to the active doses.
fn nearest_distances(active: &[f64], target: f64) -> Option<(f64, Option<f64>)> {
    let mut first = f64::INFINITY;
    let mut second = f64::INFINITY;
    for &d in active {
        let dist = (d - target).abs();
        if dist < first {
            second = first;
            first = dist;
        } else if dist < second {
            second = dist;
        }
    }
    if active.is_empty() {
        None
    } else {
        Some((first, second.is_finite().then_some(second)))
    }
}
