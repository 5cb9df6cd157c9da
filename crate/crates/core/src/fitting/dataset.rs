use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DoseDesign;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub dose_index: usize,
    pub response: f64,
}

/// Observed responses attached to a dose design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    design: DoseDesign,
    observations: Vec<Observation>,
}

impl Dataset {
    pub fn new(design: DoseDesign, observations: Vec<Observation>) -> Result<Self> {
        let mut counts = vec![0usize; design.len()];
        for (row, obs) in observations.iter().enumerate() {
            if obs.dose_index >= design.len() {
                return Err(Error::InvalidInput(format!(
                    "observation {row} refers to dose index {} outside the design",
                    obs.dose_index
                )));
            }
            if !obs.response.is_finite() {
                return Err(Error::InvalidInput(format!("observation {row} has a non-finite response")));
            }
            counts[obs.dose_index] += 1;
        }
        if counts != design.allocations() {
            return Err(Error::InvalidInput(format!(
                "per-dose counts {counts:?} differ from allocations {:?}",
                design.allocations()
            )));
        }
        Ok(Dataset { design, observations })
    }

    /// Builds the design from the distinct doses present in `pairs`.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        let mut doses: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        if doses.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidInput("doses must be finite and nonnegative".into()));
        }
        doses.sort_by(f64::total_cmp);
        doses.dedup();
        let mut counts = vec![0usize; doses.len()];
        let mut observations = Vec::with_capacity(pairs.len());
        for &(d, y) in pairs {
            let i = doses.binary_search_by(|x| x.total_cmp(&d)).expect("dose collected above");
            counts[i] += 1;
            observations.push(Observation { dose_index: i, response: y });
        }
        Dataset::new(DoseDesign::new(doses, counts)?, observations)
    }

    /// Responses grouped by dose, in design order.
    pub fn from_groups(design: DoseDesign, groups: &[Vec<f64>]) -> Result<Self> {
        if groups.len() != design.len() {
            return Err(Error::InvalidInput("one response group per dose required".into()));
        }
        let observations = groups
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.iter().map(move |&y| Observation { dose_index: i, response: y }))
            .collect();
        Dataset::new(design, observations)
    }

    /// Reads a `dose,response` CSV. Errors name the offending line.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::InvalidInput(format!("line 1: missing '{name}' column")))
        };
        let (di, ri) = (col("dose")?, col("response")?);
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::InvalidInput(format!("line {line}: {e}"))
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let field = |i: usize, name: &str| -> Result<f64> {
                let raw = rec.get(i).unwrap_or("");
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::InvalidInput(format!("line {line}: bad {name} '{raw}'")))
            };
            let d = field(di, "dose")?;
            if d < 0.0 {
                return Err(Error::InvalidInput(format!("line {line}: negative dose {d}")));
            }
            pairs.push((d, field(ri, "response")?));
        }
        Dataset::from_pairs(&pairs)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        Dataset::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["dose", "response"])?;
        for obs in &self.observations {
            let d = self.design.doses()[obs.dose_index];
            w.write_record([d.to_string(), obs.response.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn design(&self) -> &DoseDesign {
        &self.design
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn dose_of(&self, obs: &Observation) -> f64 {
        self.design.doses()[obs.dose_index]
    }

    /// Per-dose sample means.
    pub fn group_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.design.len()];
        for o in &self.observations {
            sums[o.dose_index] += o.response;
        }
        sums.iter().zip(self.design.allocations()).map(|(s, &n)| s / n as f64).collect()
    }

    /// Pooled within-group variance with `n - (k+1)` degrees of freedom.
    pub fn pooled_variance(&self) -> Option<f64> {
        let means = self.group_means();
        let df = self.len().checked_sub(self.design.len()).filter(|&d| d > 0)?;
        let ss: f64 = self
            .observations
            .iter()
            .map(|o| (o.response - means[o.dose_index]).powi(2))
            .sum();
        Some(ss / df as f64)
    }

    /// Responses grouped by dose.
    pub fn groups(&self) -> Vec<Vec<f64>> {
        let mut g: Vec<Vec<f64>> =
            self.design.allocations().iter().map(|&n| Vec::with_capacity(n)).collect();
        for o in &self.observations {
            g[o.dose_index].push(o.response);
        }
        g
    }

    /// Same design, responses replaced observation by observation.
    pub fn with_responses(&self, responses: &[f64]) -> Result<Dataset> {
        if responses.len() != self.observations.len() {
            return Err(Error::InvalidInput("response count mismatch".into()));
        }
        let observations = self
            .observations
            .iter()
            .zip(responses)
            .map(|(o, &y)| Observation { dose_index: o.dose_index, response: y })
            .collect();
        Ok(Dataset { design: self.design.clone(), observations })
    }
}
