//! Run configuration, read from TOML or JSON (chosen by file extension).
//!
//! ```toml
//! split_fraction = 0.7
//! threads = 4
//! treated_covariate = "heart_rate"
//!
//! [fit]
//! restarts = 3
//! seed = 1
//! convention = "zeroed"
//!
//! [fit.optimizer]
//! max_iterations = 500
//! gradient_tolerance = 1e-3
//!
//! [fit.priors.decay]
//! mean = -1.0
//! std = 1.0
//!
//! [[filters]]
//! kind = "min_observations"
//! covariates = ["heart_rate"]
//! min = 5
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CohortCriterion, LoadOptions};
use crate::error::{Error, Result};
use crate::sim::{CohortSpec, SimConfig};
use crate::train::FitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub cases: usize,
    pub cross_tolerance: f64,
    pub output_tolerance: f64,
    /// Absolute tolerance handed to the quadrature.
    pub quadrature_tolerance: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            cases: 200,
            cross_tolerance: 1e-6,
            output_tolerance: 1e-5,
            quadrature_tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSettings {
    pub cases: usize,
    pub observations: usize,
    pub relative_tolerance: f64,
    pub absolute_floor: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            cases: 20,
            observations: 10,
            relative_tolerance: 1e-4,
            absolute_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub split_fraction: f64,
    /// Width of the per-patient worker pool; `None` uses all cores.
    pub threads: Option<usize>,
    pub load: LoadOptions,
    pub filters: Vec<CohortCriterion>,
    /// Covariate on which treatment benefit is judged in comparisons.
    pub treated_covariate: Option<String>,
    /// Points of the dense prediction grid in trajectory files.
    pub trajectory_points: usize,
    /// Single-patient simulation.
    pub sim: Option<SimConfig>,
    /// Randomized cohort simulation; takes precedence over `sim`.
    pub cohort: Option<CohortSpec>,
    pub oracle: OracleSettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fit: FitConfig::default(),
            split_fraction: 0.7,
            threads: None,
            load: LoadOptions::default(),
            filters: Vec::new(),
            treated_covariate: None,
            trajectory_points: 200,
            sim: None,
            cohort: None,
            oracle: OracleSettings::default(),
            gradcheck: GradcheckSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Read `.toml` or `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            Some("toml") => Self::from_toml_str(&text),
            _ => Err(Error::Config(format!(
                "{}: config must be .toml or .json",
                path.display()
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} must lie in (0, 1)", self.split_fraction)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.trajectory_points < 2 {
            return Err(Error::Config("trajectory_points must be >= 2".into()));
        }
        if let Some(s) = &self.sim {
            s.validate()?;
        }
        if let Some(c) = &self.cohort {
            c.validate()?;
        }
        if self.oracle.cases == 0 || self.gradcheck.cases == 0 {
            return Err(Error::Config("oracle and gradcheck need at least one case".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ForceConvention;
    use crate::train::ParamKind;

    #[test]
    fn toml_and_json_agree() {
        let toml_text = r#"
            split_fraction = 0.6
            [fit]
            restarts = 2
            convention = "zeroed"
            [fit.priors.decay]
            mean = -1.0
            std = 0.5
            [[filters]]
            kind = "min_observations"
            covariates = ["hr"]
            min = 5
        "#;
        let a = RunConfig::from_toml_str(toml_text).unwrap();
        assert_eq!(a.fit.restarts, 2);
        assert_eq!(a.fit.convention, ForceConvention::Zeroed);
        assert_eq!(a.fit.priors.0[&ParamKind::Decay].std, 0.5);
        assert_eq!(a.fit.optimizer.max_iterations, 500);
        let b = RunConfig::from_json_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("split_fraction = 1.5").is_err());
        assert!(RunConfig::from_toml_str("[fit]\nrestarts = 0").is_err());
        assert!(RunConfig::from_toml_str("bogus = [").is_err());
    }
}
