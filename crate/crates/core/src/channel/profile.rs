//! Scenario parameterization for the stochastic channel generator.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Parameters of one synthetic propagation scenario.
///
/// The two presets ship the benchmark's distribution shift: an outdoor-like
/// scenario (few narrow clusters, strong line-of-sight) and an indoor-like
/// scenario (many wide clusters, no line-of-sight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioProfile {
    pub name: String,
    pub carrier_ghz: f64,
    pub n_clusters: usize,
    pub paths_per_cluster: usize,
    /// Mean excess delay of the exponential cluster profile, in nanoseconds.
    pub delay_spread_ns: f64,
    /// Intra-cluster angular standard deviation, in degrees.
    pub angle_spread_deg: f64,
    /// Line-of-sight power ratio in dB; `None` means no LOS component.
    pub rician_k_db: Option<f64>,
    #[serde(default = "default_n_tx")]
    pub n_tx_antennas: usize,
    #[serde(default = "default_n_subcarriers")]
    pub n_subcarriers: usize,
    /// Subcarrier spacing in kHz; sets the delay-bin resolution
    /// `1 / (n_subcarriers * spacing)`.
    #[serde(default = "default_spacing_khz")]
    pub subcarrier_spacing_khz: f64,
    pub master_seed: u64,
}

fn default_n_tx() -> usize {
    32
}

fn default_n_subcarriers() -> usize {
    256
}

fn default_spacing_khz() -> f64 {
    120.0
}

impl ScenarioProfile {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 1 || self.paths_per_cluster < 1 {
            return Err(Error::InvalidArg(format!(
                "profile `{}`: clusters and paths per cluster must be >= 1",
                self.name
            )));
        }
        if !(self.delay_spread_ns > 0.0) {
            return Err(Error::InvalidArg(format!(
                "profile `{}`: delay spread must be positive",
                self.name
            )));
        }
        if !(self.angle_spread_deg > 0.0 && self.angle_spread_deg < 90.0) {
            return Err(Error::InvalidArg(format!(
                "profile `{}`: angle spread must lie in (0, 90) degrees",
                self.name
            )));
        }
        if self.n_tx_antennas < 1 || self.n_subcarriers < 1 {
            return Err(Error::InvalidArg(format!(
                "profile `{}`: antenna and subcarrier counts must be >= 1",
                self.name
            )));
        }
        if !(self.subcarrier_spacing_khz > 0.0) {
            return Err(Error::InvalidArg(format!(
                "profile `{}`: subcarrier spacing must be positive",
                self.name
            )));
        }
        Ok(())
    }

    /// Outdoor-like preset: sparse directional propagation at 3.5 GHz with a
    /// strong LOS ray.
    pub fn outdoor_like(master_seed: u64) -> Self {
        ScenarioProfile {
            name: "outdoor-like".into(),
            carrier_ghz: 3.5,
            n_clusters: 4,
            paths_per_cluster: 5,
            delay_spread_ns: 300.0,
            angle_spread_deg: 10.0,
            rician_k_db: Some(8.0),
            n_tx_antennas: 32,
            n_subcarriers: 256,
            subcarrier_spacing_khz: 120.0,
            master_seed,
        }
    }

    /// Indoor-like preset: rich scattering at 2.4 GHz, no LOS.
    pub fn indoor_like(master_seed: u64) -> Self {
        ScenarioProfile {
            name: "indoor-like".into(),
            carrier_ghz: 2.4,
            n_clusters: 8,
            paths_per_cluster: 8,
            delay_spread_ns: 80.0,
            angle_spread_deg: 35.0,
            rician_k_db: None,
            n_tx_antennas: 32,
            n_subcarriers: 256,
            subcarrier_spacing_khz: 120.0,
            master_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ScenarioProfile::outdoor_like(1).validate().unwrap();
        ScenarioProfile::indoor_like(1).validate().unwrap();
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut p = ScenarioProfile::outdoor_like(1);
        p.n_clusters = 0;
        assert!(p.validate().is_err());
        let mut p = ScenarioProfile::outdoor_like(1);
        p.angle_spread_deg = 90.0;
        assert!(p.validate().is_err());
        let mut p = ScenarioProfile::outdoor_like(1);
        p.delay_spread_ns = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn profile_survives_json_roundtrip() {
        let p = ScenarioProfile::indoor_like(42);
        let js = serde_json::to_string(&p).unwrap();
        let back: ScenarioProfile = serde_json::from_str(&js).unwrap();
        assert_eq!(p, back);
    }
}
