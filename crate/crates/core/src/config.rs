//! Scenario constants and the flat `key = value` config file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boltzmann constant in J/K.
pub const BOLTZMANN: f64 = 1.381e-23;
/// Reference noise temperature in K.
pub const NOISE_TEMPERATURE_K: f64 = 290.0;

/// All constants describing one simulated deployment.
///
/// The config file keys are the serde names below (e.g. `M = 14`,
/// `pilot_power_W = 0.1`). Missing keys fall back to [`SystemConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "M")]
    pub num_aps: usize,
    #[serde(rename = "N")]
    pub antennas_per_ap: usize,
    #[serde(rename = "K")]
    pub num_ues: usize,
    pub serving_set_size: usize,
    pub tau_c: usize,
    pub tau_p: usize,
    #[serde(rename = "pilot_power_W")]
    pub pilot_power_w: f64,
    #[serde(rename = "max_ap_power_W")]
    pub max_ap_power_w: f64,
    #[serde(rename = "fronthaul_cap_bpsHz")]
    pub fronthaul_cap_bps_hz: f64,
    pub area_m: f64,
    #[serde(rename = "bandwidth_Hz")]
    pub bandwidth_hz: f64,
    #[serde(rename = "noise_figure_dB")]
    pub noise_figure_db: f64,
    pub asd_deg: f64,
    pub mc_trials: usize,
    pub seed: u64,
    /// Log-normal shadowing standard deviation; 0 disables shadowing.
    #[serde(rename = "shadowing_std_dB")]
    pub shadowing_std_db: f64,
    /// Outer SCA iteration cap.
    pub sca_max_iters: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            num_aps: 14,
            antennas_per_ap: 8,
            num_ues: 15,
            serving_set_size: 8,
            tau_c: 200,
            tau_p: 10,
            pilot_power_w: 0.1,
            max_ap_power_w: 0.2,
            fronthaul_cap_bps_hz: 15.0,
            area_m: 600.0,
            bandwidth_hz: 20e6,
            noise_figure_db: 9.0,
            asd_deg: 15.0,
            mc_trials: 10_000,
            seed: 0,
            shadowing_std_db: 4.0,
            sca_max_iters: 30,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_aps == 0 || self.num_ues == 0 || self.antennas_per_ap == 0 {
            return fail(format!(
                "M, N and K must be positive (got M={}, N={}, K={})",
                self.num_aps, self.antennas_per_ap, self.num_ues
            ));
        }
        if self.tau_p == 0 || self.tau_p > self.tau_c {
            return fail(format!("need 1 <= tau_p <= tau_c (got tau_p={}, tau_c={})", self.tau_p, self.tau_c));
        }
        if self.serving_set_size == 0 || self.serving_set_size > self.num_aps {
            return fail(format!(
                "need 1 <= serving_set_size <= M (got {} with M={})",
                self.serving_set_size, self.num_aps
            ));
        }
        if !(self.pilot_power_w > 0.0) || !(self.max_ap_power_w > 0.0) {
            return fail("pilot and AP powers must be positive".into());
        }
        if !(self.fronthaul_cap_bps_hz > 0.0) {
            return fail("fronthaul_cap_bpsHz must be positive".into());
        }
        if !(self.area_m > 0.0) || !(self.bandwidth_hz > 0.0) {
            return fail("area_m and bandwidth_Hz must be positive".into());
        }
        if !(self.asd_deg >= 0.0) || !(self.shadowing_std_db >= 0.0) {
            return fail("asd_deg and shadowing_std_dB must be nonnegative".into());
        }
        if !self.noise_figure_db.is_finite() {
            return fail("noise_figure_dB must be finite".into());
        }
        if self.sca_max_iters == 0 {
            return fail("sca_max_iters must be at least 1".into());
        }
        Ok(())
    }

    /// Downlink symbols per coherence block (no uplink data phase).
    pub fn tau_d(&self) -> usize {
        self.tau_c - self.tau_p
    }

    pub fn prelog(&self) -> f64 {
        self.tau_d() as f64 / self.tau_c as f64
    }

    /// Thermal noise power `B * k_B * T0 * F` in watts, used for both links.
    pub fn noise_power_w(&self) -> f64 {
        self.bandwidth_hz * BOLTZMANN * NOISE_TEMPERATURE_K * 10f64.powf(self.noise_figure_db / 10.0)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = SystemConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tau_d(), 190);
        assert!((cfg.prelog() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn noise_power_matches_thermal_formula() {
        let sigma2 = SystemConfig::default().noise_power_w();
        // 20 MHz * 1.381e-23 * 290 * 10^0.9
        assert!((sigma2 - 6.3605e-13).abs() / 6.3605e-13 < 1e-3, "{sigma2}");
        let dbm = 10.0 * (sigma2 / 1e-3).log10();
        assert!((dbm + 92.0).abs() < 0.1);
    }

    #[test]
    fn parses_flat_file_with_overrides() {
        let cfg = SystemConfig::from_toml_str("M = 4\nK = 3\nserving_set_size = 2\nfronthaul_cap_bpsHz = 30.0\n").unwrap();
        assert_eq!(cfg.num_aps, 4);
        assert_eq!(cfg.num_ues, 3);
        assert_eq!(cfg.fronthaul_cap_bps_hz, 30.0);
        assert_eq!(cfg.antennas_per_ap, 8);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        assert!(matches!(SystemConfig::from_toml_str("M = 2\nserving_set_size = 3"), Err(Error::Config(_))));
        assert!(matches!(SystemConfig::from_toml_str("tau_p = 0"), Err(Error::Config(_))));
        assert!(matches!(SystemConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = SystemConfig { seed: 99, ..Default::default() };
        let back = SystemConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }
}
