//! Experiment configuration: one structured-text (TOML) document with
//! `scenario`, `radio`, `episode`, `learning`, `woa`, and `sweep` blocks.
//! Every field has a desk-scale default, so an empty document is a valid
//! experiment; the file only needs the fields it overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{db_to_lin, RadioConfig};
use crate::error::{Error, Result};
use crate::geometry::{ConstellationConfig, DopplerMode};

/// Constellation, service area, and user population.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioBlock {
    /// Orbital planes.
    pub planes: usize,
    /// Satellites per plane.
    pub counts: usize,
    pub altitude_km: f64,
    pub period_min: f64,
    pub sat_speed_km_s: f64,
    pub phase_offset: f64,
    pub area_side_km: f64,
    pub min_elevation_deg: f64,
    pub rue_count: usize,
    pub rue_speed_kmh: f64,
    pub num_clusters: usize,
    pub seed: u64,
}

impl Default for ScenarioBlock {
    fn default() -> Self {
        ScenarioBlock {
            planes: 1,
            counts: 3,
            altitude_km: 500.0,
            period_min: 100.0,
            sat_speed_km_s: 7.5622,
            phase_offset: 0.0,
            area_side_km: 500.0,
            min_elevation_deg: 10.0,
            rue_count: 12,
            rue_speed_kmh: 3.0,
            num_clusters: 4,
            seed: 1,
        }
    }
}

/// Radio parameters, named after the simulation-parameter table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RadioBlock {
    pub f_c_ghz: f64,
    pub b_tot_mhz: f64,
    pub g_s_dbi: f64,
    pub g_u_dbi: f64,
    /// Total in-band noise power in dBW.
    pub noise_db: f64,
    pub p_max_w: f64,
    pub pl_g_db: f64,
    pub pl_s_db: f64,
    pub cl_db: f64,
    pub sf_sigma_db: f64,
    pub n_beam: usize,
    pub r_back_mbps: f64,
    pub gamma_min_db: f64,
    pub tau_max_ms: f64,
    pub upa_nx: usize,
    pub upa_ny: usize,
    /// "constant" or "geometric".
    pub doppler_mode: String,
    pub doppler_khz: f64,
}

impl Default for RadioBlock {
    fn default() -> Self {
        RadioBlock {
            f_c_ghz: 20.0,
            b_tot_mhz: 500.0,
            g_s_dbi: 33.13,
            g_u_dbi: 34.2,
            noise_db: -43.0,
            p_max_w: 10.0,
            pl_g_db: -10.0,
            pl_s_db: -20.0,
            cl_db: 0.0,
            sf_sigma_db: 1.0,
            n_beam: 4,
            r_back_mbps: 1000.0,
            // chosen so the SINR floor is binding but satisfiable under the
            // default link budget at desk scale
            gamma_min_db: -172.0,
            tau_max_ms: 100.0,
            upa_nx: 4,
            upa_ny: 4,
            doppler_mode: "constant".into(),
            doppler_khz: 20.0,
        }
    }
}

/// Episode shape and slot dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeBlock {
    /// Slots per episode (each slot is one full decision cycle).
    pub slots: usize,
    pub delta_t_ms: f64,
    pub demand_min_mbit: f64,
    pub demand_max_mbit: f64,
    /// Recompute the association every this many slots; 0 = once per episode.
    pub assoc_refresh_slots: usize,
}

impl Default for EpisodeBlock {
    fn default() -> Self {
        EpisodeBlock {
            slots: 100,
            delta_t_ms: 10.0,
            demand_min_mbit: 1.0,
            demand_max_mbit: 10.0,
            assoc_refresh_slots: 0,
        }
    }
}

/// Learner hyperparameters shared by the adversarial and clipped-surrogate
/// trainers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningBlock {
    pub hidden: Vec<usize>,
    pub demo_batch_size: usize,
    pub gen_replay_buffer_capacity: usize,
    /// Update cadence in slots; 0 = once per episode.
    pub t_upd_slots: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub clip_ratio: f64,
    /// Optimization epochs per update (clipped-surrogate trainer).
    pub epochs: usize,
    pub value_coef: f64,
    pub episodes: usize,
    pub eval_episodes: usize,
    pub agg_interval_episodes: usize,
    /// "equal" or "batch".
    pub fed_weights: String,
    pub aggregate_discriminator: bool,
    /// Expert records to generate for training (the full-scale figure is
    /// 50_000; desk default is 2_000).
    pub expert_records: usize,
    pub penalty_c1: f64,
    pub penalty_c2: f64,
    pub penalty_c8: f64,
}

impl Default for LearningBlock {
    fn default() -> Self {
        LearningBlock {
            hidden: vec![128, 128],
            demo_batch_size: 1024,
            gen_replay_buffer_capacity: 512,
            t_upd_slots: 0,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            lr: 3e-4,
            clip_ratio: 0.2,
            epochs: 64,
            value_coef: 0.5,
            episodes: 200,
            eval_episodes: 10,
            agg_interval_episodes: 10,
            fed_weights: "equal".into(),
            aggregate_discriminator: true,
            expert_records: 2000,
            penalty_c1: 1.0,
            penalty_c2: 1.0,
            penalty_c8: 1.0,
        }
    }
}

/// Expert-optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WoaBlock {
    pub population: usize,
    pub iterations: usize,
    pub spiral_b: f64,
    pub penalty_lambda: f64,
}

impl Default for WoaBlock {
    fn default() -> Self {
        WoaBlock { population: 20, iterations: 40, spiral_b: 1.0, penalty_lambda: 10.0 }
    }
}

/// Sweep axis and grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepBlock {
    /// "bandwidth" (MHz), "power" (W), or "altitude" (km).
    pub axis: String,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock {
            axis: "bandwidth".into(),
            grid: vec![250.0, 500.0, 750.0],
            seeds: vec![1, 2, 3, 4, 5],
            methods: vec!["fairness".into()],
        }
    }
}

/// Whole experiment document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioBlock,
    pub radio: RadioBlock,
    pub episode: EpisodeBlock,
    pub learning: LearningBlock,
    pub woa: WoaBlock,
    pub sweep: SweepBlock,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_constellation().validate()?;
        self.to_radio()?.validate()?;
        if self.scenario.rue_count == 0 {
            return Err(Error::Config("rue_count must be > 0".into()));
        }
        if self.scenario.num_clusters == 0 || self.scenario.num_clusters > self.scenario.rue_count
        {
            return Err(Error::Config("num_clusters must be in 1..=rue_count".into()));
        }
        if self.episode.slots == 0 {
            return Err(Error::Config("episode.slots must be >= 1".into()));
        }
        if self.episode.delta_t_ms <= 0.0 {
            return Err(Error::Config("episode.delta_t_ms must be > 0".into()));
        }
        if self.sweep.grid.is_empty() {
            return Err(Error::Config("sweep.grid must be non-empty".into()));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds must be non-empty".into()));
        }
        match self.sweep.axis.as_str() {
            "bandwidth" | "power" | "altitude" => {}
            other => return Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
        Ok(())
    }

    pub fn to_constellation(&self) -> ConstellationConfig {
        ConstellationConfig {
            num_planes: self.scenario.planes,
            sats_per_plane: self.scenario.counts,
            altitude_km: self.scenario.altitude_km,
            orbital_period_min: self.scenario.period_min,
            sat_speed_km_s: self.scenario.sat_speed_km_s,
            phase_offset: self.scenario.phase_offset,
        }
    }

    pub fn to_radio(&self) -> Result<RadioConfig> {
        let r = &self.radio;
        let doppler_mode = match r.doppler_mode.as_str() {
            "constant" => DopplerMode::Constant(r.doppler_khz * 1e3),
            "geometric" => DopplerMode::Geometric,
            other => return Err(Error::Config(format!("unknown doppler mode '{other}'"))),
        };
        Ok(RadioConfig {
            f_c_hz: r.f_c_ghz * 1e9,
            b_tot_hz: r.b_tot_mhz * 1e6,
            g_s_dbi: r.g_s_dbi,
            g_u_dbi: r.g_u_dbi,
            noise_dbw: r.noise_db,
            p_max_w: r.p_max_w,
            pl_g_db: r.pl_g_db,
            pl_s_db: r.pl_s_db,
            cl_db: r.cl_db,
            sf_sigma_db: r.sf_sigma_db,
            n_beam: r.n_beam,
            r_back_bps: r.r_back_mbps * 1e6,
            gamma_min_lin: db_to_lin(r.gamma_min_db),
            tau_max_s: r.tau_max_ms * 1e-3,
            upa_nx: r.upa_nx,
            upa_ny: r.upa_ny,
            doppler_mode,
        })
    }

    /// Stable hash of the physical scenario (constellation + radio +
    /// episode), used to stamp demonstration files.
    pub fn scenario_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct Physical<'a> {
            scenario: &'a ScenarioBlock,
            radio: &'a RadioBlock,
            episode: &'a EpisodeBlock,
        }
        let text = toml::to_string(&Physical {
            scenario: &self.scenario,
            radio: &self.radio,
            episode: &self.episode,
        })
        .expect("serializing config blocks cannot fail");
        crate::seeds::fnv1a(text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_a_valid_experiment() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.scenario.rue_count, 12);
        assert_eq!(cfg.radio.n_beam, 4);
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            "[radio]\nb_tot_mhz = 250.0\n\n[scenario]\nrue_count = 6\nnum_clusters = 2\n",
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.radio.b_tot_mhz, 250.0);
        assert_eq!(cfg.scenario.rue_count, 6);
        assert_eq!(cfg.radio.p_max_w, 10.0);
    }

    #[test]
    fn scenario_hash_tracks_physical_changes_only() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        b.learning.episodes = 7;
        assert_eq!(a.scenario_hash(), b.scenario_hash());
        b.radio.p_max_w = 11.0;
        assert_ne!(a.scenario_hash(), b.scenario_hash());
    }

    #[test]
    fn bad_axis_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.axis = "frequency".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn radio_conversion_produces_linear_units() {
        let cfg = ExperimentConfig::default();
        let radio = cfg.to_radio().unwrap();
        assert!((radio.f_c_hz - 20e9).abs() < 1.0);
        assert!((radio.b_tot_hz - 500e6).abs() < 1.0);
        assert!((radio.noise_power_lin() - 10f64.powf(-4.3)).abs() < 1e-12);
        assert!((radio.tau_max_s - 0.1).abs() < 1e-12);
    }
}
