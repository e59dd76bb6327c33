//! Link-budget and rate model: path loss, channel gain, time-frequency
//! response, SINR, achievable rate, and spectrum efficiency.
//!
//! Conventions fixed here and used everywhere else:
//! - free-space path loss follows the Friis form `20*log10(4*pi*d*f/c)`;
//! - the linear channel gain is `sqrt(Gs_lin * Gu_lin) * 10^(-PL_total/10)`;
//! - noise power is a single total in-band figure in dBW, converted to
//!   linear once at config load;
//! - beams point at their intended user (maximum-ratio direction); only the
//!   per-beam transmit power and spectrum fraction are decision variables.
//!
//! All operations are pure and all values immutable after construction.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DopplerMode, RueId, SatId, SPEED_OF_LIGHT_M_S};

/// Radio-layer parameters shared by every link.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadioConfig {
    /// Carrier frequency in Hz.
    pub f_c_hz: f64,
    /// Total per-satellite bandwidth in Hz.
    pub b_tot_hz: f64,
    /// Satellite antenna gain in dBi.
    pub g_s_dbi: f64,
    /// User antenna gain in dBi.
    pub g_u_dbi: f64,
    /// Total in-band noise power in dBW.
    pub noise_dbw: f64,
    /// Maximum transmit power per satellite in W.
    pub p_max_w: f64,
    /// Atmospheric gas attenuation term in dB.
    pub pl_g_db: f64,
    /// Scintillation attenuation term in dB.
    pub pl_s_db: f64,
    /// Clutter loss in dB.
    pub cl_db: f64,
    /// Log-normal shadow-fading standard deviation in dB.
    pub sf_sigma_db: f64,
    /// Spot beams per satellite.
    pub n_beam: usize,
    /// Backhaul capacity per satellite in bit/s.
    pub r_back_bps: f64,
    /// Minimum link SINR (linear).
    pub gamma_min_lin: f64,
    /// Maximum tolerated residual latency in seconds.
    pub tau_max_s: f64,
    /// Planar-array elements along track.
    pub upa_nx: usize,
    /// Planar-array elements across track.
    pub upa_ny: usize,
    /// Doppler model for link construction.
    pub doppler_mode: DopplerMode,
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_c_hz <= 0.0 {
            return Err(Error::Config("f_c_hz must be > 0".into()));
        }
        if self.b_tot_hz <= 0.0 {
            return Err(Error::Config("b_tot_hz must be > 0".into()));
        }
        if self.p_max_w <= 0.0 {
            return Err(Error::Config("p_max_w must be > 0".into()));
        }
        if self.n_beam < 1 {
            return Err(Error::Config("n_beam must be >= 1".into()));
        }
        if self.gamma_min_lin <= 0.0 {
            return Err(Error::Config("gamma_min must be > 0".into()));
        }
        if self.upa_nx < 1 || self.upa_ny < 1 {
            return Err(Error::Config("UPA dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// Total in-band noise power in W.
    pub fn noise_power_lin(&self) -> f64 {
        db_to_lin(self.noise_dbw)
    }
}

/// `10^(x/10)`.
pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// `10*log10(x)`.
pub fn lin_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Free-space path loss in dB for a distance in meters and carrier in Hz.
pub fn fspl_db(d_m: f64, f_c_hz: f64) -> f64 {
    debug_assert!(d_m > 0.0 && f_c_hz > 0.0);
    20.0 * (4.0 * PI * d_m * f_c_hz / SPEED_OF_LIGHT_M_S).log10()
}

/// Path-loss components of one link, all in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossBreakdown {
    pub fspl_db: f64,
    pub sf_db: f64,
    pub cl_db: f64,
    /// Basic path loss: free space + shadow fading + clutter.
    pub pl_b_db: f64,
    pub pl_g_db: f64,
    pub pl_s_db: f64,
    pub pl_total_db: f64,
}

/// Assembles the path-loss breakdown. The shadow-fading sample is passed in
/// so the operation itself stays deterministic.
pub fn path_loss(fspl_db: f64, radio: &RadioConfig, sf_db: f64) -> PathLossBreakdown {
    let pl_b = fspl_db + sf_db + radio.cl_db;
    PathLossBreakdown {
        fspl_db,
        sf_db,
        cl_db: radio.cl_db,
        pl_b_db: pl_b,
        pl_g_db: radio.pl_g_db,
        pl_s_db: radio.pl_s_db,
        pl_total_db: pl_b + radio.pl_g_db + radio.pl_s_db,
    }
}

/// Linear channel-gain coefficient from a path-loss breakdown.
pub fn channel_gain(pl: &PathLossBreakdown, radio: &RadioConfig) -> f64 {
    let g_s = db_to_lin(radio.g_s_dbi);
    let g_u = db_to_lin(radio.g_u_dbi);
    (g_s * g_u).sqrt() * 10f64.powf(-pl.pl_total_db / 10.0)
}

/// Unit-norm planar-array response for a unit direction `(ux, uy)` with
/// half-wavelength element spacing.
pub fn steering_vector(nx: usize, ny: usize, ux: f64, uy: f64) -> Vec<Complex64> {
    let n = nx * ny;
    let norm = 1.0 / (n as f64).sqrt();
    let mut v = Vec::with_capacity(n);
    for m in 0..nx {
        for k in 0..ny {
            let phase = PI * (m as f64 * ux + k as f64 * uy);
            v.push(Complex64::from_polar(norm, phase));
        }
    }
    v
}

/// One satellite-RUE link: gain, Doppler, delay, and array response.
#[derive(Debug, Clone)]
pub struct LinkChannel {
    pub sat_id: SatId,
    pub rue_id: RueId,
    /// Linear amplitude gain coefficient.
    pub gain_g: f64,
    pub doppler_hz: f64,
    pub delay_s: f64,
    /// Unit-norm array response toward the RUE.
    pub steering: Vec<Complex64>,
}

impl LinkChannel {
    /// `<a_self, a_other>` beam-pattern correlation between this link's
    /// direction and another steering vector from the same satellite.
    pub fn steering_correlation(&self, other: &[Complex64]) -> Complex64 {
        debug_assert_eq!(self.steering.len(), other.len());
        self.steering
            .iter()
            .zip(other)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }
}

/// Time-frequency channel response `g * exp(j*2*pi*(t*nu - f*tau))`.
pub fn channel_response(link: &LinkChannel, t_s: f64, f_hz: f64) -> Complex64 {
    let phase = 2.0 * PI * (t_s * link.doppler_hz - f_hz * link.delay_s);
    Complex64::from_polar(link.gain_g, phase)
}

/// Per-satellite beam decisions: transmit power and allocated bandwidth for
/// each served RUE. Entries exist only for associated RUEs.
#[derive(Debug, Clone, Default)]
pub struct BeamPlan {
    pub per_sat: BTreeMap<SatId, BTreeMap<RueId, BeamAllocation>>,
}

/// Power and spectrum given to one beam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamAllocation {
    pub power_w: f64,
    pub bandwidth_hz: f64,
}

impl BeamPlan {
    pub fn allocation(&self, sat: SatId, rue: RueId) -> Option<BeamAllocation> {
        self.per_sat.get(&sat).and_then(|m| m.get(&rue)).copied()
    }

    pub fn set(&mut self, sat: SatId, rue: RueId, alloc: BeamAllocation) {
        self.per_sat.entry(sat).or_default().insert(rue, alloc);
    }

    /// Checks the per-satellite power and bandwidth budgets.
    pub fn validate_budgets(&self, radio: &RadioConfig) -> Result<()> {
        for (sat, beams) in &self.per_sat {
            let p: f64 = beams.values().map(|a| a.power_w).sum();
            let b: f64 = beams.values().map(|a| a.bandwidth_hz).sum();
            if p > radio.p_max_w * (1.0 + 1e-9) {
                return Err(Error::Config(format!("satellite {sat} power budget exceeded: {p}")));
            }
            if b > radio.b_tot_hz * (1.0 + 1e-9) {
                return Err(Error::Config(format!(
                    "satellite {sat} bandwidth budget exceeded: {b}"
                )));
            }
        }
        Ok(())
    }

    /// All `(sat, rue)` pairs with a planned beam.
    pub fn active_links(&self) -> Vec<(SatId, RueId)> {
        self.per_sat
            .iter()
            .flat_map(|(s, m)| m.keys().map(move |u| (*s, *u)))
            .collect()
    }
}

/// Link table keyed by `(sat, rue)` covering every visible pair, associated
/// or not; non-visible pairs contribute no interference.
pub type LinkTable = BTreeMap<(SatId, RueId), LinkChannel>;

/// Received beam power `|h_{s,u} . w_{s,u'}|^2` at RUE `u` from satellite
/// `s` transmitting beam `u'` with power `power_w`.
pub fn beam_power_at(
    links: &LinkTable,
    sat: SatId,
    target_rue: RueId,
    beam_rue: RueId,
    power_w: f64,
) -> f64 {
    let Some(link_to_target) = links.get(&(sat, target_rue)) else {
        return 0.0; // not visible: off-boresight attenuation dominates
    };
    let corr = if beam_rue == target_rue {
        1.0
    } else {
        match links.get(&(sat, beam_rue)) {
            Some(beam_link) => link_to_target.steering_correlation(&beam_link.steering).norm(),
            None => return 0.0,
        }
    };
    let amp = link_to_target.gain_g * corr;
    amp * amp * power_w
}

/// SINR of the `target` link under a beam plan with the given association.
///
/// The numerator is the intended beam's received power; the denominator adds
/// the noise power and the received power of every other active link's beam
/// at the target RUE.
pub fn sinr(
    target: (SatId, RueId),
    plan: &BeamPlan,
    active_links: &[(SatId, RueId)],
    links: &LinkTable,
    noise_power_lin: f64,
) -> Result<f64> {
    let (s, u) = target;
    let alloc = plan
        .allocation(s, u)
        .ok_or_else(|| Error::Config(format!("missing beam plan entry for link ({s},{u})")))?;
    let signal = beam_power_at(links, s, u, u, alloc.power_w);
    let mut interference = 0.0;
    for &(s2, u2) in active_links {
        if (s2, u2) == (s, u) {
            continue;
        }
        let a2 = plan
            .allocation(s2, u2)
            .ok_or_else(|| Error::Config(format!("missing beam plan entry for link ({s2},{u2})")))?;
        interference += beam_power_at(links, s2, u, u2, a2.power_w);
    }
    Ok(signal / (noise_power_lin + interference))
}

/// Shannon rate in bit/s; zero bandwidth yields zero rate. Computed via
/// `ln_1p` so rates stay nonzero and ordered even at SINRs far below the
/// f64 epsilon of `1 + sinr`.
pub fn link_rate(sinr_lin: f64, bandwidth_hz: f64) -> f64 {
    debug_assert!(sinr_lin >= 0.0 && bandwidth_hz >= 0.0);
    if bandwidth_hz == 0.0 {
        return 0.0;
    }
    bandwidth_hz * sinr_lin.ln_1p() / std::f64::consts::LN_2
}

/// Per-satellite and total spectrum efficiency.
///
/// Each satellite's efficiency is the sum of its link rates divided by the
/// bandwidth it consumes; satellites with no active bandwidth contribute 0.
/// The total is the sum over satellites.
pub fn spectrum_efficiency(per_sat: &[(SatId, Vec<(f64, f64)>)]) -> (Vec<(SatId, f64)>, f64) {
    let mut out = Vec::with_capacity(per_sat.len());
    let mut total = 0.0;
    for (sat, rates_and_bw) in per_sat {
        let rate_sum: f64 = rates_and_bw.iter().map(|(r, _)| r).sum();
        let bw_sum: f64 = rates_and_bw.iter().map(|(_, b)| b).sum();
        let se = if bw_sum > 0.0 { rate_sum / bw_sum } else { 0.0 };
        out.push((*sat, se));
        total += se;
    }
    (out, total)
}
