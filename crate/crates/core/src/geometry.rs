//! Walker-constellation kinematics on a 2D projected service area.
//!
//! Satellites move along parallel ground tracks (one per orbital plane) that
//! cross the square service area and wrap modulo the ground-track length.
//! The track length is derived from the configured linear speed and orbital
//! period, so positions are exactly periodic in one orbital period. Users
//! (RUEs) follow straight lines with reflection at the area boundary.
//!
//! All functions here are pure in `(config, initial states, t)`; there is no
//! internal mutability, so concurrent callers need no synchronization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

/// Identifier of a satellite within the constellation (dense, 0-based).
pub type SatId = usize;
/// Identifier of a ground user (dense, 0-based).
pub type RueId = usize;

/// Constellation shape and kinematics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConstellationConfig {
    /// Number of orbital planes (parallel ground tracks).
    pub num_planes: usize,
    /// Satellites per plane.
    pub sats_per_plane: usize,
    /// Orbital altitude in km.
    pub altitude_km: f64,
    /// Orbital period in minutes.
    pub orbital_period_min: f64,
    /// Along-track speed in km/s.
    pub sat_speed_km_s: f64,
    /// Per-plane stagger along track, as a fraction of the ground-track length.
    pub phase_offset: f64,
}

impl ConstellationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_planes < 1 {
            return Err(Error::Config("num_planes must be >= 1".into()));
        }
        if self.sats_per_plane < 1 {
            return Err(Error::Config("sats_per_plane must be >= 1".into()));
        }
        if self.altitude_km <= 0.0 {
            return Err(Error::Config("altitude_km must be > 0".into()));
        }
        if self.orbital_period_min <= 0.0 {
            return Err(Error::Config("orbital_period_min must be > 0".into()));
        }
        if self.sat_speed_km_s <= 0.0 {
            return Err(Error::Config("sat_speed_km_s must be > 0".into()));
        }
        Ok(())
    }

    /// Total number of satellites.
    pub fn num_sats(&self) -> usize {
        self.num_planes * self.sats_per_plane
    }

    /// Ground-track wrap length in km: the distance covered in one orbital
    /// period at the configured speed. Speed is authoritative; the period
    /// only fixes the wrap point.
    pub fn ground_track_length_km(&self) -> f64 {
        self.sat_speed_km_s * self.orbital_period_min * 60.0
    }
}

/// Kinematic state of one satellite at a given instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatelliteState {
    pub sat_id: SatId,
    pub plane_index: usize,
    /// Ground-track position (x along track, y across track) in km.
    pub pos_km: (f64, f64),
    pub altitude_km: f64,
    /// Along-track speed in km/s.
    pub velocity_km_s: f64,
}

/// Kinematic state of one ground user.
#[derive(Debug, Clone, PartialEq)]
pub struct RueState {
    pub rue_id: RueId,
    /// Position within the service area in km.
    pub pos_km: (f64, f64),
    pub speed_kmh: f64,
    pub heading_rad: f64,
    /// Initial traffic demand in bits.
    pub demand_bits: f64,
    pub cluster_id: Option<usize>,
}

/// One visible satellite-RUE link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibleLink {
    pub sat_id: SatId,
    pub slant_range_km: f64,
    pub elevation_rad: f64,
}

/// Per-RUE visible satellites, sorted by ascending slant range.
#[derive(Debug, Clone, Default)]
pub struct Visibility {
    /// Indexed by `rue_id`; empty vector means the RUE is unassociable
    /// this slot (flagged, not an error).
    pub by_rue: Vec<Vec<VisibleLink>>,
}

impl Visibility {
    /// RUE ids that see no satellite at all.
    pub fn unassociable(&self) -> Vec<RueId> {
        self.by_rue
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_empty())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn is_visible(&self, sat: SatId, rue: RueId) -> bool {
        self.by_rue[rue].iter().any(|l| l.sat_id == sat)
    }

    pub fn link(&self, sat: SatId, rue: RueId) -> Option<&VisibleLink> {
        self.by_rue[rue].iter().find(|l| l.sat_id == sat)
    }
}

/// Initial satellite placement: each plane gets a track at constant y, and
/// its satellites are spread evenly across the service area (positioning is
/// configured over the area of interest), staggered per plane by
/// `phase_offset` fractions of the track length.
pub fn initial_satellites(cfg: &ConstellationConfig, area_side_km: f64) -> Vec<SatelliteState> {
    let track_len = cfg.ground_track_length_km();
    let mut sats = Vec::with_capacity(cfg.num_sats());
    for plane in 0..cfg.num_planes {
        let track_y = area_side_km * (plane as f64 + 0.5) / cfg.num_planes as f64;
        let plane_shift = cfg.phase_offset * track_len * plane as f64;
        for j in 0..cfg.sats_per_plane {
            let x0 = area_side_km * (j as f64 + 0.5) / cfg.sats_per_plane as f64;
            sats.push(SatelliteState {
                sat_id: plane * cfg.sats_per_plane + j,
                plane_index: plane,
                pos_km: (wrap(x0 + plane_shift, track_len), track_y),
                altitude_km: cfg.altitude_km,
                velocity_km_s: cfg.sat_speed_km_s,
            });
        }
    }
    sats
}

/// Advances satellites and RUEs from their initial states to absolute time
/// `t` seconds. Satellites advance along track modulo the ground-track
/// length; RUEs move along their heading and reflect at the area boundary.
pub fn propagate(
    cfg: &ConstellationConfig,
    area_side_km: f64,
    initial_sats: &[SatelliteState],
    initial_rues: &[RueState],
    t: f64,
) -> (Vec<SatelliteState>, Vec<RueState>) {
    debug_assert!(t >= 0.0, "propagate expects t >= 0");
    let track_len = cfg.ground_track_length_km();
    let sats = initial_sats
        .iter()
        .map(|s| {
            let mut out = *s;
            out.pos_km.0 = wrap(s.pos_km.0 + s.velocity_km_s * t, track_len);
            out
        })
        .collect();
    let rues = initial_rues
        .iter()
        .map(|r| {
            let mut out = r.clone();
            let v_km_s = r.speed_kmh / 3600.0;
            let dx = v_km_s * t * r.heading_rad.cos();
            let dy = v_km_s * t * r.heading_rad.sin();
            out.pos_km.0 = reflect(r.pos_km.0 + dx, area_side_km);
            out.pos_km.1 = reflect(r.pos_km.1 + dy, area_side_km);
            out
        })
        .collect();
    (sats, rues)
}

/// Ground distance between a satellite's sub-point and a RUE, honoring the
/// track wrap along x.
pub fn ground_distance_km(cfg: &ConstellationConfig, sat: &SatelliteState, rue: &RueState) -> f64 {
    let track_len = cfg.ground_track_length_km();
    let dx_raw = (sat.pos_km.0 - rue.pos_km.0).abs();
    let dx = dx_raw.min(track_len - dx_raw);
    let dy = sat.pos_km.1 - rue.pos_km.1;
    (dx * dx + dy * dy).sqrt()
}

/// Slant range in km from ground distance and altitude.
pub fn slant_range_km(ground_distance_km: f64, altitude_km: f64) -> f64 {
    (altitude_km * altitude_km + ground_distance_km * ground_distance_km).sqrt()
}

/// Elevation angle seen from the RUE: `atan2(altitude, ground_distance)`.
pub fn elevation_rad(ground_distance_km: f64, altitude_km: f64) -> f64 {
    altitude_km.atan2(ground_distance_km)
}

/// Builds the visibility map at a common instant: a link is listed iff its
/// elevation is at least `min_elevation_rad`.
pub fn compute_visibility(
    cfg: &ConstellationConfig,
    sats: &[SatelliteState],
    rues: &[RueState],
    min_elevation_rad: f64,
) -> Visibility {
    let mut by_rue = Vec::with_capacity(rues.len());
    for rue in rues {
        let mut links: Vec<VisibleLink> = sats
            .iter()
            .filter_map(|sat| {
                let gd = ground_distance_km(cfg, sat, rue);
                let elev = elevation_rad(gd, sat.altitude_km);
                if elev >= min_elevation_rad {
                    Some(VisibleLink {
                        sat_id: sat.sat_id,
                        slant_range_km: slant_range_km(gd, sat.altitude_km),
                        elevation_rad: elev,
                    })
                } else {
                    None
                }
            })
            .collect();
        links.sort_by(|a, b| {
            a.slant_range_km
                .partial_cmp(&b.slant_range_km)
                .unwrap()
                .then(a.sat_id.cmp(&b.sat_id))
        });
        by_rue.push(links);
    }
    Visibility { by_rue }
}

/// Doppler-shift model selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DopplerMode {
    /// Fixed configured shift in Hz.
    Constant(f64),
    /// `(v/c) * f_c * cos(elevation)` from the link geometry.
    Geometric,
}

/// Doppler shift in Hz for a link at the given elevation.
pub fn doppler_hz(mode: DopplerMode, sat_speed_m_s: f64, f_c_hz: f64, elevation_rad: f64) -> f64 {
    match mode {
        DopplerMode::Constant(hz) => hz,
        DopplerMode::Geometric => sat_speed_m_s / SPEED_OF_LIGHT_M_S * f_c_hz * elevation_rad.cos(),
    }
}

/// One-way propagation delay in seconds for a slant range in km.
pub fn propagation_delay_s(slant_range_km: f64) -> f64 {
    slant_range_km * 1000.0 / SPEED_OF_LIGHT_M_S
}

fn wrap(x: f64, len: f64) -> f64 {
    let w = x % len;
    if w < 0.0 {
        w + len
    } else {
        w
    }
}

/// Folds a coordinate into `[0, side]` with reflection (triangle wave of
/// period `2*side`).
fn reflect(x: f64, side: f64) -> f64 {
    let period = 2.0 * side;
    let mut r = x % period;
    if r < 0.0 {
        r += period;
    }
    if r > side {
        period - r
    } else {
        r
    }
}
