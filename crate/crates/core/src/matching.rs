//! Satellite / RUE-cluster association via capacity-constrained many-to-one
//! matching: proximity clustering, deferred acceptance on channel-gain
//! scores, then swap refinement until the matching is two-sided
//! exchange-stable.
//!
//! Utilities are supplied through [`UtilityModel`] so the swap phase can see
//! peer effects (a swap changes interference, hence everyone's utility); a
//! plain score-table model is provided for standalone instances and tests.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{RueId, SatId};

pub type ClusterId = usize;

/// A proximity cluster of RUEs.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub cluster_id: ClusterId,
    /// Member RUE ids, ascending. Never empty.
    pub members: Vec<RueId>,
    pub centroid_km: (f64, f64),
}

/// Capacity-constrained many-to-one matching between clusters and satellites.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Satellite serving each cluster, or `None` if unmatched.
    pub mu_cluster: Vec<Option<SatId>>,
    /// Clusters served by each satellite, ascending.
    pub mu_sat: Vec<Vec<ClusterId>>,
    /// Cluster capacity per satellite.
    pub capacity: Vec<usize>,
}

impl Matching {
    pub fn empty(num_clusters: usize, capacities: &[usize]) -> Self {
        Matching {
            mu_cluster: vec![None; num_clusters],
            mu_sat: vec![Vec::new(); capacities.len()],
            capacity: capacities.to_vec(),
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.mu_cluster.len()
    }

    pub fn num_sats(&self) -> usize {
        self.mu_sat.len()
    }

    fn assign(&mut self, k: ClusterId, s: SatId) {
        debug_assert!(self.mu_cluster[k].is_none());
        self.mu_cluster[k] = Some(s);
        self.mu_sat[s].push(k);
        self.mu_sat[s].sort_unstable();
    }

    /// The matching with clusters `i` and `j` exchanging their satellites,
    /// everything else unchanged.
    pub fn swapped(&self, i: ClusterId, j: ClusterId) -> Matching {
        let mut out = self.clone();
        let si = self.mu_cluster[i].expect("swap of unmatched cluster");
        let sj = self.mu_cluster[j].expect("swap of unmatched cluster");
        out.mu_cluster[i] = Some(sj);
        out.mu_cluster[j] = Some(si);
        out.mu_sat[si].retain(|&k| k != i);
        out.mu_sat[sj].retain(|&k| k != j);
        out.mu_sat[si].push(j);
        out.mu_sat[sj].push(i);
        out.mu_sat[si].sort_unstable();
        out.mu_sat[sj].sort_unstable();
        out
    }

    /// Checks the structural matching conditions: each cluster is matched to
    /// at most one satellite, no satellite exceeds its capacity, and the two
    /// maps agree.
    pub fn validate(&self) -> Result<()> {
        for (s, ks) in self.mu_sat.iter().enumerate() {
            if ks.len() > self.capacity[s] {
                return Err(Error::Matching(format!(
                    "satellite {s} over capacity: {} > {}",
                    ks.len(),
                    self.capacity[s]
                )));
            }
            for &k in ks {
                if self.mu_cluster[k] != Some(s) {
                    return Err(Error::Matching(format!(
                        "inconsistent maps: cluster {k} not pointing back at satellite {s}"
                    )));
                }
            }
        }
        for (k, s) in self.mu_cluster.iter().enumerate() {
            if let Some(s) = s {
                if !self.mu_sat[*s].contains(&k) {
                    return Err(Error::Matching(format!(
                        "inconsistent maps: satellite {s} missing cluster {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Binary association between satellites and individual RUEs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssociationVector {
    /// Serving satellite per RUE; absent RUEs are unassociated.
    pub by_rue: BTreeMap<RueId, SatId>,
}

impl AssociationVector {
    pub fn serving_sat(&self, rue: RueId) -> Option<SatId> {
        self.by_rue.get(&rue).copied()
    }

    /// RUEs served by a satellite, ascending.
    pub fn rues_of(&self, sat: SatId) -> Vec<RueId> {
        self.by_rue
            .iter()
            .filter(|(_, s)| **s == sat)
            .map(|(u, _)| *u)
            .collect()
    }

    /// Active `(sat, rue)` links, ordered.
    pub fn links(&self) -> Vec<(SatId, RueId)> {
        let mut v: Vec<(SatId, RueId)> = self.by_rue.iter().map(|(u, s)| (*s, *u)).collect();
        v.sort_unstable();
        v
    }

    /// Per-RUE single association holds by construction; checks the
    /// beam-count cap per satellite.
    pub fn validate(&self, num_sats: usize, n_beam: usize) -> Result<()> {
        let mut counts = vec![0usize; num_sats];
        for (&rue, &sat) in &self.by_rue {
            if sat >= num_sats {
                return Err(Error::Matching(format!("RUE {rue} mapped to unknown satellite {sat}")));
            }
            counts[sat] += 1;
        }
        for (s, c) in counts.iter().enumerate() {
            if *c > n_beam {
                return Err(Error::Matching(format!(
                    "satellite {s} exceeds beam budget: {c} > {n_beam}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// Groups RUEs into `num_clusters` proximity clusters (seeded k-means with a
/// farthest-point style init and a fixed iteration cap). Cluster ids are
/// relabeled by ascending smallest member id so the output is deterministic.
pub fn cluster_rues(
    positions: &[(f64, f64)],
    num_clusters: usize,
    seed: u64,
) -> Result<Vec<Cluster>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::Matching("cannot cluster zero RUEs".into()));
    }
    if num_clusters == 0 || num_clusters > n {
        return Err(Error::Matching(format!(
            "num_clusters {num_clusters} out of range for {n} RUEs"
        )));
    }

    let mut rng = crate::seeds::rng(seed, "kmeans", 0);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(num_clusters);
    centers.push(positions[rng.gen_range(0..n)]);
    while centers.len() < num_clusters {
        // farthest-first with squared-distance weighting
        let d2: Vec<f64> = positions
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| dist2(*p, *c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = 0;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            // all points coincide with existing centers; take the first one
            // not already used
            (0..n).find(|i| d2[*i] > 0.0).unwrap_or(centers.len())
        };
        centers.push(positions[next]);
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in positions.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(*p, *center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        // recompute centers; re-seed empty clusters with the point farthest
        // from its current center
        for c in 0..num_clusters {
            let members: Vec<usize> = (0..n).filter(|i| assignment[*i] == c).collect();
            if members.is_empty() {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(positions[a], centers[assignment[a]])
                            .partial_cmp(&dist2(positions[b], centers[assignment[b]]))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centers[c] = positions[far];
                assignment[far] = c;
                changed = true;
            } else {
                let sx: f64 = members.iter().map(|&i| positions[i].0).sum();
                let sy: f64 = members.iter().map(|&i| positions[i].1).sum();
                centers[c] = (sx / members.len() as f64, sy / members.len() as f64);
            }
        }
        if !changed {
            break;
        }
    }

    let mut clusters: Vec<Cluster> = (0..num_clusters)
        .map(|c| {
            let members: Vec<RueId> = (0..n).filter(|i| assignment[*i] == c).collect();
            let sx: f64 = members.iter().map(|&i| positions[i].0).sum();
            let sy: f64 = members.iter().map(|&i| positions[i].1).sum();
            let len = members.len() as f64;
            Cluster { cluster_id: c, members, centroid_km: (sx / len, sy / len) }
        })
        .collect();
    clusters.sort_by_key(|c| c.members[0]);
    for (i, c) in clusters.iter_mut().enumerate() {
        c.cluster_id = i;
    }
    Ok(clusters)
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

// ---------------------------------------------------------------------------
// Preferences and deferred acceptance
// ---------------------------------------------------------------------------

/// Sum of squared channel gains of a cluster's members toward one satellite;
/// members without a visible link contribute zero. This is the score used to
/// build the initial preference lists.
pub fn cluster_gain_score<F>(cluster: &Cluster, sat: SatId, gain2_of: F) -> f64
where
    F: Fn(SatId, RueId) -> Option<f64>,
{
    cluster
        .members
        .iter()
        .filter_map(|&u| gain2_of(sat, u))
        .sum()
}

/// Preference lists for the proposal phase.
#[derive(Debug, Clone)]
pub struct PreferenceLists {
    /// P(k): satellites in strictly descending score order (ties broken by
    /// lowest satellite id). Only satellites with a positive score appear.
    pub per_cluster: Vec<Vec<SatId>>,
    /// Satellite-side score over clusters, `scores[k][s]`.
    pub scores: Vec<Vec<f64>>,
}

/// Builds preference lists from a `scores[k][s]` table. Zero-score pairs are
/// treated as invisible and omitted.
pub fn build_preferences(scores: Vec<Vec<f64>>) -> PreferenceLists {
    let per_cluster = scores
        .iter()
        .map(|row| {
            let mut sats: Vec<SatId> = (0..row.len()).filter(|&s| row[s] > 0.0).collect();
            sats.sort_by(|&a, &b| {
                row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
            });
            sats
        })
        .collect();
    PreferenceLists { per_cluster, scores }
}

/// Result of the proposal phase, with the proposal counter used by the
/// complexity check.
#[derive(Debug, Clone)]
pub struct DaOutcome {
    pub matching: Matching,
    pub proposals: usize,
}

/// Deferred acceptance: unmatched clusters propose to the best remaining
/// satellite on their list; each satellite accepts proposals in score order
/// while it has spare capacity and rejects the rest, which strike it from
/// their lists. Runs until every cluster is matched or has exhausted its
/// list. Unmatched clusters are a valid outcome.
pub fn deferred_acceptance(prefs: &PreferenceLists, capacities: &[usize]) -> DaOutcome {
    let num_clusters = prefs.per_cluster.len();
    let num_sats = capacities.len();
    let mut matching = Matching::empty(num_clusters, capacities);
    let mut remaining: Vec<Vec<SatId>> = prefs.per_cluster.clone();
    let mut current: Vec<ClusterId> = (0..num_clusters).collect();
    let mut proposals = 0usize;

    while !current.is_empty() {
        let mut proposal_box: Vec<Vec<ClusterId>> = vec![Vec::new(); num_sats];
        let mut next_round: Vec<ClusterId> = Vec::new();
        for &k in &current {
            match remaining[k].first() {
                Some(&s) => {
                    proposals += 1;
                    proposal_box[s].push(k);
                }
                None => {} // list exhausted: stays unmatched
            }
        }
        for (s, mut box_s) in proposal_box.into_iter().enumerate() {
            if box_s.is_empty() {
                continue;
            }
            box_s.sort_by(|&a, &b| {
                prefs.scores[b][s]
                    .partial_cmp(&prefs.scores[a][s])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for k in box_s {
                if matching.mu_sat[s].len() < capacities[s] {
                    matching.assign(k, s);
                } else {
                    remaining[k].retain(|&x| x != s);
                    next_round.push(k);
                }
            }
        }
        next_round.sort_unstable();
        next_round.retain(|&k| !remaining[k].is_empty());
        current = next_round;
    }

    DaOutcome { matching, proposals }
}

// ---------------------------------------------------------------------------
// Swap refinement
// ---------------------------------------------------------------------------

/// Utilities of clusters and satellites under a given matching. Peer effects
/// are allowed: the utility may depend on the whole matching.
pub trait UtilityModel {
    fn cluster_utility(&self, m: &Matching, k: ClusterId) -> f64;
    fn satellite_utility(&self, m: &Matching, s: SatId) -> f64;
}

/// Peer-effect-free utilities from a `table[k][s]` of per-pair values; a
/// satellite's utility is the sum over its matched clusters.
#[derive(Debug, Clone)]
pub struct TableUtilities {
    pub table: Vec<Vec<f64>>,
}

impl UtilityModel for TableUtilities {
    fn cluster_utility(&self, m: &Matching, k: ClusterId) -> f64 {
        m.mu_cluster[k].map_or(0.0, |s| self.table[k][s])
    }

    fn satellite_utility(&self, m: &Matching, s: SatId) -> f64 {
        m.mu_sat[s].iter().map(|&k| self.table[k][s]).sum()
    }
}

/// Finds a swap-blocking pair: two clusters matched to distinct satellites
/// whose exchange leaves every involved party (both clusters and both
/// satellites) at least as well off and at least one strictly better.
/// Returns `None` iff the matching is two-sided exchange-stable. The scan is
/// lexicographic over `(k, k')` so refinement is deterministic.
pub fn find_swap_blocking_pair(
    m: &Matching,
    model: &dyn UtilityModel,
) -> Option<(ClusterId, ClusterId)> {
    let n = m.num_clusters();
    for i in 0..n {
        let Some(si) = m.mu_cluster[i] else { continue };
        for j in (i + 1)..n {
            let Some(sj) = m.mu_cluster[j] else { continue };
            if si == sj {
                continue;
            }
            let swapped = m.swapped(i, j);
            let old = [
                model.cluster_utility(m, i),
                model.cluster_utility(m, j),
                model.satellite_utility(m, si),
                model.satellite_utility(m, sj),
            ];
            let new = [
                model.cluster_utility(&swapped, i),
                model.cluster_utility(&swapped, j),
                model.satellite_utility(&swapped, si),
                model.satellite_utility(&swapped, sj),
            ];
            let none_worse = new.iter().zip(&old).all(|(n, o)| n >= o);
            let some_better = new.iter().zip(&old).any(|(n, o)| n > o);
            if none_worse && some_better {
                return Some((i, j));
            }
        }
    }
    None
}

/// Result of swap refinement.
#[derive(Debug, Clone)]
pub struct SwapOutcome {
    pub matching: Matching,
    pub swaps_applied: usize,
}

/// Applies swap-blocking pairs until none remain. Each applied swap strictly
/// raises at least one involved party's utility with none decreasing, so the
/// total satellite utility is strictly increasing and the loop terminates on
/// finite instances; the cap turns a non-terminating utility model into a
/// diagnostic error instead of a hang.
pub fn swap_refinement(
    mu0: Matching,
    model: &dyn UtilityModel,
    iteration_cap: usize,
) -> Result<SwapOutcome> {
    let mut m = mu0;
    let mut swaps = 0usize;
    while let Some((i, j)) = find_swap_blocking_pair(&m, model) {
        m = m.swapped(i, j);
        swaps += 1;
        if swaps > iteration_cap {
            return Err(Error::Matching(format!(
                "swap refinement exceeded {iteration_cap} iterations; \
                 utility model is likely nondeterministic"
            )));
        }
    }
    Ok(SwapOutcome { matching: m, swaps_applied: swaps })
}

/// Default iteration cap for swap refinement.
pub fn default_swap_cap(num_clusters: usize, num_sats: usize) -> usize {
    (num_clusters * num_clusters * num_sats).max(16)
}

// ---------------------------------------------------------------------------
// Association
// ---------------------------------------------------------------------------

/// Expands a cluster matching into per-RUE associations under the beam
/// budget. Satellites hand out beams to their matched clusters in ascending
/// cluster-id order; when a cluster's membership exceeds the remaining
/// beams, the members with the highest squared channel gain win (ties by
/// lowest RUE id).
pub fn to_association<F>(
    m: &Matching,
    clusters: &[Cluster],
    n_beam: usize,
    gain2_of: F,
) -> AssociationVector
where
    F: Fn(SatId, RueId) -> Option<f64>,
{
    let mut assoc = AssociationVector::default();
    for (s, ks) in m.mu_sat.iter().enumerate() {
        let mut beams_left = n_beam;
        for &k in ks {
            if beams_left == 0 {
                break;
            }
            let cluster = &clusters[k];
            let mut members: Vec<(RueId, f64)> = cluster
                .members
                .iter()
                .map(|&u| (u, gain2_of(s, u).unwrap_or(0.0)))
                .filter(|(_, g)| *g > 0.0)
                .collect();
            members.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (u, _) in members.into_iter().take(beams_left) {
                assoc.by_rue.insert(u, s);
                beams_left -= 1;
            }
        }
    }
    assoc
}
