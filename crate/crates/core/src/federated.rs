//! Client/server orchestration: local training rounds on satellite agents,
//! parameter upload, weighted averaging, and broadcast.
//!
//! The server owns the global parameter vector. A round is: local training
//! for a fixed number of episodes (agents act on their own staggered
//! decision sub-slots inside the shared environment), upload, aggregate,
//! broadcast. With a single participating agent the whole construction is
//! an exact no-op wrapper around plain local training.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::gail::EpisodeRow;
use crate::nn::weighted_average;

/// Aggregation weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `1/K` per agent.
    Equal,
    /// Proportional to each agent's local batch size `M_k`.
    BatchProportional,
}

impl WeightMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(WeightMode::Equal),
            "batch" => Ok(WeightMode::BatchProportional),
            other => Err(Error::Config(format!("unknown weight mode '{other}'"))),
        }
    }
}

/// Federation schedule and stopping rule.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    /// Episodes per local round (the aggregation interval N).
    pub interval_episodes: usize,
    pub weight_mode: WeightMode,
    /// Early-stop when successive global vectors stay closer than this...
    pub convergence_tol: f64,
    /// ...for this many consecutive rounds.
    pub convergence_window: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            interval_episodes: 10,
            weight_mode: WeightMode::Equal,
            convergence_tol: 1e-4,
            convergence_window: 3,
        }
    }
}

/// Audit record of one aggregation round.
#[derive(Debug, Clone)]
pub struct FederationRoundLog {
    pub round: usize,
    /// Parameter digests at upload, one per agent.
    pub pre_hash: Vec<u64>,
    /// Parameter digests after the broadcast; all identical by contract.
    pub post_hash: Vec<u64>,
    pub weights: Vec<f64>,
    pub duration_s: f64,
}

/// What the federation loop needs from a trainer: parameter transfer per
/// agent plus the ability to run local episodes.
pub trait FederatedPool {
    fn num_agents(&self) -> usize;
    /// Current parameter payload of one agent.
    fn params(&self, agent: usize) -> Vec<f64>;
    /// Installs a broadcast payload on one agent.
    fn set_params(&mut self, agent: usize, params: &[f64]) -> Result<()>;
    /// Local batch size M_k accumulated since the previous upload.
    fn take_sample_count(&mut self, agent: usize) -> usize;
    /// Runs `episodes` local episodes for every agent in the shared world.
    fn run_local(&mut self, episodes: usize) -> Result<Vec<EpisodeRow>>;
}

/// Outcome of a federation run.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub rows: Vec<EpisodeRow>,
    pub logs: Vec<FederationRoundLog>,
    pub global: Vec<f64>,
    /// True when the convergence window closed before `total_rounds`.
    pub converged_early: bool,
}

fn params_hash(p: &[f64]) -> u64 {
    let mut bytes = Vec::with_capacity(p.len() * 8);
    for v in p {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    crate::seeds::fnv1a(&bytes)
}

/// Computes the aggregation weight vector.
pub fn aggregation_weights(mode: WeightMode, sample_counts: &[usize]) -> Vec<f64> {
    match mode {
        WeightMode::Equal => {
            let k = sample_counts.len() as f64;
            vec![1.0 / k; sample_counts.len()]
        }
        WeightMode::BatchProportional => {
            let total: usize = sample_counts.iter().sum();
            if total == 0 {
                let k = sample_counts.len() as f64;
                vec![1.0 / k; sample_counts.len()]
            } else {
                sample_counts.iter().map(|&m| m as f64 / total as f64).collect()
            }
        }
    }
}

/// Aggregates uploaded payloads into the next global vector.
pub fn aggregate(uploads: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let views: Vec<&[f64]> = uploads.iter().map(|u| u.as_slice()).collect();
    weighted_average(&views, weights).map_err(|e| match e {
        Error::Dimension(msg) => Error::Dimension(format!("agent payload mismatch: {msg}")),
        other => other,
    })
}

/// Runs the full loop: initial broadcast, then `total_rounds` rounds of
/// local training, upload, aggregation, and broadcast. Stops early once the
/// global vector moves less than the tolerance for the configured window.
pub fn run_federation<P: FederatedPool>(
    pool: &mut P,
    cfg: &FederationConfig,
    total_rounds: usize,
) -> Result<FederationOutcome> {
    if pool.num_agents() == 0 {
        return Err(Error::Config("federation needs at least one agent".into()));
    }
    if cfg.interval_episodes == 0 {
        return Err(Error::Config("aggregation interval must be >= 1 episode".into()));
    }

    // the server's first global model is agent 0's initialization
    let mut global = pool.params(0);
    for agent in 0..pool.num_agents() {
        pool.set_params(agent, &global)?;
    }

    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut quiet_rounds = 0usize;
    let mut converged_early = false;

    for round in 0..total_rounds {
        let started = Instant::now();
        rows.extend(pool.run_local(cfg.interval_episodes)?);

        let uploads: Vec<Vec<f64>> =
            (0..pool.num_agents()).map(|a| pool.params(a)).collect();
        let pre_hash: Vec<u64> = uploads.iter().map(|u| params_hash(u)).collect();
        let counts: Vec<usize> =
            (0..pool.num_agents()).map(|a| pool.take_sample_count(a)).collect();
        let weights = aggregation_weights(cfg.weight_mode, &counts);
        let next_global = aggregate(&uploads, &weights)?;

        for agent in 0..pool.num_agents() {
            pool.set_params(agent, &next_global)?;
        }
        let post_hash: Vec<u64> =
            (0..pool.num_agents()).map(|a| params_hash(&pool.params(a))).collect();
        debug_assert!(post_hash.windows(2).all(|w| w[0] == w[1]));

        let dist = global
            .iter()
            .zip(&next_global)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        global = next_global;
        logs.push(FederationRoundLog {
            round,
            pre_hash,
            post_hash,
            weights,
            duration_s: started.elapsed().as_secs_f64(),
        });

        if dist < cfg.convergence_tol {
            quiet_rounds += 1;
            if quiet_rounds >= cfg.convergence_window {
                converged_early = true;
                break;
            }
        } else {
            quiet_rounds = 0;
        }
    }

    Ok(FederationOutcome { rows, logs, global, converged_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::env::Scenario;
    use crate::gail::{ExpertMemory, GailConfig, GailTrainer};
    use crate::harness::GailFedPool;

    #[test]
    fn equal_weights_and_batch_weights() {
        let w = aggregation_weights(WeightMode::Equal, &[10, 20]);
        assert_eq!(w, vec![0.5, 0.5]);
        let w = aggregation_weights(WeightMode::BatchProportional, &[1, 3]);
        assert_eq!(w, vec![0.25, 0.75]);
        // zero batches fall back to equal weighting
        let w = aggregation_weights(WeightMode::BatchProportional, &[0, 0]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn aggregate_reference_cases() {
        // singleton
        let g = aggregate(&[vec![1.0, -2.0]], &[1.0]).unwrap();
        assert_eq!(g, vec![1.0, -2.0]);
        // symmetric cancellation
        let g = aggregate(&[vec![3.0, -1.0], vec![-3.0, 1.0]], &[0.5, 0.5]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        // batch-proportional hand arithmetic: weights 1/4 and 3/4 on 0 and 4
        let w = aggregation_weights(WeightMode::BatchProportional, &[1, 3]);
        let g = aggregate(&[vec![0.0], vec![4.0]], &w).unwrap();
        assert_eq!(g, vec![3.0]);
    }

    #[test]
    fn aggregate_is_linear_and_permutation_invariant() {
        let mut rng = crate::seeds::rng(31, "fed-lin", 0);
        use rand::Rng;
        for _ in 0..20 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = rng.gen_range(0.5..3.0);
            let g1 = aggregate(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap();
            let scaled: Vec<Vec<f64>> = vec![
                a.iter().map(|v| v * scale).collect(),
                b.iter().map(|v| v * scale).collect(),
            ];
            let g2 = aggregate(&scaled, &[0.5, 0.5]).unwrap();
            for (x, y) in g1.iter().zip(&g2) {
                assert!((x * scale - y).abs() < 1e-12);
            }
            let g3 = aggregate(&[b.clone(), a.clone()], &[0.5, 0.5]).unwrap();
            for (x, y) in g1.iter().zip(&g3) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mismatched_payloads_name_the_problem() {
        let err = aggregate(&[vec![1.0, 2.0], vec![1.0]], &[0.5, 0.5]).unwrap_err();
        assert!(err.to_string().contains("agent payload"));
    }

    fn micro_scenario(sat_count: usize) -> Scenario {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.counts = sat_count;
        cfg.scenario.rue_count = 4;
        cfg.scenario.num_clusters = 2;
        cfg.episode.slots = 4;
        Scenario::from_experiment(&cfg).unwrap()
    }

    fn micro_expert(sc: &Scenario) -> ExpertMemory {
        let woa = crate::woa::WoaConfig { population: 4, iterations: 2, ..Default::default() };
        let demos = crate::woa::generate_demonstrations(sc, 16, &woa, 7, 0).unwrap();
        ExpertMemory::from_demos(&demos)
    }

    #[test]
    fn one_round_logs_one_entry_with_equal_post_hashes() {
        let sc = micro_scenario(2);
        let xe = micro_expert(&sc);
        let gcfg = GailConfig { hidden: vec![8], demo_batch_size: 8, ..Default::default() };
        let mut trainer = GailTrainer::new(sc, gcfg, 3).unwrap();
        let mut pool = GailFedPool { trainer: &mut trainer, xe: &xe, include_disc: true };
        let fed = FederationConfig { interval_episodes: 1, ..Default::default() };
        let out = run_federation(&mut pool, &fed, 1).unwrap();
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.logs[0].pre_hash.len(), 2);
        assert!(out.logs[0].post_hash.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(out.rows.len(), 1);
    }

    #[test]
    fn post_broadcast_hashes_identical_every_round() {
        let sc = micro_scenario(3);
        let xe = micro_expert(&sc);
        let gcfg = GailConfig { hidden: vec![8], demo_batch_size: 8, ..Default::default() };
        let mut trainer = GailTrainer::new(sc, gcfg, 5).unwrap();
        let mut pool = GailFedPool { trainer: &mut trainer, xe: &xe, include_disc: true };
        let fed = FederationConfig { interval_episodes: 1, convergence_tol: 0.0, ..Default::default() };
        let out = run_federation(&mut pool, &fed, 3).unwrap();
        for log in &out.logs {
            assert!(log.post_hash.windows(2).all(|w| w[0] == w[1]));
            let sum: f64 = log.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_agent_federation_is_plain_training() {
        let sc = micro_scenario(1);
        let xe = micro_expert(&sc);
        let gcfg = GailConfig { hidden: vec![8], demo_batch_size: 8, ..Default::default() };

        let mut plain = GailTrainer::new(sc.clone(), gcfg.clone(), 13).unwrap();
        let plain_rows = plain.run_episodes(&xe, 4).unwrap();

        let mut fed_trainer = GailTrainer::new(sc, gcfg, 13).unwrap();
        let mut pool = GailFedPool { trainer: &mut fed_trainer, xe: &xe, include_disc: true };
        let fed = FederationConfig {
            interval_episodes: 2,
            convergence_tol: 0.0,
            ..Default::default()
        };
        let out = run_federation(&mut pool, &fed, 2).unwrap();

        assert_eq!(plain_rows.len(), out.rows.len());
        for (a, b) in plain_rows.iter().zip(&out.rows) {
            assert_eq!(a.mean_reward, b.mean_reward, "curves must be bit-identical");
            assert_eq!(a.mean_se, b.mean_se);
            assert_eq!(a.disc_loss, b.disc_loss);
            assert_eq!(a.entropy, b.entropy);
        }
        assert_eq!(
            plain.agents[0].policy.net().params(),
            fed_trainer.agents[0].policy.net().params()
        );
        assert_eq!(
            plain.agents[0].disc.net().params(),
            fed_trainer.agents[0].disc.net().params()
        );
    }

    #[test]
    fn gradient_step_count_matches_episode_count() {
        // one update block per episode by default
        let sc = micro_scenario(2);
        let xe = micro_expert(&sc);
        let gcfg = GailConfig { hidden: vec![8], demo_batch_size: 8, ..Default::default() };
        let mut trainer = GailTrainer::new(sc, gcfg, 3).unwrap();
        trainer.run_episodes(&xe, 5).unwrap();
        for agent in &trainer.agents {
            assert_eq!(agent.updates, 5);
        }
    }
}
