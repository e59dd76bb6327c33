//! Whale-optimization expert: per-slot joint power/spectrum allocation and
//! demonstration-set generation.
//!
//! The optimizer runs the canonical whale dynamics over the flattened
//! `[0,1]` action box of all agents: the exploitation coefficient shrinks
//! linearly from 2 to 0, each whale flips a fair coin between the
//! encircling/search move and the logarithmic spiral, and positions are
//! repaired into the box after every move. Fitness is the total spectrum
//! efficiency minus weighted constraint-violation magnitudes, evaluated on
//! a frozen world snapshot, so per-slot solves are independent and can run
//! concurrently.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{AgentAction, Scenario, World};
use crate::error::{Error, Result};

/// Expert-optimizer settings.
#[derive(Debug, Clone, Copy)]
pub struct WoaConfig {
    pub population: usize,
    pub iterations: usize,
    /// Spiral shape constant.
    pub spiral_b: f64,
    /// Weight of constraint-violation magnitudes in the fitness.
    pub penalty_lambda: f64,
}

impl Default for WoaConfig {
    fn default() -> Self {
        WoaConfig { population: 20, iterations: 40, spiral_b: 1.0, penalty_lambda: 10.0 }
    }
}

impl From<&crate::config::WoaBlock> for WoaConfig {
    fn from(b: &crate::config::WoaBlock) -> Self {
        WoaConfig {
            population: b.population,
            iterations: b.iterations,
            spiral_b: b.spiral_b,
            penalty_lambda: b.penalty_lambda,
        }
    }
}

/// Best solution found for one slot.
#[derive(Debug, Clone)]
pub struct WoaSolution {
    /// Effective (masked, normalized) per-agent actions.
    pub actions: Vec<AgentAction>,
    pub fitness: f64,
}

/// Maximizes `fitness` over the unit box `[0,1]^dim` with the canonical
/// whale dynamics. Returns the best position, its fitness, and the
/// best-so-far fitness after each iteration (nondecreasing by
/// construction). `budget = 0` evaluates only the random initial
/// population.
pub fn maximize_box<F>(
    dim: usize,
    fitness: F,
    cfg: &WoaConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> f64,
{
    if cfg.population < 2 {
        return Err(Error::Config("WOA population must be >= 2".into()));
    }
    if dim == 0 {
        return Err(Error::Dimension("WOA search space is empty".into()));
    }
    let mut rng: ChaCha8Rng = crate::seeds::rng(seed, "woa", 0);
    let mut positions: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.0..=1.0)).collect())
        .collect();
    let mut scores: Vec<f64> = positions.iter().map(|p| fitness(p)).collect();

    let (mut best, mut best_score) = {
        let mut idx = 0;
        for i in 1..cfg.population {
            if scores[i] > scores[idx] {
                idx = i;
            }
        }
        (positions[idx].clone(), scores[idx])
    };
    if !best_score.is_finite() {
        return Err(Error::NonFinite("WOA fitness is non-finite at init".into()));
    }

    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let a = 2.0 - 2.0 * iter as f64 / cfg.iterations.max(1) as f64;
        for i in 0..cfg.population {
            let r1: f64 = rng.gen();
            let r2: f64 = rng.gen();
            let coeff_a = 2.0 * a * r1 - a;
            let coeff_c = 2.0 * r2;
            let p: f64 = rng.gen();
            let current = positions[i].clone();
            let new_pos: Vec<f64> = if p < 0.5 {
                let anchor: Vec<f64> = if coeff_a.abs() < 1.0 {
                    best.clone()
                } else {
                    // exploration: follow a random whale
                    positions[rng.gen_range(0..cfg.population)].clone()
                };
                anchor
                    .iter()
                    .zip(&current)
                    .map(|(&x_a, &x)| {
                        let d = (coeff_c * x_a - x).abs();
                        x_a - coeff_a * d
                    })
                    .collect()
            } else {
                // bubble-net spiral around the best
                let l: f64 = rng.gen_range(-1.0..=1.0);
                let swirl = (cfg.spiral_b * l).exp() * (2.0 * std::f64::consts::PI * l).cos();
                best.iter()
                    .zip(&current)
                    .map(|(&x_b, &x)| (x_b - x).abs() * swirl + x_b)
                    .collect()
            };
            positions[i] = new_pos.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            scores[i] = fitness(&positions[i]);
            if scores[i] > best_score {
                best_score = scores[i];
                best = positions[i].clone();
            }
        }
        history.push(best_score);
    }
    Ok((best, best_score, history))
}

/// Decodes a flat box position into effective per-agent actions.
fn decode(world: &World, x: &[f64]) -> Result<Vec<AgentAction>> {
    let n_beam = world.scenario.radio.n_beam;
    let per_agent = 2 * n_beam;
    let mut actions = Vec::with_capacity(world.num_agents());
    for agent in 0..world.num_agents() {
        let slice = &x[agent * per_agent..(agent + 1) * per_agent];
        let raw = AgentAction::from_flat(slice)?;
        actions.push(world.effective_action(agent, &raw)?);
    }
    Ok(actions)
}

/// Fitness of a candidate joint allocation on the current world snapshot.
pub fn slot_fitness(world: &World, actions: &[AgentAction], penalty_lambda: f64) -> f64 {
    let out = world.evaluate_joint(actions);
    let (c1, c2, c8) = out.violation_sums();
    out.se_total - penalty_lambda * (c1 + c2 + c8)
}

/// Solves one slot's joint allocation. Deterministic given `seed`.
pub fn solve_slot(world: &World, cfg: &WoaConfig, seed: u64) -> Result<WoaSolution> {
    let dim = world.num_agents() * 2 * world.scenario.radio.n_beam;
    let fitness = |x: &[f64]| -> f64 {
        match decode(world, x) {
            Ok(actions) => slot_fitness(world, &actions, cfg.penalty_lambda),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let (best_x, best_f, _) = maximize_box(dim, fitness, cfg, seed)?;
    Ok(WoaSolution { actions: decode(world, &best_x)?, fitness: best_f })
}

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

/// One expert state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

/// Expert demonstration set with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub state_dim: usize,
    pub action_dim: usize,
    pub scenario_hash: u64,
    pub seed: u64,
    pub woa_population: u32,
    pub woa_iterations: u32,
    pub woa_lambda: f64,
    pub records: Vec<DemoRecord>,
}

/// Rolls out the expert policy and records `(state, action)` pairs for every
/// agent sub-slot until at least `min_records` pairs exist (whole episodes
/// only). The expert re-solves each slot from scratch.
pub fn generate_demonstrations(
    scenario: &Scenario,
    min_records: usize,
    cfg: &WoaConfig,
    seed: u64,
    scenario_hash: u64,
) -> Result<DemoSet> {
    let mut records = Vec::with_capacity(min_records);
    let mut episode = 0u64;
    while records.len() < min_records {
        let mut world = World::reset(scenario, crate::seeds::derive(seed, "demo-episode", episode))?;
        for slot in 0..scenario.episode.slots {
            let slot_seed = crate::seeds::derive(seed, "demo-woa", episode * 1_000_000 + slot as u64);
            let solution = solve_slot(&world, cfg, slot_seed)?;
            for agent in 0..world.num_agents() {
                let state = world.observe(agent);
                let action = &solution.actions[agent];
                records.push(DemoRecord {
                    state: state.features.clone(),
                    action: action.flatten(),
                });
                world.submit_action(agent, action.clone())?;
            }
            world.finish_slot()?;
        }
        episode += 1;
    }
    Ok(DemoSet {
        state_dim: scenario.state_dim(),
        action_dim: scenario.action_dim(),
        scenario_hash,
        seed,
        woa_population: cfg.population as u32,
        woa_iterations: cfg.iterations as u32,
        woa_lambda: cfg.penalty_lambda,
        records,
    })
}

const DEMO_MAGIC: &[u8; 8] = b"NTNDEMO1";

/// Writes a demonstration set: header (dims, counts, scenario hash, seed,
/// optimizer settings) followed by flat little-endian records.
pub fn save_demos(path: &Path, demos: &DemoSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(DEMO_MAGIC).map_err(io_err)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(demos.state_dim as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(demos.action_dim as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(demos.records.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&demos.scenario_hash.to_le_bytes()).map_err(io_err)?;
    w.write_all(&demos.seed.to_le_bytes()).map_err(io_err)?;
    w.write_all(&demos.woa_population.to_le_bytes()).map_err(io_err)?;
    w.write_all(&demos.woa_iterations.to_le_bytes()).map_err(io_err)?;
    w.write_all(&demos.woa_lambda.to_le_bytes()).map_err(io_err)?;
    for r in &demos.records {
        debug_assert_eq!(r.state.len(), demos.state_dim);
        debug_assert_eq!(r.action.len(), demos.action_dim);
        for v in r.state.iter().chain(r.action.iter()) {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a demonstration set written by [`save_demos`].
pub fn load_demos(path: &Path) -> Result<DemoSet> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let bad = |reason: String| Error::Format { path: path.display().to_string(), reason };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != DEMO_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(io_err)?;
    if version != 1 {
        return Err(bad(format!("unsupported version {version}")));
    }
    let state_dim = read_u32(&mut r).map_err(io_err)? as usize;
    let action_dim = read_u32(&mut r).map_err(io_err)? as usize;
    let count = read_u64(&mut r).map_err(io_err)? as usize;
    let scenario_hash = read_u64(&mut r).map_err(io_err)?;
    let seed = read_u64(&mut r).map_err(io_err)?;
    let woa_population = read_u32(&mut r).map_err(io_err)?;
    let woa_iterations = read_u32(&mut r).map_err(io_err)?;
    let woa_lambda = read_f64(&mut r).map_err(io_err)?;
    if state_dim == 0 || action_dim == 0 {
        return Err(bad("zero record dimensions".into()));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut state = Vec::with_capacity(state_dim);
        for _ in 0..state_dim {
            state.push(read_f64(&mut r).map_err(io_err)?);
        }
        let mut action = Vec::with_capacity(action_dim);
        for _ in 0..action_dim {
            action.push(read_f64(&mut r).map_err(io_err)?);
        }
        records.push(DemoRecord { state, action });
    }
    Ok(DemoSet {
        state_dim,
        action_dim,
        scenario_hash,
        seed,
        woa_population,
        woa_iterations,
        woa_lambda,
        records,
    })
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::env::Scenario;

    #[test]
    fn toy_quadratic_converges_to_box_interior_optimum() {
        let target = [0.3, 0.7];
        let fitness =
            |x: &[f64]| -((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2));
        let cfg = WoaConfig { population: 20, iterations: 200, ..WoaConfig::default() };
        let (best, _, _) = maximize_box(2, fitness, &cfg, 42).unwrap();
        let dist =
            ((best[0] - target[0]).powi(2) + (best[1] - target[1]).powi(2)).sqrt();
        assert!(dist < 1e-2, "converged to {best:?}, distance {dist}");
    }

    #[test]
    fn best_fitness_history_is_nondecreasing() {
        let fitness = |x: &[f64]| -(x.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>());
        let cfg = WoaConfig { population: 10, iterations: 60, ..WoaConfig::default() };
        let (_, _, history) = maximize_box(4, fitness, &cfg, 3).unwrap();
        for w in history.windows(2) {
            assert!(w[1] >= w[0], "best-ever fitness regressed");
        }
    }

    #[test]
    fn tiny_population_and_budget_returns_better_candidate() {
        let fitness = |x: &[f64]| x[0];
        let cfg = WoaConfig { population: 2, iterations: 0, ..WoaConfig::default() };
        let (best, score, history) = maximize_box(1, fitness, &cfg, 5).unwrap();
        assert!(history.is_empty());
        // must equal the better of the two evaluated candidates
        let mut rng = crate::seeds::rng(5, "woa", 0);
        let c0: f64 = rng.gen_range(0.0..=1.0);
        let c1: f64 = rng.gen_range(0.0..=1.0);
        assert_eq!(score, c0.max(c1));
        assert_eq!(best[0], c0.max(c1));
    }

    #[test]
    fn gap_to_optimum_shrinks_with_budget() {
        // separable concave toy; median gap over seeds must fall as the
        // budget grows
        let target = [0.25, 0.5, 0.75];
        let fitness = |x: &[f64]| {
            -(x.iter().zip(&target).map(|(v, t)| (v - t).powi(2)).sum::<f64>())
        };
        let mut medians = Vec::new();
        for iters in [10usize, 50, 200] {
            let mut gaps: Vec<f64> = (0..20)
                .map(|seed| {
                    let cfg =
                        WoaConfig { population: 12, iterations: iters, ..WoaConfig::default() };
                    let (_, score, _) = maximize_box(3, &fitness, &cfg, seed).unwrap();
                    -score
                })
                .collect();
            gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(gaps[gaps.len() / 2]);
        }
        assert!(
            medians[0] >= medians[1] && medians[1] >= medians[2],
            "median gaps {medians:?} not shrinking"
        );
    }

    #[test]
    fn population_of_one_is_rejected() {
        let cfg = WoaConfig { population: 1, ..WoaConfig::default() };
        assert!(maximize_box(2, |_| 0.0, &cfg, 1).is_err());
    }

    fn single_link_scenario() -> Scenario {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.counts = 1;
        cfg.scenario.rue_count = 1;
        cfg.scenario.num_clusters = 1;
        cfg.episode.slots = 2;
        Scenario::from_experiment(&cfg).unwrap()
    }

    #[test]
    fn single_link_matches_grid_search_at_full_power() {
        let sc = single_link_scenario();
        let world = World::reset(&sc, 4).unwrap();
        assert_eq!(world.beam_rues(0).len(), 1);
        let cfg = WoaConfig { population: 20, iterations: 120, ..WoaConfig::default() };
        let sol = solve_slot(&world, &cfg, 17).unwrap();
        // exhaustive 41x41 grid over the 2-D (power, spectrum) action
        let mut grid_best_fitness = f64::NEG_INFINITY;
        let mut grid_best_se = f64::NEG_INFINITY;
        let mut grid_power = 0.0;
        for i in 0..=40 {
            for j in 0..=40 {
                let p = i as f64 / 40.0;
                let s = j as f64 / 40.0;
                let mut act = AgentAction::zeros(sc.radio.n_beam);
                act.power_frac[0] = p;
                act.spectrum_frac[0] = s;
                let f = slot_fitness(&world, std::slice::from_ref(&act), cfg.penalty_lambda);
                if f > grid_best_fitness {
                    grid_best_fitness = f;
                    grid_best_se = world.evaluate_joint(std::slice::from_ref(&act)).se_total;
                    grid_power = p;
                }
            }
        }
        // alone on the satellite, the grid optimum takes the full power
        // budget; the per-satellite efficiency is rate over consumed
        // bandwidth, so the spectrum fraction is fitness-neutral here
        assert!(grid_power > 0.95, "grid power {grid_power}");
        assert!(sol.actions[0].power_frac[0] > 0.9, "woa power {}", sol.actions[0].power_frac[0]);
        let woa_se = world.evaluate_joint(&sol.actions).se_total;
        assert!(
            woa_se >= 0.99 * grid_best_se,
            "woa SE {woa_se} more than 1% below grid SE {grid_best_se}"
        );
        assert!(sol.fitness >= grid_best_fitness - (grid_best_fitness.abs() * 0.01 + 1e-300));
    }

    #[test]
    fn emitted_actions_respect_budgets() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.rue_count = 8;
        cfg.scenario.num_clusters = 3;
        cfg.episode.slots = 1;
        let sc = Scenario::from_experiment(&cfg).unwrap();
        let world = World::reset(&sc, 6).unwrap();
        let sol = solve_slot(&world, &WoaConfig::default(), 9).unwrap();
        for a in &sol.actions {
            assert!(a.power_frac.iter().sum::<f64>() <= 1.0 + 1e-12);
            assert!(a.spectrum_frac.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn demo_counting_and_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.counts = 1;
        cfg.scenario.rue_count = 2;
        cfg.scenario.num_clusters = 1;
        cfg.episode.slots = 2;
        let sc = Scenario::from_experiment(&cfg).unwrap();
        let woa = WoaConfig { population: 4, iterations: 3, ..WoaConfig::default() };
        // one agent, two slots per episode -> 2 records per episode
        let demos = generate_demonstrations(&sc, 2, &woa, 99, 0xabcd).unwrap();
        assert_eq!(demos.records.len(), 2);
        assert_eq!(demos.state_dim, sc.state_dim());
        assert_eq!(demos.action_dim, sc.action_dim());

        let dir = std::env::temp_dir().join("ntnlab-demo-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("demos.bin");
        save_demos(&path, &demos).unwrap();
        let loaded = load_demos(&path).unwrap();
        assert_eq!(demos, loaded);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn demo_generation_is_reproducible() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.counts = 1;
        cfg.scenario.rue_count = 2;
        cfg.scenario.num_clusters = 1;
        cfg.episode.slots = 2;
        let sc = Scenario::from_experiment(&cfg).unwrap();
        let woa = WoaConfig { population: 4, iterations: 3, ..WoaConfig::default() };
        let a = generate_demonstrations(&sc, 4, &woa, 123, 1).unwrap();
        let b = generate_demonstrations(&sc, 4, &woa, 123, 1).unwrap();
        assert_eq!(a, b);
    }
}
