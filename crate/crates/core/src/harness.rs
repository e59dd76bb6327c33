//! Experiment runner: method evaluation, sweep experiments over bandwidth /
//! power / altitude grids, paired convergence runs, association snapshots,
//! allocation traces, and deterministic CSV export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::{fairness_policy, PpoConfig, PpoTrainer};
use crate::config::ExperimentConfig;
use crate::env::{handcrafted_reward, AgentAction, PenaltyWeights, Scenario, World};
use crate::error::{Error, Result};
use crate::federated::{
    run_federation, FederatedPool, FederationConfig, FederationOutcome, FederationRoundLog,
    WeightMode,
};
use crate::gail::{EpisodeRow, ExpertMemory, GailConfig, GailTrainer, PolicyNet};
use crate::woa::{self, WoaConfig};

/// Allocation method under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gail,
    Ppo,
    Expert,
    Fairness,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "gail" => Ok(Method::Gail),
            "ppo" => Ok(Method::Ppo),
            "expert" => Ok(Method::Expert),
            "fairness" => Ok(Method::Fairness),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Gail => "gail",
            Method::Ppo => "ppo",
            Method::Expert => "expert",
            Method::Fairness => "fairness",
        }
    }
}

// ---------------------------------------------------------------------------
// Federated pools
// ---------------------------------------------------------------------------

/// Federation adapter for the imitation trainer.
pub struct GailFedPool<'a> {
    pub trainer: &'a mut GailTrainer,
    pub xe: &'a ExpertMemory,
    pub include_disc: bool,
}

impl FederatedPool for GailFedPool<'_> {
    fn num_agents(&self) -> usize {
        self.trainer.agents.len()
    }

    fn params(&self, agent: usize) -> Vec<f64> {
        self.trainer.agents[agent].upload_params(self.include_disc)
    }

    fn set_params(&mut self, agent: usize, params: &[f64]) -> Result<()> {
        self.trainer.agents[agent].download_params(self.include_disc, params)
    }

    fn take_sample_count(&mut self, agent: usize) -> usize {
        self.trainer.agents[agent].take_sample_count()
    }

    fn run_local(&mut self, episodes: usize) -> Result<Vec<EpisodeRow>> {
        self.trainer.run_episodes(self.xe, episodes)
    }
}

/// Federation adapter for the RL baseline.
pub struct PpoFedPool<'a> {
    pub trainer: &'a mut PpoTrainer,
    pub include_value: bool,
}

impl FederatedPool for PpoFedPool<'_> {
    fn num_agents(&self) -> usize {
        self.trainer.agents.len()
    }

    fn params(&self, agent: usize) -> Vec<f64> {
        self.trainer.agents[agent].upload_params(self.include_value)
    }

    fn set_params(&mut self, agent: usize, params: &[f64]) -> Result<()> {
        self.trainer.agents[agent].download_params(self.include_value, params)
    }

    fn take_sample_count(&mut self, agent: usize) -> usize {
        self.trainer.agents[agent].take_sample_count()
    }

    fn run_local(&mut self, episodes: usize) -> Result<Vec<EpisodeRow>> {
        self.trainer.run_episodes(episodes)
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

/// Trained per-agent policies plus training curves and round logs.
pub struct TrainedModel {
    pub method: Method,
    pub policies: Vec<PolicyNet>,
    pub rows: Vec<EpisodeRow>,
    pub round_logs: Vec<FederationRoundLog>,
}

fn federation_config(cfg: &ExperimentConfig, fixed_budget: bool) -> Result<FederationConfig> {
    Ok(FederationConfig {
        interval_episodes: cfg.learning.agg_interval_episodes.max(1),
        weight_mode: WeightMode::parse(&cfg.learning.fed_weights)?,
        // a fixed budget disables early stopping so paired runs and sweep
        // cells always see the same number of episodes
        convergence_tol: if fixed_budget { 0.0 } else { 1e-4 },
        convergence_window: 3,
    })
}

fn rounds_for(episodes: usize, interval: usize) -> usize {
    episodes.div_ceil(interval.max(1))
}

/// Generates an expert demonstration set for this configuration and seed.
pub fn make_expert_memory(cfg: &ExperimentConfig, seed: u64) -> Result<ExpertMemory> {
    let scenario = Scenario::from_experiment(cfg)?;
    let woa_cfg = WoaConfig::from(&cfg.woa);
    let demos = woa::generate_demonstrations(
        &scenario,
        cfg.learning.expert_records,
        &woa_cfg,
        crate::seeds::derive(seed, "demos", 0),
        cfg.scenario_hash(),
    )?;
    Ok(ExpertMemory::from_demos(&demos))
}

/// Trains the federated imitation learner.
pub fn train_gail(cfg: &ExperimentConfig, seed: u64, xe: &ExpertMemory) -> Result<TrainedModel> {
    let scenario = Scenario::from_experiment(cfg)?;
    let gail_cfg = GailConfig::from(&cfg.learning);
    let mut trainer = GailTrainer::new(scenario, gail_cfg, seed)?;
    let fed = federation_config(cfg, true)?;
    let rounds = rounds_for(cfg.learning.episodes, fed.interval_episodes);
    let include_disc = cfg.learning.aggregate_discriminator;
    let outcome: FederationOutcome = {
        let mut pool = GailFedPool { trainer: &mut trainer, xe, include_disc };
        run_federation(&mut pool, &fed, rounds)?
    };
    Ok(TrainedModel {
        method: Method::Gail,
        policies: trainer.agents.iter().map(|a| a.policy.clone()).collect(),
        rows: outcome.rows,
        round_logs: outcome.logs,
    })
}

/// Trains the federated RL baseline.
pub fn train_ppo(cfg: &ExperimentConfig, seed: u64) -> Result<TrainedModel> {
    let scenario = Scenario::from_experiment(cfg)?;
    let ppo_cfg = PpoConfig::from(&cfg.learning);
    let mut trainer = PpoTrainer::new(scenario, ppo_cfg, seed)?;
    let fed = federation_config(cfg, true)?;
    let rounds = rounds_for(cfg.learning.episodes, fed.interval_episodes);
    let outcome: FederationOutcome = {
        let mut pool = PpoFedPool { trainer: &mut trainer, include_value: true };
        run_federation(&mut pool, &fed, rounds)?
    };
    Ok(TrainedModel {
        method: Method::Ppo,
        policies: trainer.agents.iter().map(|a| a.policy.clone()).collect(),
        rows: outcome.rows,
        round_logs: outcome.logs,
    })
}

/// Where eval-time actions come from.
pub enum ActionSource<'a> {
    Fairness,
    Expert(WoaConfig),
    /// One trained policy per agent, executed deterministically (squashed
    /// mean action).
    Policies(&'a [PolicyNet]),
}

/// Aggregate evaluation statistics.
#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    pub mean_se: f64,
    pub mean_reward: f64,
    pub c1_rate: f64,
    pub c2_rate: f64,
    pub c8_rate: f64,
}

/// Online-execution evaluation: fixed policies, deterministic actions,
/// fresh episodes.
pub fn evaluate(
    scenario: &Scenario,
    source: &ActionSource,
    episodes: usize,
    seed: u64,
    penalties: &PenaltyWeights,
) -> Result<EvalStats> {
    let mut se_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut slots = 0usize;
    let mut c1_viol = 0usize;
    let mut c1_total = 0usize;
    let mut c2_viol = 0usize;
    let mut c2_total = 0usize;
    let mut c8_viol = 0usize;
    let mut c8_total = 0usize;

    for ep in 0..episodes {
        let mut world = World::reset(scenario, crate::seeds::derive(seed, "eval-episode", ep as u64))?;
        for slot in 0..scenario.episode.slots {
            let expert_solution = match source {
                ActionSource::Expert(woa_cfg) => Some(woa::solve_slot(
                    &world,
                    woa_cfg,
                    crate::seeds::derive(seed, "eval-woa", (ep * 1_000_000 + slot) as u64),
                )?),
                _ => None,
            };
            for agent in 0..world.num_agents() {
                let action = match source {
                    ActionSource::Fairness => fairness_policy(&world, agent),
                    ActionSource::Expert(_) => {
                        expert_solution.as_ref().expect("solved above").actions[agent].clone()
                    }
                    ActionSource::Policies(policies) => {
                        let obs = world.observe(agent);
                        let fractions = policies[agent].mean_fractions(&obs.features)?;
                        AgentAction::from_flat(&fractions)?
                    }
                };
                world.submit_action(agent, action)?;
            }
            let outcome = world.finish_slot()?;
            se_sum += outcome.se_total;
            reward_sum += handcrafted_reward(&outcome, penalties);
            slots += 1;
            for (_, c) in &outcome.c1 {
                c1_total += 1;
                if !c.satisfied {
                    c1_viol += 1;
                }
            }
            for (_, c) in &outcome.c2 {
                c2_total += 1;
                if !c.satisfied {
                    c2_viol += 1;
                }
            }
            for (_, c) in &outcome.c8 {
                c8_total += 1;
                if !c.satisfied {
                    c8_viol += 1;
                }
            }
        }
    }
    let rate = |v: usize, t: usize| if t > 0 { v as f64 / t as f64 } else { 0.0 };
    Ok(EvalStats {
        mean_se: se_sum / slots.max(1) as f64,
        mean_reward: reward_sum / slots.max(1) as f64,
        c1_rate: rate(c1_viol, c1_total),
        c2_rate: rate(c2_viol, c2_total),
        c8_rate: rate(c8_viol, c8_total),
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// One metrics-table row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub method: Method,
    pub sweep_value: f64,
    pub seed: u64,
    pub stats: EvalStats,
    pub episodes_to_convergence: usize,
}

/// Applies a sweep-axis value to a configuration.
pub fn apply_axis(cfg: &ExperimentConfig, axis: &str, value: f64) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    match axis {
        "bandwidth" => out.radio.b_tot_mhz = value,
        "power" => out.radio.p_max_w = value,
        "altitude" => out.scenario.altitude_km = value,
        other => return Err(Error::Config(format!("unknown sweep axis '{other}'"))),
    }
    out.validate()?;
    Ok(out)
}

/// Episode index at which the smoothed curve first reaches 90% of its
/// terminal value (window-10 moving average). Zero for training-free
/// methods or degenerate curves.
pub fn episodes_to_convergence(rows: &[EpisodeRow]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let smoothed: Vec<f64> = (0..rows.len())
        .map(|i| {
            let lo = i.saturating_sub(9);
            let window = &rows[lo..=i];
            window.iter().map(|r| r.mean_se).sum::<f64>() / window.len() as f64
        })
        .collect();
    let terminal = *smoothed.last().unwrap();
    if terminal <= 0.0 {
        return 0;
    }
    let threshold = 0.9 * terminal;
    smoothed.iter().position(|&v| v >= threshold).unwrap_or(rows.len() - 1)
}

/// Runs one sweep cell: trains when the method needs it, then evaluates
/// with online-execution semantics.
pub fn run_cell(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<MetricsRow> {
    let scenario = Scenario::from_experiment(cfg)?;
    let penalties = PenaltyWeights {
        c1: cfg.learning.penalty_c1,
        c2: cfg.learning.penalty_c2,
        c8: cfg.learning.penalty_c8,
    };
    let eval_eps = cfg.learning.eval_episodes.max(1);
    let (stats, conv) = match method {
        Method::Fairness => {
            (evaluate(&scenario, &ActionSource::Fairness, eval_eps, seed, &penalties)?, 0)
        }
        Method::Expert => {
            let woa_cfg = WoaConfig::from(&cfg.woa);
            (evaluate(&scenario, &ActionSource::Expert(woa_cfg), eval_eps, seed, &penalties)?, 0)
        }
        Method::Gail => {
            let xe = make_expert_memory(cfg, seed)?;
            let model = train_gail(cfg, seed, &xe)?;
            let stats = evaluate(
                &scenario,
                &ActionSource::Policies(&model.policies),
                eval_eps,
                seed,
                &penalties,
            )?;
            (stats, episodes_to_convergence(&model.rows))
        }
        Method::Ppo => {
            let model = train_ppo(cfg, seed)?;
            let stats = evaluate(
                &scenario,
                &ActionSource::Policies(&model.policies),
                eval_eps,
                seed,
                &penalties,
            )?;
            (stats, episodes_to_convergence(&model.rows))
        }
    };
    Ok(MetricsRow { method, sweep_value: f64::NAN, seed, stats, episodes_to_convergence: conv })
}

/// Full sweep: every `(grid value, seed, method)` cell, a metrics table,
/// and per-axis plot data (x, mean, std over seeds). Cell failures are
/// recorded and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<MetricsRow>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let methods: Vec<Method> =
        cfg.sweep.methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut failures: Vec<String> = Vec::new();

    for &value in &cfg.sweep.grid {
        let cell_cfg = apply_axis(cfg, &cfg.sweep.axis, value)?;
        for &seed in &cfg.sweep.seeds {
            for &method in &methods {
                match run_cell(&cell_cfg, method, seed) {
                    Ok(mut row) => {
                        row.sweep_value = value;
                        rows.push(row);
                    }
                    Err(e) => {
                        failures.push(format!("{},{value},{seed},{e}", method.name()));
                    }
                }
            }
        }
    }

    write_metrics(&out_dir.join("metrics.csv"), &rows)?;
    write_plot_data(&out_dir.join(format!("plotdata_{}.csv", cfg.sweep.axis)), &methods, cfg, &rows)?;
    if !failures.is_empty() {
        let mut text = String::from("method,sweep_value,seed,error\n");
        for f in &failures {
            let _ = writeln!(text, "{f}");
        }
        write_text(&out_dir.join("failures.csv"), &text)?;
    }
    Ok(rows)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(
        "method,sweep_value,seed,mean_se,mean_reward,c1_rate,c2_rate,c8_rate,episodes_to_convergence\n",
    );
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{:.12e},{:.12e},{:.6},{:.6},{:.6},{}",
            r.method.name(),
            fmt_value(r.sweep_value),
            r.seed,
            r.stats.mean_se,
            r.stats.mean_reward,
            r.stats.c1_rate,
            r.stats.c2_rate,
            r.stats.c8_rate,
            r.episodes_to_convergence
        );
    }
    write_text(path, &text)
}

fn write_plot_data(
    path: &Path,
    methods: &[Method],
    cfg: &ExperimentConfig,
    rows: &[MetricsRow],
) -> Result<()> {
    let mut text = String::from("method,x,mean,std\n");
    for &method in methods {
        for &value in &cfg.sweep.grid {
            let cell: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.sweep_value == value)
                .map(|r| r.stats.mean_se)
                .collect();
            let (mean, std) = mean_std(&cell);
            let _ = writeln!(
                text,
                "{},{},{:.12e},{:.12e}",
                method.name(),
                fmt_value(value),
                mean,
                std
            );
        }
    }
    write_text(path, &text)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == v.trunc() && v.abs() < 1e12 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Convergence comparison
// ---------------------------------------------------------------------------

/// Result of one paired convergence run.
pub struct ConvergenceReport {
    pub gail_rows: Vec<Vec<EpisodeRow>>,
    pub ppo_rows: Vec<Vec<EpisodeRow>>,
    /// Per-seed terminal evaluation SE, (gail, ppo).
    pub terminal_se: Vec<(f64, f64)>,
    /// Per-seed episodes to 90% of own terminal SE, (gail, ppo).
    pub episodes_to_90: Vec<(usize, usize)>,
}

/// Trains both learners on the same seeds/environments and writes paired
/// curves plus a terminal-gap summary.
pub fn run_convergence(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ConvergenceReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let scenario = Scenario::from_experiment(cfg)?;
    let penalties = PenaltyWeights {
        c1: cfg.learning.penalty_c1,
        c2: cfg.learning.penalty_c2,
        c8: cfg.learning.penalty_c8,
    };
    let mut report = ConvergenceReport {
        gail_rows: Vec::new(),
        ppo_rows: Vec::new(),
        terminal_se: Vec::new(),
        episodes_to_90: Vec::new(),
    };
    let eval_eps = cfg.learning.eval_episodes.max(1);

    for &seed in &cfg.sweep.seeds {
        let xe = make_expert_memory(cfg, seed)?;
        let gail_model = train_gail(cfg, seed, &xe)?;
        let ppo_model = train_ppo(cfg, seed)?;

        let gail_stats = evaluate(
            &scenario,
            &ActionSource::Policies(&gail_model.policies),
            eval_eps,
            seed,
            &penalties,
        )?;
        let ppo_stats = evaluate(
            &scenario,
            &ActionSource::Policies(&ppo_model.policies),
            eval_eps,
            seed,
            &penalties,
        )?;
        report.terminal_se.push((gail_stats.mean_se, ppo_stats.mean_se));
        report
            .episodes_to_90
            .push((episodes_to_convergence(&gail_model.rows), episodes_to_convergence(&ppo_model.rows)));

        write_curves(&out_dir.join(format!("curves_gail_seed{seed}.csv")), &gail_model.rows)?;
        write_curves(&out_dir.join(format!("curves_ppo_seed{seed}.csv")), &ppo_model.rows)?;
        report.gail_rows.push(gail_model.rows);
        report.ppo_rows.push(ppo_model.rows);
    }

    let mut text = String::from("seed,gail_terminal_se,ppo_terminal_se,gap,gail_ep90,ppo_ep90\n");
    for (i, &seed) in cfg.sweep.seeds.iter().enumerate() {
        let (g, p) = report.terminal_se[i];
        let (ge, pe) = report.episodes_to_90[i];
        let _ = writeln!(text, "{seed},{g:.12e},{p:.12e},{:.12e},{ge},{pe}", g - p);
    }
    write_text(&out_dir.join("convergence.csv"), &text)?;
    Ok(report)
}

/// Writes per-episode learning-curve rows.
pub fn write_curves(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut text = String::from("episode,mean_reward,mean_se,loss,entropy\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.episode, r.mean_reward, r.mean_se, r.disc_loss, r.entropy
        );
    }
    write_text(path, text.as_str())
}

// ---------------------------------------------------------------------------
// Snapshots and traces
// ---------------------------------------------------------------------------

/// Writes one structured-text association snapshot per requested slot:
/// satellite positions, cluster membership, association edges, and
/// per-satellite efficiency under equal-split allocations. The association
/// is refreshed every slot so satellite motion shows up as edge changes.
pub fn snapshot_association(
    cfg: &ExperimentConfig,
    slots: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut scenario = Scenario::from_experiment(cfg)?;
    scenario.episode.assoc_refresh_slots = Some(1);
    scenario.episode.slots = slots.max(1);
    let mut world = World::reset(&scenario, seed)?;
    let mut paths = Vec::with_capacity(slots);

    for slot in 0..slots.max(1) {
        let actions: Vec<AgentAction> =
            (0..world.num_agents()).map(|a| fairness_policy(&world, a)).collect();
        let outcome = world.evaluate_joint(&actions);

        let mut text = String::new();
        let _ = writeln!(text, "slot {slot}");
        let _ = writeln!(text, "satellites");
        for s in world.satellites() {
            let _ = writeln!(
                text,
                "  sat {} plane {} x_km {:.6} y_km {:.6}",
                s.sat_id, s.plane_index, s.pos_km.0, s.pos_km.1
            );
        }
        let _ = writeln!(text, "clusters");
        for c in &world.clusters {
            let members: Vec<String> = c.members.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(
                text,
                "  cluster {} centroid_km {:.6},{:.6} members {}",
                c.cluster_id,
                c.centroid_km.0,
                c.centroid_km.1,
                members.join(";")
            );
        }
        let _ = writeln!(text, "associations");
        for (&rue, &sat) in &world.assoc.by_rue {
            let _ = writeln!(text, "  sat {sat} rue {rue}");
        }
        let _ = writeln!(text, "per_sat_se");
        for (sat, se) in &outcome.per_sat_se {
            let _ = writeln!(text, "  sat {sat} se {se:.12e}");
        }

        let path = out_dir.join(format!("snapshot_slot{slot}.txt"));
        write_text(&path, &text)?;
        paths.push(path);

        for agent in 0..world.num_agents() {
            world.submit_action(agent, actions[agent].clone())?;
        }
        world.finish_slot()?;
    }
    Ok(paths)
}

/// One allocation-trace row.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub slot: usize,
    pub agent: usize,
    pub rue: usize,
    pub power_frac: f64,
    pub spectrum_frac: f64,
    pub distance_km: f64,
}

/// Records per-slot, per-RUE allocation fractions with the distance to the
/// serving satellite, over one episode of `slots` slots.
pub fn trace_allocations(
    scenario: &Scenario,
    source: &ActionSource,
    slots: usize,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    let mut sc = scenario.clone();
    sc.episode.slots = slots.max(1);
    let mut world = World::reset(&sc, seed)?;
    let mut rows = Vec::new();
    for slot in 0..sc.episode.slots {
        let expert_solution = match source {
            ActionSource::Expert(woa_cfg) => Some(woa::solve_slot(
                &world,
                woa_cfg,
                crate::seeds::derive(seed, "trace-woa", slot as u64),
            )?),
            _ => None,
        };
        for agent in 0..world.num_agents() {
            let action = match source {
                ActionSource::Fairness => fairness_policy(&world, agent),
                ActionSource::Expert(_) => {
                    expert_solution.as_ref().expect("solved above").actions[agent].clone()
                }
                ActionSource::Policies(policies) => {
                    let obs = world.observe(agent);
                    let fractions = policies[agent].mean_fractions(&obs.features)?;
                    AgentAction::from_flat(&fractions)?
                }
            };
            let eff = world.effective_action(agent, &action)?;
            for (i, &rue) in world.beam_rues(agent).iter().enumerate() {
                rows.push(TraceRow {
                    slot,
                    agent,
                    rue,
                    power_frac: eff.power_frac[i],
                    spectrum_frac: eff.spectrum_frac[i],
                    distance_km: world.distance_km(agent, rue),
                });
            }
            world.submit_action(agent, eff)?;
        }
        world.finish_slot()?;
    }
    Ok(rows)
}

/// Writes trace rows as CSV.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut text = String::from("slot,agent,rue,power_frac,spectrum_frac,distance_km\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{:.12e},{:.12e},{:.6}",
            r.slot, r.agent, r.rue, r.power_frac, r.spectrum_frac, r.distance_km
        );
    }
    write_text(path, &text)
}

/// Spearman rank correlation between two equal-length samples.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..n {
        num += (rx[i] - mean) * (ry[i] - mean);
        dx += (rx[i] - mean) * (rx[i] - mean);
        dy += (ry[i] - mean) * (ry[i] - mean);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Standalone matching instances
// ---------------------------------------------------------------------------

/// Standalone matching instance: per-cluster scores and per-pair
/// utilities over satellites, plus satellite capacities.
#[derive(Debug, Clone, serde::Deserialize)]
pub struct MatchingInstance {
    pub capacities: Vec<usize>,
    /// `gain_scores[cluster][sat]`.
    pub gain_scores: Vec<Vec<f64>>,
    /// `utilities[cluster][sat]`; defaults to `gain_scores`.
    pub utilities: Option<Vec<Vec<f64>>>,
}

/// Runs the association game on a standalone instance and renders a
/// deterministic text report.
pub fn solve_matching_instance(instance: &MatchingInstance) -> Result<String> {
    use crate::matching::{
        build_preferences, default_swap_cap, deferred_acceptance, find_swap_blocking_pair,
        swap_refinement, TableUtilities,
    };
    if instance.gain_scores.is_empty() {
        return Err(Error::Matching("instance has no clusters".into()));
    }
    let num_sats = instance.capacities.len();
    for row in &instance.gain_scores {
        if row.len() != num_sats {
            return Err(Error::Matching("gain_scores row width != capacities length".into()));
        }
    }
    let prefs = build_preferences(instance.gain_scores.clone());
    let da = deferred_acceptance(&prefs, &instance.capacities);
    let table = instance.utilities.clone().unwrap_or_else(|| instance.gain_scores.clone());
    let model = TableUtilities { table };
    let nk = instance.gain_scores.len();
    let refined = swap_refinement(da.matching.clone(), &model, default_swap_cap(nk, num_sats))?;

    let mut text = String::new();
    let _ = writeln!(text, "proposals {}", da.proposals);
    let _ = writeln!(text, "swaps {}", refined.swaps_applied);
    for (k, s) in refined.matching.mu_cluster.iter().enumerate() {
        match s {
            Some(s) => {
                let _ = writeln!(text, "cluster {k} -> sat {s}");
            }
            None => {
                let _ = writeln!(text, "cluster {k} -> unmatched");
            }
        }
    }
    let stable = find_swap_blocking_pair(&refined.matching, &model).is_none();
    let _ = writeln!(text, "exchange_stable {stable}");
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.counts = 2;
        cfg.scenario.rue_count = 4;
        cfg.scenario.num_clusters = 2;
        cfg.episode.slots = 4;
        cfg.learning.episodes = 2;
        cfg.learning.eval_episodes = 1;
        cfg.learning.agg_interval_episodes = 1;
        cfg.learning.hidden = vec![8];
        cfg.learning.demo_batch_size = 8;
        cfg.learning.expert_records = 16;
        cfg.learning.epochs = 2;
        cfg.woa.population = 4;
        cfg.woa.iterations = 2;
        cfg.sweep.grid = vec![400.0, 500.0];
        cfg.sweep.seeds = vec![1];
        cfg.sweep.methods = vec!["fairness".into()];
        cfg
    }

    #[test]
    fn fairness_sweep_row_counting() {
        let cfg = tiny_cfg();
        let dir = std::env::temp_dir().join("ntnlab-sweep-count");
        std::fs::create_dir_all(&dir).unwrap();
        let rows = run_sweep(&cfg, &dir).unwrap();
        assert_eq!(rows.len(), 2); // 2 grid points x 1 seed x 1 method
        let plot = std::fs::read_to_string(dir.join("plotdata_bandwidth.csv")).unwrap();
        // header + grid x methods rows
        assert_eq!(plot.lines().count(), 1 + 2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sweep_single_cell_single_row() {
        let mut cfg = tiny_cfg();
        cfg.sweep.grid = vec![500.0];
        let dir = std::env::temp_dir().join("ntnlab-sweep-one");
        std::fs::create_dir_all(&dir).unwrap();
        let rows = run_sweep(&cfg, &dir).unwrap();
        assert_eq!(rows.len(), 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn fairness_eval_is_deterministic() {
        let cfg = tiny_cfg();
        let sc = Scenario::from_experiment(&cfg).unwrap();
        let p = PenaltyWeights::default();
        let a = evaluate(&sc, &ActionSource::Fairness, 2, 5, &p).unwrap();
        let b = evaluate(&sc, &ActionSource::Fairness, 2, 5, &p).unwrap();
        assert_eq!(a.mean_se, b.mean_se);
        assert_eq!(a.mean_reward, b.mean_reward);
    }

    #[test]
    fn fairness_trace_has_equal_fractions_each_slot() {
        let cfg = tiny_cfg();
        let sc = Scenario::from_experiment(&cfg).unwrap();
        let rows = trace_allocations(&sc, &ActionSource::Fairness, 3, 2).unwrap();
        assert!(!rows.is_empty());
        for slot in 0..3 {
            for agent in 0..sc.num_agents() {
                let cell: Vec<&TraceRow> =
                    rows.iter().filter(|r| r.slot == slot && r.agent == agent).collect();
                if cell.len() > 1 {
                    for w in cell.windows(2) {
                        assert_eq!(w[0].power_frac, w[1].power_frac);
                        assert_eq!(w[0].spectrum_frac, w[1].spectrum_frac);
                    }
                }
            }
        }
    }

    #[test]
    fn snapshot_files_match_requested_slots() {
        let cfg = tiny_cfg();
        let dir = std::env::temp_dir().join("ntnlab-snapshot");
        std::fs::create_dir_all(&dir).unwrap();
        let paths = snapshot_association(&cfg, 2, 3, &dir).unwrap();
        assert_eq!(paths.len(), 2);
        let text = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(text.contains("clusters"));
        // one cluster record per cluster
        let cluster_lines = text.lines().filter(|l| l.trim_start().starts_with("cluster ")).count();
        assert_eq!(cluster_lines, cfg.scenario.num_clusters);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn spearman_reference_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]);
        assert!(r > 0.0 && r < 1.0);
    }

    #[test]
    fn convergence_detector_on_synthetic_curves() {
        let rows: Vec<EpisodeRow> = (0..50)
            .map(|i| EpisodeRow {
                episode: i,
                mean_reward: 0.0,
                mean_se: if i < 20 { i as f64 / 20.0 } else { 1.0 },
                disc_loss: 0.0,
                entropy: 0.0,
            })
            .collect();
        let ep = episodes_to_convergence(&rows);
        assert!(ep >= 15 && ep <= 30, "detector picked {ep}");
    }

    #[test]
    fn matching_instance_report() {
        let instance = MatchingInstance {
            capacities: vec![1, 1],
            gain_scores: vec![vec![2.0, 1.0], vec![3.0, 0.5]],
            utilities: None,
        };
        let report = solve_matching_instance(&instance).unwrap();
        assert!(report.contains("cluster 0 -> sat 1"));
        assert!(report.contains("cluster 1 -> sat 0"));
        assert!(report.contains("exchange_stable true"));
    }
}
