//! Adversarial imitation learner: a discriminator over `(state, action)`
//! pairs induces the reward, and the policy follows a score-function
//! gradient on discounted discriminator-derived returns with an entropy
//! bonus.
//!
//! Orientation convention: the discriminator is trained toward 0 on expert
//! pairs and toward 1 on policy pairs, and the reward is `-ln D(s, a)`,
//! which is strictly positive and largest where the discriminator believes
//! a pair is expert-like.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::LearningBlock;
use crate::env::{AgentAction, Scenario, World};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Adam, DiagGaussian, HeadKind, Mlp};
use crate::woa::DemoSet;

/// Learner hyperparameters.
#[derive(Debug, Clone)]
pub struct GailConfig {
    pub hidden: Vec<usize>,
    pub demo_batch_size: usize,
    /// Policy replay capacity in steps; oldest trajectories are evicted.
    pub gen_replay_capacity: usize,
    /// Update cadence in slots; 0 means once per episode.
    pub t_upd_slots: usize,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub lr: f64,
}

impl Default for GailConfig {
    fn default() -> Self {
        GailConfig {
            hidden: vec![128, 128],
            demo_batch_size: 1024,
            gen_replay_capacity: 512,
            t_upd_slots: 0,
            gamma: 0.99,
            entropy_coef: 0.01,
            lr: 3e-4,
        }
    }
}

impl From<&LearningBlock> for GailConfig {
    fn from(b: &LearningBlock) -> Self {
        GailConfig {
            hidden: b.hidden.clone(),
            demo_batch_size: b.demo_batch_size,
            gen_replay_capacity: b.gen_replay_buffer_capacity,
            t_upd_slots: b.t_upd_slots,
            gamma: b.gamma,
            entropy_coef: b.entropy_coef,
            lr: b.lr,
        }
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Sigmoid-head classifier over concatenated `(state, action)`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl Discriminator {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Discriminator { net: Mlp::new(dims, HeadKind::Sigmoid, rng)?, state_dim, action_dim })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn input(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::Dimension(format!(
                "discriminator input ({}, {}) does not match ({}, {})",
                state.len(),
                action.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        let mut x = Vec::with_capacity(state.len() + action.len());
        x.extend_from_slice(state);
        x.extend_from_slice(action);
        Ok(x)
    }

    /// `D(s, a)`, strictly inside (0, 1).
    pub fn prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.input(state, action)?)?[0])
    }

    /// Classification loss on a pair of batches: expert pairs are pushed
    /// toward 0 and policy pairs toward 1,
    /// `L = mean_E[-ln(1 - D)] + mean_P[-ln D]`.
    pub fn loss(&self, expert: &[(&[f64], &[f64])], policy: &[(&[f64], &[f64])]) -> Result<f64> {
        let mut loss = 0.0;
        for (s, a) in expert {
            loss += -(1.0 - self.prob(s, a)?).ln() / expert.len() as f64;
        }
        for (s, a) in policy {
            loss += -self.prob(s, a)?.ln() / policy.len() as f64;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "discriminator loss {loss} on batch sizes {}/{}",
                expert.len(),
                policy.len()
            )));
        }
        Ok(loss)
    }

    /// One gradient-descent step on the classification loss; returns the
    /// post-step loss.
    pub fn update(
        &mut self,
        opt: &mut Adam,
        expert: &[(&[f64], &[f64])],
        policy: &[(&[f64], &[f64])],
    ) -> Result<f64> {
        if expert.is_empty() || policy.is_empty() {
            return Err(Error::Dimension("discriminator update needs non-empty batches".into()));
        }
        let mut grad = vec![0.0; self.net.num_params()];
        for (s, a) in expert {
            let x = self.input(s, a)?;
            let trace = self.net.forward_trace(&x)?;
            let d = trace.output[0];
            // d/dD of -ln(1-D)
            let upstream = 1.0 / (1.0 - d) / expert.len() as f64;
            for (g, gi) in grad.iter_mut().zip(self.net.backward(&trace, &[upstream])?) {
                *g += gi;
            }
        }
        for (s, a) in policy {
            let x = self.input(s, a)?;
            let trace = self.net.forward_trace(&x)?;
            let d = trace.output[0];
            // d/dD of -ln(D)
            let upstream = -1.0 / d / policy.len() as f64;
            for (g, gi) in grad.iter_mut().zip(self.net.backward(&trace, &[upstream])?) {
                *g += gi;
            }
        }
        let dims = self.net.dims().to_vec();
        opt.step(&dims, self.net.params_mut(), &grad)?;
        self.loss(expert, policy)
    }
}

/// Discriminator-induced reward `r = -ln D(s, a) > 0`.
pub fn gail_reward(d: f64) -> f64 {
    -d.ln()
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

/// Gaussian policy over box-constrained fractions: the network emits a
/// diagonal gaussian, samples are squashed through a logistic into `(0,1)`,
/// and the environment masks/normalizes them into a feasible action. The
/// squash Jacobian does not depend on the parameters, so score-function
/// gradients and likelihood ratios use the pre-squash gaussian density.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    net: Mlp,
    action_dim: usize,
}

/// One stochastic policy decision.
#[derive(Debug, Clone)]
pub struct PolicySample {
    /// Pre-squash gaussian sample.
    pub z: Vec<f64>,
    /// Squashed fractions in (0, 1).
    pub fractions: Vec<f64>,
    /// Gaussian log density of `z`.
    pub log_prob: f64,
    pub entropy: f64,
}

impl PolicyNet {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * action_dim);
        Ok(PolicyNet { net: Mlp::new(dims, HeadKind::GaussianPolicy, rng)?, action_dim })
    }

    /// Wraps a loaded checkpoint network.
    pub fn from_net(net: Mlp, action_dim: usize) -> Result<Self> {
        if net.head() != HeadKind::GaussianPolicy {
            return Err(Error::Format {
                path: "<checkpoint>".into(),
                reason: "policy checkpoint must carry a gaussian-policy head".into(),
            });
        }
        if net.output_dim() != 2 * action_dim {
            return Err(Error::Dimension(format!(
                "checkpoint output dim {} does not match action dim {action_dim}",
                net.output_dim()
            )));
        }
        Ok(PolicyNet { net, action_dim })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn distribution(&self, state: &[f64]) -> Result<DiagGaussian> {
        Ok(DiagGaussian::from_head_output(&self.net.forward(state)?))
    }

    /// Stochastic decision used during training.
    pub fn act(&self, state: &[f64], rng: &mut impl Rng) -> Result<PolicySample> {
        let dist = self.distribution(state)?;
        let z = dist.sample(rng);
        let fractions = z.iter().map(|&v| sigmoid(v)).collect();
        Ok(PolicySample { log_prob: dist.log_prob(&z), entropy: dist.entropy(), z, fractions })
    }

    /// Deterministic decision used during evaluation: squashed mean.
    pub fn mean_fractions(&self, state: &[f64]) -> Result<Vec<f64>> {
        let dist = self.distribution(state)?;
        Ok(dist.mean.iter().map(|&v| sigmoid(v)).collect())
    }
}

/// One item of a generator update batch.
#[derive(Debug, Clone)]
pub struct GenItem {
    pub state: Vec<f64>,
    pub z: Vec<f64>,
    pub advantage: f64,
}

/// Diagnostics of one generator step.
#[derive(Debug, Clone, Copy)]
pub struct GenDiagnostics {
    pub mean_return: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
}

/// Surrogate objective `mean(log pi(z|s) * A) + c * mean(H(s))`, the
/// quantity whose ascent direction the generator follows.
pub fn policy_surrogate(policy: &PolicyNet, batch: &[GenItem], entropy_coef: f64) -> Result<f64> {
    let n = batch.len() as f64;
    let mut j = 0.0;
    for item in batch {
        let dist = policy.distribution(&item.state)?;
        j += (dist.log_prob(&item.z) * item.advantage + entropy_coef * dist.entropy()) / n;
    }
    Ok(j)
}

/// Ascent gradient of [`policy_surrogate`] with respect to the policy
/// parameters.
pub fn policy_surrogate_grad(
    policy: &PolicyNet,
    batch: &[GenItem],
    entropy_coef: f64,
) -> Result<(Vec<f64>, GenDiagnostics)> {
    if batch.is_empty() {
        return Err(Error::Dimension("generator update needs a non-empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.net.num_params()];
    let mut mean_return = 0.0;
    let mut mean_entropy = 0.0;
    for item in batch {
        let trace = policy.net.forward_trace(&item.state)?;
        let dist = DiagGaussian::from_head_output(&trace.output);
        let lp_grad = dist.log_prob_grad(&item.z);
        let ent_grad = dist.entropy_grad();
        let upstream: Vec<f64> = lp_grad
            .iter()
            .zip(&ent_grad)
            .map(|(&lg, &eg)| (lg * item.advantage + entropy_coef * eg) / n)
            .collect();
        for (g, gi) in grad.iter_mut().zip(policy.net.backward(&trace, &upstream)?) {
            *g += gi;
        }
        mean_return += item.advantage / n;
        mean_entropy += dist.entropy() / n;
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((grad, GenDiagnostics { mean_return, mean_entropy, grad_norm }))
}

/// One policy-gradient step (ascent on the surrogate). Returns diagnostics.
pub fn gen_update(
    policy: &mut PolicyNet,
    opt: &mut Adam,
    batch: &[GenItem],
    entropy_coef: f64,
) -> Result<GenDiagnostics> {
    let (grad, diag) = policy_surrogate_grad(policy, batch, entropy_coef)?;
    let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
    let dims = policy.net.dims().to_vec();
    opt.step(&dims, policy.net.params_mut(), &descent)?;
    Ok(diag)
}

// ---------------------------------------------------------------------------
// Memories
// ---------------------------------------------------------------------------

/// Read-only expert memory loaded from a demonstration file.
#[derive(Debug, Clone)]
pub struct ExpertMemory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl ExpertMemory {
    pub fn from_demos(demos: &DemoSet) -> Self {
        ExpertMemory {
            states: demos.records.iter().map(|r| r.state.clone()).collect(),
            actions: demos.records.iter().map(|r| r.action.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Uniform sample of distinct indices; the batch is capped at the pool
    /// size.
    pub fn sample(&self, rng: &mut impl Rng, batch: usize) -> Vec<usize> {
        sample_without_replacement(self.len(), batch, rng)
    }
}

/// One on-policy step kept for updates.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub state: Vec<f64>,
    pub z: Vec<f64>,
    /// Effective (masked, normalized) action actually applied.
    pub action: Vec<f64>,
}

/// A whole-episode trajectory of one agent.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

/// Bounded trajectory replay; evicts oldest trajectories beyond the step
/// capacity.
#[derive(Debug, Clone)]
pub struct PolicyMemory {
    trajectories: VecDeque<Trajectory>,
    steps: usize,
    capacity: usize,
}

impl PolicyMemory {
    pub fn new(capacity: usize) -> Self {
        PolicyMemory { trajectories: VecDeque::new(), steps: 0, capacity }
    }

    pub fn push(&mut self, traj: Trajectory) {
        if traj.steps.is_empty() {
            return;
        }
        self.steps += traj.steps.len();
        self.trajectories.push_back(traj);
        while self.steps > self.capacity && self.trajectories.len() > 1 {
            if let Some(old) = self.trajectories.pop_front() {
                self.steps -= old.steps.len();
            }
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn trajectory(&self, idx: usize) -> &Trajectory {
        &self.trajectories[idx]
    }

    /// Samples distinct trajectories until at least `target_steps` steps are
    /// covered (or the memory is exhausted).
    pub fn sample_trajectories(&self, rng: &mut impl Rng, target_steps: usize) -> Vec<usize> {
        let mut order = sample_without_replacement(self.trajectories.len(), self.trajectories.len(), rng);
        let mut chosen = Vec::new();
        let mut steps = 0;
        while let Some(idx) = order.pop() {
            steps += self.trajectories[idx].steps.len();
            chosen.push(idx);
            if steps >= target_steps {
                break;
            }
        }
        chosen
    }
}

fn sample_without_replacement(pool: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    idx.shuffle(rng);
    idx.truncate(batch.min(pool));
    idx
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Per-episode learning-curve row.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_se: f64,
    pub disc_loss: f64,
    pub entropy: f64,
}

/// One satellite's learner: policy, discriminator, their optimizers, and a
/// private replay memory. Exclusively owned between aggregation barriers.
#[derive(Debug, Clone)]
pub struct GailAgent {
    pub policy: PolicyNet,
    pub disc: Discriminator,
    popt: Adam,
    dopt: Adam,
    pub memory: PolicyMemory,
    rng: ChaCha8Rng,
    pub updates: usize,
    last_disc_loss: f64,
    steps_since_upload: usize,
}

impl GailAgent {
    fn new(state_dim: usize, action_dim: usize, cfg: &GailConfig, seed: u64) -> Result<Self> {
        let mut init_rng = crate::seeds::rng(seed, "gail-init", 0);
        let policy = PolicyNet::new(state_dim, action_dim, &cfg.hidden, &mut init_rng)?;
        let disc = Discriminator::new(state_dim, action_dim, &cfg.hidden, &mut init_rng)?;
        let popt = Adam::new(cfg.lr, policy.net.num_params());
        let dopt = Adam::new(cfg.lr, disc.net.num_params());
        Ok(GailAgent {
            policy,
            disc,
            popt,
            dopt,
            memory: PolicyMemory::new(cfg.gen_replay_capacity),
            rng: crate::seeds::rng(seed, "gail-act", 0),
            updates: 0,
            last_disc_loss: f64::NAN,
            steps_since_upload: 0,
        })
    }

    /// Discriminator followed by generator update on sampled memories.
    fn update(&mut self, xe: &ExpertMemory, cfg: &GailConfig) -> Result<()> {
        if xe.is_empty() {
            return Err(Error::Env("expert memory is empty".into()));
        }
        if self.memory.num_trajectories() == 0 {
            return Ok(()); // nothing collected yet
        }
        let expert_idx = xe.sample(&mut self.rng, cfg.demo_batch_size);
        let traj_idx = self.memory.sample_trajectories(&mut self.rng, cfg.demo_batch_size);

        let expert_batch: Vec<(&[f64], &[f64])> = expert_idx
            .iter()
            .map(|&i| (xe.states[i].as_slice(), xe.actions[i].as_slice()))
            .collect();
        let mut policy_batch: Vec<(&[f64], &[f64])> = Vec::new();
        for &ti in &traj_idx {
            for step in &self.memory.trajectory(ti).steps {
                policy_batch.push((step.state.as_slice(), step.action.as_slice()));
            }
        }
        self.last_disc_loss = self.disc.update(&mut self.dopt, &expert_batch, &policy_batch)?;

        // discounted discriminator-derived returns along each trajectory
        let mut items: Vec<GenItem> = Vec::with_capacity(policy_batch.len());
        for &ti in &traj_idx {
            let traj = self.memory.trajectory(ti);
            let rewards: Vec<f64> = traj
                .steps
                .iter()
                .map(|s| Ok(gail_reward(self.disc.prob(&s.state, &s.action)?)))
                .collect::<Result<_>>()?;
            let mut q = 0.0;
            let mut returns = vec![0.0; rewards.len()];
            for i in (0..rewards.len()).rev() {
                q = rewards[i] + cfg.gamma * q;
                returns[i] = q;
            }
            for (step, ret) in traj.steps.iter().zip(returns) {
                items.push(GenItem { state: step.state.clone(), z: step.z.clone(), advantage: ret });
            }
        }
        let baseline = items.iter().map(|i| i.advantage).sum::<f64>() / items.len() as f64;
        for item in items.iter_mut() {
            item.advantage -= baseline;
        }
        gen_update(&mut self.policy, &mut self.popt, &items, cfg.entropy_coef)?;
        self.updates += 1;
        Ok(())
    }

    /// Concatenated parameter payload for aggregation.
    pub fn upload_params(&self, include_disc: bool) -> Vec<f64> {
        let mut v = self.policy.net.params().to_vec();
        if include_disc {
            v.extend_from_slice(self.disc.net.params());
        }
        v
    }

    pub fn download_params(&mut self, include_disc: bool, params: &[f64]) -> Result<()> {
        let p_len = self.policy.net.num_params();
        let expect = if include_disc { p_len + self.disc.net.num_params() } else { p_len };
        if params.len() != expect {
            return Err(Error::Dimension(format!(
                "federated payload has {} params, expected {expect}",
                params.len()
            )));
        }
        self.policy.net.set_params(&params[..p_len])?;
        if include_disc {
            self.disc.net.set_params(&params[p_len..])?;
        }
        Ok(())
    }

    /// Steps collected since the last upload (the batch-size weight M_k).
    pub fn take_sample_count(&mut self) -> usize {
        std::mem::take(&mut self.steps_since_upload)
    }
}

/// Multi-agent trainer: one learner per satellite acting in the shared
/// environment on its own decision sub-slot.
#[derive(Debug, Clone)]
pub struct GailTrainer {
    pub scenario: Scenario,
    pub cfg: GailConfig,
    pub agents: Vec<GailAgent>,
    master_seed: u64,
    pub episodes_done: usize,
    slots_since_update: usize,
}

impl GailTrainer {
    pub fn new(scenario: Scenario, cfg: GailConfig, seed: u64) -> Result<Self> {
        let state_dim = scenario.state_dim();
        let action_dim = scenario.action_dim();
        let agents = (0..scenario.num_agents())
            .map(|a| GailAgent::new(state_dim, action_dim, &cfg, crate::seeds::derive(seed, "agent", a as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GailTrainer { scenario, cfg, agents, master_seed: seed, episodes_done: 0, slots_since_update: 0 })
    }

    fn update_cadence(&self) -> usize {
        if self.cfg.t_upd_slots == 0 {
            self.scenario.episode.slots
        } else {
            self.cfg.t_upd_slots
        }
    }

    /// Runs `episodes` training episodes, returning one curve row each.
    /// Episode seeds derive from the global episode index, so runs can be
    /// split across aggregation rounds without changing the stream.
    pub fn run_episodes(&mut self, xe: &ExpertMemory, episodes: usize) -> Result<Vec<EpisodeRow>> {
        if xe.is_empty() {
            return Err(Error::Env("expert memory is empty".into()));
        }
        let cadence = self.update_cadence();
        let mut rows = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let world_seed = crate::seeds::derive(self.master_seed, "train-episode", self.episodes_done as u64);
            let mut world = World::reset(&self.scenario, world_seed)?;
            let n_agents = self.agents.len();
            let mut pending: Vec<Trajectory> = vec![Trajectory::default(); n_agents];
            let mut entropy_sum = 0.0;
            let mut entropy_count = 0usize;
            let mut se_sum = 0.0;

            for _ in 0..self.scenario.episode.slots {
                for agent_id in 0..n_agents {
                    let obs = world.observe(agent_id);
                    let agent = &mut self.agents[agent_id];
                    let sample = agent.policy.act(&obs.features, &mut agent.rng)?;
                    let raw = AgentAction::from_flat(&sample.fractions)?;
                    let eff = world.effective_action(agent_id, &raw)?;
                    world.submit_action(agent_id, eff.clone())?;
                    pending[agent_id].steps.push(StepRecord {
                        state: obs.features,
                        z: sample.z,
                        action: eff.flatten(),
                    });
                    agent.steps_since_upload += 1;
                    entropy_sum += sample.entropy;
                    entropy_count += 1;
                }
                let outcome = world.finish_slot()?;
                se_sum += outcome.se_total;
                self.slots_since_update += 1;
            }
            for (agent, traj) in self.agents.iter_mut().zip(pending) {
                agent.memory.push(traj);
            }
            if self.slots_since_update >= cadence {
                for agent in self.agents.iter_mut() {
                    agent.update(xe, &self.cfg)?;
                }
                self.slots_since_update = 0;
            }

            // curve row measured with the freshly updated discriminator
            let mut reward_sum = 0.0;
            let mut reward_count = 0usize;
            for agent in &self.agents {
                if agent.memory.num_trajectories() == 0 {
                    continue;
                }
                let last = agent.memory.trajectory(agent.memory.num_trajectories() - 1);
                for step in &last.steps {
                    reward_sum += gail_reward(agent.disc.prob(&step.state, &step.action)?);
                    reward_count += 1;
                }
            }
            let disc_loss = {
                let finite: Vec<f64> = self
                    .agents
                    .iter()
                    .map(|a| a.last_disc_loss)
                    .filter(|l| l.is_finite())
                    .collect();
                if finite.is_empty() {
                    f64::NAN
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                }
            };
            rows.push(EpisodeRow {
                episode: self.episodes_done,
                mean_reward: if reward_count > 0 { reward_sum / reward_count as f64 } else { 0.0 },
                mean_se: se_sum / self.scenario.episode.slots as f64,
                disc_loss,
                entropy: if entropy_count > 0 { entropy_sum / entropy_count as f64 } else { 0.0 },
            });
            self.episodes_done += 1;
        }
        Ok(rows)
    }

    /// Evaluation policies (squashed means), one per agent.
    pub fn policies(&self) -> Vec<&PolicyNet> {
        self.agents.iter().map(|a| &a.policy).collect()
    }
}
