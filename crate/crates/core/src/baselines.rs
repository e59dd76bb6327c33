//! Comparison policies: a clipped-surrogate RL learner on the handcrafted
//! reward (trained and federated exactly like the imitation learner, so the
//! gap between the two is attributable to the learning rule alone) and the
//! stateless equal-split fairness policy.

use rand_chacha::ChaCha8Rng;

use crate::config::LearningBlock;
use crate::env::{handcrafted_reward, AgentAction, PenaltyWeights, Scenario, World};
use crate::error::{Error, Result};
use crate::gail::{EpisodeRow, PolicyNet};
use crate::nn::{Adam, DiagGaussian, HeadKind, Mlp};

/// Clipped-surrogate hyperparameters.
#[derive(Debug, Clone)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    /// Optimization epochs per collected episode.
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub penalties: PenaltyWeights,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_ratio: 0.2,
            epochs: 64,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
            hidden: vec![128, 128],
            penalties: PenaltyWeights::default(),
        }
    }
}

impl From<&LearningBlock> for PpoConfig {
    fn from(b: &LearningBlock) -> Self {
        PpoConfig {
            clip_ratio: b.clip_ratio,
            epochs: b.epochs,
            gamma: b.gamma,
            gae_lambda: b.gae_lambda,
            value_coef: b.value_coef,
            entropy_coef: b.entropy_coef,
            lr: b.lr,
            hidden: b.hidden.clone(),
            penalties: PenaltyWeights { c1: b.penalty_c1, c2: b.penalty_c2, c8: b.penalty_c8 },
        }
    }
}

/// One collected transition.
#[derive(Debug, Clone)]
pub struct PpoStep {
    pub state: Vec<f64>,
    pub z: Vec<f64>,
    pub log_prob_old: f64,
    pub reward: f64,
    pub value: f64,
}

/// A batch item after advantage estimation.
#[derive(Debug, Clone)]
pub struct PpoItem {
    pub state: Vec<f64>,
    pub z: Vec<f64>,
    pub log_prob_old: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Clipped surrogate plus entropy bonus,
/// `mean(min(r*A, clip(r)*A)) + c*mean(H)`; the policy ascends this.
pub fn ppo_objective(
    policy: &PolicyNet,
    batch: &[PpoItem],
    clip: f64,
    entropy_coef: f64,
) -> Result<f64> {
    let n = batch.len() as f64;
    let mut j = 0.0;
    for item in batch {
        let dist = policy.distribution(&item.state)?;
        let ratio = (dist.log_prob(&item.z) - item.log_prob_old).exp();
        let surr1 = ratio * item.advantage;
        let surr2 = ratio.clamp(1.0 - clip, 1.0 + clip) * item.advantage;
        j += (surr1.min(surr2) + entropy_coef * dist.entropy()) / n;
    }
    Ok(j)
}

/// Ascent gradient of [`ppo_objective`]. Samples where the clipped branch
/// is active contribute no policy-ratio gradient.
pub fn ppo_objective_grad(
    policy: &PolicyNet,
    batch: &[PpoItem],
    clip: f64,
    entropy_coef: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Dimension("ppo update needs a non-empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.net().num_params()];
    for item in batch {
        let trace = policy.net().forward_trace(&item.state)?;
        let dist = DiagGaussian::from_head_output(&trace.output);
        let ratio = (dist.log_prob(&item.z) - item.log_prob_old).exp();
        let surr1 = ratio * item.advantage;
        let surr2 = ratio.clamp(1.0 - clip, 1.0 + clip) * item.advantage;
        let ratio_coef = if surr1 <= surr2 { ratio * item.advantage } else { 0.0 };
        let lp_grad = dist.log_prob_grad(&item.z);
        let ent_grad = dist.entropy_grad();
        let upstream: Vec<f64> = lp_grad
            .iter()
            .zip(&ent_grad)
            .map(|(&lg, &eg)| (ratio_coef * lg + entropy_coef * eg) / n)
            .collect();
        for (g, gi) in grad.iter_mut().zip(policy.net().backward(&trace, &upstream)?) {
            *g += gi;
        }
    }
    Ok(grad)
}

/// One satellite's RL learner: policy, value head, and their optimizers.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub policy: PolicyNet,
    pub value: Mlp,
    popt: Adam,
    vopt: Adam,
    rng: ChaCha8Rng,
    pub updates: usize,
    last_value_loss: f64,
    steps_since_upload: usize,
}

impl PpoAgent {
    fn new(state_dim: usize, action_dim: usize, cfg: &PpoConfig, seed: u64) -> Result<Self> {
        let mut init_rng = crate::seeds::rng(seed, "ppo-init", 0);
        let policy = PolicyNet::new(state_dim, action_dim, &cfg.hidden, &mut init_rng)?;
        let mut dims = vec![state_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(1);
        let value = Mlp::new(dims, HeadKind::Linear, &mut init_rng)?;
        let popt = Adam::new(cfg.lr, policy.net().num_params());
        let vopt = Adam::new(cfg.lr, value.num_params());
        Ok(PpoAgent {
            policy,
            value,
            popt,
            vopt,
            rng: crate::seeds::rng(seed, "ppo-act", 0),
            updates: 0,
            last_value_loss: f64::NAN,
            steps_since_upload: 0,
        })
    }

    /// Generalized advantage estimation over one episode, then `epochs`
    /// full-batch ascent steps on the clipped surrogate and descent steps
    /// on the value loss. Advantages are standardized, which makes the
    /// update invariant to the reward scale.
    fn update(&mut self, steps: Vec<PpoStep>, cfg: &PpoConfig) -> Result<()> {
        if steps.is_empty() {
            return Ok(());
        }
        let n = steps.len();
        let mut advantages = vec![0.0; n];
        let mut gae = 0.0;
        for i in (0..n).rev() {
            let next_value = if i + 1 < n { steps[i + 1].value } else { 0.0 };
            let delta = steps[i].reward + cfg.gamma * next_value - steps[i].value;
            gae = delta + cfg.gamma * cfg.gae_lambda * gae;
            advantages[i] = gae;
        }
        let returns: Vec<f64> =
            advantages.iter().zip(&steps).map(|(a, s)| a + s.value).collect();
        let mean = advantages.iter().sum::<f64>() / n as f64;
        let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-12);
        let items: Vec<PpoItem> = steps
            .into_iter()
            .zip(advantages)
            .zip(returns)
            .map(|((s, a), ret)| PpoItem {
                state: s.state,
                z: s.z,
                log_prob_old: s.log_prob_old,
                advantage: (a - mean) / std,
                ret,
            })
            .collect();

        for _ in 0..cfg.epochs {
            let grad = ppo_objective_grad(&self.policy, &items, cfg.clip_ratio, cfg.entropy_coef)?;
            let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
            let dims = self.policy.net().dims().to_vec();
            self.popt.step(&dims, self.policy.net_mut().params_mut(), &descent)?;

            let mut vgrad = vec![0.0; self.value.num_params()];
            let mut vloss = 0.0;
            for item in &items {
                let trace = self.value.forward_trace(&item.state)?;
                let v = trace.output[0];
                let err = v - item.ret;
                vloss += cfg.value_coef * err * err / items.len() as f64;
                let upstream = 2.0 * cfg.value_coef * err / items.len() as f64;
                for (g, gi) in vgrad.iter_mut().zip(self.value.backward(&trace, &[upstream])?) {
                    *g += gi;
                }
            }
            let dims = self.value.dims().to_vec();
            self.vopt.step(&dims, self.value.params_mut(), &vgrad)?;
            self.last_value_loss = vloss;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn upload_params(&self, include_value: bool) -> Vec<f64> {
        let mut v = self.policy.net().params().to_vec();
        if include_value {
            v.extend_from_slice(self.value.params());
        }
        v
    }

    pub fn download_params(&mut self, include_value: bool, params: &[f64]) -> Result<()> {
        let p_len = self.policy.net().num_params();
        let expect = if include_value { p_len + self.value.num_params() } else { p_len };
        if params.len() != expect {
            return Err(Error::Dimension(format!(
                "federated payload has {} params, expected {expect}",
                params.len()
            )));
        }
        self.policy.net_mut().set_params(&params[..p_len])?;
        if include_value {
            self.value.set_params(&params[p_len..])?;
        }
        Ok(())
    }

    pub fn take_sample_count(&mut self) -> usize {
        std::mem::take(&mut self.steps_since_upload)
    }
}

/// Multi-agent RL trainer sharing the environment schedule, state/action
/// encodings, network shapes, and federated wrapper with the imitation
/// learner.
#[derive(Debug, Clone)]
pub struct PpoTrainer {
    pub scenario: Scenario,
    pub cfg: PpoConfig,
    pub agents: Vec<PpoAgent>,
    master_seed: u64,
    pub episodes_done: usize,
}

impl PpoTrainer {
    pub fn new(scenario: Scenario, cfg: PpoConfig, seed: u64) -> Result<Self> {
        let state_dim = scenario.state_dim();
        let action_dim = scenario.action_dim();
        let agents = (0..scenario.num_agents())
            .map(|a| PpoAgent::new(state_dim, action_dim, &cfg, crate::seeds::derive(seed, "agent", a as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PpoTrainer { scenario, cfg, agents, master_seed: seed, episodes_done: 0 })
    }

    /// Runs `episodes` training episodes (one update block per episode),
    /// returning one curve row each. Episode seeds match the imitation
    /// trainer's stream so paired comparisons share environments.
    pub fn run_episodes(&mut self, episodes: usize) -> Result<Vec<EpisodeRow>> {
        let mut rows = Vec::with_capacity(episodes);
        // learning rewards are expressed in reference-SE units so value
        // targets are O(1) regardless of the link budget's absolute scale
        let se_ref = self.scenario.reference_se().max(f64::MIN_POSITIVE);
        for _ in 0..episodes {
            let world_seed = crate::seeds::derive(self.master_seed, "train-episode", self.episodes_done as u64);
            let mut world = World::reset(&self.scenario, world_seed)?;
            let n_agents = self.agents.len();
            let mut rollouts: Vec<Vec<PpoStep>> = vec![Vec::new(); n_agents];
            let mut entropy_sum = 0.0;
            let mut entropy_count = 0usize;
            let mut se_sum = 0.0;
            let mut reward_sum = 0.0;

            for _ in 0..self.scenario.episode.slots {
                for agent_id in 0..n_agents {
                    let obs = world.observe(agent_id);
                    let agent = &mut self.agents[agent_id];
                    let sample = agent.policy.act(&obs.features, &mut agent.rng)?;
                    let value = agent.value.forward(&obs.features)?[0];
                    let raw = AgentAction::from_flat(&sample.fractions)?;
                    let eff = world.effective_action(agent_id, &raw)?;
                    world.submit_action(agent_id, eff)?;
                    rollouts[agent_id].push(PpoStep {
                        state: obs.features,
                        z: sample.z,
                        log_prob_old: sample.log_prob,
                        reward: 0.0, // filled when the slot closes
                        value,
                    });
                    agent.steps_since_upload += 1;
                    entropy_sum += sample.entropy;
                    entropy_count += 1;
                }
                let outcome = world.finish_slot()?;
                let r = handcrafted_reward(&outcome, &self.cfg.penalties);
                se_sum += outcome.se_total;
                reward_sum += r;
                for rollout in rollouts.iter_mut() {
                    if let Some(step) = rollout.last_mut() {
                        step.reward = r / se_ref;
                    }
                }
            }
            for (agent, rollout) in self.agents.iter_mut().zip(rollouts) {
                agent.update(rollout, &self.cfg)?;
            }

            let value_loss = {
                let finite: Vec<f64> = self
                    .agents
                    .iter()
                    .map(|a| a.last_value_loss)
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
                mean_reward: reward_sum / self.scenario.episode.slots as f64,
                mean_se: se_sum / self.scenario.episode.slots as f64,
                disc_loss: value_loss,
                entropy: if entropy_count > 0 { entropy_sum / entropy_count as f64 } else { 0.0 },
            });
            self.episodes_done += 1;
        }
        Ok(rows)
    }

    pub fn policies(&self) -> Vec<&PolicyNet> {
        self.agents.iter().map(|a| &a.policy).collect()
    }
}

/// Equal-split policy: each of the agent's `n` served users gets power
/// fraction `1/n` and spectrum fraction `1/n`. Stateless and deterministic;
/// with no served users the action is empty.
pub fn fairness_policy(world: &World, agent: usize) -> AgentAction {
    let n_beam = world.scenario.radio.n_beam;
    let served = world.beam_rues(agent).len();
    let mut action = AgentAction::zeros(n_beam);
    if served == 0 {
        return action;
    }
    let share = 1.0 / served as f64;
    for i in 0..served {
        action.power_frac[i] = share;
        action.spectrum_frac[i] = share;
    }
    action
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn toy_policy(seed: u64) -> PolicyNet {
        let mut rng = crate::seeds::rng(seed, "ppo-test", 0);
        PolicyNet::new(1, 1, &[4], &mut rng).unwrap()
    }

    fn toy_batch(policy: &PolicyNet, offsets: &[f64]) -> Vec<PpoItem> {
        offsets
            .iter()
            .enumerate()
            .map(|(i, &off)| {
                let state = vec![0.2 * i as f64 - 0.3];
                let z = vec![0.1 * i as f64];
                let dist = policy.distribution(&state).unwrap();
                PpoItem {
                    log_prob_old: dist.log_prob(&z) + off,
                    state,
                    z,
                    advantage: if i % 2 == 0 { 1.0 } else { -0.5 },
                    ret: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn unit_ratio_makes_clipping_a_no_op() {
        let policy = toy_policy(1);
        let batch = toy_batch(&policy, &[0.0, 0.0, 0.0]);
        let clipped = ppo_objective(&policy, &batch, 0.2, 0.0).unwrap();
        let unclipped = ppo_objective(&policy, &batch, 1e9, 0.0).unwrap();
        assert!((clipped - unclipped).abs() < 1e-12);
    }

    #[test]
    fn ppo_gradient_matches_finite_differences() {
        let policy = toy_policy(2);
        // offsets keep the ratios strictly inside the clip interval
        let batch = toy_batch(&policy, &[-0.05, 0.08, 0.02, -0.1]);
        let clip = 0.2;
        let c = 0.03;
        let grad = ppo_objective_grad(&policy, &batch, clip, c).unwrap();
        let mut probe = policy.clone();
        let h = 1e-6;
        for i in 0..grad.len() {
            let orig = probe.net().params()[i];
            probe.net_mut().params_mut()[i] = orig + h;
            let plus = ppo_objective(&probe, &batch, clip, c).unwrap();
            probe.net_mut().params_mut()[i] = orig - h;
            let minus = ppo_objective(&probe, &batch, clip, c).unwrap();
            probe.net_mut().params_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            assert!((grad[i] - fd).abs() / denom < 1e-4, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn saturated_clip_contributes_no_ratio_gradient() {
        let policy = toy_policy(3);
        // ratio ~ e^{0.5} = 1.65 with positive advantage -> clipped branch
        let batch = toy_batch(&policy, &[-0.5]);
        assert!(batch[0].advantage > 0.0);
        let grad = ppo_objective_grad(&policy, &batch, 0.2, 0.0).unwrap();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-12, "saturated sample leaked gradient: {norm}");
    }

    #[test]
    fn ppo_training_is_deterministic() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.counts = 2;
        cfg.scenario.rue_count = 4;
        cfg.scenario.num_clusters = 2;
        cfg.episode.slots = 4;
        let sc = Scenario::from_experiment(&cfg).unwrap();
        let pcfg = PpoConfig { hidden: vec![8], epochs: 4, ..Default::default() };
        let run = || {
            let mut t = PpoTrainer::new(sc.clone(), pcfg.clone(), 21).unwrap();
            t.run_episodes(3).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mean_reward, y.mean_reward);
            assert_eq!(x.mean_se, y.mean_se);
        }
    }

    #[test]
    fn fairness_splits_evenly_and_fills_budgets() {
        let cfg = ExperimentConfig::default();
        let sc = Scenario::from_experiment(&cfg).unwrap();
        let world = World::reset(&sc, 5).unwrap();
        for agent in 0..world.num_agents() {
            let action = fairness_policy(&world, agent);
            let n = world.beam_rues(agent).len();
            if n == 0 {
                assert!(action.power_frac.iter().all(|&p| p == 0.0));
                continue;
            }
            for i in 0..n {
                assert!((action.power_frac[i] - 1.0 / n as f64).abs() < 1e-15);
                assert!((action.spectrum_frac[i] - 1.0 / n as f64).abs() < 1e-15);
            }
            // exactly the full budget, split equally
            assert!((action.power_frac.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((action.spectrum_frac.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn learners_share_shapes_and_encodings() {
        let cfg = ExperimentConfig::default();
        let sc = Scenario::from_experiment(&cfg).unwrap();
        let gail = crate::gail::GailTrainer::new(sc.clone(), Default::default(), 1).unwrap();
        let ppo = PpoTrainer::new(sc, Default::default(), 1).unwrap();
        assert_eq!(gail.agents.len(), ppo.agents.len());
        for (g, p) in gail.agents.iter().zip(&ppo.agents) {
            assert_eq!(g.policy.net().dims(), p.policy.net().dims());
            assert_eq!(g.policy.action_dim(), p.policy.action_dim());
        }
    }
}
