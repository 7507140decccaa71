//! Deep V-learning: bootstrap regression, episode generation with mirror
//! augmentation, Monte-Carlo targets, dual replay sets and RMSprop updates.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::io::Write;
use std::path::Path;

use glam::DVec2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{observe_joint_state, AgentState, NeighborObservation, NormRuleSide};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::policy::{Policy, PolicyConfig, ValuePolicy};
use crate::rewards::RewardConfig;
use crate::sim::{
    self, random_test_case, symmetric_swap_suite, Outcome, SimConfig, TestCase, Trajectory,
};
use crate::value_net::{
    regress, RegressionConfig, RmsProp, RmsPropConfig, Sample, ValueNetwork, Widths,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Outer iterations; each generates `rollouts_per_episode` rollouts and
    /// applies one network update.
    pub episodes: usize,
    pub rollouts_per_episode: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `episodes` over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub mirror_prob: f64,
    /// Episodes between target refreshes, validations and checkpoints.
    pub target_update_interval: usize,
    pub optimizer: RmsPropConfig,
    /// RMSprop steps per episode, each on a freshly drawn minibatch.
    pub updates_per_episode: usize,
    pub batch_good: usize,
    pub batch_bad: usize,
    pub capacity_good: usize,
    pub capacity_bad: usize,
    pub bootstrap_episodes: usize,
    pub bootstrap_regression: RegressionConfig,
    pub validation_cases: usize,
    pub validation_seed: u64,
    /// Validation success rate below which an evaluation counts as failing.
    pub divergence_success_rate: f64,
    pub divergence_patience: usize,
    /// Stop early once the correct-side passing rate reaches this value.
    pub stop_at: Option<f64>,
    pub seed: u64,
    /// 1 gives bit-reproducible runs.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 1500,
            rollouts_per_episode: 8,
            epsilon_start: 0.5,
            epsilon_end: 0.1,
            epsilon_decay_fraction: 0.5,
            mirror_prob: 0.25,
            target_update_interval: 50,
            optimizer: RmsPropConfig::default(),
            updates_per_episode: 8,
            batch_good: 512,
            batch_bad: 16,
            capacity_good: 50_000,
            capacity_bad: 10_000,
            bootstrap_episodes: 200,
            bootstrap_regression: RegressionConfig {
                threshold: 0.005,
                ..RegressionConfig::default()
            },
            validation_cases: 20,
            validation_seed: 7,
            divergence_success_rate: 0.2,
            divergence_patience: 3,
            stop_at: None,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training.{m}")));
        if self.episodes == 0
            || self.rollouts_per_episode == 0
            || self.target_update_interval == 0
            || self.updates_per_episode == 0
        {
            return bad("episodes, rollouts_per_episode, target_update_interval and updates_per_episode must be > 0");
        }
        for (name, p) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("epsilon_decay_fraction", self.epsilon_decay_fraction),
            ("mirror_prob", self.mirror_prob),
            ("divergence_success_rate", self.divergence_success_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.batch_good + self.batch_bad == 0
            || self.capacity_good == 0
            || self.capacity_bad == 0
        {
            return bad("batch sizes and capacities must be > 0");
        }
        if self.bootstrap_episodes == 0 || self.validation_cases == 0 || self.workers == 0 {
            return bad("bootstrap_episodes, validation_cases and workers must be > 0");
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad("optimizer.learning_rate must be > 0");
        }
        Ok(())
    }

    /// Exploration rate at 1-based `episode`.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = (self.epsilon_decay_fraction * self.episodes as f64).max(1.0);
        let frac = ((episode.saturating_sub(1)) as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub n_agents: usize,
    pub widths: Widths,
    pub network_seed: u64,
    pub sim: SimConfig,
    pub rewards: RewardConfig,
    pub policy: PolicyConfig,
    pub training: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::Config("network.n_agents must be >= 2".into()));
        }
        self.sim.validate()?;
        self.rewards.validate()?;
        self.policy.validate()?;
        self.training.validate()
    }
}

/// Goal seeker that veers to a fixed side when a neighbor is on course to
/// come too close within a few seconds.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedPolicy {
    /// +1 veers left, -1 veers right.
    pub side: f64,
    pub horizon: f64,
    pub clearance: f64,
}

impl ScriptedPolicy {
    pub fn new(side: f64) -> Self {
        Self {
            side,
            horizon: 3.0,
            clearance: 0.3,
        }
    }
}

impl Policy for ScriptedPolicy {
    fn act(
        &self,
        agent: &AgentState,
        others: &[NeighborObservation],
        _: &mut ChaCha8Rng,
    ) -> Result<DVec2> {
        let desired = (agent.goal - agent.position).normalize_or_zero() * agent.v_pref;
        let threatened = others.iter().filter(|o| o.on).any(|o| {
            let rel_p = o.position - agent.position;
            let rel_v = o.velocity - desired;
            let vv = rel_v.length_squared();
            let t = if vv > 0.0 {
                (-rel_p.dot(rel_v) / vv).clamp(0.0, self.horizon)
            } else {
                0.0
            };
            (rel_p + rel_v * t).length() < agent.radius + o.radius + self.clearance
        });
        if threatened {
            Ok(DVec2::from_angle(self.side * FRAC_PI_4).rotate(desired))
        } else {
            Ok(desired)
        }
    }
}

/// Per-state reward along a recorded trajectory. The goal reward is paid
/// only on the arrival state.
fn step_reward(
    rewards: &RewardConfig,
    s: &crate::agent::LocalJointState,
    arrival: bool,
    collided: bool,
) -> f64 {
    if collided {
        return rewards.collision_penalty;
    }
    if arrival {
        return rewards.total_reward(s);
    }
    let no_goal = RewardConfig {
        goal_tolerance: -1.0,
        ..*rewards
    };
    no_goal.total_reward(s)
}

/// Discounted-return targets for every recorded state of every agent.
/// Timed-out agents get the target network's value of their last state as
/// the tail; without a target network the tail is zero.
pub fn find_values(
    target: Option<&ValueNetwork>,
    traj: &Trajectory,
    rewards: &RewardConfig,
    gamma: f64,
    slots: usize,
) -> Result<Vec<Vec<Sample>>> {
    let mut out = Vec::with_capacity(traj.n_agents());
    for (i, series) in traj.states.iter().enumerate() {
        let last = series.len() - 1;
        let outcome = traj.outcomes[i];
        let discount = gamma.powf(traj.dt * series[0].v_pref);
        let states: Vec<_> = (0..=last)
            .map(|k| observe_joint_state(&series[k], &traj.others(i, k), slots))
            .collect();
        let mut tail = match (outcome, target) {
            (Outcome::Timeout, Some(net)) => net.value(&states[last])?,
            _ => 0.0,
        };
        let mut samples = vec![Sample::default(); last + 1];
        for k in (0..=last).rev() {
            let terminal = k == last;
            let r = step_reward(
                rewards,
                &states[k],
                terminal && outcome.reached(),
                terminal && outcome.collided(),
            );
            tail = r + if terminal { tail } else { discount * tail };
            samples[k] = Sample {
                input: states[k].to_vec(),
                target: tail,
            };
        }
        out.push(samples);
    }
    Ok(out)
}

/// Replay stores split by outcome, each evicting its oldest entries.
#[derive(Debug, Clone)]
pub struct ExperienceSets {
    pub good: VecDeque<Sample>,
    pub bad: VecDeque<Sample>,
    pub capacity_good: usize,
    pub capacity_bad: usize,
}

impl ExperienceSets {
    pub fn new(capacity_good: usize, capacity_bad: usize) -> Self {
        Self {
            good: VecDeque::new(),
            bad: VecDeque::new(),
            capacity_good,
            capacity_bad,
        }
    }

    /// Collision samples go to the bad set, everything else to the good set.
    pub fn assimilate(&mut self, samples: Vec<Sample>, outcome: Outcome) {
        let (store, cap) = if outcome.collided() {
            (&mut self.bad, self.capacity_bad)
        } else {
            (&mut self.good, self.capacity_good)
        };
        for s in samples {
            if store.len() == cap {
                store.pop_front();
            }
            store.push_back(s);
        }
    }

    /// Up to `n_good` and `n_bad` distinct samples from each store.
    pub fn minibatch(&self, n_good: usize, n_bad: usize, rng: &mut ChaCha8Rng) -> Vec<&Sample> {
        let mut out = Vec::with_capacity(n_good + n_bad);
        for (store, n) in [(&self.good, n_good), (&self.bad, n_bad)] {
            let n = n.min(store.len());
            if n > 0 {
                out.extend(
                    sample_indices(rng, store.len(), n)
                        .into_iter()
                        .map(|i| &store[i]),
                );
            }
        }
        out
    }
}

/// Stream seed for rollout `j` of episode `e`.
fn rollout_seed(seed: u64, episode: usize, j: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((episode as u64) << 16) | j as u64);
    rng.gen()
}

/// State-value pairs from scripted two-sided goal seeking, with the
/// collision/goal reward only.
pub fn bootstrap_dataset(
    n_agents: usize,
    count: usize,
    seed: u64,
    sim_config: &SimConfig,
    rewards: &RewardConfig,
    gamma: f64,
) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("bootstrap count must be > 0".into()));
    }
    let base = RewardConfig {
        side: NormRuleSide::None,
        ..*rewards
    };
    let mut data = Vec::new();
    for e in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(seed, e, 0));
        let p = rng.gen_range(2..=n_agents);
        let case = random_test_case(p, rng.gen(), sim_config)?;
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let traj = sim::rollout_shared(&ScriptedPolicy::new(side), &case, sim_config, &mut rng)?;
        for samples in find_values(None, &traj, &base, gamma, n_agents)? {
            data.extend(samples);
        }
    }
    Ok(data)
}

/// Validation metrics of one network on the symmetric-swap suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub success_rate: f64,
    pub collision_rate: f64,
    /// Fraction of cases where both agents arrive without collision and
    /// pass on the side the rewards ask for.
    pub correct_side_rate: f64,
    pub extra_time: Option<f64>,
    pub left_pct: Option<f64>,
    pub right_pct: Option<f64>,
}

/// Side on which agent `i` keeps agent `j` at their closest approach:
/// positive when `j` is on `i`'s left relative to `i`'s initial course.
pub fn passing_side(traj: &Trajectory, i: usize, j: usize) -> Option<f64> {
    let course = {
        let a = &traj.states[i][0];
        (a.goal - a.position).normalize_or_zero()
    };
    let mut best: Option<(f64, f64)> = None;
    for k in 0..=traj.steps() {
        if let (Some(a), Some(b)) = (traj.observation(i, k), traj.observation(j, k)) {
            let rel = b.position - a.position;
            let d = rel.length();
            if best.map_or(true, |(m, _)| d < m) {
                best = Some((d, course.perp_dot(rel)));
            }
        }
    }
    best.map(|(_, side)| side)
}

/// Whether every agent reached its goal and, for two agents, passed on the
/// side `side` prescribes (any side when `side` is `None`).
pub fn passed_correctly(traj: &Trajectory, side: NormRuleSide) -> bool {
    if !traj.outcomes.iter().all(Outcome::reached) {
        return false;
    }
    if traj.n_agents() != 2 {
        return true;
    }
    let want = match side {
        NormRuleSide::RightHanded => 1.0,
        NormRuleSide::LeftHanded => -1.0,
        NormRuleSide::None => return true,
    };
    [(0, 1), (1, 0)]
        .iter()
        .all(|&(i, j)| passing_side(traj, i, j).is_some_and(|s| s * want > 0.0))
}

/// Greedy rollouts of `net` on `cases`, summarized.
pub fn evaluate_checkpoint(
    net: &ValueNetwork,
    cases: &[TestCase],
    setup: &TrainSetup,
    seed: u64,
) -> Result<ValidationRecord> {
    let policy = ValuePolicy::new(
        net,
        PolicyConfig {
            epsilon: 0.0,
            ..setup.policy.clone()
        },
        setup.rewards,
    );
    let trajs = eval::run_test_set(&policy, cases, &setup.sim, seed, setup.training.workers)?;
    Ok(summarize_validation(&trajs, setup.rewards.side))
}

pub fn summarize_validation(trajs: &[Trajectory], side: NormRuleSide) -> ValidationRecord {
    let n = trajs.len().max(1) as f64;
    let success = trajs
        .iter()
        .filter(|t| t.outcomes.iter().all(Outcome::reached))
        .count();
    let collided = trajs
        .iter()
        .filter(|t| t.outcomes.iter().any(Outcome::collided))
        .count();
    let correct = trajs.iter().filter(|t| passed_correctly(t, side)).count();
    let report = MetricsReport::from_trajectories("validation", trajs);
    let split = report.passing.percentages();
    ValidationRecord {
        success_rate: success as f64 / n,
        collision_rate: collided as f64 / n,
        correct_side_rate: correct as f64 / n,
        extra_time: report.extra_time.map(|e| e.mean),
        left_pct: split.map(|s| s.0),
        right_pct: split.map(|s| s.1),
    }
}

/// One line of the training log. Validation fields are present only on
/// evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: usize,
    pub n_agents: usize,
    pub epsilon: f64,
    pub loss: f64,
    pub good: usize,
    pub bad: usize,
    pub rollout_success_rate: f64,
    pub rollout_collision_rate: f64,
    pub validation: Option<ValidationRecord>,
}

pub struct TrainReport {
    pub net: ValueNetwork,
    /// The network before any V-learning update.
    pub initial: ValueNetwork,
    pub log: Vec<LogRecord>,
    /// Per-episode wall time (s); kept apart from the deterministic log.
    pub wall_times: Vec<f64>,
    pub bootstrap_mse: f64,
    /// First evaluation episode at which the correct-side rate reached
    /// `stop_at`, if requested.
    pub reached_threshold: Option<usize>,
}

/// Where a run writes its artifacts.
pub struct Output<'a> {
    pub dir: &'a Path,
}

impl Output<'_> {
    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    fn append_line(&self, name: &str, line: &str) -> Result<()> {
        let path = self.dir.join(name);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.json";

pub fn checkpoint_name(episode: usize) -> String {
    format!("checkpoint_{episode:05}.json")
}

/// Bootstrap-initialized network, shared by runs that differ only in
/// their rewards.
pub fn initialize(setup: &TrainSetup) -> Result<(ValueNetwork, f64)> {
    setup.validate()?;
    let mut net = ValueNetwork::init_symmetric(setup.n_agents, setup.widths, setup.network_seed)?;
    let data = bootstrap_dataset(
        setup.n_agents,
        setup.training.bootstrap_episodes,
        setup.training.seed ^ 0xB007,
        &setup.sim,
        &setup.rewards,
        setup.policy.gamma,
    )?;
    let report = regress(&mut net, &data, &setup.training.bootstrap_regression)?;
    Ok((net, report.holdout_mse))
}

/// Full training run from scratch.
pub fn train(setup: &TrainSetup, out: Option<&Output>) -> Result<TrainReport> {
    let (net, mse) = initialize(setup)?;
    train_from(setup, net, mse, out)
}

/// V-learning from an already initialized network.
pub fn train_from(
    setup: &TrainSetup,
    initial: ValueNetwork,
    bootstrap_mse: f64,
    out: Option<&Output>,
) -> Result<TrainReport> {
    setup.validate()?;
    if initial.n_agents() != setup.n_agents {
        return Err(Error::Arity {
            expected: setup.n_agents,
            actual: initial.n_agents(),
        });
    }
    let cfg = &setup.training;
    if let Some(o) = out {
        for name in [LOG_FILE, TIMING_FILE] {
            o.write(name, b"")?;
        }
    }
    let suite = symmetric_swap_suite(cfg.validation_cases, cfg.validation_seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut net = initial.clone();
    let mut target = initial.clone();
    let mut opt = RmsProp::new(&net, cfg.optimizer);
    let mut sets = ExperienceSets::new(cfg.capacity_good, cfg.capacity_bad);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBA7C);
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut wall_times = Vec::with_capacity(cfg.episodes);
    let mut failing = 0;
    let mut reached_threshold = None;

    for episode in 1..=cfg.episodes {
        let started = std::time::Instant::now();
        let epsilon = cfg.epsilon(episode);
        let mut episode_rng =
            ChaCha8Rng::seed_from_u64(rollout_seed(cfg.seed, episode, usize::MAX >> 48));
        let p = episode_rng.gen_range(2..=setup.n_agents);
        let policy = ValuePolicy::new(
            &net,
            PolicyConfig {
                epsilon,
                ..setup.policy.clone()
            },
            setup.rewards,
        );
        let generate = |j: usize| -> Result<Trajectory> {
            let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(cfg.seed, episode, j));
            let case = random_test_case(p, rng.gen(), &setup.sim)?;
            let traj = sim::rollout_shared(&policy, &case, &setup.sim, &mut rng)?;
            Ok(if rng.gen::<f64>() < cfg.mirror_prob {
                traj.mirror_x()
            } else {
                traj
            })
        };
        let trajs: Vec<Trajectory> = if cfg.workers > 1 {
            pool.install(|| {
                (0..cfg.rollouts_per_episode)
                    .into_par_iter()
                    .map(generate)
                    .collect::<Result<Vec<_>>>()
            })
        } else {
            (0..cfg.rollouts_per_episode)
                .map(generate)
                .collect::<Result<Vec<_>>>()
        }?;

        let (mut arrived, mut collided, mut agents) = (0, 0, 0);
        for traj in &trajs {
            let values = find_values(
                Some(&target),
                traj,
                &setup.rewards,
                setup.policy.gamma,
                setup.n_agents,
            )?;
            for (samples, outcome) in values.into_iter().zip(&traj.outcomes) {
                agents += 1;
                arrived += outcome.reached() as usize;
                collided += outcome.collided() as usize;
                sets.assimilate(samples, *outcome);
            }
        }

        let mut loss = 0.0;
        for _ in 0..cfg.updates_per_episode {
            let batch = sets.minibatch(cfg.batch_good, cfg.batch_bad, &mut batch_rng);
            if !batch.is_empty() {
                let (grads, l) = net.backward(&batch)?;
                opt.step(&mut net, &grads);
                loss = l;
            }
        }
        if !loss.is_finite() || !net.params().max_abs().is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at episode {episode}"
            )));
        }

        let mut validation = None;
        if episode % cfg.target_update_interval == 0 || episode == cfg.episodes {
            let v = evaluate_checkpoint(&net, &suite, setup, cfg.validation_seed)?;
            if episode % cfg.target_update_interval == 0 {
                target = net.clone();
                if let Some(o) = out {
                    o.write(
                        &checkpoint_name(episode),
                        net.to_checkpoint_string().as_bytes(),
                    )?;
                }
            }
            failing = if v.success_rate < cfg.divergence_success_rate {
                failing + 1
            } else {
                0
            };
            if reached_threshold.is_none() && cfg.stop_at.is_some_and(|s| v.correct_side_rate >= s)
            {
                reached_threshold = Some(episode);
            }
            validation = Some(v);
        }

        let record = LogRecord {
            episode,
            n_agents: p,
            epsilon,
            loss,
            good: sets.good.len(),
            bad: sets.bad.len(),
            rollout_success_rate: arrived as f64 / agents as f64,
            rollout_collision_rate: collided as f64 / agents as f64,
            validation,
        };
        let wall = started.elapsed().as_secs_f64();
        if let Some(o) = out {
            o.append_line(
                LOG_FILE,
                &serde_json::to_string(&record).expect("log serializes"),
            )?;
            o.append_line(
                TIMING_FILE,
                &format!("{{\"episode\":{episode},\"wall_time\":{wall}}}"),
            )?;
        }
        log.push(record);
        wall_times.push(wall);

        if failing >= cfg.divergence_patience {
            return Err(Error::Divergence(format!(
                "validation success below {} for {} consecutive evaluations at episode {episode}",
                cfg.divergence_success_rate, cfg.divergence_patience
            )));
        }
        if reached_threshold.is_some() {
            break;
        }
    }

    if let Some(o) = out {
        o.write(FINAL_CHECKPOINT, net.to_checkpoint_string().as_bytes())?;
    }
    Ok(TrainReport {
        net,
        initial,
        log,
        wall_times,
        bootstrap_mse,
        reached_threshold,
    })
}
