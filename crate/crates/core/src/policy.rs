//! Action selection by one-step lookahead on the value network.

use std::f64::consts::FRAC_PI_3;

use glam::DVec2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    observe_joint_state, to_local_frame, AgentState, LocalFrame, LocalJointState,
    NeighborObservation,
};
use crate::error::{Error, Result};
use crate::rewards::RewardConfig;
use crate::sim::advance;
use crate::value_net::ValueNetwork;

/// A commanded velocity: a fraction of the preferred speed and a turn
/// relative to the current heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub speed: f64,
    pub heading_offset: f64,
}

impl Action {
    pub const STOP: Action = Action {
        speed: 0.0,
        heading_offset: 0.0,
    };

    /// World-frame velocity this action commands for `agent`.
    pub fn velocity(&self, agent: &AgentState) -> DVec2 {
        let heading = agent.heading + self.heading_offset;
        DVec2::new(heading.cos(), heading.sin()) * (self.speed * agent.v_pref)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub gamma: f64,
    /// Horizon of the one-step lookahead (s).
    pub dt_lookahead: f64,
    pub epsilon: f64,
    /// Speed multipliers of `v_pref`; a zero entry yields a single stop action.
    pub speeds: Vec<f64>,
    pub n_headings: usize,
    pub max_heading_offset: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            gamma: 0.97,
            dt_lookahead: 1.0,
            epsilon: 0.0,
            speeds: vec![0.0, 0.5, 1.0],
            n_headings: 11,
            max_heading_offset: FRAC_PI_3,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("policy.gamma must be in [0, 1)".into()));
        }
        if !(self.dt_lookahead > 0.0) {
            return Err(Error::Config("policy.dt_lookahead must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("policy.epsilon must be in [0, 1]".into()));
        }
        if self.speeds.is_empty() || self.speeds.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config(
                "policy.speeds must be non-empty fractions in [0, 1]".into(),
            ));
        }
        if self.n_headings == 0 || !(self.max_heading_offset >= 0.0) {
            return Err(Error::Config("policy heading grid is empty".into()));
        }
        Ok(())
    }

    /// Heading offsets evenly spaced over `[-max, max]`.
    pub fn heading_offsets(&self) -> Vec<f64> {
        if self.n_headings == 1 {
            return vec![0.0];
        }
        let n = self.n_headings - 1;
        (0..=n)
            .map(|i| {
                // exact negation pairs regardless of rounding
                let k = 2 * i as i64 - n as i64;
                self.max_heading_offset * k as f64 / n as f64
            })
            .collect()
    }
}

/// The discrete action set: one stop action, then every nonzero speed at
/// every heading offset.
pub fn action_space(config: &PolicyConfig) -> Vec<Action> {
    let offsets = config.heading_offsets();
    let mut actions = Vec::with_capacity(1 + offsets.len() * config.speeds.len());
    if config.speeds.iter().any(|&s| s == 0.0) {
        actions.push(Action::STOP);
    }
    for &heading_offset in &offsets {
        for &speed in config.speeds.iter().filter(|&&s| s > 0.0) {
            actions.push(Action {
                speed,
                heading_offset,
            });
        }
    }
    actions
}

/// Stand-in world where the local frame is the world frame.
fn local_world(s: &LocalJointState) -> (AgentState, Vec<NeighborObservation>) {
    let own = AgentState {
        position: DVec2::ZERO,
        velocity: s.own.velocity,
        radius: s.own.radius,
        goal: DVec2::new(s.own.dist_to_goal, 0.0),
        v_pref: s.own.v_pref,
        heading: s.own.heading,
    };
    let neighbors = s
        .neighbors
        .iter()
        .map(|n| NeighborObservation {
            position: n.position,
            velocity: n.velocity,
            radius: n.radius,
            on: n.on,
        })
        .collect();
    (own, neighbors)
}

/// Predicted joint state after executing `action` for `dt`: the agent moves
/// kinematically, neighbors keep their observed velocities, and the frame
/// is re-aimed at the goal.
pub fn propagate(
    s: &LocalJointState,
    action: &Action,
    dt: f64,
    goal_tolerance: f64,
) -> LocalJointState {
    let (mut own, mut neighbors) = local_world(s);
    let velocity = action.velocity(&own);
    advance(&mut own, velocity, dt, goal_tolerance);
    for n in &mut neighbors {
        n.position += n.velocity * dt;
    }
    let mut next = to_local_frame(&own, &neighbors);
    next.frame = LocalFrame {
        origin: s.frame.point_to_world(next.frame.origin),
        angle: s.frame.angle_to_world(next.frame.angle),
    };
    next
}

/// Smallest disk separation to any real neighbor while both move at
/// constant velocity over `[0, dt]`.
fn swept_min_gap(s: &LocalJointState, own_velocity: DVec2, dt: f64) -> Option<f64> {
    s.neighbors
        .iter()
        .filter(|n| n.on)
        .map(|n| {
            let v = n.velocity - own_velocity;
            let vv = v.length_squared();
            let t = if vv > 0.0 {
                (-n.position.dot(v) / vv).clamp(0.0, dt)
            } else {
                0.0
            };
            (n.position + v * t).length() - s.own.radius - n.radius
        })
        .min_by(f64::total_cmp)
}

/// Earliest time in `[0, dt]` at which the agent, moving at `own_velocity`,
/// first overlaps a real neighbor moving at constant velocity.
fn first_contact(s: &LocalJointState, own_velocity: DVec2, dt: f64) -> Option<f64> {
    s.neighbors
        .iter()
        .filter(|n| n.on)
        .filter_map(|n| {
            let p = n.position;
            let v = n.velocity - own_velocity;
            let reach = s.own.radius + n.radius;
            let c = p.length_squared() - reach * reach;
            if c < 0.0 {
                return Some(0.0);
            }
            let a = v.length_squared();
            let b = p.dot(v);
            let disc = b * b - a * c;
            if a == 0.0 || b >= 0.0 || disc <= 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            (t <= dt).then_some(t)
        })
        .min_by(f64::total_cmp)
}

/// Lookahead score of every action: reward of the predicted state plus its
/// discounted value, with the discount exponent scaled by `v_pref`. An
/// action whose sweep over the lookahead hits a neighbor ends there and
/// scores the collision penalty discounted to the time of contact; the
/// proximity penalty uses the closest approach over the sweep.
pub fn score_actions(
    net: &ValueNetwork,
    s: &LocalJointState,
    actions: &[Action],
    config: &PolicyConfig,
    rewards: &RewardConfig,
) -> Result<Vec<f64>> {
    let discount = config.gamma.powf(config.dt_lookahead * s.own.v_pref);
    let (own, _) = local_world(s);
    actions
        .iter()
        .map(|a| {
            let velocity = a.velocity(&own);
            if let Some(t) = first_contact(s, velocity, config.dt_lookahead) {
                return Ok(rewards.collision_penalty * config.gamma.powf(t * s.own.v_pref));
            }
            let next = propagate(s, a, config.dt_lookahead, rewards.goal_tolerance);
            let gap = swept_min_gap(s, velocity, config.dt_lookahead);
            let reward =
                rewards.collision_reward_with_gap(&next, gap) + rewards.norm_penalty(&next);
            Ok(reward + discount * net.value(&next)?)
        })
        .collect()
}

/// Whether `a` wins a tie against `b`: smaller turn, then higher speed.
fn tie_preferred(a: &Action, b: &Action) -> bool {
    let (ta, tb) = (a.heading_offset.abs(), b.heading_offset.abs());
    if ta != tb {
        return ta < tb;
    }
    a.speed > b.speed
}

/// Index of the best-scoring action under the tie-breaking rule; the first
/// such action in list order when still tied.
pub fn greedy_index(actions: &[Action], scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..actions.len() {
        if scores[i] > scores[best]
            || (scores[i] == scores[best] && tie_preferred(&actions[i], &actions[best]))
        {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy one-step lookahead.
pub fn select_action(
    net: &ValueNetwork,
    s: &LocalJointState,
    config: &PolicyConfig,
    rewards: &RewardConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Action> {
    let actions = action_space(config);
    let explore: f64 = rng.gen();
    if explore < config.epsilon {
        return Ok(actions[rng.gen_range(0..actions.len())]);
    }
    let scores = score_actions(net, s, &actions, config, rewards)?;
    Ok(actions[greedy_index(&actions, &scores)])
}

/// Decision rule of one agent, given everything it can observe.
pub trait Policy: Sync {
    /// World-frame velocity command.
    fn act(
        &self,
        agent: &AgentState,
        others: &[NeighborObservation],
        rng: &mut ChaCha8Rng,
    ) -> Result<DVec2>;
}

/// Greedy lookahead on a frozen value network.
#[derive(Debug, Clone)]
pub struct ValuePolicy<'a> {
    pub net: &'a ValueNetwork,
    pub config: PolicyConfig,
    pub rewards: RewardConfig,
}

impl<'a> ValuePolicy<'a> {
    pub fn new(net: &'a ValueNetwork, config: PolicyConfig, rewards: RewardConfig) -> Self {
        Self {
            net,
            config,
            rewards,
        }
    }
}

impl Policy for ValuePolicy<'_> {
    fn act(
        &self,
        agent: &AgentState,
        others: &[NeighborObservation],
        rng: &mut ChaCha8Rng,
    ) -> Result<DVec2> {
        let s = observe_joint_state(agent, others, self.net.n_agents());
        let action = select_action(self.net, &s, &self.config, &self.rewards, rng)?;
        Ok(action.velocity(agent))
    }
}
