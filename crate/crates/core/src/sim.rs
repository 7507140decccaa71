//! Multiagent world stepping, test-case generation and episode rollout.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use glam::DVec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, NeighborObservation};
use crate::error::{Error, Result};
use crate::policy::Policy;

const SAMPLING_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    /// Side length of the square start/goal box (m).
    pub arena: f64,
    /// Episode limit as a multiple of the slowest straight-line time.
    pub t_max_factor: f64,
    pub min_path_length: f64,
    /// Clearance added to the radii when sampling starts and goals (m).
    pub spawn_clearance: f64,
    pub radius_range: (f64, f64),
    pub v_pref_range: (f64, f64),
    /// Distance to goal counted as arrival (m); keep equal to the reward's.
    pub goal_tolerance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            arena: 8.0,
            t_max_factor: 4.0,
            min_path_length: 2.0,
            spawn_clearance: 0.2,
            radius_range: (0.2, 0.5),
            v_pref_range: (0.3, 1.8),
            goal_tolerance: 0.1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.arena > 0.0) || !(self.t_max_factor > 0.0) {
            return Err(Error::Config(
                "sim.dt, sim.arena and sim.t_max_factor must be > 0".into(),
            ));
        }
        let (r0, r1) = self.radius_range;
        let (v0, v1) = self.v_pref_range;
        if !(0.0 < r0 && r0 <= r1) || !(0.0 < v0 && v0 <= v1) {
            return Err(Error::Config(
                "sim radius/v_pref ranges must be positive and ordered".into(),
            ));
        }
        Ok(())
    }
}

/// Moves `agent` for `dt` at `velocity`. Once the step passes within
/// `goal_tolerance` of the goal, the agent homes in on the goal at no more
/// than `v_pref` and arrives exactly on it, so arrival never beats the
/// straight-line time. Returns whether the goal was reached.
pub fn advance(agent: &mut AgentState, velocity: DVec2, dt: f64, goal_tolerance: f64) -> bool {
    let step = velocity * dt;
    let to_goal = agent.goal - agent.position;
    let len2 = step.length_squared();
    let s = if len2 > 0.0 {
        (to_goal.dot(step) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    if (to_goal - step * s).length() <= goal_tolerance {
        let d = to_goal.length();
        if d <= agent.v_pref * dt + 1e-12 {
            agent.position = agent.goal;
            agent.set_velocity(to_goal / dt);
            return true;
        }
        let v = to_goal * (agent.v_pref / d);
        agent.position += v * dt;
        agent.set_velocity(v);
        return false;
    }
    agent.position += step;
    agent.set_velocity(velocity);
    false
}

/// Initial conditions of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub agents: Vec<AgentState>,
    pub arena: f64,
    pub seed: u64,
}

impl TestCase {
    pub fn mirror_x(&self) -> Self {
        Self {
            agents: self.agents.iter().map(AgentState::mirror_x).collect(),
            ..self.clone()
        }
    }

    /// Longest straight-line time to goal at preferred speed.
    pub fn slowest_straight_time(&self) -> f64 {
        self.agents
            .iter()
            .map(|a| a.dist_to_goal() / a.v_pref)
            .fold(0.0, f64::max)
    }

    pub fn is_valid(&self, clearance: f64) -> bool {
        let n = self.agents.len();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&self.agents[i], &self.agents[j]);
                let min = a.radius + b.radius + clearance;
                if (a.position - b.position).length() < min || (a.goal - b.goal).length() < min {
                    return false;
                }
            }
        }
        true
    }
}

fn spread(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Random case with `n_agents` agents. Starts and goals are drawn in the
/// arena box, with pairwise clearance between starts and between goals and
/// a minimum path length.
pub fn random_test_case(n_agents: usize, seed: u64, config: &SimConfig) -> Result<TestCase> {
    if n_agents == 0 {
        return Err(Error::Config("test case needs at least one agent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = config.arena / 2.0;
    let mut agents: Vec<AgentState> = Vec::with_capacity(n_agents);
    let mut attempts = 0;
    while agents.len() < n_agents {
        attempts += 1;
        if attempts > SAMPLING_ATTEMPTS {
            return Err(Error::Data(format!(
                "could not place {n_agents} agents in a {} m arena",
                config.arena
            )));
        }
        let radius = spread(&mut rng, config.radius_range);
        let v_pref = spread(&mut rng, config.v_pref_range);
        let start = DVec2::new(rng.gen_range(-half..=half), rng.gen_range(-half..=half));
        let goal = DVec2::new(rng.gen_range(-half..=half), rng.gen_range(-half..=half));
        if (goal - start).length() < config.min_path_length {
            continue;
        }
        let clear = agents.iter().all(|a| {
            let min = a.radius + radius + config.spawn_clearance;
            (a.position - start).length() >= min && (a.goal - goal).length() >= min
        });
        if clear {
            agents.push(AgentState::new(start, goal, radius, v_pref));
        }
    }
    Ok(TestCase {
        agents,
        arena: config.arena,
        seed,
    })
}

/// Two identical agents swapping positions across a circle.
pub fn swap_case(distance: f64, angle: f64, radius: f64, v_pref: f64, seed: u64) -> TestCase {
    let dir = DVec2::new(angle.cos(), angle.sin()) * (distance / 2.0);
    TestCase {
        agents: vec![
            AgentState::new(-dir, dir, radius, v_pref),
            AgentState::new(dir, -dir, radius, v_pref),
        ],
        arena: distance,
        seed,
    }
}

/// Perfectly symmetric two-agent swaps of varying length, size and speed.
pub fn symmetric_swap_suite(count: usize, seed: u64) -> Vec<TestCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / count as f64;
            let distance = rng.gen_range(6.0..=8.0);
            let radius = rng.gen_range(0.2..=0.5);
            let v_pref = rng.gen_range(0.5..=1.5);
            swap_case(distance, angle, radius, v_pref, seed.wrapping_add(k as u64))
        })
        .collect()
}

/// Per-agent episode outcome. Times are in seconds from the episode start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    ReachedGoal(f64),
    Collided(f64),
    Timeout,
}

impl Outcome {
    pub fn reached(&self) -> bool {
        matches!(self, Outcome::ReachedGoal(_))
    }

    pub fn collided(&self) -> bool {
        matches!(self, Outcome::Collided(_))
    }
}

/// Recorded episode. `states[i]` runs from t = 0 to agent i's last step;
/// `states[i][k]` is the state at time `k * dt`, whose velocity is the one
/// used to get there.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<Vec<AgentState>>,
    pub outcomes: Vec<Outcome>,
}

impl Trajectory {
    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    /// Number of steps until the last agent stopped.
    pub fn steps(&self) -> usize {
        self.states.iter().map(|s| s.len()).max().unwrap_or(1) - 1
    }

    /// What agent `j` looks like to others at step `k`. Agents at their goal
    /// stay visible as static obstacles; collided agents disappear.
    pub fn observation(&self, j: usize, k: usize) -> Option<NeighborObservation> {
        let series = &self.states[j];
        if k < series.len() {
            return Some(series[k].observe());
        }
        match self.outcomes[j] {
            Outcome::ReachedGoal(_) | Outcome::Timeout => {
                let last = series.last()?;
                Some(NeighborObservation {
                    velocity: DVec2::ZERO,
                    ..last.observe()
                })
            }
            Outcome::Collided(_) => None,
        }
    }

    /// Observations of every other agent at step `k`, as seen by agent `i`.
    pub fn others(&self, i: usize, k: usize) -> Vec<NeighborObservation> {
        (0..self.n_agents())
            .filter(|&j| j != i)
            .filter_map(|j| self.observation(j, k))
            .collect()
    }

    pub fn mirror_x(&self) -> Self {
        Self {
            dt: self.dt,
            states: self
                .states
                .iter()
                .map(|s| s.iter().map(AgentState::mirror_x).collect())
                .collect(),
            outcomes: self.outcomes.clone(),
        }
    }

    /// Largest mismatch between recorded positions and the integration of
    /// recorded velocities.
    pub fn kinematic_residual(&self) -> f64 {
        self.states
            .iter()
            .flat_map(|s| {
                s.windows(2)
                    .map(|w| (w[1].position - w[0].position - w[1].velocity * self.dt).length())
            })
            .fold(0.0, f64::max)
    }

    pub fn max_speed_excess(&self) -> f64 {
        self.states
            .iter()
            .flatten()
            .map(|a| a.velocity.length() - a.v_pref)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Agent status during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Active,
    AtGoal,
    Collided,
}

/// Live simulation state.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub agents: Vec<AgentState>,
    pub status: Vec<Status>,
    pub step_count: usize,
    pub dt: f64,
    pub goal_tolerance: f64,
}

impl World {
    pub fn new(case: &TestCase, dt: f64, goal_tolerance: f64) -> Self {
        Self {
            agents: case.agents.clone(),
            status: vec![Status::Active; case.agents.len()],
            step_count: 0,
            dt,
            goal_tolerance,
        }
    }

    pub fn time(&self) -> f64 {
        self.step_count as f64 * self.dt
    }

    pub fn any_active(&self) -> bool {
        self.status.contains(&Status::Active)
    }

    /// What agent `i` can see of everyone else.
    pub fn others(&self, i: usize) -> Vec<NeighborObservation> {
        self.agents
            .iter()
            .zip(&self.status)
            .enumerate()
            .filter(|(j, _)| *j != i)
            .filter_map(|(_, (a, st))| match st {
                Status::Active => Some(a.observe()),
                Status::AtGoal => Some(NeighborObservation {
                    velocity: DVec2::ZERO,
                    ..a.observe()
                }),
                Status::Collided => None,
            })
            .collect()
    }

    /// Integrates one step. `velocities[i]` is ignored for agents that are
    /// not active. Newly arrived and newly collided agents change status;
    /// collision wins over arrival. Returns the agents whose status changed.
    pub fn step(&mut self, velocities: &[DVec2]) -> Vec<usize> {
        let mut arrived = vec![false; self.agents.len()];
        for (i, agent) in self.agents.iter_mut().enumerate() {
            if self.status[i] == Status::Active {
                arrived[i] = advance(agent, velocities[i], self.dt, self.goal_tolerance);
            }
        }
        self.step_count += 1;

        let present: Vec<usize> = (0..self.agents.len())
            .filter(|&i| self.status[i] != Status::Collided)
            .collect();
        let mut collided = vec![false; self.agents.len()];
        for (a, b) in detect_collision(&self.agents, &present) {
            for i in [a, b] {
                if self.status[i] == Status::Active {
                    collided[i] = true;
                }
            }
        }
        let mut changed = Vec::new();
        for i in 0..self.agents.len() {
            if collided[i] {
                self.status[i] = Status::Collided;
                changed.push(i);
            } else if arrived[i] {
                self.status[i] = Status::AtGoal;
                changed.push(i);
            }
        }
        changed
    }
}

/// Pairs among `present` whose disks overlap; touching disks do not count.
pub fn detect_collision(agents: &[AgentState], present: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (x, &i) in present.iter().enumerate() {
        for &j in &present[x + 1..] {
            let (a, b) = (&agents[i], &agents[j]);
            if (a.position - b.position).length() < a.radius + b.radius {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Runs one decentralized episode: each agent acts on its own observation
/// with its own policy. The episode stops when no agent is active or after
/// `t_max_factor` times the slowest straight-line time.
pub fn rollout(
    policies: &[&dyn Policy],
    case: &TestCase,
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let n = case.agents.len();
    if policies.len() != n {
        return Err(Error::Data(format!(
            "{} policies for {n} agents",
            policies.len()
        )));
    }
    let t_max = config.t_max_factor * case.slowest_straight_time();
    let max_steps = (t_max / config.dt).ceil().max(1.0) as usize;
    let mut world = World::new(case, config.dt, config.goal_tolerance);
    let mut states: Vec<Vec<AgentState>> = case.agents.iter().map(|a| vec![*a]).collect();
    let mut outcomes = vec![Outcome::Timeout; n];
    let mut velocities = vec![DVec2::ZERO; n];

    while world.any_active() && world.step_count < max_steps {
        for i in 0..n {
            if world.status[i] == Status::Active {
                let others = world.others(i);
                velocities[i] = policies[i].act(&world.agents[i], &others, rng)?;
            }
        }
        let was_active: Vec<bool> = world.status.iter().map(|s| *s == Status::Active).collect();
        world.step(&velocities);
        let t = world.time();
        for i in 0..n {
            if !was_active[i] {
                continue;
            }
            states[i].push(world.agents[i]);
            match world.status[i] {
                Status::AtGoal => outcomes[i] = Outcome::ReachedGoal(t),
                Status::Collided => outcomes[i] = Outcome::Collided(t),
                Status::Active => {}
            }
        }
    }
    Ok(Trajectory {
        dt: config.dt,
        states,
        outcomes,
    })
}

/// Same policy for every agent.
pub fn rollout_shared(
    policy: &dyn Policy,
    case: &TestCase,
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let policies = vec![policy; case.agents.len()];
    rollout(&policies, case, config, rng)
}

// ---- file formats -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    px: f64,
    py: f64,
    gx: f64,
    gy: f64,
    radius: f64,
    v_pref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseRecord {
    seed: u64,
    arena: f64,
    agents: Vec<AgentRecord>,
}

/// One test case per line.
pub fn write_cases(path: impl AsRef<Path>, cases: &[TestCase]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for c in cases {
        let rec = CaseRecord {
            seed: c.seed,
            arena: c.arena,
            agents: c
                .agents
                .iter()
                .map(|a| AgentRecord {
                    px: a.position.x,
                    py: a.position.y,
                    gx: a.goal.x,
                    gy: a.goal.y,
                    radius: a.radius,
                    v_pref: a.v_pref,
                })
                .collect(),
        };
        out += &serde_json::to_string(&rec).expect("case serializes");
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_cases(path: impl AsRef<Path>) -> Result<Vec<TestCase>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let rec: CaseRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            let agents: Vec<AgentState> = rec
                .agents
                .iter()
                .map(|a| {
                    AgentState::new(
                        DVec2::new(a.px, a.py),
                        DVec2::new(a.gx, a.gy),
                        a.radius,
                        a.v_pref,
                    )
                })
                .collect();
            if agents
                .iter()
                .any(|a| !(a.radius > 0.0) || !(a.v_pref > 0.0))
            {
                return Err(Error::Data(format!(
                    "{}:{}: radius and v_pref must be positive",
                    path.display(),
                    n + 1
                )));
            }
            Ok(TestCase {
                agents,
                arena: rec.arena,
                seed: rec.seed,
            })
        })
        .collect()
}

/// Line-delimited trajectory records. The key order of each record kind is
/// fixed by the field order below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum TrajectoryRecord {
    Header(HeaderRecord),
    State(StateRecord),
    Outcome(OutcomeRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    episode: usize,
    dt: f64,
    agents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    episode: usize,
    t: f64,
    agent_id: usize,
    px: f64,
    py: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    gx: f64,
    gy: f64,
    v_pref: f64,
    heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutcomeRecord {
    episode: usize,
    agent_id: usize,
    outcome: String,
    t: Option<f64>,
}

/// Writes episodes in order: a header per episode, its state records
/// ordered by time then agent, then one outcome record per agent.
pub fn write_trajectories<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    let io = |e| Error::io("<trajectory output>", e);
    for (episode, traj) in trajectories.iter().enumerate() {
        let mut lines = vec![TrajectoryRecord::Header(HeaderRecord {
            episode,
            dt: traj.dt,
            agents: traj.n_agents(),
        })];
        for k in 0..=traj.steps() {
            for (agent_id, series) in traj.states.iter().enumerate() {
                if let Some(a) = series.get(k) {
                    lines.push(TrajectoryRecord::State(StateRecord {
                        episode,
                        t: k as f64 * traj.dt,
                        agent_id,
                        px: a.position.x,
                        py: a.position.y,
                        vx: a.velocity.x,
                        vy: a.velocity.y,
                        radius: a.radius,
                        gx: a.goal.x,
                        gy: a.goal.y,
                        v_pref: a.v_pref,
                        heading: a.heading,
                    }));
                }
            }
        }
        for (agent_id, o) in traj.outcomes.iter().enumerate() {
            let (outcome, t) = match o {
                Outcome::ReachedGoal(t) => ("reached_goal", Some(*t)),
                Outcome::Collided(t) => ("collided", Some(*t)),
                Outcome::Timeout => ("timeout", None),
            };
            lines.push(TrajectoryRecord::Outcome(OutcomeRecord {
                episode,
                agent_id,
                outcome: outcome.to_string(),
                t,
            }));
        }
        for line in lines {
            serde_json::to_writer(&mut out, &line).expect("record serializes");
            out.write_all(b"\n").map_err(io)?;
        }
    }
    Ok(())
}

pub fn save_trajectories(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_trajectories(&mut buf, trajectories)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trajectory input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Data(format!("trajectory line {}: {msg}", n + 1));
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
        match rec {
            TrajectoryRecord::Header(h) => {
                if h.episode != out.len() {
                    return Err(bad("episodes out of order"));
                }
                out.push(Trajectory {
                    dt: h.dt,
                    states: vec![Vec::new(); h.agents],
                    outcomes: vec![Outcome::Timeout; h.agents],
                });
            }
            TrajectoryRecord::State(s) => {
                let traj = out
                    .get_mut(s.episode)
                    .ok_or_else(|| bad("state before header"))?;
                let series = traj
                    .states
                    .get_mut(s.agent_id)
                    .ok_or_else(|| bad("unknown agent"))?;
                let k = (s.t / traj.dt).round() as usize;
                if k != series.len() {
                    return Err(bad("state records out of order"));
                }
                series.push(AgentState {
                    position: DVec2::new(s.px, s.py),
                    velocity: DVec2::new(s.vx, s.vy),
                    radius: s.radius,
                    goal: DVec2::new(s.gx, s.gy),
                    v_pref: s.v_pref,
                    heading: s.heading,
                });
            }
            TrajectoryRecord::Outcome(o) => {
                let traj = out
                    .get_mut(o.episode)
                    .ok_or_else(|| bad("outcome before header"))?;
                let slot = traj
                    .outcomes
                    .get_mut(o.agent_id)
                    .ok_or_else(|| bad("unknown agent"))?;
                *slot = match (o.outcome.as_str(), o.t) {
                    ("reached_goal", Some(t)) => Outcome::ReachedGoal(t),
                    ("collided", Some(t)) => Outcome::Collided(t),
                    ("timeout", None) => Outcome::Timeout,
                    _ => return Err(bad("malformed outcome")),
                };
            }
        }
    }
    Ok(out)
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectories(BufReader::new(file))
}
