//! Trajectory metrics: extra time to goal, minimum separation, scenario
//! classes and left/right norm preference.

use std::f64::consts::{FRAC_PI_4, PI};
use std::io::Write;

use glam::DVec2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{observe_joint_state, wrap_angle, AgentState, NormRuleSide};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rewards::in_norm_set;
use crate::sim::{rollout_shared, Outcome, SimConfig, TestCase, Trajectory};

/// Cumulative time in a penalty set above which a trajectory is flagged (s).
pub const VIOLATION_TIME: f64 = 0.5;

/// Arrival time minus the straight-line lower bound, per agent. `None` for
/// agents that never reached their goal.
pub fn extra_times(traj: &Trajectory) -> Vec<Option<f64>> {
    traj.states
        .iter()
        .zip(&traj.outcomes)
        .map(|(series, outcome)| match outcome {
            Outcome::ReachedGoal(t) => {
                let a = &series[0];
                Some(t - a.dist_to_goal() / a.v_pref)
            }
            _ => None,
        })
        .collect()
}

/// Mean extra time over the agents that reached their goals.
pub fn extra_time_to_goal(traj: &Trajectory) -> Option<f64> {
    mean(&extra_times(traj).into_iter().flatten().collect::<Vec<_>>())
}

/// Smallest surface-to-surface distance between any two present agents
/// over the whole episode. `None` with fewer than two agents.
pub fn min_separation(traj: &Trajectory) -> Option<f64> {
    let n = traj.n_agents();
    let mut best: Option<f64> = None;
    for k in 0..=traj.steps() {
        let seen: Vec<_> = (0..n).filter_map(|j| traj.observation(j, k)).collect();
        for (x, a) in seen.iter().enumerate() {
            for b in &seen[x + 1..] {
                let gap = (a.position - b.position).length() - a.radius - b.radius;
                best = Some(best.map_or(gap, |m: f64| m.min(gap)));
            }
        }
    }
    best
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Nearest-rank percentile, `p` in (0, 100].
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioClass {
    Passing,
    Crossing,
    Overtaking,
}

impl ScenarioClass {
    pub const ALL: [ScenarioClass; 3] = [
        ScenarioClass::Passing,
        ScenarioClass::Crossing,
        ScenarioClass::Overtaking,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

fn direction(a: &AgentState) -> DVec2 {
    (a.goal - a.position).normalize_or_zero()
}

/// Whether the straight-line paths of `a` and `b` share lateral space.
fn corridors_overlap(a: &AgentState, b: &AgentState) -> bool {
    let d = direction(a);
    let normal = d.perp();
    let width = a.radius + b.radius;
    let lateral = |p: DVec2| (p - a.position).dot(normal);
    let along = |p: DVec2| (p - a.position).dot(d);
    let (l0, l1) = (lateral(b.position), lateral(b.goal));
    let lateral_hit = l0.abs() < width || l1.abs() < width || l0.signum() != l1.signum();
    let (s0, s1) = (along(b.position), along(b.goal));
    let len = a.dist_to_goal();
    lateral_hit && s0.min(s1) < len && s0.max(s1) > 0.0
}

/// Interaction type of a pair from their initial intended directions.
pub fn classify_scenario(a: &AgentState, b: &AgentState) -> ScenarioClass {
    let ta = (a.goal - a.position).to_angle();
    let tb = (b.goal - b.position).to_angle();
    let diff = wrap_angle(ta - tb).abs();
    if diff > 3.0 * PI / 4.0 {
        ScenarioClass::Passing
    } else if diff < FRAC_PI_4 && a.v_pref != b.v_pref && corridors_overlap(a, b) {
        ScenarioClass::Overtaking
    } else {
        ScenarioClass::Crossing
    }
}

/// Class of a trajectory, taken from the pair that came closest.
pub fn classify_trajectory(traj: &Trajectory) -> Option<ScenarioClass> {
    let n = traj.n_agents();
    if n < 2 {
        return None;
    }
    let mut closest = (f64::INFINITY, 0, 1);
    for i in 0..n {
        for j in i + 1..n {
            for k in 0..=traj.steps() {
                if let (Some(a), Some(b)) = (traj.observation(i, k), traj.observation(j, k)) {
                    let d = (a.position - b.position).length() - a.radius - b.radius;
                    if d < closest.0 {
                        closest = (d, i, j);
                    }
                }
            }
        }
    }
    let (_, i, j) = closest;
    Some(classify_scenario(&traj.states[i][0], &traj.states[j][0]))
}

/// Total time some agent spends in the penalty sets of `side`.
pub fn time_in_norm_set(traj: &Trajectory, side: NormRuleSide) -> f64 {
    let slots = traj.n_agents().max(2);
    let steps = (0..=traj.steps())
        .filter(|&k| {
            (0..traj.n_agents()).any(|i| {
                traj.states[i].get(k).is_some_and(|a| {
                    let s = observe_joint_state(a, &traj.others(i, k), slots);
                    in_norm_set(&s, side)
                })
            })
        })
        .count();
    steps as f64 * traj.dt
}

/// Behavior a trajectory is counted toward. Sitting in the right-handed
/// penalty sets is left-handed behavior and vice versa.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handedness {
    Left,
    Right,
    /// Flagged for both sides.
    Both,
    /// Flagged for neither side.
    Neither,
}

pub fn handedness(traj: &Trajectory) -> Handedness {
    let rh = time_in_norm_set(traj, NormRuleSide::RightHanded) > VIOLATION_TIME;
    let lh = time_in_norm_set(traj, NormRuleSide::LeftHanded) > VIOLATION_TIME;
    match (rh, lh) {
        (true, true) => Handedness::Both,
        (true, false) => Handedness::Left,
        (false, true) => Handedness::Right,
        (false, false) => Handedness::Neither,
    }
}

/// Left/right counts of one scenario class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideSplit {
    pub left: usize,
    pub right: usize,
    pub both: usize,
    pub neither: usize,
}

impl SideSplit {
    pub fn add(&mut self, h: Handedness) {
        match h {
            Handedness::Left => self.left += 1,
            Handedness::Right => self.right += 1,
            Handedness::Both => self.both += 1,
            Handedness::Neither => self.neither += 1,
        }
    }

    /// Percentages over single-flag trajectories; `None` when there are none.
    pub fn percentages(&self) -> Option<(f64, f64)> {
        let total = self.left + self.right;
        if total == 0 {
            return None;
        }
        let left = 100.0 * self.left as f64 / total as f64;
        Some((left, 100.0 - left))
    }
}

/// Per-class splits, indexed by [`ScenarioClass`].
pub fn norm_preference(trajs: &[Trajectory]) -> [SideSplit; 3] {
    let mut out = [SideSplit::default(); 3];
    for t in trajs {
        if let Some(class) = classify_trajectory(t) {
            out[class.index()].add(handedness(t));
        }
    }
    out
}

/// The input followed by its reflection in the x-axis.
pub fn mirrored_test_set(cases: &[TestCase]) -> Vec<TestCase> {
    cases
        .iter()
        .cloned()
        .chain(cases.iter().map(TestCase::mirror_x))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtraTime {
    pub mean: f64,
    pub p75: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub p10: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub trajectories: usize,
    pub agents: usize,
    pub reached: usize,
    pub collided: usize,
    pub timed_out: usize,
    /// Trajectories in which some pair of disks overlapped.
    pub overlapping_trajectories: usize,
}

/// Table-style summary of a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n_agents: usize,
    pub extra_time: Option<ExtraTime>,
    pub min_separation: Option<Separation>,
    pub passing: SideSplit,
    pub crossing: SideSplit,
    pub overtaking: SideSplit,
    pub counts: Counts,
}

impl MetricsReport {
    pub fn from_trajectories(method: &str, trajs: &[Trajectory]) -> Self {
        let te: Vec<f64> = trajs.iter().filter_map(extra_time_to_goal).collect();
        let sep: Vec<f64> = trajs.iter().filter_map(min_separation).collect();
        let mut counts = Counts {
            trajectories: trajs.len(),
            ..Default::default()
        };
        for t in trajs {
            counts.agents += t.n_agents();
            for o in &t.outcomes {
                match o {
                    Outcome::ReachedGoal(_) => counts.reached += 1,
                    Outcome::Collided(_) => counts.collided += 1,
                    Outcome::Timeout => counts.timed_out += 1,
                }
            }
            if min_separation(t).is_some_and(|s| s < 0.0) {
                counts.overlapping_trajectories += 1;
            }
        }
        let [passing, crossing, overtaking] = norm_preference(trajs);
        Self {
            method: method.to_string(),
            n_agents: trajs.iter().map(Trajectory::n_agents).max().unwrap_or(0),
            extra_time: mean(&te).map(|m| ExtraTime {
                mean: m,
                p75: percentile(&te, 75.0).unwrap_or(m),
                p90: percentile(&te, 90.0).unwrap_or(m),
            }),
            min_separation: mean(&sep).map(|m| Separation {
                p10: percentile(&sep, 10.0).unwrap_or(m),
                mean: m,
            }),
            passing,
            crossing,
            overtaking,
            counts,
        }
    }

    pub fn split(&self, class: ScenarioClass) -> &SideSplit {
        match class {
            ScenarioClass::Passing => &self.passing,
            ScenarioClass::Crossing => &self.crossing,
            ScenarioClass::Overtaking => &self.overtaking,
        }
    }
}

pub const CSV_HEADER: &str =
    "method,n_agents,te_avg,te_p75,te_p90,sep_p10,sep_avg,pass_l,pass_r,cross_l,cross_r,ovtk_l,ovtk_r";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

/// Comma-separated table with one row per report. Missing values are `NA`.
pub fn write_metrics_csv<W: Write>(mut out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut text = format!("{CSV_HEADER}\n");
    for r in reports {
        let mut row = vec![
            r.method.clone(),
            r.n_agents.to_string(),
            cell(r.extra_time.map(|e| e.mean)),
            cell(r.extra_time.map(|e| e.p75)),
            cell(r.extra_time.map(|e| e.p90)),
            cell(r.min_separation.map(|s| s.p10)),
            cell(r.min_separation.map(|s| s.mean)),
        ];
        for class in ScenarioClass::ALL {
            let pct = r.split(class).percentages();
            row.push(cell(pct.map(|p| p.0)));
            row.push(cell(pct.map(|p| p.1)));
        }
        text += &row.join(",");
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<metrics output>", e))
}

/// Seed of the rollout for case `index` of a test set.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Rolls out every case with the same policy. Each case has its own RNG
/// stream, so the result does not depend on `workers`.
pub fn run_test_set(
    policy: &dyn Policy,
    cases: &[TestCase],
    sim: &SimConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<Trajectory>> {
    let run = |(i, case): (usize, &TestCase)| {
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(seed, i));
        rollout_shared(policy, case, sim, &mut rng)
    };
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| cases.par_iter().enumerate().map(run).collect())
    } else {
        cases.iter().enumerate().map(run).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentState;
    use approx::assert_abs_diff_eq;

    fn straight(t_goal: f64) -> Trajectory {
        let a = AgentState::new(DVec2::ZERO, DVec2::new(4.0, 0.0), 0.3, 1.0);
        Trajectory {
            dt: 0.1,
            states: vec![vec![a]],
            outcomes: vec![Outcome::ReachedGoal(t_goal)],
        }
    }

    /// Two agents held at fixed positions for `steps` steps.
    fn frozen_pair(p0: DVec2, p1: DVec2, steps: usize) -> Trajectory {
        let a = AgentState::new(p0, p0 + DVec2::new(8.0, 0.0), 0.3, 1.0);
        let b = AgentState::new(p1, p1 - DVec2::new(8.0, 0.0), 0.3, 1.0);
        Trajectory {
            dt: 0.1,
            states: vec![vec![a; steps + 1], vec![b; steps + 1]],
            outcomes: vec![Outcome::Timeout, Outcome::Timeout],
        }
    }

    #[test]
    fn extra_time_examples() {
        assert_abs_diff_eq!(extra_time_to_goal(&straight(4.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(extra_time_to_goal(&straight(5.0)).unwrap(), 1.0);
        let mut t = straight(4.2);
        t.states.push(t.states[0].clone());
        t.outcomes.push(Outcome::ReachedGoal(4.4));
        assert_abs_diff_eq!(extra_time_to_goal(&t).unwrap(), 0.3, epsilon = 1e-12);
        t.outcomes = vec![Outcome::Timeout, Outcome::Collided(1.0)];
        assert_eq!(extra_time_to_goal(&t), None);
    }

    #[test]
    fn separation_examples() {
        let t = frozen_pair(DVec2::ZERO, DVec2::new(0.91, 0.0), 3);
        assert_abs_diff_eq!(min_separation(&t).unwrap(), 0.31, epsilon = 1e-12);
        assert_eq!(min_separation(&straight(4.0)), None);
        let t = frozen_pair(DVec2::ZERO, DVec2::new(0.5, 0.0), 1);
        assert!(min_separation(&t).unwrap() < 0.0);
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 10.0), Some(1.0));
        assert_eq!(percentile(&v, 75.0), Some(8.0));
        assert_eq!(percentile(&v, 90.0), Some(9.0));
        assert_eq!(percentile(&v, 100.0), Some(10.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn scenario_examples() {
        let mk = |p: (f64, f64), g: (f64, f64), v: f64| {
            AgentState::new(DVec2::new(p.0, p.1), DVec2::new(g.0, g.1), 0.3, v)
        };
        assert_eq!(
            classify_scenario(
                &mk((-3.0, 0.0), (3.0, 0.0), 1.0),
                &mk((3.0, 0.0), (-3.0, 0.0), 1.0)
            ),
            ScenarioClass::Passing
        );
        assert_eq!(
            classify_scenario(
                &mk((-3.0, 0.0), (3.0, 0.0), 1.0),
                &mk((0.0, -3.0), (0.0, 3.0), 1.0)
            ),
            ScenarioClass::Crossing
        );
        assert_eq!(
            classify_scenario(
                &mk((-3.0, 0.0), (3.0, 0.0), 1.5),
                &mk((-1.0, 0.0), (4.0, 0.0), 0.6)
            ),
            ScenarioClass::Overtaking
        );
        assert_eq!(
            classify_scenario(
                &mk((-3.0, 0.0), (3.0, 0.0), 1.5),
                &mk((-1.0, 3.0), (4.0, 3.0), 0.6)
            ),
            ScenarioClass::Crossing
        );
    }

    /// Oncoming neighbor 2 m ahead and 1 m to the right, both far from
    /// their goals: inside the right-handed passing set of the first agent.
    fn rh_pass_trajectory(steps: usize) -> Trajectory {
        let mut t = frozen_pair(DVec2::ZERO, DVec2::new(2.0, -1.0), steps);
        for s in &mut t.states[0] {
            s.set_velocity(DVec2::new(1.0, 0.0));
        }
        for s in &mut t.states[1] {
            s.set_velocity(DVec2::new(-1.0, 0.0));
        }
        t
    }

    #[test]
    fn violation_time_threshold() {
        // 7 recorded states = 0.7 s in the set.
        let t = rh_pass_trajectory(6);
        assert_abs_diff_eq!(
            time_in_norm_set(&t, NormRuleSide::RightHanded),
            0.7,
            epsilon = 1e-12
        );
        assert_eq!(time_in_norm_set(&t, NormRuleSide::LeftHanded), 0.0);
        assert_eq!(handedness(&t), Handedness::Left);
        assert_eq!(handedness(&t.mirror_x()), Handedness::Right);
        assert_eq!(handedness(&rh_pass_trajectory(3)), Handedness::Neither);
    }

    #[test]
    fn split_percentages() {
        let s = SideSplit {
            left: 1,
            right: 3,
            both: 2,
            neither: 5,
        };
        assert_eq!(s.percentages(), Some((25.0, 75.0)));
        assert_eq!(SideSplit::default().percentages(), None);
    }

    #[test]
    fn mirrored_set_doubles() {
        let cfg = SimConfig::default();
        let cases: Vec<_> = (0..100)
            .map(|s| crate::sim::random_test_case(2, s, &cfg).unwrap())
            .collect();
        let out = mirrored_test_set(&cases);
        assert_eq!(out.len(), 200);
        for (a, b) in cases.iter().zip(&out[100..]) {
            assert_eq!(&b.mirror_x(), a);
        }
    }

    #[test]
    fn csv_layout() {
        let report = MetricsReport::from_trajectories("rh", &[rh_pass_trajectory(6)]);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[report]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(
            lines.next(),
            Some("rh,2,NA,NA,NA,1.6361,1.6361,100.0000,0.0000,NA,NA,NA,NA")
        );
    }
}
