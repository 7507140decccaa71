//! Agent states, the goal-aligned local frame, virtual-agent padding and
//! x-axis mirroring.

use std::f64::consts::PI;

use glam::DVec2;
use serde::{Deserialize, Serialize};

/// Neighbors farther than this (center to center) are not observed.
pub const PERCEPTION_RANGE: f64 = 10.0;

/// Number of features describing the agent itself in a joint state.
pub const OWN_DIM: usize = 6;
/// Number of features describing one neighbor in a joint state.
pub const NEIGHBOR_DIM: usize = 8;

/// Wraps an angle into `[-PI, PI]`. Values already inside the interval,
/// including both endpoints, are returned untouched.
pub fn wrap_angle(angle: f64) -> f64 {
    if (-PI..=PI).contains(&angle) {
        return angle;
    }
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped < -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    }
}

fn rotate(v: DVec2, angle: f64) -> DVec2 {
    let (s, c) = angle.sin_cos();
    DVec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Which family of social norms a reward or classifier refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormRuleSide {
    #[default]
    None,
    LeftHanded,
    RightHanded,
}

impl NormRuleSide {
    pub fn mirrored(self) -> Self {
        match self {
            NormRuleSide::None => NormRuleSide::None,
            NormRuleSide::LeftHanded => NormRuleSide::RightHanded,
            NormRuleSide::RightHanded => NormRuleSide::LeftHanded,
        }
    }
}

/// Full world-frame state of one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub position: DVec2,
    pub velocity: DVec2,
    pub radius: f64,
    pub goal: DVec2,
    pub v_pref: f64,
    /// Heading in radians, wrapped to `[-PI, PI]`.
    pub heading: f64,
}

impl AgentState {
    pub fn new(position: DVec2, goal: DVec2, radius: f64, v_pref: f64) -> Self {
        let to_goal = goal - position;
        let heading = if to_goal.length_squared() > 0.0 {
            to_goal.y.atan2(to_goal.x)
        } else {
            0.0
        };
        Self {
            position,
            velocity: DVec2::ZERO,
            radius,
            goal,
            v_pref,
            heading,
        }
    }

    pub fn dist_to_goal(&self) -> f64 {
        (self.goal - self.position).length()
    }

    /// What other agents can see of this one.
    pub fn observe(&self) -> NeighborObservation {
        NeighborObservation {
            position: self.position,
            velocity: self.velocity,
            radius: self.radius,
            on: true,
        }
    }

    /// Sets the velocity and updates the heading; the heading is held when
    /// the velocity is zero.
    pub fn set_velocity(&mut self, velocity: DVec2) {
        self.velocity = velocity;
        if velocity.length_squared() > 0.0 {
            self.heading = velocity.y.atan2(velocity.x);
        }
    }

    pub fn mirror_x(&self) -> Self {
        Self {
            position: flip(self.position),
            velocity: flip(self.velocity),
            radius: self.radius,
            goal: flip(self.goal),
            v_pref: self.v_pref,
            heading: wrap_angle(-self.heading),
        }
    }
}

fn flip(v: DVec2) -> DVec2 {
    DVec2::new(v.x, -v.y)
}

/// Observable part of a nearby agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborObservation {
    pub position: DVec2,
    pub velocity: DVec2,
    pub radius: f64,
    /// `false` only for virtual (padding) agents.
    pub on: bool,
}

impl NeighborObservation {
    pub fn mirror_x(&self) -> Self {
        Self {
            position: flip(self.position),
            velocity: flip(self.velocity),
            ..*self
        }
    }
}

/// Rigid transform from the world frame into an agent's local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: DVec2,
    /// World-frame angle of the local x-axis.
    pub angle: f64,
}

impl LocalFrame {
    pub fn point_to_local(&self, p: DVec2) -> DVec2 {
        rotate(p - self.origin, -self.angle)
    }

    pub fn vector_to_local(&self, v: DVec2) -> DVec2 {
        rotate(v, -self.angle)
    }

    pub fn point_to_world(&self, p: DVec2) -> DVec2 {
        rotate(p, self.angle) + self.origin
    }

    pub fn vector_to_world(&self, v: DVec2) -> DVec2 {
        rotate(v, self.angle)
    }

    pub fn angle_to_local(&self, a: f64) -> f64 {
        wrap_angle(a - self.angle)
    }

    pub fn angle_to_world(&self, a: f64) -> f64 {
        wrap_angle(a + self.angle)
    }
}

/// Own-agent features in the local frame: `[d_g, v_pref, v_x, v_y, psi, r]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OwnFeatures {
    pub dist_to_goal: f64,
    pub v_pref: f64,
    pub velocity: DVec2,
    pub heading: f64,
    pub radius: f64,
}

impl OwnFeatures {
    pub fn to_array(&self) -> [f64; OWN_DIM] {
        [
            self.dist_to_goal,
            self.v_pref,
            self.velocity.x,
            self.velocity.y,
            self.heading,
            self.radius,
        ]
    }
}

/// One neighbor in the local frame:
/// `[p_x, p_y, v_x, v_y, r, d_a, phi, b_on]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborFeatures {
    pub position: DVec2,
    pub velocity: DVec2,
    pub radius: f64,
    /// Center-to-center distance from the agent.
    pub distance: f64,
    /// Heading of the neighbor's velocity in the local frame; 0 when
    /// stationary.
    pub heading: f64,
    pub on: bool,
}

impl NeighborFeatures {
    fn from_local(position: DVec2, velocity: DVec2, radius: f64, on: bool) -> Self {
        Self {
            position,
            velocity,
            radius,
            distance: position.length(),
            heading: if velocity == DVec2::ZERO {
                0.0
            } else {
                velocity.y.atan2(velocity.x)
            },
            on,
        }
    }

    pub fn to_array(&self) -> [f64; NEIGHBOR_DIM] {
        [
            self.position.x,
            self.position.y,
            self.velocity.x,
            self.velocity.y,
            self.radius,
            self.distance,
            self.heading,
            if self.on { 1.0 } else { 0.0 },
        ]
    }

    /// Separation between the two disks (negative when overlapping).
    pub fn gap(&self, own_radius: f64) -> f64 {
        self.distance - own_radius - self.radius
    }
}

/// Rotation-reduced joint state of one agent and its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalJointState {
    pub own: OwnFeatures,
    pub neighbors: Vec<NeighborFeatures>,
    pub frame: LocalFrame,
}

impl LocalJointState {
    /// Flattened network input: own features then every neighbor slot.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(OWN_DIM + NEIGHBOR_DIM * self.neighbors.len());
        self.write_into(&mut out);
        out
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.own.to_array());
        for n in &self.neighbors {
            out.extend_from_slice(&n.to_array());
        }
    }

    /// The nearest neighbor that is a real agent, if any.
    pub fn closest_real(&self) -> Option<&NeighborFeatures> {
        self.neighbors
            .iter()
            .filter(|n| n.on)
            .min_by(|a, b| a.distance.total_cmp(&b.distance))
    }

    pub fn real_count(&self) -> usize {
        self.neighbors.iter().filter(|n| n.on).count()
    }

    /// Reflection of the joint state in the local x-axis. Equal to
    /// transforming the mirrored world state into its own local frame.
    pub fn mirror_x(&self) -> Self {
        Self {
            own: OwnFeatures {
                velocity: flip(self.own.velocity),
                heading: wrap_angle(-self.own.heading),
                ..self.own
            },
            neighbors: self
                .neighbors
                .iter()
                .map(|n| NeighborFeatures {
                    position: flip(n.position),
                    velocity: flip(n.velocity),
                    heading: wrap_angle(-n.heading),
                    ..*n
                })
                .collect(),
            frame: LocalFrame {
                origin: flip(self.frame.origin),
                angle: wrap_angle(-self.frame.angle),
            },
        }
    }
}

/// Frame with the origin at the agent and the x-axis toward its goal. When
/// the agent sits exactly on its goal the heading is used as the x-axis.
pub fn local_frame(agent: &AgentState) -> LocalFrame {
    let to_goal = agent.goal - agent.position;
    let angle = if to_goal.length_squared() > 0.0 {
        to_goal.y.atan2(to_goal.x)
    } else {
        agent.heading
    };
    LocalFrame {
        origin: agent.position,
        angle,
    }
}

/// Expresses the agent and its (real or virtual) neighbors in the agent's
/// goal-aligned frame. The neighbor order is preserved.
pub fn to_local_frame(agent: &AgentState, neighbors: &[NeighborObservation]) -> LocalJointState {
    let frame = local_frame(agent);
    let own = OwnFeatures {
        dist_to_goal: agent.dist_to_goal(),
        v_pref: agent.v_pref,
        velocity: frame.vector_to_local(agent.velocity),
        heading: frame.angle_to_local(agent.heading),
        radius: agent.radius,
    };
    let neighbors = neighbors
        .iter()
        .map(|n| {
            NeighborFeatures::from_local(
                frame.point_to_local(n.position),
                frame.vector_to_local(n.velocity),
                n.radius,
                n.on,
            )
        })
        .collect();
    LocalJointState {
        own,
        neighbors,
        frame,
    }
}

/// Real neighbors within perception range, nearest first.
pub fn perceived_neighbors<'a, I>(agent: &AgentState, others: I) -> Vec<NeighborObservation>
where
    I: IntoIterator<Item = &'a NeighborObservation>,
{
    let mut seen: Vec<NeighborObservation> = others
        .into_iter()
        .filter(|o| (o.position - agent.position).length() <= PERCEPTION_RANGE)
        .copied()
        .collect();
    seen.sort_by(|a, b| {
        let da = (a.position - agent.position).length_squared();
        let db = (b.position - agent.position).length_squared();
        da.total_cmp(&db)
    });
    seen
}

/// Fills the neighbor list up to `slots` entries. Extra entries copy the
/// closest real neighbor with the on-flag cleared. With no real neighbor at
/// all, a static virtual agent is placed behind the agent at the edge of
/// perception range. Real neighbors beyond `slots` are dropped farthest
/// first.
pub fn pad_virtual_agents(local: &LocalJointState, slots: usize) -> LocalJointState {
    let mut out = local.clone();
    if out.neighbors.len() > slots {
        out.neighbors
            .sort_by(|a, b| a.distance.total_cmp(&b.distance));
        out.neighbors.truncate(slots);
    }
    if out.neighbors.len() == slots {
        return out;
    }
    let template = match out.closest_real() {
        Some(n) => NeighborFeatures { on: false, ..*n },
        None => NeighborFeatures::from_local(
            DVec2::new(-PERCEPTION_RANGE, 0.0),
            DVec2::ZERO,
            local.own.radius,
            false,
        ),
    };
    out.neighbors.resize(slots, template);
    out
}

/// Builds the padded joint state an agent feeds to a network with
/// `n_agents` inputs, from the world states of everyone else it can see.
pub fn observe_joint_state(
    agent: &AgentState,
    others: &[NeighborObservation],
    n_agents: usize,
) -> LocalJointState {
    let seen = perceived_neighbors(agent, others);
    let local = to_local_frame(agent, &seen);
    pad_virtual_agents(&local, n_agents.saturating_sub(1).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn agent(p: (f64, f64), g: (f64, f64), v: (f64, f64)) -> AgentState {
        let mut a = AgentState::new(DVec2::new(p.0, p.1), DVec2::new(g.0, g.1), 0.3, 1.0);
        a.set_velocity(DVec2::new(v.0, v.1));
        a
    }

    fn obs(p: (f64, f64), v: (f64, f64)) -> NeighborObservation {
        NeighborObservation {
            position: DVec2::new(p.0, p.1),
            velocity: DVec2::new(v.0, v.1),
            radius: 0.3,
            on: true,
        }
    }

    #[test]
    fn identity_frame_when_goal_on_x_axis() {
        let a = agent((0.0, 0.0), (4.0, 0.0), (1.0, 0.0));
        let s = to_local_frame(&a, &[obs((2.0, 1.0), (-1.0, 0.0))]);
        assert_eq!(s.own.to_array(), [4.0, 1.0, 1.0, 0.0, 0.0, 0.3]);
        let n = s.neighbors[0].to_array();
        let expected = [2.0, 1.0, -1.0, 0.0, 0.3, 5f64.sqrt(), PI, 1.0];
        for (x, e) in n.iter().zip(expected) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotated_goal_matches_rotation_matrix() {
        let a = agent((0.0, 0.0), (0.0, 4.0), (0.0, 1.0));
        let s = to_local_frame(&a, &[obs((1.0, 0.0), (0.0, 0.0))]);
        // rotation by -pi/2: [[cos, -sin], [sin, cos]] with angle -pi/2
        let (c, sn) = ((-PI / 2.0).cos(), (-PI / 2.0).sin());
        let rot = |x: f64, y: f64| (c * x - sn * y, sn * x + c * y);
        let (px, py) = rot(1.0, 0.0);
        let (vx, vy) = rot(0.0, 1.0);
        assert_abs_diff_eq!(s.neighbors[0].position.x, px, epsilon = 1e-12);
        assert_abs_diff_eq!(s.neighbors[0].position.y, py, epsilon = 1e-12);
        assert_abs_diff_eq!(py, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.own.velocity.x, vx, epsilon = 1e-12);
        assert_abs_diff_eq!(s.own.velocity.y, vy, epsilon = 1e-12);
        assert_abs_diff_eq!(s.own.heading, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.own.dist_to_goal, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_goal_uses_heading() {
        let mut a = agent((1.0, 1.0), (1.0, 1.0), (0.0, 0.0));
        a.heading = 0.7;
        let s = to_local_frame(&a, &[obs((2.0, 1.0), (0.0, 0.0))]);
        assert_eq!(s.frame.angle, 0.7);
        assert_eq!(s.own.dist_to_goal, 0.0);
        assert_abs_diff_eq!(s.own.heading, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.neighbors[0].distance, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            s.neighbors[0].position.length(),
            s.neighbors[0].distance,
            epsilon = 1e-12
        );
    }

    #[test]
    fn padding_replicates_closest() {
        let a = agent((0.0, 0.0), (5.0, 0.0), (1.0, 0.0));
        let one = to_local_frame(&a, &[obs((2.0, 1.0), (-1.0, 0.0))]);
        let padded = pad_virtual_agents(&one, 3);
        assert_eq!(padded.neighbors.len(), 3);
        assert_eq!(padded.neighbors[0], one.neighbors[0]);
        for n in &padded.neighbors[1..] {
            assert_eq!(
                *n,
                NeighborFeatures {
                    on: false,
                    ..one.neighbors[0]
                }
            );
        }

        let two = to_local_frame(
            &a,
            &[obs((0.0, 2.5), (0.0, 0.0)), obs((1.0, 0.0), (0.0, 0.0))],
        );
        let padded = pad_virtual_agents(&two, 3);
        assert_eq!(padded.neighbors[2].distance, 1.0);
        assert!(!padded.neighbors[2].on);
        assert_eq!(&padded.neighbors[..2], &two.neighbors[..]);

        let three = to_local_frame(
            &a,
            &[
                obs((0.0, 2.5), (0.0, 0.0)),
                obs((1.0, 0.0), (0.0, 0.0)),
                obs((3.0, 0.0), (0.0, 0.0)),
            ],
        );
        assert_eq!(pad_virtual_agents(&three, 3), three);
    }

    #[test]
    fn padding_without_neighbors_places_far_virtual_agent() {
        let a = agent((0.0, 0.0), (5.0, 0.0), (1.0, 0.0));
        let none = to_local_frame(&a, &[]);
        let padded = pad_virtual_agents(&none, 2);
        assert_eq!(padded.neighbors.len(), 2);
        for n in &padded.neighbors {
            assert!(!n.on);
            assert!(n.distance >= PERCEPTION_RANGE);
            assert!(n.position.x < 0.0);
        }
    }

    #[test]
    fn out_of_range_neighbors_are_dropped() {
        let a = agent((0.0, 0.0), (5.0, 0.0), (1.0, 0.0));
        let s = observe_joint_state(
            &a,
            &[obs((11.0, 0.0), (0.0, 0.0)), obs((3.0, 0.0), (0.0, 0.0))],
            4,
        );
        assert_eq!(s.real_count(), 1);
        assert_eq!(s.neighbors.len(), 3);
    }

    #[test]
    fn mirror_world_state() {
        let mut a = agent((1.0, 2.0), (3.0, 3.0), (0.5, -0.5));
        a.heading = -PI / 4.0;
        let m = a.mirror_x();
        assert_eq!(m.position, DVec2::new(1.0, -2.0));
        assert_eq!(m.velocity, DVec2::new(0.5, 0.5));
        assert_eq!(m.heading, PI / 4.0);
        assert_eq!(m.mirror_x(), a);
    }

    #[test]
    fn wrap_angle_keeps_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-5.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(7.0), 7.0 - 2.0 * PI, epsilon = 1e-12);
    }
}
