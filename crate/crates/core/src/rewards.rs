//! Collision/goal reward and the norm-inducing penalty.
//!
//! Every reward here is a per-step quantity evaluated on a joint state in
//! the agent's local frame.

use std::f64::consts::{FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::agent::{wrap_angle, LocalJointState, NeighborFeatures, NormRuleSide};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub goal_reward: f64,
    pub collision_penalty: f64,
    /// Gap below which the proximity penalty starts (m).
    pub proximity_zone: f64,
    pub proximity_penalty_scale: f64,
    /// Distance to goal counted as arrival (m).
    pub goal_tolerance: f64,
    /// Penalty for sitting in a norm-violating configuration.
    pub q_n: f64,
    pub side: NormRuleSide,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            goal_reward: 1.0,
            collision_penalty: -0.25,
            proximity_zone: 0.2,
            proximity_penalty_scale: 0.1,
            goal_tolerance: 0.1,
            q_n: -0.05,
            side: NormRuleSide::None,
        }
    }
}

/// The three norm penalty regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltySet {
    Pass,
    Overtake,
    Cross,
}

impl PenaltySet {
    pub const ALL: [PenaltySet; 3] = [PenaltySet::Pass, PenaltySet::Overtake, PenaltySet::Cross];
}

/// Quantities the penalty sets test, taken relative to one neighbor and
/// reflected in the x-axis for left-handed rules.
struct Relative {
    dist_to_goal: f64,
    px: f64,
    py: f64,
    distance: f64,
    own_speed: f64,
    other_speed: f64,
    /// `phi - psi`, wrapped.
    heading_diff: f64,
    /// Two-argument arctangent of (dvx, dvy), x-difference first.
    phi_rot: f64,
}

impl Relative {
    fn new(s: &LocalJointState, n: &NeighborFeatures, mirror: bool) -> Self {
        let k = if mirror { -1.0 } else { 1.0 };
        let own_v = s.own.velocity;
        let (vy, other_vy) = (k * own_v.y, k * n.velocity.y);
        Self {
            dist_to_goal: s.own.dist_to_goal,
            px: n.position.x,
            py: k * n.position.y,
            distance: n.distance,
            own_speed: own_v.length(),
            other_speed: n.velocity.length(),
            heading_diff: wrap_angle(wrap_angle(k * n.heading) - wrap_angle(k * s.own.heading)),
            phi_rot: {
                // + 0.0 clears negative zeros so a stationary pair is symmetric
                let (dvx, dvy) = (n.velocity.x - own_v.x + 0.0, other_vy - vy + 0.0);
                if dvx == 0.0 && dvy == 0.0 {
                    0.0
                } else {
                    dvx.atan2(dvy)
                }
            },
        }
    }

    fn in_set(&self, which: PenaltySet) -> bool {
        if self.dist_to_goal <= 3.0 {
            return false;
        }
        match which {
            PenaltySet::Pass => {
                1.0 < self.px
                    && self.px < 4.0
                    && -2.0 < self.py
                    && self.py < 0.0
                    && self.heading_diff.abs() > 3.0 * PI / 4.0
            }
            PenaltySet::Overtake => {
                0.0 < self.px
                    && self.px < 3.0
                    && self.own_speed > self.other_speed
                    && 0.0 < self.py
                    && self.py < 1.0
                    && self.heading_diff.abs() < FRAC_PI_4
            }
            PenaltySet::Cross => {
                self.distance < 2.0
                    && self.phi_rot > 0.0
                    && -3.0 * PI / 4.0 < self.heading_diff
                    && self.heading_diff < -FRAC_PI_4
            }
        }
    }
}

/// Whether the joint configuration with `neighbor` lies in a penalty set of
/// the given handedness.
pub fn neighbor_in_penalty_set(
    s: &LocalJointState,
    neighbor: &NeighborFeatures,
    which: PenaltySet,
    side: NormRuleSide,
) -> bool {
    match side {
        NormRuleSide::None => false,
        NormRuleSide::RightHanded => Relative::new(s, neighbor, false).in_set(which),
        NormRuleSide::LeftHanded => Relative::new(s, neighbor, true).in_set(which),
    }
}

/// Penalty-set membership tested against the closest real neighbor.
pub fn in_penalty_set(s: &LocalJointState, which: PenaltySet, side: NormRuleSide) -> bool {
    match s.closest_real() {
        Some(n) => neighbor_in_penalty_set(s, n, which, side),
        None => false,
    }
}

/// Membership in the union of the three sets.
pub fn in_norm_set(s: &LocalJointState, side: NormRuleSide) -> bool {
    PenaltySet::ALL.iter().any(|&w| in_penalty_set(s, w, side))
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.goal_reward > 0.0) {
            return Err(Error::Config("rewards.goal_reward must be > 0".into()));
        }
        if !(self.collision_penalty < 0.0) {
            return Err(Error::Config(
                "rewards.collision_penalty must be < 0".into(),
            ));
        }
        if !(self.q_n <= 0.0) {
            return Err(Error::Config("rewards.q_n must be <= 0".into()));
        }
        if !(self.proximity_zone > 0.0) {
            return Err(Error::Config("rewards.proximity_zone must be > 0".into()));
        }
        if !(self.goal_tolerance >= 0.0) {
            return Err(Error::Config("rewards.goal_tolerance must be >= 0".into()));
        }
        Ok(())
    }

    /// Smallest gap to a real neighbor, if there is one.
    pub fn min_gap(s: &LocalJointState) -> Option<f64> {
        s.neighbors
            .iter()
            .filter(|n| n.on)
            .map(|n| n.gap(s.own.radius))
            .min_by(f64::total_cmp)
    }

    /// Goal and collision reward. Collision takes precedence over goal,
    /// goal over proximity.
    pub fn collision_reward(&self, s: &LocalJointState) -> f64 {
        self.collision_reward_with_gap(s, Self::min_gap(s))
    }

    /// Same as [`Self::collision_reward`] with the separation supplied by
    /// the caller, e.g. a minimum taken over a swept interval.
    pub fn collision_reward_with_gap(&self, s: &LocalJointState, gap: Option<f64>) -> f64 {
        if let Some(g) = gap {
            if g < 0.0 {
                return self.collision_penalty;
            }
        }
        if s.own.dist_to_goal <= self.goal_tolerance {
            return self.goal_reward;
        }
        match gap {
            Some(g) if g < self.proximity_zone => {
                -self.proximity_penalty_scale * (self.proximity_zone - g) / self.proximity_zone
            }
            _ => 0.0,
        }
    }

    pub fn norm_penalty(&self, s: &LocalJointState) -> f64 {
        if in_norm_set(s, self.side) {
            self.q_n
        } else {
            0.0
        }
    }

    pub fn total_reward(&self, s: &LocalJointState) -> f64 {
        self.collision_reward(s) + self.norm_penalty(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{LocalFrame, OwnFeatures};
    use approx::assert_abs_diff_eq;
    use glam::DVec2;

    fn state(d_g: f64, v: DVec2, psi: f64, others: &[(DVec2, DVec2, f64)]) -> LocalJointState {
        LocalJointState {
            own: OwnFeatures {
                dist_to_goal: d_g,
                v_pref: 1.5,
                velocity: v,
                heading: psi,
                radius: 0.3,
            },
            neighbors: others
                .iter()
                .map(|&(p, nv, r)| NeighborFeatures {
                    position: p,
                    velocity: nv,
                    radius: r,
                    distance: p.length(),
                    heading: nv.y.atan2(nv.x),
                    on: true,
                })
                .collect(),
            frame: LocalFrame {
                origin: DVec2::ZERO,
                angle: 0.0,
            },
        }
    }

    /// psi = pi, phi = pi/2 and atan2(dvx, dvy) = 0.3, neighbor straight ahead.
    fn crossing_state(distance: f64) -> LocalJointState {
        let v = DVec2::new(-1.0, 0.0);
        let other = DVec2::new(0.0, 1.0 / 0.3f64.tan());
        state(4.0, v, PI, &[(DVec2::new(distance, 0.0), other, 0.3)])
    }

    fn rh() -> RewardConfig {
        RewardConfig {
            side: NormRuleSide::RightHanded,
            ..Default::default()
        }
    }

    #[test]
    fn collision_reward_cases() {
        let cfg = RewardConfig::default();
        // gap = 0.55 - 0.6 = -0.05
        let s = state(
            5.0,
            DVec2::X,
            0.0,
            &[(DVec2::new(0.55, 0.0), DVec2::ZERO, 0.3)],
        );
        assert_eq!(cfg.collision_reward(&s), -0.25);
        let s = state(
            0.05,
            DVec2::X,
            0.0,
            &[(DVec2::new(3.0, 0.0), DVec2::ZERO, 0.3)],
        );
        assert_eq!(cfg.collision_reward(&s), 1.0);
        let s = state(
            5.0,
            DVec2::X,
            0.0,
            &[(DVec2::new(0.7, 0.0), DVec2::ZERO, 0.3)],
        );
        assert_abs_diff_eq!(cfg.collision_reward(&s), -0.05, epsilon = 1e-12);
        let s = state(
            5.0,
            DVec2::X,
            0.0,
            &[(DVec2::new(0.8, 0.0), DVec2::ZERO, 0.3)],
        );
        assert_eq!(cfg.collision_reward(&s), 0.0);
    }

    #[test]
    fn collision_beats_goal() {
        let s = state(
            0.0,
            DVec2::ZERO,
            0.0,
            &[(DVec2::new(0.3, 0.0), DVec2::ZERO, 0.3)],
        );
        assert_eq!(RewardConfig::default().collision_reward(&s), -0.25);
    }

    #[test]
    fn penalty_set_examples() {
        let s = state(
            5.0,
            DVec2::X,
            0.0,
            &[(DVec2::new(2.0, -1.0), DVec2::new(-1.0, 0.0), 0.3)],
        );
        assert!(in_penalty_set(
            &s,
            PenaltySet::Pass,
            NormRuleSide::RightHanded
        ));
        assert!(!in_penalty_set(
            &s,
            PenaltySet::Pass,
            NormRuleSide::LeftHanded
        ));
        assert!(!in_penalty_set(&s, PenaltySet::Pass, NormRuleSide::None));

        let s = state(
            4.0,
            DVec2::new(1.2, 0.0),
            0.0,
            &[(DVec2::new(1.5, 0.5), DVec2::new(0.8, 0.0), 0.3)],
        );
        assert!(in_penalty_set(
            &s,
            PenaltySet::Overtake,
            NormRuleSide::RightHanded
        ));

        let s = crossing_state(1.5);
        let n = s.neighbors[0];
        assert_abs_diff_eq!(
            wrap_angle(n.heading - s.own.heading),
            -PI / 2.0,
            epsilon = 1e-12
        );
        let phi_rot = (n.velocity.x - s.own.velocity.x).atan2(n.velocity.y - s.own.velocity.y);
        assert_abs_diff_eq!(phi_rot, 0.3, epsilon = 1e-12);
        assert!(in_penalty_set(
            &s,
            PenaltySet::Cross,
            NormRuleSide::RightHanded
        ));

        for which in PenaltySet::ALL {
            let s = state(
                2.0,
                DVec2::X,
                0.0,
                &[(DVec2::new(2.0, -1.0), DVec2::new(-1.0, 0.0), 0.3)],
            );
            assert!(!in_penalty_set(&s, which, NormRuleSide::RightHanded));
            assert!(!in_penalty_set(&s, which, NormRuleSide::LeftHanded));
        }
    }

    #[test]
    fn membership_uses_closest_real_neighbor() {
        let mut s = state(
            5.0,
            DVec2::X,
            0.0,
            &[
                (DVec2::new(3.5, -1.5), DVec2::new(-1.0, 0.0), 0.3),
                (DVec2::new(1.0, 0.9), DVec2::new(0.0, 0.0), 0.3),
            ],
        );
        assert!(!in_penalty_set(
            &s,
            PenaltySet::Pass,
            NormRuleSide::RightHanded
        ));
        s.neighbors[1].on = false;
        assert!(in_penalty_set(
            &s,
            PenaltySet::Pass,
            NormRuleSide::RightHanded
        ));
    }

    #[test]
    fn norm_penalty_and_total() {
        let cfg = rh();
        let s = state(
            5.0,
            DVec2::X,
            0.0,
            &[(DVec2::new(2.0, -1.0), DVec2::new(-1.0, 0.0), 0.3)],
        );
        assert_eq!(cfg.norm_penalty(&s), -0.05);
        assert_eq!(cfg.total_reward(&s), -0.05);
        let lh = RewardConfig {
            side: NormRuleSide::LeftHanded,
            ..cfg
        };
        assert_eq!(lh.norm_penalty(&s.mirror_x()), -0.05);
        assert_eq!(RewardConfig::default().norm_penalty(&s), 0.0);

        let goal = state(
            0.05,
            DVec2::X,
            0.0,
            &[(DVec2::new(-5.0, 0.0), DVec2::ZERO, 0.3)],
        );
        assert_eq!(cfg.total_reward(&goal), 1.0);

        // overlapping neighbor inside the crossing set
        let s = crossing_state(0.5);
        assert!(in_penalty_set(
            &s,
            PenaltySet::Cross,
            NormRuleSide::RightHanded
        ));
        assert_abs_diff_eq!(cfg.total_reward(&s), -0.30, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig {
            q_n: 0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
