//! Agent motion: travel to random floor points with gaze locked on the
//! active display, then a head-rotation bout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chamber::{ChamberSpec, Wall};
use crate::error::{Result, SimError};
use crate::geometry::{vec3, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub fps: f64,
    pub speed: f64,
    pub agent_height: f64,
    pub agent_length: f64,
    pub rotation_seconds: f64,
    pub resample_seconds: f64,
    pub max_head_deg: f64,
    pub max_angular_velocity_deg_s: f64,
    /// Minimum distance kept between the agent and either display wall.
    pub display_clearance: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            fps: 10.0,
            speed: 1.5,
            agent_height: 3.5,
            agent_length: 1.2,
            rotation_seconds: 9.5,
            resample_seconds: 0.5,
            max_head_deg: 60.0,
            max_angular_velocity_deg_s: 60.0,
            display_clearance: 8.0,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self, chamber: &ChamberSpec) -> Result<()> {
        let positive = [
            self.fps,
            self.speed,
            self.agent_height,
            self.agent_length,
            self.rotation_seconds,
            self.resample_seconds,
            self.max_head_deg,
            self.max_angular_velocity_deg_s,
        ];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(SimError::Config("motion parameters must be positive".into()));
        }
        if self.max_head_deg > 60.0 {
            return Err(SimError::Config("head rotation is limited to ±60°".into()));
        }
        if 2.0 * self.display_clearance >= chamber.length || 2.0 * self.agent_length >= chamber.width {
            return Err(SimError::Config("no reachable floor area".into()));
        }
        if self.agent_height >= chamber.height {
            return Err(SimError::Config("agent taller than the chamber".into()));
        }
        Ok(())
    }

    pub fn step_length(&self) -> f64 {
        self.speed / self.fps
    }

    pub fn max_head_step(&self) -> f64 {
        self.max_angular_velocity_deg_s / self.fps
    }

    pub fn rotation_frames(&self) -> usize {
        (self.rotation_seconds * self.fps).round() as usize
    }

    fn resample_frames(&self) -> usize {
        ((self.resample_seconds * self.fps).round() as usize).max(1)
    }

    /// Axis-aligned floor region the agent may occupy: `(min, max)` corners.
    pub fn reachable(&self, chamber: &ChamberSpec) -> ([f64; 2], [f64; 2]) {
        let m = self.agent_length;
        (
            [self.display_clearance, m],
            [chamber.length - self.display_clearance, chamber.width - m],
        )
    }
}

/// Pose of the agent at one instant.
///
/// `heading_deg` and `gaze_pitch_deg` aim the head at the active display
/// (the neutral pose); the three head angles are offsets from it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading_deg: f64,
    pub gaze_pitch_deg: f64,
    pub head_tilt_deg: f64,
    pub head_yaw_deg: f64,
    pub head_roll_deg: f64,
    /// True during a head-rotation bout, false while travelling.
    pub rotating: bool,
}

impl AgentState {
    /// Neutral pose at `(x, y)` facing the display on `wall`.
    pub fn facing(chamber: &ChamberSpec, motion: &MotionConfig, wall: Wall, x: f64, y: f64) -> Self {
        let target = chamber.display_center(wall);
        let dx = target.x - x;
        let dy = target.y - y;
        let horiz = (dx * dx + dy * dy).sqrt();
        Self {
            x,
            y,
            heading_deg: dy.atan2(dx).to_degrees(),
            gaze_pitch_deg: (target.z - motion.agent_height).atan2(horiz).to_degrees(),
            head_tilt_deg: 0.0,
            head_yaw_deg: 0.0,
            head_roll_deg: 0.0,
            rotating: false,
        }
    }

    pub fn eye(&self, motion: &MotionConfig) -> Vec3 {
        vec3(self.x, self.y, motion.agent_height)
    }

    pub fn head_angles(&self) -> [f64; 3] {
        [self.head_tilt_deg, self.head_yaw_deg, self.head_roll_deg]
    }

    pub fn is_valid(&self, chamber: &ChamberSpec, motion: &MotionConfig) -> bool {
        let eps = 1e-9;
        self.x >= -eps
            && self.x <= chamber.length + eps
            && self.y >= -eps
            && self.y <= chamber.width + eps
            && self
                .head_angles()
                .iter()
                .all(|a| a.abs() <= motion.max_head_deg + eps)
    }
}

/// Stateful generator of travel and head-rotation segments.
pub struct TrajectoryPlanner<'a> {
    chamber: &'a ChamberSpec,
    motion: &'a MotionConfig,
    wall: Wall,
    rng: ChaCha8Rng,
    state: AgentState,
}

impl<'a> TrajectoryPlanner<'a> {
    pub fn new(chamber: &'a ChamberSpec, motion: &'a MotionConfig, wall: Wall, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = motion.reachable(chamber);
        let x = rng.gen_range(lo[0]..=hi[0]);
        let y = rng.gen_range(lo[1]..=hi[1]);
        let state = AgentState::facing(chamber, motion, wall, x, y);
        Self {
            chamber,
            motion,
            wall,
            rng,
            state,
        }
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn sample_target(&mut self) -> [f64; 2] {
        let (lo, hi) = self.motion.reachable(self.chamber);
        [
            self.rng.gen_range(lo[0]..=hi[0]),
            self.rng.gen_range(lo[1]..=hi[1]),
        ]
    }

    /// Straight-line travel to `target`, one pose per frame. Head offsets
    /// relax back to neutral at the maximum angular rate.
    pub fn travel(&mut self, target: [f64; 2]) -> Vec<AgentState> {
        let step = self.motion.step_length();
        let max_turn = self.motion.max_head_step();
        let mut poses = Vec::new();
        loop {
            let dx = target[0] - self.state.x;
            let dy = target[1] - self.state.y;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= 1e-12 {
                break;
            }
            let advance = step.min(dist);
            let (x, y) = if advance >= dist {
                (target[0], target[1])
            } else {
                (self.state.x + dx / dist * advance, self.state.y + dy / dist * advance)
            };
            let mut next = AgentState::facing(self.chamber, self.motion, self.wall, x, y);
            let relax = |a: f64| a - a.clamp(-max_turn, max_turn);
            next.head_tilt_deg = relax(self.state.head_tilt_deg);
            next.head_yaw_deg = relax(self.state.head_yaw_deg);
            next.head_roll_deg = relax(self.state.head_roll_deg);
            self.state = next;
            poses.push(next);
        }
        poses
    }

    /// Random head-rotation bout: piecewise-constant angular velocities
    /// resampled on a fixed cadence, each axis clamped to the head limit.
    pub fn rotate(&mut self) -> Vec<AgentState> {
        let frames = self.motion.rotation_frames();
        let every = self.motion.resample_frames();
        let vmax = self.motion.max_head_step();
        let limit = self.motion.max_head_deg;
        let mut velocity = [0.0; 3];
        let mut poses = Vec::with_capacity(frames);
        for f in 0..frames {
            if f % every == 0 {
                for v in velocity.iter_mut() {
                    *v = self.rng.gen_range(-vmax..=vmax);
                }
            }
            let s = &mut self.state;
            s.head_tilt_deg = (s.head_tilt_deg + velocity[0]).clamp(-limit, limit);
            s.head_yaw_deg = (s.head_yaw_deg + velocity[1]).clamp(-limit, limit);
            s.head_roll_deg = (s.head_roll_deg + velocity[2]).clamp(-limit, limit);
            s.rotating = true;
            poses.push(*s);
        }
        self.state.rotating = false;
        poses
    }

    /// One travel segment toward `target` followed by a rotation bout.
    pub fn cycle(&mut self, target: [f64; 2]) -> Vec<AgentState> {
        let mut poses = self.travel(target);
        poses.extend(self.rotate());
        poses
    }
}

/// Poses sampled at the configured frame rate for `duration_s` seconds.
pub fn sample_trajectory(
    chamber: &ChamberSpec,
    motion: &MotionConfig,
    wall: Wall,
    seed: u64,
    duration_s: f64,
) -> Result<Vec<AgentState>> {
    if !(duration_s > 0.0) {
        return Err(SimError::Config("trajectory duration must be positive".into()));
    }
    let n = (duration_s * motion.fps).round() as usize;
    let mut planner = TrajectoryPlanner::new(chamber, motion, wall, seed);
    let mut poses = Vec::with_capacity(n + motion.rotation_frames());
    while poses.len() < n {
        let target = planner.sample_target();
        poses.extend(planner.cycle(target));
    }
    poses.truncate(n);
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ChamberSpec, MotionConfig) {
        (ChamberSpec::default(), MotionConfig::default())
    }

    #[test]
    fn zero_length_travel_yields_only_rotation() {
        let (c, m) = setup();
        let mut p = TrajectoryPlanner::new(&c, &m, Wall::Near, 3);
        let here = [p.state().x, p.state().y];
        let poses = p.cycle(here);
        assert_eq!(poses.len(), 95);
        assert!(poses.iter().all(|s| s.rotating));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (c, m) = setup();
        let a = sample_trajectory(&c, &m, Wall::Far, 11, 30.0).unwrap();
        let b = sample_trajectory(&c, &m, Wall::Far, 11, 30.0).unwrap();
        assert_eq!(a, b);
        let other = sample_trajectory(&c, &m, Wall::Far, 12, 30.0).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn sixty_seconds_is_six_hundred_valid_poses() {
        let (c, m) = setup();
        let poses = sample_trajectory(&c, &m, Wall::Near, 5, 60.0).unwrap();
        assert_eq!(poses.len(), 600);
        assert!(poses.iter().all(|s| s.is_valid(&c, &m)));
    }

    #[test]
    fn consecutive_poses_have_bounded_deltas() {
        let (c, m) = setup();
        let poses = sample_trajectory(&c, &m, Wall::Near, 8, 120.0).unwrap();
        for w in poses.windows(2) {
            let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
            assert!(d <= m.step_length() + 1e-9, "travel step {d}");
            for (a, b) in w[0].head_angles().iter().zip(w[1].head_angles()) {
                assert!((a - b).abs() <= m.max_head_step() + 1e-9);
            }
        }
    }

    #[test]
    fn rejects_non_positive_duration() {
        let (c, m) = setup();
        assert!(sample_trajectory(&c, &m, Wall::Near, 1, 0.0).is_err());
    }
}
