//! Small analytic continuous-control tasks.
//!
//! All three environments are deterministic given state and action; the only
//! randomness is the initial state drawn in [`Environment::reset`]. Each one
//! can be put into an arbitrary state reconstructed from an observation,
//! which the Q-value diagnostics rely on.
//!
//! | name                  | obs | act | steps | reward                                  |
//! |-----------------------|-----|-----|-------|-----------------------------------------|
//! | `point_mass`          | 4   | 2   | 250   | 1 inside r=0.05, Gaussian falloff       |
//! | `pendulum_swingup`    | 3   | 1   | 400   | 1 when cos θ ≥ 0.95, else 0             |
//! | `sparse_mountain_car` | 2   | 1   | 1000  | +100 at the goal, −0.1·a² otherwise     |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn clip_action(&self, action: &mut [f64]) {
        for ((a, lo), hi) in action.iter_mut().zip(&self.action_low).zip(&self.action_high) {
            *a = a.clamp(*lo, *hi);
        }
    }

    pub fn contains_action(&self, action: &[f64]) -> bool {
        action.len() == self.action_dim
            && action
                .iter()
                .zip(&self.action_low)
                .zip(&self.action_high)
                .all(|((a, lo), hi)| (*lo..=*hi).contains(a))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// A true terminal state was reached.
    pub terminated: bool,
    /// The episode hit its step limit.
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;

    fn spec(&self) -> &EnvSpec;

    /// Draw an initial state (deterministic per seed) and zero the step counter.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advance one step. Actions outside the box are clamped to it.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;

    fn observation(&self) -> Vec<f64>;

    /// Put the environment into the state described by `obs` and zero the
    /// step counter.
    fn set_state_from_observation(&mut self, obs: &[f64]) -> Result<()>;

    fn supports_state_injection(&self) -> bool {
        true
    }
}

/// Environment selector used in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PointMass,
    PendulumSwingup,
    SparseMountainCar,
}

impl EnvName {
    pub const ALL: [EnvName; 3] = [EnvName::PointMass, EnvName::PendulumSwingup, EnvName::SparseMountainCar];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::PointMass => "point_mass",
            EnvName::PendulumSwingup => "pendulum_swingup",
            EnvName::SparseMountainCar => "sparse_mountain_car",
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvName::PointMass => Box::new(PointMass2D::new()),
            EnvName::PendulumSwingup => Box::new(PendulumSwingup::new()),
            EnvName::SparseMountainCar => Box::new(SparseMountainCar::new()),
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment '{s}'")))
    }
}

fn check_action(spec: &EnvSpec, action: &[f64]) -> Result<Vec<f64>> {
    if action.len() != spec.action_dim {
        return Err(Error::shape("action", spec.action_dim, action.len()));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Input(format!("non-finite action {action:?}")));
    }
    let mut a = action.to_vec();
    spec.clip_action(&mut a);
    Ok(a)
}

fn check_obs(expected: usize, obs: &[f64]) -> Result<()> {
    if obs.len() != expected {
        return Err(Error::shape("observation", expected, obs.len()));
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite observation".into()));
    }
    Ok(())
}

/// A unit mass on a bounded plane pushed by a 2-D force toward the origin.
///
/// Semi-implicit Euler: `v ← v + dt·(gain·a − damping·v)`, `p ← p + dt·v`.
/// Positions are clipped to `[−0.3, 0.3]` (the velocity component pushing
/// into a wall is zeroed), velocities to `[−2, 2]`.
#[derive(Debug, Clone)]
pub struct PointMass2D {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
}

impl PointMass2D {
    pub const DT: f64 = 0.02;
    pub const GAIN: f64 = 1.0;
    pub const DAMPING: f64 = 0.5;
    pub const POS_LIMIT: f64 = 0.3;
    pub const VEL_LIMIT: f64 = 2.0;
    pub const INIT_RANGE: f64 = 0.25;
    pub const TARGET_RADIUS: f64 = 0.05;
    pub const REWARD_MARGIN: f64 = 0.1;
    pub const MAX_STEPS: usize = 250;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                max_episode_steps: Self::MAX_STEPS,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            steps: 0,
        }
    }

    pub fn reward_at(pos: [f64; 2]) -> f64 {
        let d = pos[0].hypot(pos[1]);
        if d <= Self::TARGET_RADIUS {
            1.0
        } else {
            let x = (d - Self::TARGET_RADIUS) / Self::REWARD_MARGIN;
            (-0.5 * x * x).exp()
        }
    }
}

impl Default for PointMass2D {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PointMass2D {
    fn name(&self) -> &'static str {
        "point_mass"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.pos {
            *p = rng.gen_range(-Self::INIT_RANGE..=Self::INIT_RANGE);
        }
        self.vel = [0.0; 2];
        self.steps = 0;
        self.observation()
    }

    #[allow(clippy::needless_range_loop)]
    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = check_action(&self.spec, action)?;
        for i in 0..2 {
            let v = self.vel[i] + Self::DT * (Self::GAIN * a[i] - Self::DAMPING * self.vel[i]);
            self.vel[i] = v.clamp(-Self::VEL_LIMIT, Self::VEL_LIMIT);
            let p = self.pos[i] + Self::DT * self.vel[i];
            if p.abs() > Self::POS_LIMIT {
                self.pos[i] = p.clamp(-Self::POS_LIMIT, Self::POS_LIMIT);
                self.vel[i] = 0.0;
            } else {
                self.pos[i] = p;
            }
        }
        self.steps += 1;
        Ok(StepResult {
            observation: self.observation(),
            reward: Self::reward_at(self.pos),
            terminated: false,
            truncated: self.steps >= self.spec.max_episode_steps,
        })
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    fn set_state_from_observation(&mut self, obs: &[f64]) -> Result<()> {
        check_obs(4, obs)?;
        self.pos = [
            obs[0].clamp(-Self::POS_LIMIT, Self::POS_LIMIT),
            obs[1].clamp(-Self::POS_LIMIT, Self::POS_LIMIT),
        ];
        self.vel = [
            obs[2].clamp(-Self::VEL_LIMIT, Self::VEL_LIMIT),
            obs[3].clamp(-Self::VEL_LIMIT, Self::VEL_LIMIT),
        ];
        self.steps = 0;
        Ok(())
    }
}

/// Torque-limited pendulum swing-up with a sparse upright reward.
///
/// θ = 0 is upright. `ω ← ω + dt·(−(3g/2l)·sin(θ+π) + 3/(m l²)·u)` with
/// `u = 2·a`, ω clipped to `[−8, 8]`, then `θ ← θ + dt·ω` (kept in `[0, 2π)`).
/// Observation is `(cos θ, sin θ, ω)`.
#[derive(Debug, Clone)]
pub struct PendulumSwingup {
    spec: EnvSpec,
    theta: f64,
    omega: f64,
    steps: usize,
}

impl PendulumSwingup {
    pub const G: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const INIT_NOISE: f64 = 0.05;
    pub const UPRIGHT_COS: f64 = 0.95;
    pub const MAX_STEPS: usize = 400;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: 3,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: Self::MAX_STEPS,
            },
            theta: PI,
            omega: 0.0,
            steps: 0,
        }
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn angular_velocity(&self) -> f64 {
        self.omega
    }
}

impl Default for PendulumSwingup {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PendulumSwingup {
    fn name(&self) -> &'static str {
        "pendulum_swingup"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.theta = PI + rng.gen_range(-Self::INIT_NOISE..=Self::INIT_NOISE);
        self.omega = 0.0;
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = check_action(&self.spec, action)?;
        let u = Self::MAX_TORQUE * a[0];
        let (g, m, l) = (Self::G, Self::MASS, Self::LENGTH);
        let accel = -(3.0 * g / (2.0 * l)) * (self.theta + PI).sin() + 3.0 / (m * l * l) * u;
        self.omega = (self.omega + Self::DT * accel).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta = (self.theta + Self::DT * self.omega).rem_euclid(2.0 * PI);
        self.steps += 1;
        let reward = if self.theta.cos() >= Self::UPRIGHT_COS {
            1.0
        } else {
            0.0
        };
        Ok(StepResult {
            observation: self.observation(),
            reward,
            terminated: false,
            truncated: self.steps >= self.spec.max_episode_steps,
        })
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }

    fn set_state_from_observation(&mut self, obs: &[f64]) -> Result<()> {
        check_obs(3, obs)?;
        self.theta = obs[1].atan2(obs[0]).rem_euclid(2.0 * PI);
        self.omega = obs[2].clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.steps = 0;
        Ok(())
    }
}

/// Continuous mountain car with a sparse goal bonus.
///
/// `v ← clip(v + 0.0015·a − 0.0025·cos 3x, ±0.07)`, `x ← clip(x + v, [−1.2, 0.6])`,
/// with `v` zeroed when the car hits the left wall. Reaching `x ≥ 0.45`
/// terminates the episode with reward +100; every other step costs `0.1·a²`.
#[derive(Debug, Clone)]
pub struct SparseMountainCar {
    spec: EnvSpec,
    position: f64,
    velocity: f64,
    steps: usize,
}

impl SparseMountainCar {
    pub const MIN_POSITION: f64 = -1.2;
    pub const MAX_POSITION: f64 = 0.6;
    pub const MAX_SPEED: f64 = 0.07;
    pub const GOAL_POSITION: f64 = 0.45;
    pub const POWER: f64 = 0.0015;
    pub const GRAVITY: f64 = 0.0025;
    pub const GOAL_REWARD: f64 = 100.0;
    pub const ACTION_COST: f64 = 0.1;
    pub const MAX_STEPS: usize = 1000;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: 2,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: Self::MAX_STEPS,
            },
            position: -0.5,
            velocity: 0.0,
            steps: 0,
        }
    }
}

impl Default for SparseMountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for SparseMountainCar {
    fn name(&self) -> &'static str {
        "sparse_mountain_car"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.position = rng.gen_range(-0.6..=-0.4);
        self.velocity = 0.0;
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = check_action(&self.spec, action)?[0];
        self.velocity += Self::POWER * a - Self::GRAVITY * (3.0 * self.position).cos();
        self.velocity = self.velocity.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.position = (self.position + self.velocity).clamp(Self::MIN_POSITION, Self::MAX_POSITION);
        if self.position <= Self::MIN_POSITION && self.velocity < 0.0 {
            self.velocity = 0.0;
        }
        self.steps += 1;
        let terminated = self.position >= Self::GOAL_POSITION;
        let reward = if terminated {
            Self::GOAL_REWARD
        } else {
            -Self::ACTION_COST * a * a
        };
        Ok(StepResult {
            observation: self.observation(),
            reward,
            terminated,
            truncated: self.steps >= self.spec.max_episode_steps,
        })
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.position, self.velocity]
    }

    fn set_state_from_observation(&mut self, obs: &[f64]) -> Result<()> {
        check_obs(2, obs)?;
        self.position = obs[0].clamp(Self::MIN_POSITION, Self::MAX_POSITION);
        self.velocity = obs[1].clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.steps = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specs() {
        let pm = PointMass2D::new();
        assert_eq!(pm.spec().action_dim, 2);
        assert_eq!(pm.spec().action_low, vec![-1.0, -1.0]);
        assert_eq!(pm.spec().action_high, vec![1.0, 1.0]);
        let pend = PendulumSwingup::new();
        assert_eq!(pend.spec().action_dim, 1);
        assert_eq!((pend.spec().action_low[0], pend.spec().action_high[0]), (-1.0, 1.0));
        assert_eq!(SparseMountainCar::new().spec().obs_dim, 2);
    }

    #[test]
    fn names_round_trip() {
        for e in EnvName::ALL {
            assert_eq!(e.as_str().parse::<EnvName>().unwrap(), e);
            assert_eq!(e.make().name(), e.as_str());
        }
        assert!("walker".parse::<EnvName>().is_err());
    }

    #[test]
    fn point_mass_reset_distribution() {
        let mut env = PointMass2D::new();
        for seed in 0..200 {
            let obs = env.reset(seed);
            assert!(obs[0].abs() <= 0.25 && obs[1].abs() <= 0.25);
            assert_eq!(&obs[2..], &[0.0, 0.0]);
        }
        assert_eq!(env.reset(17), env.reset(17));
    }

    #[test]
    fn point_mass_origin_is_fixed_point() {
        let mut env = PointMass2D::new();
        env.set_state_from_observation(&[0.0; 4]).unwrap();
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(r.observation, vec![0.0; 4]);
        assert_eq!(r.reward, 1.0);
        assert!(!r.terminated && !r.truncated);
    }

    #[test]
    fn point_mass_truncates_at_limit() {
        let mut env = PointMass2D::new();
        env.reset(0);
        for t in 1..=PointMass2D::MAX_STEPS {
            let r = env.step(&[0.1, -0.1]).unwrap();
            assert_eq!(r.truncated, t == PointMass2D::MAX_STEPS);
        }
    }

    #[test]
    fn pendulum_reset_distribution() {
        let mut env = PendulumSwingup::new();
        for seed in 0..200 {
            env.reset(seed);
            assert!((env.angle() - PI).abs() <= 0.05);
            assert_eq!(env.angular_velocity(), 0.0);
        }
    }

    #[test]
    fn pendulum_one_euler_step() {
        let mut env = PendulumSwingup::new();
        env.set_state_from_observation(&[-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(env.angle(), PI);
        let r = env.step(&[1.0]).unwrap();
        // ω' = 0.05·(−15·sin 2π + 3·2) = 0.3, θ' = π + 0.05·0.3
        assert!((env.angular_velocity() - 0.3).abs() < 1e-12);
        assert!((env.angle() - (PI + 0.015)).abs() < 1e-12);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn pendulum_upright_rewards_one() {
        let mut env = PendulumSwingup::new();
        env.set_state_from_observation(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(env.step(&[0.0]).unwrap().reward, 1.0);
    }

    #[test]
    fn mountain_car_goal_terminates() {
        let mut env = SparseMountainCar::new();
        env.set_state_from_observation(&[0.5, 0.0]).unwrap();
        let r = env.step(&[0.0]).unwrap();
        assert!(r.terminated);
        assert_eq!(r.reward, 100.0);
    }

    #[test]
    fn mountain_car_action_cost() {
        let mut env = SparseMountainCar::new();
        env.reset(3);
        let r = env.step(&[0.5]).unwrap();
        assert!((r.reward + 0.1 * 0.25).abs() < 1e-15);
        assert!(!r.terminated);
    }

    #[test]
    fn mountain_car_left_wall_stops() {
        let mut env = SparseMountainCar::new();
        env.set_state_from_observation(&[-1.19, -0.07]).unwrap();
        let r = env.step(&[-1.0]).unwrap();
        assert_eq!(r.observation, vec![-1.2, 0.0]);
    }

    #[test]
    fn rejects_bad_actions() {
        let mut env = PendulumSwingup::new();
        env.reset(0);
        assert!(matches!(env.step(&[f64::NAN]), Err(Error::Input(_))));
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn injection_round_trips_observation() {
        for name in EnvName::ALL {
            let mut env = name.make();
            let obs = env.reset(5);
            let mut other = name.make();
            other.set_state_from_observation(&obs).unwrap();
            let obs2 = other.observation();
            for (a, b) in obs.iter().zip(&obs2) {
                assert!((a - b).abs() < 1e-12);
            }
            let a = vec![0.3; env.spec().action_dim];
            let r1 = env.step(&a).unwrap();
            let r2 = other.step(&a).unwrap();
            assert_eq!(r1.reward, r2.reward);
        }
    }

    proptest! {
        #[test]
        fn rewards_and_observations_stay_in_bounds(
            seed in any::<u64>(),
            actions in prop::collection::vec(prop::collection::vec(-1.0f64..=1.0, 2), 1..300),
        ) {
            let mut pm = PointMass2D::new();
            let mut pend = PendulumSwingup::new();
            let mut car = SparseMountainCar::new();
            pm.reset(seed);
            pend.reset(seed);
            car.reset(seed);
            for a in &actions {
                let r = pm.step(a).unwrap();
                prop_assert!((0.0..=1.0).contains(&r.reward));
                prop_assert!(r.observation[..2].iter().all(|p| p.abs() <= 0.3));
                prop_assert!(r.observation[2..].iter().all(|v| v.abs() <= 2.0));

                let r = pend.step(&a[..1]).unwrap();
                prop_assert!(r.reward == 0.0 || r.reward == 1.0);
                prop_assert!(r.observation[2].abs() <= 8.0);

                let r = car.step(&a[..1]).unwrap();
                prop_assert!(r.reward == 100.0 || (r.reward + 0.1 * a[0] * a[0]).abs() < 1e-15);
                prop_assert!((-1.2..=0.6).contains(&r.observation[0]));
                prop_assert!(r.observation[1].abs() <= 0.07);
                if r.terminated {
                    car.reset(seed.wrapping_add(1));
                }
            }
        }

        #[test]
        fn dynamics_are_deterministic(seed in any::<u64>(), a in -1.0f64..=1.0) {
            for name in EnvName::ALL {
                let mut e1 = name.make();
                let mut e2 = name.make();
                e1.reset(seed);
                e2.reset(seed);
                let act = vec![a; e1.spec().action_dim];
                for _ in 0..20 {
                    prop_assert_eq!(e1.step(&act).unwrap(), e2.step(&act).unwrap());
                }
            }
        }
    }
}
