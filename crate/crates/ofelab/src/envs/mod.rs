//! Desk-scale continuous-control environments.
//!
//! Three environments stand in for physics-simulator benchmarks: a pendulum
//! swing-up, a 2-D point-mass reaching task, and a linear system with known
//! dynamics that doubles as an analytic oracle for the next-observation
//! prediction task. All dynamics are deterministic given (seed, actions);
//! rollouts are bit-exact reproducible.

mod linsys;
mod pendulum;
mod pointmass;

pub use linsys::LinearSystem;
pub use pendulum::Pendulum;
pub use pointmass::PointMass;

use crate::error::{LabError, Result};

/// Static description of an environment.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
    pub dt: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        for (l, h) in self.action_low.iter().zip(self.action_high.iter()) {
            if l >= h {
                return Err(LabError::Config(format!(
                    "env {:?}: action_low must be < action_high elementwise",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// One environment step: `(o_t, a_t, o_{t+1}, r_{t+1}, done, truncated)`.
///
/// `done` is true only at genuine terminal states; hitting the time limit
/// sets `truncated` instead, so critic bootstrapping is not cut off at
/// truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

pub trait Env {
    fn spec(&self) -> &EnvSpec;

    /// Deterministic initial observation from the seed.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advance one step. Stepping a finished episode is a usage error.
    fn step(&mut self, action: &[f64]) -> Result<Transition>;

    /// Observation indices excluded from the auxiliary prediction target.
    fn external_force_mask(&self) -> Vec<usize> {
        Vec::new()
    }
}

/// Construct a registered environment by name.
///
/// Names: `pendulum`, `pointmass`, `linsys`, `linsys-padded`.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "pointmass" => Ok(Box::new(PointMass::new())),
        "linsys" => Ok(Box::new(LinearSystem::standard(0))),
        "linsys-padded" => Ok(Box::new(LinearSystem::standard_padded(0, 2))),
        other => Err(LabError::Config(format!("unknown env {other:?}"))),
    }
}

/// Fixed-reward diagnostic environment: +1 per step for `horizon` steps.
/// Used by tests to pin down return accounting.
pub struct ConstReward {
    spec: EnvSpec,
    steps: usize,
    running: bool,
}

impl ConstReward {
    pub fn new(horizon: usize) -> Self {
        ConstReward {
            spec: EnvSpec {
                name: "constreward".into(),
                obs_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: horizon,
                dt: 1.0,
            },
            steps: 0,
            running: false,
        }
    }
}

impl Env for ConstReward {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.steps = 0;
        self.running = true;
        vec![1.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if !self.running {
            return Err(LabError::Usage("step on finished constreward episode".into()));
        }
        self.steps += 1;
        let truncated = self.steps >= self.spec.max_episode_steps;
        if truncated {
            self.running = false;
        }
        Ok(Transition {
            obs: vec![1.0],
            action: action.to_vec(),
            next_obs: vec![1.0],
            reward: 1.0,
            done: false,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_resolves_all_names() {
        for name in ["pendulum", "pointmass", "linsys", "linsys-padded"] {
            let env = make_env(name).unwrap();
            env.spec().validate().unwrap();
        }
        assert!(make_env("mujoco").is_err());
    }

    #[test]
    fn same_seed_same_initial_observation() {
        for name in ["pendulum", "pointmass", "linsys"] {
            let mut e1 = make_env(name).unwrap();
            let mut e2 = make_env(name).unwrap();
            assert_eq!(e1.reset(123), e2.reset(123), "{name}");
            assert_ne!(e1.reset(1), e1.reset(2), "{name}");
        }
    }

    #[test]
    fn trajectories_are_bit_exact_across_instances() {
        use rand::Rng;
        let mut rng = crate::rng::substream(9, crate::rng::Stream::Env, 0);
        for name in ["pendulum", "pointmass", "linsys-padded"] {
            let mut e1 = make_env(name).unwrap();
            let mut e2 = make_env(name).unwrap();
            e1.reset(55);
            e2.reset(55);
            let dim = e1.spec().action_dim;
            for _ in 0..50 {
                let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let t1 = e1.step(&a).unwrap();
                let t2 = e2.step(&a).unwrap();
                assert_eq!(t1, t2, "{name}");
                if t1.done || t1.truncated {
                    e1.reset(56);
                    e2.reset(56);
                }
            }
        }
    }
}
