//! 2-D point-mass reaching: a double integrator driven by bounded
//! acceleration toward a randomly placed goal.
//!
//! Observation is `[position, velocity, goal]` (6 values). The episode ends
//! (terminal, not truncation) when the mass gets within 0.05 of the goal;
//! otherwise it truncates after 200 steps.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

use super::{Env, EnvSpec, Transition};
use crate::error::{LabError, Result};

const DT: f64 = 0.05;
const HORIZON: usize = 200;
const GOAL_RADIUS: f64 = 0.05;

pub struct PointMass {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    steps: usize,
    running: bool,
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl PointMass {
    pub fn new() -> Self {
        PointMass {
            spec: EnvSpec {
                name: "pointmass".into(),
                obs_dim: 6,
                action_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                max_episode_steps: HORIZON,
                dt: DT,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            steps: 0,
            running: false,
        }
    }

    fn obs(&self) -> Vec<f64> {
        vec![
            self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.goal[0], self.goal[1],
        ]
    }

    fn goal_distance(&self) -> f64 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        self.pos = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        self.goal = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        self.vel = [0.0; 2];
        self.steps = 0;
        self.running = true;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if !self.running {
            return Err(LabError::Usage("step on finished pointmass episode".into()));
        }
        let obs = self.obs();
        let mut a = [0.0; 2];
        for i in 0..2 {
            a[i] = action.get(i).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
        }
        // semi-implicit Euler: velocity first
        for i in 0..2 {
            self.vel[i] += a[i] * DT;
            self.pos[i] += self.vel[i] * DT;
        }
        let dist = self.goal_distance();
        let reward = -dist - 0.01 * (a[0] * a[0] + a[1] * a[1]);

        self.steps += 1;
        let done = dist < GOAL_RADIUS;
        let truncated = !done && self.steps >= HORIZON;
        if done || truncated {
            self.running = false;
        }
        Ok(Transition {
            obs,
            action: a.to_vec(),
            next_obs: self.obs(),
            reward,
            done,
            truncated,
        })
    }
}
