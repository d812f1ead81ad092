//! Pendulum swing-up.
//!
//! State is (theta, theta_dot) with theta = 0 upright; the observation is
//! `[cos(theta), sin(theta), theta_dot]`. Dynamics use semi-implicit Euler
//! (velocity first) with g = 10, m = l = 1, dt = 0.05; torque is clipped to
//! [-2, 2] and angular velocity to [-8, 8]. The reward is
//! `-(wrap(theta)^2 + 0.1 theta_dot^2 + 0.001 u^2)` evaluated at the pre-step
//! state, episodes truncate after 200 steps and never terminate.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

use super::{Env, EnvSpec, Transition};
use crate::error::{LabError, Result};

const GRAVITY: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;
const MAX_TORQUE: f64 = 2.0;
const MAX_SPEED: f64 = 8.0;
const HORIZON: usize = 200;

/// Wrap an angle to (-pi, pi].
fn wrap_angle(x: f64) -> f64 {
    let mut w = (x + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        w = PI;
    }
    w
}

pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    steps: usize,
    running: bool,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Pendulum {
    pub fn new() -> Self {
        Pendulum {
            spec: EnvSpec {
                name: "pendulum".into(),
                obs_dim: 3,
                action_dim: 1,
                action_low: vec![-MAX_TORQUE],
                action_high: vec![MAX_TORQUE],
                max_episode_steps: HORIZON,
                dt: DT,
            },
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
            running: false,
        }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Worst possible per-step reward given the clipping bounds.
    pub fn reward_lower_bound() -> f64 {
        -(PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE)
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        self.theta = rng.gen_range(-PI..PI);
        self.theta_dot = rng.gen_range(-1.0..1.0);
        self.steps = 0;
        self.running = true;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if !self.running {
            return Err(LabError::Usage("step on finished pendulum episode".into()));
        }
        let obs = self.obs();
        let u = action
            .first()
            .copied()
            .unwrap_or(0.0)
            .clamp(-MAX_TORQUE, MAX_TORQUE);

        let cost = wrap_angle(self.theta).powi(2)
            + 0.1 * self.theta_dot.powi(2)
            + 0.001 * u.powi(2);

        let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.sin()
            + 3.0 / (MASS * LENGTH * LENGTH) * u;
        self.theta_dot = (self.theta_dot + accel * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.theta_dot * DT;

        self.steps += 1;
        let truncated = self.steps >= HORIZON;
        if truncated {
            self.running = false;
        }
        Ok(Transition {
            obs,
            action: vec![u],
            next_obs: self.obs(),
            reward: -cost,
            done: false,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn force_state(env: &mut Pendulum, theta: f64, theta_dot: f64) {
        env.reset(0);
        env.theta = theta;
        env.theta_dot = theta_dot;
    }

    #[test]
    fn observation_lies_on_unit_circle() {
        let mut env = Pendulum::new();
        for seed in 0..20 {
            let o = env.reset(seed);
            assert!((o[0] * o[0] + o[1] * o[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upright_at_rest_is_a_zero_cost_equilibrium() {
        let mut env = Pendulum::new();
        force_state(&mut env, 0.0, 0.0);
        let t = env.step(&[0.0]).unwrap();
        assert_eq!(t.reward, 0.0);
        assert_eq!(t.next_obs, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn hanging_down_step_costs_pi_squared() {
        let mut env = Pendulum::new();
        force_state(&mut env, PI, 0.0);
        let t = env.step(&[0.0]).unwrap();
        assert_eq!(t.reward, -(PI * PI));
        // sin(pi) is ~1e-16 in f64, so the velocity stays at rest to round-off
        assert!(env.theta_dot.abs() < 1e-12, "theta_dot {}", env.theta_dot);
    }

    #[test]
    fn hanging_at_rest_stays_at_rest_for_a_whole_episode() {
        let mut env = Pendulum::new();
        force_state(&mut env, PI, 0.0);
        for _ in 0..HORIZON {
            env.step(&[0.0]).unwrap();
        }
        assert!((env.theta - PI).abs() < 1e-10);
        assert!(env.theta_dot.abs() < 1e-10);
    }

    #[test]
    fn rewards_stay_within_the_analytic_bounds() {
        use rand::Rng;
        let mut env = Pendulum::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        env.reset(3);
        let lo = Pendulum::reward_lower_bound();
        for _ in 0..400 {
            let t = env.step(&[rng.gen_range(-2.0..2.0)]).unwrap();
            assert!(t.reward <= 0.0 && t.reward >= lo, "reward {}", t.reward);
            if t.truncated {
                env.reset(4);
            }
        }
    }

    #[test]
    fn episode_truncates_at_200_and_stepping_after_fails() {
        let mut env = Pendulum::new();
        env.reset(0);
        let mut last = None;
        for _ in 0..HORIZON {
            last = Some(env.step(&[0.0]).unwrap());
        }
        let last = last.unwrap();
        assert!(last.truncated && !last.done);
        assert!(matches!(env.step(&[0.0]), Err(LabError::Usage(_))));
    }
}
