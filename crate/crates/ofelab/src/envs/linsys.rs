//! Linear system with known dynamics: `o' = A o + B a`.
//!
//! `A` is drawn once from a fixed structure seed and rescaled so its spectral
//! norm is 0.9, which keeps the free dynamics stable. Because the transition
//! map is exactly linear in `(o, a)`, a least-squares fit over any few hundred
//! transitions recovers `[A B]` to machine precision -- this is the analytic
//! oracle the auxiliary prediction task is tested against.
//!
//! The padded variant appends observation coordinates holding fresh uniform
//! noise every step; those indices are reported by `external_force_mask` and
//! are excluded from prediction targets.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

use super::{Env, EnvSpec, Transition};
use crate::error::{LabError, Result};

const HORIZON: usize = 100;
const TARGET_SPECTRAL_NORM: f64 = 0.9;
pub const DEFAULT_STATE_DIM: usize = 4;
pub const DEFAULT_ACTION_DIM: usize = 2;

pub struct LinearSystem {
    spec: EnvSpec,
    state_dim: usize,
    pad_dims: usize,
    /// row-major state_dim x state_dim
    a: Vec<f64>,
    /// row-major state_dim x action_dim
    b: Vec<f64>,
    state: Vec<f64>,
    pads: Vec<f64>,
    noise: ChaCha12Rng,
    steps: usize,
    running: bool,
}

/// Largest singular value via power iteration on A^T A.
fn spectral_norm(a: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..100 {
        // w = A v
        let mut w = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w[i] += a[i * n + j] * v[j];
            }
        }
        // u = A^T w
        let mut u = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                u[j] += a[i * n + j] * w[i];
            }
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for (vi, ui) in v.iter_mut().zip(u.iter()) {
            *vi = ui / norm;
        }
        sigma = norm.sqrt();
    }
    sigma
}

impl LinearSystem {
    /// The registered configuration: 4 state dims, 2 action dims, dynamics
    /// drawn from a fixed structure seed.
    pub fn standard(structure_seed: u64) -> Self {
        Self::seeded(DEFAULT_STATE_DIM, DEFAULT_ACTION_DIM, 0, structure_seed)
    }

    pub fn standard_padded(structure_seed: u64, pad_dims: usize) -> Self {
        Self::seeded(DEFAULT_STATE_DIM, DEFAULT_ACTION_DIM, pad_dims, structure_seed)
    }

    pub fn seeded(state_dim: usize, action_dim: usize, pad_dims: usize, structure_seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(structure_seed ^ 0x11a5_570c_7u64);
        let mut a: Vec<f64> = (0..state_dim * state_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let sigma = spectral_norm(&a, state_dim);
        if sigma > 0.0 {
            let scale = TARGET_SPECTRAL_NORM / sigma;
            a.iter_mut().for_each(|x| *x *= scale);
        }
        let b: Vec<f64> = (0..state_dim * action_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Self::with_dynamics(a, b, state_dim, action_dim, pad_dims)
    }

    /// Explicit dynamics, mainly for tests.
    pub fn with_dynamics(
        a: Vec<f64>,
        b: Vec<f64>,
        state_dim: usize,
        action_dim: usize,
        pad_dims: usize,
    ) -> Self {
        assert_eq!(a.len(), state_dim * state_dim);
        assert_eq!(b.len(), state_dim * action_dim);
        let name = if pad_dims == 0 { "linsys" } else { "linsys-padded" };
        LinearSystem {
            spec: EnvSpec {
                name: name.into(),
                obs_dim: state_dim + pad_dims,
                action_dim,
                action_low: vec![-1.0; action_dim],
                action_high: vec![1.0; action_dim],
                max_episode_steps: HORIZON,
                dt: 1.0,
            },
            state_dim,
            pad_dims,
            a,
            b,
            state: vec![0.0; state_dim],
            pads: vec![0.0; pad_dims],
            noise: ChaCha12Rng::seed_from_u64(0),
            steps: 0,
            running: false,
        }
    }

    pub fn dynamics(&self) -> (&[f64], &[f64]) {
        (&self.a, &self.b)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs(&self) -> Vec<f64> {
        let mut o = self.state.clone();
        o.extend_from_slice(&self.pads);
        o
    }
}

impl Env for LinearSystem {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        self.state = (0..self.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        self.noise = ChaCha12Rng::seed_from_u64(seed ^ 0x9ad5_0f64);
        self.pads = (0..self.pad_dims)
            .map(|_| self.noise.gen_range(-1.0..1.0))
            .collect();
        self.steps = 0;
        self.running = true;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if !self.running {
            return Err(LabError::Usage("step on finished linsys episode".into()));
        }
        let obs = self.obs();
        let a: Vec<f64> = (0..self.spec.action_dim)
            .map(|i| action.get(i).copied().unwrap_or(0.0).clamp(-1.0, 1.0))
            .collect();
        let reward = -self.state.iter().map(|x| x * x).sum::<f64>();

        let mut next = vec![0.0; self.state_dim];
        for i in 0..self.state_dim {
            for j in 0..self.state_dim {
                next[i] += self.a[i * self.state_dim + j] * self.state[j];
            }
            for (j, aj) in a.iter().enumerate() {
                next[i] += self.b[i * self.spec.action_dim + j] * aj;
            }
        }
        self.state = next;
        self.pads = (0..self.pad_dims)
            .map(|_| self.noise.gen_range(-1.0..1.0))
            .collect();

        self.steps += 1;
        let truncated = self.steps >= HORIZON;
        if truncated {
            self.running = false;
        }
        Ok(Transition {
            obs,
            action: a,
            next_obs: self.obs(),
            reward,
            done: false,
            truncated,
        })
    }

    fn external_force_mask(&self) -> Vec<usize> {
        (self.state_dim..self.state_dim + self.pad_dims).collect()
    }
}
