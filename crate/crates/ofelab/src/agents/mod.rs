//! Off-policy agents over extractor representations: actors read `z_o`,
//! critics read `z_oa`.

mod sac;
mod td3;

pub use sac::{SacAgent, SacConfig};
pub use td3::{Td3Agent, Td3Config};

use gradkit::{Activation, DenseLayer, Graph, Matrix, Node, ParamMode, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::envs::Env;
use crate::error::Result;
use crate::extractors::Extractor;
use crate::replay::Batch;

/// Per-update diagnostics.
#[derive(Debug, Clone, Default)]
pub struct UpdateDiag {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub alpha: Option<f64>,
}

/// Anything that can pick actions from observations through an extractor.
pub trait Policy {
    /// `explore = true` samples/perturbs; `false` returns the deterministic
    /// evaluation action. Either way the result lies inside the action box.
    fn act(
        &mut self,
        ext: &mut dyn Extractor,
        obs: &[f64],
        explore: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<f64>>;
}

/// A trainable agent.
pub trait Agent: Policy {
    /// One gradient update from a replay batch. With `attached = true` the
    /// critic-loss gradients also flow into (and update) the extractor.
    fn update(
        &mut self,
        ext: &mut dyn Extractor,
        batch: &Batch,
        attached: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<UpdateDiag>;

    fn store(&self) -> &ParamStore;

    /// Total trainable scalar parameters (target copies excluded).
    fn trainable_entry_total(&self) -> usize;
}

/// Mean return over evaluation episodes, acting deterministically.
/// Episode reset seeds are drawn from `rng`, so a fixed generator state gives
/// a fixed score.
pub fn evaluate_policy(
    policy: &mut dyn Policy,
    ext: &mut dyn Extractor,
    env: &mut dyn Env,
    episodes: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let seed: u64 = rng.gen();
        let mut obs = env.reset(seed);
        loop {
            let action = policy.act(ext, &obs, false, rng)?;
            let t = env.step(&action)?;
            total += t.reward;
            obs = t.next_obs;
            if t.done || t.truncated {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// Bounded action interval per dimension, with the agent-side convention that
/// policies produce values in [-1, 1] that get rescaled into the box.
#[derive(Debug, Clone)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn from_env(env: &dyn Env) -> Self {
        ActionBox {
            low: env.spec().action_low.clone(),
            high: env.spec().action_high.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    fn center(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(self.high.iter())
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    fn half_range(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(self.high.iter())
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    /// Map a normalized action in [-1, 1]^d to environment units.
    pub fn denorm(&self, a: &[f64]) -> Vec<f64> {
        let c = self.center();
        let r = self.half_range();
        a.iter()
            .enumerate()
            .map(|(i, &v)| (c[i] + r[i] * v).clamp(self.low[i], self.high[i]))
            .collect()
    }

    /// Graph version of [`ActionBox::denorm`] (no clamp; tanh outputs are
    /// already interior).
    pub fn denorm_node(&self, g: &mut Graph, a: Node) -> Node {
        let r = g.constant(Matrix::row_from(&self.half_range()));
        let c = g.constant(Matrix::row_from(&self.center()));
        let scaled = g.mul_row(a, r);
        g.add_row(scaled, c)
    }
}

/// Feed-forward stack: relu hidden layers, linear output.
pub(crate) struct MlpNet {
    pub layers: Vec<DenseLayer>,
}

impl MlpNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(DenseLayer::new(
                store,
                format!("{name}/h{i}"),
                prev,
                h,
                Activation::Relu,
                rng,
            ));
            prev = h;
        }
        layers.push(DenseLayer::new(
            store,
            format!("{name}/out"),
            prev,
            out_dim,
            Activation::Identity,
            rng,
        ));
        MlpNet { layers }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Node,
        mode: ParamMode,
    ) -> Result<Node> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h, mode)?;
        }
        Ok(h)
    }

    pub fn ids(&self) -> Vec<gradkit::ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}

/// Weights-plus-biases count of a feed-forward policy network
/// `input -> hidden... -> action_dim`. This is the accounting used when
/// matching parameter budgets between a widened raw-input agent and an
/// extractor-fed one.
pub fn policy_param_count(input_dim: usize, hidden: &[usize], action_dim: usize) -> usize {
    let mut total = 0;
    let mut prev = input_dim;
    for &h in hidden {
        total += prev * h + h;
        prev = h;
    }
    total + prev * action_dim + action_dim
}

/// Largest equal hidden width whose policy network on raw inputs stays within
/// `target_params`.
pub fn matched_hidden_width(
    obs_dim: usize,
    action_dim: usize,
    n_hidden_layers: usize,
    target_params: usize,
) -> usize {
    let mut w = 1;
    loop {
        let hidden = vec![w + 1; n_hidden_layers];
        if policy_param_count(obs_dim, &hidden, action_dim) > target_params {
            return w;
        }
        w += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ConstReward;
    use crate::extractors::RawExtractor;
    use crate::rng::{substream, Stream};

    struct ZeroPolicy;
    impl Policy for ZeroPolicy {
        fn act(
            &mut self,
            _ext: &mut dyn Extractor,
            _obs: &[f64],
            _explore: bool,
            _rng: &mut ChaCha12Rng,
        ) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    #[test]
    fn constant_reward_env_scores_its_horizon() {
        let mut env = ConstReward::new(200);
        let mut ext = RawExtractor::new(1, 1);
        let mut rng = substream(0, Stream::Eval, 0);
        let score =
            evaluate_policy(&mut ZeroPolicy, &mut ext, &mut env, 10, &mut rng).unwrap();
        assert_eq!(score, 200.0);
    }

    #[test]
    fn zero_policy_matches_an_independent_pendulum_rollout() {
        use crate::envs::make_env;
        // independent simulation of the passive dynamics, written from the
        // stated equations rather than the env implementation
        let mut rng = substream(1, Stream::Eval, 0);
        let mut env = make_env("pendulum").unwrap();
        let mut ext = RawExtractor::new(3, 1);
        let score = evaluate_policy(
            &mut ZeroPolicy,
            &mut ext,
            env.as_mut(),
            3,
            &mut substream(1, Stream::Eval, 0),
        )
        .unwrap();

        let mut expected = 0.0;
        for _ in 0..3 {
            let seed: u64 = rng.gen();
            let obs = env.reset(seed);
            // recover (theta, theta_dot) from the observation
            let mut theta = obs[1].atan2(obs[0]);
            let mut theta_dot = obs[2];
            for _ in 0..200 {
                let wrapped = {
                    let mut w = (theta + std::f64::consts::PI)
                        .rem_euclid(2.0 * std::f64::consts::PI)
                        - std::f64::consts::PI;
                    if w == -std::f64::consts::PI {
                        w = std::f64::consts::PI;
                    }
                    w
                };
                expected -= wrapped * wrapped + 0.1 * theta_dot * theta_dot;
                theta_dot = (theta_dot + 15.0 * theta.sin() * 0.05).clamp(-8.0, 8.0);
                theta += theta_dot * 0.05;
            }
        }
        expected /= 3.0;
        assert!((score - expected).abs() < 1e-9, "{score} vs {expected}");
    }

    #[test]
    fn action_box_denorm_maps_unit_interval_to_box() {
        let b = ActionBox {
            low: vec![-2.0, 0.0],
            high: vec![2.0, 1.0],
        };
        assert_eq!(b.denorm(&[0.0, 0.0]), vec![0.0, 0.5]);
        assert_eq!(b.denorm(&[1.0, -1.0]), vec![2.0, 0.0]);
    }

    #[test]
    fn policy_count_matches_hand_arithmetic() {
        // 351 -> 256 -> 256 -> 8
        assert_eq!(
            policy_param_count(351, &[256, 256], 8),
            90112 + 65792 + 2056
        );
    }

    #[test]
    fn matched_width_never_exceeds_the_target() {
        for target in [10_000usize, 75_777, 209_800] {
            let w = matched_hidden_width(3, 1, 2, target);
            assert!(policy_param_count(3, &[w, w], 1) <= target);
            assert!(policy_param_count(3, &[w + 1, w + 1], 1) > target);
        }
    }
}
