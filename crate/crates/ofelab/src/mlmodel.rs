//! Model-network baseline: a small feed-forward encoder producing an
//! observation representation, trained to predict the next representation and
//! the reward.
//!
//! Unlike the online feature extractor, the representation here is an
//! internal layer of a forward model. The loss is
//! `||z' - z_hat||^2 + lambda * (r - r_hat)^2` averaged over the batch, where
//! the target `z'` is the encoder applied to the next observation with
//! gradients blocked (otherwise the trivial solution `z == 0` collapses the
//! first term). Representation variance is tracked so collapse is visible in
//! diagnostics.

use gradkit::{Activation, Adam, DenseLayer, Graph, Node, ParamMode, ParamStore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{LabError, Result};
use crate::extractors::{check_finite_input, EncodeMode, Extractor};
use crate::replay::Batch;

/// How the representation width is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlVariant {
    /// `repr_dim = floor(obs_dim / 3)`
    Third,
    /// `repr_dim = obs_dim + total_increment`, matching an OFE companion
    OfeLike { total_increment: usize },
}

pub struct MlModel {
    obs_dim: usize,
    action_dim: usize,
    repr_dim: usize,
    lambda: f64,
    store: ParamStore,
    enc1: DenseLayer,
    enc2: DenseLayer,
    head_z: DenseLayer,
    head_r: DenseLayer,
    adam: Adam,
    rl_adam: Option<Adam>,
    last_repr_var: f64,
}

impl MlModel {
    /// `hidden` is the width of the first encoder layer; the heads read the
    /// concatenation of the representation and the action.
    pub fn build(
        obs_dim: usize,
        action_dim: usize,
        variant: MlVariant,
        hidden: usize,
        lambda: f64,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        let repr_dim = match variant {
            MlVariant::Third => {
                if obs_dim < 3 {
                    return Err(LabError::Config(format!(
                        "third-variant model network needs obs_dim >= 3, got {obs_dim}"
                    )));
                }
                obs_dim / 3
            }
            MlVariant::OfeLike { total_increment } => obs_dim + total_increment,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let enc1 = DenseLayer::new(&mut store, "enc1", obs_dim, hidden, Activation::Relu, &mut rng);
        let enc2 = DenseLayer::new(&mut store, "enc2", hidden, repr_dim, Activation::Relu, &mut rng);
        let head_z = DenseLayer::new(
            &mut store,
            "head_z",
            repr_dim + action_dim,
            repr_dim,
            Activation::Identity,
            &mut rng,
        );
        let head_r = DenseLayer::new(
            &mut store,
            "head_r",
            repr_dim + action_dim,
            1,
            Activation::Identity,
            &mut rng,
        );
        let ids = store.ids();
        let adam = Adam::new(&store, ids, lr);
        Ok(MlModel {
            obs_dim,
            action_dim,
            repr_dim,
            lambda,
            store,
            enc1,
            enc2,
            head_z,
            head_r,
            adam,
            rl_adam: None,
            last_repr_var: f64::NAN,
        })
    }

    pub fn repr_dim(&self) -> usize {
        self.repr_dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Variance of the representation over the most recent training batch;
    /// collapse toward zero means the stop-gradient is being defeated.
    pub fn last_repr_variance(&self) -> f64 {
        self.last_repr_var
    }

    fn encode_node(&self, g: &mut Graph, obs: Node, mode: ParamMode) -> Result<Node> {
        let h = self.enc1.forward(g, &self.store, obs, mode)?;
        Ok(self.enc2.forward(g, &self.store, h, mode)?)
    }

    /// Two-term model loss node. The target representation comes from a
    /// detached encoder pass.
    fn loss_node(&self, g: &mut Graph, batch: &Batch, mode: ParamMode) -> Result<Node> {
        let batch_n = batch.size() as f64;
        let obs = g.constant(batch.obs.clone());
        let z = self.encode_node(g, obs, mode)?;
        let actions = g.constant(batch.actions.clone());
        let joined = g.concat(z, actions);
        let z_hat = self.head_z.forward(g, &self.store, joined, mode)?;
        let r_hat = self.head_r.forward(g, &self.store, joined, mode)?;

        // target side: gradients blocked
        let next = g.constant(batch.next_obs.clone());
        let z_next = self.encode_node(g, next, ParamMode::Detached)?;
        let z_target = g.constant(g.value(z_next).clone());

        let z_term = gradkit::mse(g, z_hat, z_target);
        let r_target = g.constant(batch.rewards.clone());
        let r_diff = g.sub(r_hat, r_target);
        let r_sq = g.unary(r_diff, gradkit::UnaryFn::Square);
        let r_sum = g.sum_all(r_sq);
        let r_term = g.scale(r_sum, self.lambda / batch_n);
        Ok(g.add(z_term, r_term))
    }

    /// Loss value on a batch without updating anything.
    pub fn ml_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_node(&mut g, batch, ParamMode::Detached)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// One Adam step on the model loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_node(&mut g, batch, ParamMode::Trainable)?;
        let value = g.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(LabError::Numeric(format!(
                "non-finite model loss at step {}",
                self.adam.step_count() + 1
            )));
        }
        g.backward(loss);
        self.store.zero_grads();
        g.collect_grads(&mut self.store);
        self.adam.step(&mut self.store)?;

        // representation variance over the batch, for collapse monitoring
        let mut g2 = Graph::new();
        let obs = g2.constant(batch.obs.clone());
        let z = self.encode_node(&mut g2, obs, ParamMode::Detached)?;
        let zm = g2.value(z);
        let n = (zm.rows() * zm.cols()) as f64;
        let mean: f64 = zm.data().iter().sum::<f64>() / n;
        self.last_repr_var = zm.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(value)
    }
}

impl Extractor for MlModel {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn z_o_dim(&self) -> usize {
        self.repr_dim
    }

    fn z_oa_dim(&self) -> usize {
        self.repr_dim + self.action_dim
    }

    fn encode_obs(&mut self, g: &mut Graph, obs: Node, mode: EncodeMode) -> Result<Node> {
        check_finite_input(g, obs, "observation input")?;
        self.encode_node(g, obs, mode.param_mode())
    }

    fn encode_obs_action(
        &mut self,
        g: &mut Graph,
        z_o: Node,
        action: Node,
        _mode: EncodeMode,
    ) -> Result<Node> {
        if g.value(z_o).cols() != self.repr_dim {
            return Err(LabError::Config(format!(
                "model network: z_o width {} does not match repr_dim {}",
                g.value(z_o).cols(),
                self.repr_dim
            )));
        }
        Ok(g.concat(z_o, action))
    }

    fn aux_update(&mut self, batch: &Batch) -> Result<Option<f64>> {
        self.train_step(batch).map(Some)
    }

    fn apply_rl_grads(&mut self, g: &Graph) -> Result<()> {
        let adam = self.rl_adam.as_mut().ok_or_else(|| {
            LabError::Usage("apply_rl_grads called without enable_rl_updates".into())
        })?;
        self.store.zero_grads();
        g.collect_grads(&mut self.store);
        adam.step(&mut self.store)?;
        Ok(())
    }

    fn enable_rl_updates(&mut self, lr: f64) -> Result<()> {
        let mut ids = self.enc1.param_ids();
        ids.extend(self.enc2.param_ids());
        self.rl_adam = Some(Adam::new(&self.store, ids, lr));
        Ok(())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn describe(&self) -> String {
        format!("ml-repr{}", self.repr_dim)
    }
}
