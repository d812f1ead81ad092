//! Twin delayed deterministic policy gradient.
//!
//! Deterministic tanh actor over `z_o`, two critics with target copies,
//! clipped Gaussian exploration noise, smoothed target actions, and delayed
//! actor/target updates.

use gradkit::{Adam, Graph, Matrix, ParamMode, ParamStore, UnaryFn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::{ActionBox, Agent, MlpNet, Policy, UpdateDiag};
use crate::error::{LabError, Result};
use crate::extractors::{EncodeMode, Extractor};
use crate::replay::Batch;

#[derive(Debug, Clone)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub hidden: Vec<usize>,
    /// exploration noise stddev, in normalized action units
    pub expl_noise: f64,
    /// target smoothing noise stddev
    pub smooth_noise: f64,
    /// clip bound for the smoothing noise
    pub noise_clip: f64,
    /// actor and target updates happen every `policy_delay` critic updates
    pub policy_delay: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            hidden: vec![256, 256],
            expl_noise: 0.1,
            smooth_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
        }
    }
}

pub struct Td3Agent {
    cfg: Td3Config,
    action_box: ActionBox,
    action_dim: usize,
    store: ParamStore,
    actor: MlpNet,
    target_actor: MlpNet,
    critics: [MlpNet; 2],
    target_critics: [MlpNet; 2],
    adam_actor: Adam,
    adam_critic: Adam,
    update_count: u64,
}

impl Td3Agent {
    pub fn new(
        z_o_dim: usize,
        z_oa_dim: usize,
        action_box: ActionBox,
        cfg: Td3Config,
        seed: u64,
    ) -> Self {
        let action_dim = action_box.dim();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let actor = MlpNet::new(&mut store, "actor", z_o_dim, &cfg.hidden, action_dim, &mut rng);
        let target_actor =
            MlpNet::new(&mut store, "target_actor", z_o_dim, &cfg.hidden, action_dim, &mut rng);
        let critics = [
            MlpNet::new(&mut store, "critic1", z_oa_dim, &cfg.hidden, 1, &mut rng),
            MlpNet::new(&mut store, "critic2", z_oa_dim, &cfg.hidden, 1, &mut rng),
        ];
        let target_critics = [
            MlpNet::new(&mut store, "target_critic1", z_oa_dim, &cfg.hidden, 1, &mut rng),
            MlpNet::new(&mut store, "target_critic2", z_oa_dim, &cfg.hidden, 1, &mut rng),
        ];
        store.polyak_from(&target_actor.ids(), &actor.ids(), 1.0);
        for k in 0..2 {
            store.polyak_from(&target_critics[k].ids(), &critics[k].ids(), 1.0);
        }
        let adam_actor = Adam::new(&store, actor.ids(), cfg.lr);
        let mut critic_ids = critics[0].ids();
        critic_ids.extend(critics[1].ids());
        let adam_critic = Adam::new(&store, critic_ids, cfg.lr);
        Td3Agent {
            cfg,
            action_box,
            action_dim,
            store,
            actor,
            target_actor,
            critics,
            target_critics,
            adam_actor,
            adam_critic,
            update_count: 0,
        }
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Finite-difference checks of the critic and actor loss graphs exactly
    /// as `update` builds them, over fixed encodings. Returns the
    /// (critic, actor) reports.
    pub fn grad_check_losses(
        &mut self,
        z_o: &Matrix,
        z_oa: &Matrix,
        target: &Matrix,
    ) -> (gradkit::GradCheckReport, gradkit::GradCheckReport) {
        let mut critic_ids = self.critics[0].ids();
        critic_ids.extend(self.critics[1].ids());
        let critics = &self.critics;
        let actor = &self.actor;
        let action_box = &self.action_box;
        let store = &mut self.store;

        let critic_report = gradkit::grad_check(store, &critic_ids, |g, s| {
            let zoa = g.constant(z_oa.clone());
            let q1 = critics[0].forward(g, s, zoa, ParamMode::Trainable).unwrap();
            let q2 = critics[1].forward(g, s, zoa, ParamMode::Trainable).unwrap();
            let y = g.constant(target.clone());
            let l1 = gradkit::mse(g, q1, y);
            let l2 = gradkit::mse(g, q2, y);
            g.add(l1, l2)
        });

        let actor_ids = actor.ids();
        let actor_report = gradkit::grad_check(store, &actor_ids, |g, s| {
            let zo = g.constant(z_o.clone());
            let raw = actor.forward(g, s, zo, ParamMode::Trainable).unwrap();
            let a_norm = g.unary(raw, UnaryFn::Tanh);
            let a_env = action_box.denorm_node(g, a_norm);
            let zoa = g.concat(zo, a_env);
            let q1 = critics[0].forward(g, s, zoa, ParamMode::Detached).unwrap();
            let mean_q = g.mean_all(q1);
            g.scale(mean_q, -1.0)
        });
        (critic_report, actor_report)
    }

    pub fn actor_snapshot(&self) -> Vec<Matrix> {
        self.actor
            .ids()
            .iter()
            .map(|&id| self.store.value(id).clone())
            .collect()
    }

    fn noise_matrix(&self, rows: usize, std: f64, rng: &mut ChaCha12Rng) -> Matrix {
        let data: Vec<f64> = (0..rows * self.action_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::from_vec(rows, self.action_dim, data)
    }

    fn critic_target(
        &mut self,
        ext: &mut dyn Extractor,
        batch: &Batch,
        rng: &mut ChaCha12Rng,
    ) -> Result<Matrix> {
        let mut g = Graph::new();
        let next_obs = g.constant(batch.next_obs.clone());
        let z_next = ext.encode_obs(&mut g, next_obs, EncodeMode::Detached)?;
        let raw = self
            .target_actor
            .forward(&mut g, &self.store, z_next, ParamMode::Detached)?;
        let a_target = g.unary(raw, UnaryFn::Tanh);
        let noise = self
            .noise_matrix(batch.size(), self.cfg.smooth_noise, rng)
            .map(|v| v.clamp(-self.cfg.noise_clip, self.cfg.noise_clip));
        let noise_node = g.constant(noise);
        let noisy = g.add(a_target, noise_node);
        let a_smoothed = g.clamp(noisy, -1.0, 1.0);
        let a_env = self.action_box.denorm_node(&mut g, a_smoothed);
        let z_oa = ext.encode_obs_action(&mut g, z_next, a_env, EncodeMode::Detached)?;
        let q1 = self.target_critics[0].forward(&mut g, &self.store, z_oa, ParamMode::Detached)?;
        let q2 = self.target_critics[1].forward(&mut g, &self.store, z_oa, ParamMode::Detached)?;
        let qmin = g.min_elem(q1, q2);
        let qv = g.value(qmin);
        let mut y = Matrix::zeros(batch.size(), 1);
        for i in 0..batch.size() {
            y.set(
                i,
                0,
                batch.rewards.get(i, 0)
                    + self.cfg.gamma * (1.0 - batch.done[i]) * qv.get(i, 0),
            );
        }
        if !y.all_finite() {
            return Err(LabError::Numeric(format!(
                "non-finite critic target at update {}",
                self.update_count + 1
            )));
        }
        Ok(y)
    }
}

impl Policy for Td3Agent {
    fn act(
        &mut self,
        ext: &mut dyn Extractor,
        obs: &[f64],
        explore: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let o = g.constant(Matrix::row_from(obs));
        let z = ext.encode_obs(&mut g, o, EncodeMode::Eval)?;
        let raw = self.actor.forward(&mut g, &self.store, z, ParamMode::Detached)?;
        let t = g.unary(raw, UnaryFn::Tanh);
        let mut a_norm = g.value(t).row(0).to_vec();
        if explore {
            for v in a_norm.iter_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *v = (*v + self.cfg.expl_noise * eps).clamp(-1.0, 1.0);
            }
        }
        if a_norm.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Numeric("non-finite action from actor".into()));
        }
        Ok(self.action_box.denorm(&a_norm))
    }
}

impl Agent for Td3Agent {
    fn update(
        &mut self,
        ext: &mut dyn Extractor,
        batch: &Batch,
        attached: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<UpdateDiag> {
        let step = self.update_count + 1;
        let wrap = |e: LabError| match e {
            LabError::Numeric(m) => LabError::Numeric(format!("update {step}: {m}")),
            other => other,
        };

        let y = self.critic_target(ext, batch, rng).map_err(wrap)?;
        let enc_mode = if attached {
            EncodeMode::Attached
        } else {
            EncodeMode::Detached
        };
        let mut g_c = Graph::new();
        let obs = g_c.constant(batch.obs.clone());
        let z_o = ext.encode_obs(&mut g_c, obs, enc_mode)?;
        let actions = g_c.constant(batch.actions.clone());
        let z_oa = ext.encode_obs_action(&mut g_c, z_o, actions, enc_mode)?;
        let q1 = self.critics[0].forward(&mut g_c, &self.store, z_oa, ParamMode::Trainable)?;
        let q2 = self.critics[1].forward(&mut g_c, &self.store, z_oa, ParamMode::Trainable)?;
        let y_node = g_c.constant(y);
        let l1 = gradkit::mse(&mut g_c, q1, y_node);
        let l2 = gradkit::mse(&mut g_c, q2, y_node);
        let critic_loss_node = g_c.add(l1, l2);
        let critic_loss = g_c.value(critic_loss_node).get(0, 0);
        if !critic_loss.is_finite() {
            return Err(LabError::Numeric(format!(
                "non-finite critic loss at update {step}"
            )));
        }
        g_c.backward(critic_loss_node);
        self.store.zero_grads();
        g_c.collect_grads(&mut self.store);
        self.adam_critic.step(&mut self.store).map_err(|e| wrap(e.into()))?;
        if attached {
            ext.apply_rl_grads(&g_c).map_err(wrap)?;
        }

        self.update_count += 1;
        let mut actor_loss = None;
        if self.update_count % self.cfg.policy_delay == 0 {
            let mut g_a = Graph::new();
            let obs = g_a.constant(batch.obs.clone());
            let z_o = ext.encode_obs(&mut g_a, obs, EncodeMode::Detached)?;
            let raw = self
                .actor
                .forward(&mut g_a, &self.store, z_o, ParamMode::Trainable)?;
            let a_norm = g_a.unary(raw, UnaryFn::Tanh);
            let a_env = self.action_box.denorm_node(&mut g_a, a_norm);
            let z_oa_pi = ext.encode_obs_action(&mut g_a, z_o, a_env, EncodeMode::Detached)?;
            let q1pi =
                self.critics[0].forward(&mut g_a, &self.store, z_oa_pi, ParamMode::Detached)?;
            let mean_q = g_a.mean_all(q1pi);
            let loss_node = g_a.scale(mean_q, -1.0);
            let loss = g_a.value(loss_node).get(0, 0);
            if !loss.is_finite() {
                return Err(LabError::Numeric(format!(
                    "non-finite actor loss at update {step}"
                )));
            }
            g_a.backward(loss_node);
            self.store.zero_grads();
            g_a.collect_grads(&mut self.store);
            self.adam_actor.step(&mut self.store).map_err(|e| wrap(e.into()))?;
            actor_loss = Some(loss);

            self.store
                .polyak_from(&self.target_actor.ids(), &self.actor.ids(), self.cfg.tau);
            for k in 0..2 {
                self.store.polyak_from(
                    &self.target_critics[k].ids(),
                    &self.critics[k].ids(),
                    self.cfg.tau,
                );
            }
        }
        Ok(UpdateDiag {
            critic_loss,
            actor_loss,
            alpha: None,
        })
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn trainable_entry_total(&self) -> usize {
        let mut ids = self.actor.ids();
        ids.extend(self.critics[0].ids());
        ids.extend(self.critics[1].ids());
        self.store.count_entries(&ids)
    }
}
