//! Soft actor-critic with automatic temperature tuning.
//!
//! The actor is a squashed Gaussian over `z_o`; two critics (with polyak
//! target copies) read `z_oa`. Critic targets bootstrap through the minimum
//! of the target critics minus the temperature-weighted log-probability; the
//! temperature is tuned in log space toward a target entropy of
//! `-action_dim`.

use gradkit::{Adam, Graph, Matrix, Node, ParamMode, ParamStore, UnaryFn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::{ActionBox, Agent, MlpNet, Policy, UpdateDiag};
use crate::error::{LabError, Result};
use crate::extractors::{EncodeMode, Extractor};
use crate::replay::Batch;

const LOG_2PI: f64 = 1.8378770664093453;
const TANH_EPS: f64 = 1e-6;

/// Build the squashed-Gaussian action and its log-probability from raw actor
/// output `[mean | log_std]` and a fixed standard-normal draw.
fn squash_head(
    g: &mut Graph,
    actor_out: Node,
    eps: &Matrix,
    action_dim: usize,
    (log_std_min, log_std_max): (f64, f64),
) -> (Node, Node) {
    let mean = g.narrow_cols(actor_out, 0, action_dim);
    let log_std_raw = g.narrow_cols(actor_out, action_dim, action_dim);
    let log_std = g.clamp(log_std_raw, log_std_min, log_std_max);
    let std = g.unary(log_std, UnaryFn::Exp);
    let eps_node = g.constant(eps.clone());
    let scaled = g.mul(std, eps_node);
    let u = g.add(mean, scaled);
    let a_norm = g.unary(u, UnaryFn::Tanh);

    // log N(u; mean, std) = -log_std - eps^2/2 - log(2 pi)/2, elementwise
    let neg_log_std = g.unary(log_std, UnaryFn::Neg);
    let gauss_const = g.constant(eps.map(|e| -0.5 * e * e - 0.5 * LOG_2PI));
    let gauss = g.add(neg_log_std, gauss_const);
    let gauss_sum = g.sum_cols(gauss);
    // tanh change of variables: -sum log(1 - a^2 + eps)
    let sq = g.unary(a_norm, UnaryFn::Square);
    let neg_sq = g.unary(sq, UnaryFn::Neg);
    let inner = g.add_scalar(neg_sq, 1.0 + TANH_EPS);
    let log_inner = g.unary(inner, UnaryFn::Ln);
    let corr_sum = g.sum_cols(log_inner);
    let log_prob = g.sub(gauss_sum, corr_sum);
    (a_norm, log_prob)
}

#[derive(Debug, Clone)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub hidden: Vec<usize>,
    /// defaults to -action_dim
    pub target_entropy: Option<f64>,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            hidden: vec![256, 256],
            target_entropy: None,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }
}

pub struct SacAgent {
    cfg: SacConfig,
    action_box: ActionBox,
    action_dim: usize,
    target_entropy: f64,
    store: ParamStore,
    actor: MlpNet,
    critics: [MlpNet; 2],
    target_critics: [MlpNet; 2],
    log_alpha: gradkit::ParamId,
    adam_actor: Adam,
    adam_critic: Adam,
    adam_alpha: Adam,
    update_count: u64,
}

impl SacAgent {
    pub fn new(
        z_o_dim: usize,
        z_oa_dim: usize,
        action_box: ActionBox,
        cfg: SacConfig,
        seed: u64,
    ) -> Self {
        let action_dim = action_box.dim();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let actor = MlpNet::new(&mut store, "actor", z_o_dim, &cfg.hidden, 2 * action_dim, &mut rng);
        let critics = [
            MlpNet::new(&mut store, "critic1", z_oa_dim, &cfg.hidden, 1, &mut rng),
            MlpNet::new(&mut store, "critic2", z_oa_dim, &cfg.hidden, 1, &mut rng),
        ];
        let target_critics = [
            MlpNet::new(&mut store, "target_critic1", z_oa_dim, &cfg.hidden, 1, &mut rng),
            MlpNet::new(&mut store, "target_critic2", z_oa_dim, &cfg.hidden, 1, &mut rng),
        ];
        for k in 0..2 {
            store.polyak_from(&target_critics[k].ids(), &critics[k].ids(), 1.0);
        }
        let log_alpha = store.insert("log_alpha", Matrix::zeros(1, 1));
        let adam_actor = Adam::new(&store, actor.ids(), cfg.lr);
        let mut critic_ids = critics[0].ids();
        critic_ids.extend(critics[1].ids());
        let adam_critic = Adam::new(&store, critic_ids, cfg.lr);
        let adam_alpha = Adam::new(&store, vec![log_alpha], cfg.lr);
        let target_entropy = cfg.target_entropy.unwrap_or(-(action_dim as f64));
        SacAgent {
            cfg,
            action_box,
            action_dim,
            target_entropy,
            store,
            actor,
            critics,
            target_critics,
            log_alpha,
            adam_actor,
            adam_critic,
            adam_alpha,
            update_count: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.store.value(self.log_alpha).get(0, 0).exp()
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Finite-difference checks of the critic and actor loss graphs exactly
    /// as `update` builds them, over fixed encodings and noise. Returns the
    /// (critic, actor) reports.
    pub fn grad_check_losses(
        &mut self,
        z_o: &Matrix,
        z_oa: &Matrix,
        target: &Matrix,
        eps: &Matrix,
    ) -> (gradkit::GradCheckReport, gradkit::GradCheckReport) {
        let mut critic_ids = self.critics[0].ids();
        critic_ids.extend(self.critics[1].ids());
        let critics = &self.critics;
        let actor = &self.actor;
        let action_dim = self.action_dim;
        let bounds = (self.cfg.log_std_min, self.cfg.log_std_max);
        let action_box = &self.action_box;
        let alpha = self.store.value(self.log_alpha).get(0, 0).exp();
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
            let out = actor.forward(g, s, zo, ParamMode::Trainable).unwrap();
            let (a_norm, log_prob) = squash_head(g, out, eps, action_dim, bounds);
            let a_env = action_box.denorm_node(g, a_norm);
            let zoa = g.concat(zo, a_env);
            let q1 = critics[0].forward(g, s, zoa, ParamMode::Detached).unwrap();
            let q2 = critics[1].forward(g, s, zoa, ParamMode::Detached).unwrap();
            let qmin = g.min_elem(q1, q2);
            let weighted = g.scale(log_prob, alpha);
            let gap = g.sub(weighted, qmin);
            g.mean_all(gap)
        });
        (critic_report, actor_report)
    }

    fn sample_noise(&self, rows: usize, rng: &mut ChaCha12Rng) -> Matrix {
        let data: Vec<f64> = (0..rows * self.action_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Matrix::from_vec(rows, self.action_dim, data)
    }

    /// Squashed-Gaussian head for this agent's bounds.
    fn squash(&self, g: &mut Graph, actor_out: Node, eps: &Matrix) -> (Node, Node) {
        squash_head(
            g,
            actor_out,
            eps,
            self.action_dim,
            (self.cfg.log_std_min, self.cfg.log_std_max),
        )
    }

    /// Bootstrapped critic target `r + gamma (1 - done) (min Q' - alpha log pi')`.
    fn critic_target(
        &mut self,
        ext: &mut dyn Extractor,
        batch: &Batch,
        rng: &mut ChaCha12Rng,
    ) -> Result<Matrix> {
        let mut g = Graph::new();
        let next_obs = g.constant(batch.next_obs.clone());
        let z_next = ext.encode_obs(&mut g, next_obs, EncodeMode::Detached)?;
        let actor_out = self
            .actor
            .forward(&mut g, &self.store, z_next, ParamMode::Detached)?;
        let eps = self.sample_noise(batch.size(), rng);
        let (a_norm, log_prob) = self.squash(&mut g, actor_out, &eps);
        let a_env = self.action_box.denorm_node(&mut g, a_norm);
        let z_oa = ext.encode_obs_action(&mut g, z_next, a_env, EncodeMode::Detached)?;
        let q1 = self.target_critics[0].forward(&mut g, &self.store, z_oa, ParamMode::Detached)?;
        let q2 = self.target_critics[1].forward(&mut g, &self.store, z_oa, ParamMode::Detached)?;
        let qmin = g.min_elem(q1, q2);

        let alpha = self.alpha();
        let qv = g.value(qmin);
        let lv = g.value(log_prob);
        let mut y = Matrix::zeros(batch.size(), 1);
        for i in 0..batch.size() {
            let bootstrap = qv.get(i, 0) - alpha * lv.get(i, 0);
            y.set(
                i,
                0,
                batch.rewards.get(i, 0) + self.cfg.gamma * (1.0 - batch.done[i]) * bootstrap,
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

impl Policy for SacAgent {
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
        let out = self.actor.forward(&mut g, &self.store, z, ParamMode::Detached)?;
        let a = self.action_dim;
        let a_norm: Vec<f64> = if explore {
            let eps = self.sample_noise(1, rng);
            let (a_node, _) = self.squash(&mut g, out, &eps);
            g.value(a_node).row(0).to_vec()
        } else {
            let mean = g.narrow_cols(out, 0, a);
            let t = g.unary(mean, UnaryFn::Tanh);
            g.value(t).row(0).to_vec()
        };
        if a_norm.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Numeric("non-finite action from actor".into()));
        }
        Ok(self.action_box.denorm(&a_norm))
    }
}

impl Agent for SacAgent {
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

        // critic regression toward the bootstrapped target
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

        // actor maximizes min-critic minus temperature-weighted log-prob;
        // representations are always detached on this path
        let mut g_a = Graph::new();
        let obs = g_a.constant(batch.obs.clone());
        let z_o = ext.encode_obs(&mut g_a, obs, EncodeMode::Detached)?;
        let actor_out = self
            .actor
            .forward(&mut g_a, &self.store, z_o, ParamMode::Trainable)?;
        let eps = self.sample_noise(batch.size(), rng);
        let (a_norm, log_prob) = self.squash(&mut g_a, actor_out, &eps);
        let a_env = self.action_box.denorm_node(&mut g_a, a_norm);
        let z_oa_pi = ext.encode_obs_action(&mut g_a, z_o, a_env, EncodeMode::Detached)?;
        let q1pi = self.critics[0].forward(&mut g_a, &self.store, z_oa_pi, ParamMode::Detached)?;
        let q2pi = self.critics[1].forward(&mut g_a, &self.store, z_oa_pi, ParamMode::Detached)?;
        let qmin = g_a.min_elem(q1pi, q2pi);
        let alpha = self.alpha();
        let weighted = g_a.scale(log_prob, alpha);
        let gap = g_a.sub(weighted, qmin);
        let actor_loss_node = g_a.mean_all(gap);
        let actor_loss = g_a.value(actor_loss_node).get(0, 0);
        if !actor_loss.is_finite() {
            return Err(LabError::Numeric(format!(
                "non-finite actor loss at update {step}"
            )));
        }
        let mean_log_prob = {
            let lp = g_a.value(log_prob);
            lp.data().iter().sum::<f64>() / batch.size() as f64
        };
        g_a.backward(actor_loss_node);
        self.store.zero_grads();
        g_a.collect_grads(&mut self.store);
        self.adam_actor.step(&mut self.store).map_err(|e| wrap(e.into()))?;

        // temperature: minimize -alpha (log pi + target entropy)
        let mut g_t = Graph::new();
        let la = g_t.param(&self.store, self.log_alpha);
        let alpha_node = g_t.unary(la, UnaryFn::Exp);
        let coeff = g_t.constant(Matrix::from_vec(
            1,
            1,
            vec![-(mean_log_prob + self.target_entropy)],
        ));
        let alpha_loss = g_t.mul(alpha_node, coeff);
        g_t.backward(alpha_loss);
        self.store.zero_grads();
        g_t.collect_grads(&mut self.store);
        self.adam_alpha.step(&mut self.store).map_err(|e| wrap(e.into()))?;

        for k in 0..2 {
            self.store.polyak_from(
                &self.target_critics[k].ids(),
                &self.critics[k].ids(),
                self.cfg.tau,
            );
        }
        self.update_count += 1;
        Ok(UpdateDiag {
            critic_loss,
            actor_loss: Some(actor_loss),
            alpha: Some(self.alpha()),
        })
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn trainable_entry_total(&self) -> usize {
        let mut ids = self.actor.ids();
        ids.extend(self.critics[0].ids());
        ids.extend(self.critics[1].ids());
        ids.push(self.log_alpha);
        self.store.count_entries(&ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Transition;
    use crate::extractors::RawExtractor;
    use crate::rng::{substream, Stream};

    fn tiny_cfg() -> SacConfig {
        SacConfig {
            hidden: vec![16, 16],
            ..SacConfig::default()
        }
    }

    fn one_transition_batch(reward: f64) -> Batch {
        let t = Transition {
            obs: vec![0.3, -0.2],
            action: vec![0.5],
            next_obs: vec![0.1, 0.1],
            reward,
            done: false,
            truncated: false,
        };
        Batch::from_transitions(&[&t, &t])
    }

    #[test]
    fn evaluation_actions_are_deterministic_and_bounded() {
        let the_box = ActionBox {
            low: vec![-2.0],
            high: vec![2.0],
        };
        let mut agent = SacAgent::new(3, 4, the_box, tiny_cfg(), 0);
        let mut ext = RawExtractor::new(3, 1);
        let mut rng = substream(0, Stream::Agent, 0);
        let mut rng2 = substream(99, Stream::Agent, 7);
        let a1 = agent.act(&mut ext, &[0.1, 0.2, 0.3], false, &mut rng).unwrap();
        let a2 = agent.act(&mut ext, &[0.1, 0.2, 0.3], false, &mut rng2).unwrap();
        assert_eq!(a1, a2);
        for i in 0..10_000 {
            let obs = [
                (i as f64 * 0.619).sin() * 3.0,
                (i as f64 * 0.271).cos() * 3.0,
                (i as f64 * 0.113).sin() * 8.0,
            ];
            let a = agent.act(&mut ext, &obs, true, &mut rng).unwrap();
            assert!(a[0] >= -2.0 && a[0] <= 2.0, "action {a:?}");
        }
    }

    #[test]
    fn gamma_zero_critic_regresses_to_the_reward() {
        // with gamma = 0 the bootstrap vanishes: the target is exactly r, and
        // repeated regression on one transition drives Q(s, a) to r
        let reward = 0.7;
        let cfg = SacConfig {
            gamma: 0.0,
            hidden: vec![16, 16],
            lr: 1e-3,
            ..SacConfig::default()
        };
        let the_box = ActionBox {
            low: vec![-1.0],
            high: vec![1.0],
        };
        let mut agent = SacAgent::new(2, 3, the_box, cfg, 1);
        let mut ext = RawExtractor::new(2, 1);
        let batch = one_transition_batch(reward);
        let mut rng = substream(1, Stream::Agent, 0);

        let y = agent.critic_target(&mut ext, &batch, &mut rng).unwrap();
        assert_eq!(y.get(0, 0), reward);
        assert_eq!(y.get(1, 0), reward);

        for _ in 0..3000 {
            agent.update(&mut ext, &batch, false, &mut rng).unwrap();
        }
        // read the critic prediction
        let mut g = Graph::new();
        let o = g.constant(batch.obs.clone());
        let z = ext.encode_obs(&mut g, o, EncodeMode::Eval).unwrap();
        let a = g.constant(batch.actions.clone());
        let zoa = ext.encode_obs_action(&mut g, z, a, EncodeMode::Eval).unwrap();
        let q = agent.critics[0]
            .forward(&mut g, &agent.store, zoa, ParamMode::Detached)
            .unwrap();
        let got = g.value(q).get(0, 0);
        assert!((got - reward).abs() < 1e-2, "critic converged to {got}");
    }

    #[test]
    fn polyak_with_tau_one_copies_critics_into_targets() {
        let cfg = SacConfig {
            tau: 1.0,
            hidden: vec![8, 8],
            ..SacConfig::default()
        };
        let the_box = ActionBox {
            low: vec![-1.0],
            high: vec![1.0],
        };
        let mut agent = SacAgent::new(2, 3, the_box, cfg, 2);
        let mut ext = RawExtractor::new(2, 1);
        let batch = one_transition_batch(1.0);
        let mut rng = substream(2, Stream::Agent, 0);
        agent.update(&mut ext, &batch, false, &mut rng).unwrap();
        for k in 0..2 {
            for (t, c) in agent.target_critics[k]
                .ids()
                .iter()
                .zip(agent.critics[k].ids().iter())
            {
                assert_eq!(agent.store.value(*t), agent.store.value(*c));
            }
        }
    }

    #[test]
    fn temperature_stays_positive_under_training() {
        let the_box = ActionBox {
            low: vec![-1.0],
            high: vec![1.0],
        };
        let mut agent = SacAgent::new(2, 3, the_box, tiny_cfg(), 3);
        let mut ext = RawExtractor::new(2, 1);
        let batch = one_transition_batch(-1.0);
        let mut rng = substream(3, Stream::Agent, 0);
        for _ in 0..200 {
            agent.update(&mut ext, &batch, false, &mut rng).unwrap();
            assert!(agent.alpha() > 0.0);
        }
    }

    #[test]
    fn detached_updates_never_touch_extractor_parameters() {
        use crate::extractors::{ArchSpec, Connectivity, OfeExtractor};
        let spec = ArchSpec::new(
            Connectivity::Densenet,
            2,
            8,
            gradkit::Activation::Swish,
            true,
            2,
            1,
        );
        let mut ext = OfeExtractor::build(spec, 5, 3e-4).unwrap();
        let the_box = ActionBox {
            low: vec![-1.0],
            high: vec![1.0],
        };
        let mut agent = SacAgent::new(ext.z_o_dim(), ext.z_oa_dim(), the_box, tiny_cfg(), 4);
        let batch = one_transition_batch(0.5);
        let before = ext.store().to_bytes();
        let mut rng = substream(4, Stream::Agent, 0);
        for _ in 0..5 {
            agent.update(&mut ext, &batch, false, &mut rng).unwrap();
        }
        assert_eq!(ext.store().to_bytes(), before);
    }
}
