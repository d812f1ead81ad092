//! The online feature extractor: two stacked blocks (observation, then
//! observation-action) plus a linear prediction head trained to predict the
//! next observation.
//!
//! Batch norm, when enabled, sits between each affine map and its activation
//! and normalizes the new-feature block only, so a densenet layer's
//! concatenated input passes through unscaled -- the raw observation stays
//! verbatim in the leading coordinates of every block output.

use gradkit::{
    mse, Activation, Adam, BatchNorm, DenseLayer, Graph, Matrix, Node, ParamStore,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{check_finite_input, gather_cols, ArchSpec, Connectivity, EncodeMode, Extractor};
use crate::error::{LabError, Result};
use crate::replay::Batch;

struct UnitLayer {
    dense: DenseLayer,
    bn: Option<BatchNorm>,
}

impl UnitLayer {
    fn new(
        store: &mut ParamStore,
        name: String,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        use_bn: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let dense = DenseLayer::new(store, name.clone(), in_dim, out_dim, activation, rng);
        let bn = use_bn.then(|| BatchNorm::new(store, format!("{name}/bn"), out_dim));
        UnitLayer { dense, bn }
    }

    /// affine -> [batch norm] -> activation
    fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Node,
        mode: EncodeMode,
    ) -> Result<Node> {
        let mut z = self.dense.affine(g, store, x, mode.param_mode())?;
        if let Some(bn) = &self.bn {
            z = if mode.batch_stats() {
                bn.forward_train(g, store, z, mode.param_mode(), mode.update_stats())?
            } else {
                bn.forward_eval(g, store, z, mode.param_mode())?
            };
        }
        let out = g.unary(z, self.dense.activation.unary());
        if !g.value(out).all_finite() {
            return Err(LabError::Numeric(format!(
                "non-finite output in layer {:?}",
                self.dense.name
            )));
        }
        Ok(out)
    }

    fn trainable_ids(&self) -> Vec<gradkit::ParamId> {
        let mut ids = self.dense.param_ids();
        if let Some(bn) = &self.bn {
            ids.extend(bn.trainable_ids());
        }
        ids
    }

    fn param_count(&self) -> usize {
        self.dense.param_count() + self.bn.as_ref().map_or(0, |bn| bn.param_count())
    }
}

struct ResUnit {
    l1: UnitLayer,
    l2_dense: DenseLayer,
    l2_bn: Option<BatchNorm>,
    /// zero columns appended to the skip path when the block widens
    skip_pad: usize,
}

enum BlockKind {
    Dense(Vec<UnitLayer>),
    Mlp(Vec<UnitLayer>),
    Res(Vec<ResUnit>),
}

/// One extractor block mapping `in_dim` to `in_dim + total_increment`.
struct Block {
    kind: BlockKind,
    activation: Activation,
}

impl Block {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        spec: &ArchSpec,
        in_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Block {
        let out_dim = in_dim + spec.total_increment;
        let act = spec.activation;
        let kind = match spec.connectivity {
            Connectivity::Densenet => {
                let unit = spec.units_per_layer();
                let layers = (0..spec.layers_per_block)
                    .map(|i| {
                        UnitLayer::new(
                            store,
                            format!("{prefix}/layer{i}"),
                            in_dim + i * unit,
                            unit,
                            act,
                            spec.use_batch_norm,
                            rng,
                        )
                    })
                    .collect();
                BlockKind::Dense(layers)
            }
            Connectivity::Mlp => {
                let layers = (0..spec.layers_per_block)
                    .map(|i| {
                        let li = if i == 0 { in_dim } else { out_dim };
                        UnitLayer::new(
                            store,
                            format!("{prefix}/layer{i}"),
                            li,
                            out_dim,
                            act,
                            spec.use_batch_norm,
                            rng,
                        )
                    })
                    .collect();
                BlockKind::Mlp(layers)
            }
            Connectivity::Resnet => {
                let blocks = (0..spec.layers_per_block / 2)
                    .map(|i| {
                        let block_in = if i == 0 { in_dim } else { out_dim };
                        let l1 = UnitLayer::new(
                            store,
                            format!("{prefix}/block{i}/l1"),
                            block_in,
                            out_dim,
                            act,
                            spec.use_batch_norm,
                            rng,
                        );
                        let l2_dense = DenseLayer::new(
                            store,
                            format!("{prefix}/block{i}/l2"),
                            out_dim,
                            out_dim,
                            act,
                            rng,
                        );
                        let l2_bn = spec
                            .use_batch_norm
                            .then(|| BatchNorm::new(store, format!("{prefix}/block{i}/l2/bn"), out_dim));
                        ResUnit {
                            l1,
                            l2_dense,
                            l2_bn,
                            skip_pad: out_dim - block_in,
                        }
                    })
                    .collect();
                BlockKind::Res(blocks)
            }
        };
        Block {
            kind,
            activation: act,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        input: Node,
        mode: EncodeMode,
    ) -> Result<Node> {
        match &self.kind {
            BlockKind::Dense(layers) => {
                let mut x = input;
                for layer in layers {
                    let new = layer.forward(g, store, x, mode)?;
                    x = g.concat(x, new);
                }
                Ok(x)
            }
            BlockKind::Mlp(layers) => {
                let mut x = input;
                for layer in layers {
                    x = layer.forward(g, store, x, mode)?;
                }
                Ok(x)
            }
            BlockKind::Res(blocks) => {
                let mut x = input;
                for block in blocks {
                    let h = block.l1.forward(g, store, x, mode)?;
                    let mut z = block.l2_dense.affine(g, store, h, mode.param_mode())?;
                    if let Some(bn) = &block.l2_bn {
                        z = if mode.batch_stats() {
                            bn.forward_train(g, store, z, mode.param_mode(), mode.update_stats())?
                        } else {
                            bn.forward_eval(g, store, z, mode.param_mode())?
                        };
                    }
                    let skip = if block.skip_pad > 0 {
                        let rows = g.value(x).rows();
                        let zeros = g.constant(Matrix::zeros(rows, block.skip_pad));
                        g.concat(x, zeros)
                    } else {
                        x
                    };
                    let summed = g.add(z, skip);
                    x = g.unary(summed, self.activation.unary());
                }
                Ok(x)
            }
        }
    }

    fn trainable_ids(&self) -> Vec<gradkit::ParamId> {
        match &self.kind {
            BlockKind::Dense(layers) | BlockKind::Mlp(layers) => {
                layers.iter().flat_map(|l| l.trainable_ids()).collect()
            }
            BlockKind::Res(blocks) => blocks
                .iter()
                .flat_map(|b| {
                    let mut ids = b.l1.trainable_ids();
                    ids.extend(b.l2_dense.param_ids());
                    if let Some(bn) = &b.l2_bn {
                        ids.extend(bn.trainable_ids());
                    }
                    ids
                })
                .collect(),
        }
    }

    fn count_rows(&self, prefix: &str) -> Vec<LayerCount> {
        match &self.kind {
            BlockKind::Dense(layers) | BlockKind::Mlp(layers) => layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerCount {
                    name: format!("{prefix}/layer{i}"),
                    input_units: l.dense.in_dim,
                    output_units: l.dense.out_dim,
                    params: l.param_count(),
                })
                .collect(),
            BlockKind::Res(blocks) => blocks
                .iter()
                .enumerate()
                .flat_map(|(i, b)| {
                    [
                        LayerCount {
                            name: format!("{prefix}/block{i}/l1"),
                            input_units: b.l1.dense.in_dim,
                            output_units: b.l1.dense.out_dim,
                            params: b.l1.param_count(),
                        },
                        LayerCount {
                            name: format!("{prefix}/block{i}/l2"),
                            input_units: b.l2_dense.in_dim,
                            output_units: b.l2_dense.out_dim,
                            params: b.l2_dense.param_count()
                                + b.l2_bn.as_ref().map_or(0, |bn| bn.param_count()),
                        },
                    ]
                })
                .collect(),
        }
    }
}

/// Per-layer parameter accounting.
#[derive(Debug, Clone)]
pub struct LayerCount {
    pub name: String,
    pub input_units: usize,
    pub output_units: usize,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct ParamCountReport {
    pub phi_o: Vec<LayerCount>,
    pub phi_oa: Vec<LayerCount>,
    pub pred: LayerCount,
    pub phi_o_total: usize,
    pub phi_oa_total: usize,
    pub total: usize,
}

/// The online feature extractor.
pub struct OfeExtractor {
    spec: ArchSpec,
    store: ParamStore,
    phi_o: Block,
    phi_oa: Block,
    pred_head: DenseLayer,
    aux_adam: Adam,
    rl_adam: Option<Adam>,
}

impl OfeExtractor {
    /// Deterministic construction from the architecture spec and a seed.
    pub fn build(spec: ArchSpec, seed: u64, aux_lr: f64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let phi_o = Block::build(&mut store, "phi_o", &spec, spec.obs_dim, &mut rng);
        let phi_oa = Block::build(
            &mut store,
            "phi_oa",
            &spec,
            spec.z_o_dim() + spec.action_dim,
            &mut rng,
        );
        // purely linear prediction head
        let pred_head = DenseLayer::new(
            &mut store,
            "pred",
            spec.z_oa_dim(),
            spec.prediction_mask.len(),
            Activation::Identity,
            &mut rng,
        );
        let mut aux_ids = phi_o.trainable_ids();
        aux_ids.extend(phi_oa.trainable_ids());
        aux_ids.extend(pred_head.param_ids());
        let aux_adam = Adam::new(&store, aux_ids, aux_lr);
        Ok(OfeExtractor {
            spec,
            store,
            phi_o,
            phi_oa,
            pred_head,
            aux_adam,
            rl_adam: None,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    /// Change the auxiliary optimizer's learning rate (for schedules).
    pub fn set_aux_lr(&mut self, lr: f64) {
        self.aux_adam.set_learning_rate(lr);
    }

    /// Per-layer and total parameter counts (batch-norm statistics included).
    pub fn param_count(&self) -> ParamCountReport {
        let phi_o = self.phi_o.count_rows("phi_o");
        let phi_oa = self.phi_oa.count_rows("phi_oa");
        let pred = LayerCount {
            name: "pred".into(),
            input_units: self.pred_head.in_dim,
            output_units: self.pred_head.out_dim,
            params: self.pred_head.param_count(),
        };
        let phi_o_total = phi_o.iter().map(|r| r.params).sum();
        let phi_oa_total = phi_oa.iter().map(|r| r.params).sum();
        let total = phi_o_total + phi_oa_total + pred.params;
        ParamCountReport {
            phi_o,
            phi_oa,
            pred,
            phi_o_total,
            phi_oa_total,
            total,
        }
    }

    /// Auxiliary loss node over a batch: mean squared error between the
    /// prediction head and the masked next observation.
    fn aux_loss_node(&mut self, g: &mut Graph, batch: &Batch, mode: EncodeMode) -> Result<Node> {
        let obs = g.constant(batch.obs.clone());
        let z_o = self.encode_obs(g, obs, mode)?;
        let actions = g.constant(batch.actions.clone());
        let z_oa = self.encode_obs_action(g, z_o, actions, mode)?;
        let pred = self
            .pred_head
            .forward(g, &self.store, z_oa, mode.param_mode())?;
        let target = g.constant(gather_cols(&batch.next_obs, &self.spec.prediction_mask));
        Ok(mse(g, pred, target))
    }

    /// Auxiliary loss value without touching parameters or moving statistics.
    /// `eval_stats` switches between batch statistics and moving statistics.
    pub fn aux_loss(&mut self, batch: &Batch, eval_stats: bool) -> Result<f64> {
        let mode = if eval_stats {
            EncodeMode::Eval
        } else {
            EncodeMode::Detached
        };
        let mut g = Graph::new();
        let loss = self.aux_loss_node(&mut g, batch, mode)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// One Adam step on all auxiliary parameters; returns the loss value.
    /// Moving batch-norm statistics are updated by this pass.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.aux_loss_node(&mut g, batch, EncodeMode::AuxTrain)?;
        let value = g.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(LabError::Numeric(format!(
                "non-finite auxiliary loss at optimizer step {}",
                self.aux_adam.step_count() + 1
            )));
        }
        g.backward(loss);
        self.store.zero_grads();
        g.collect_grads(&mut self.store);
        self.aux_adam.step(&mut self.store).map_err(|e| {
            LabError::Numeric(format!(
                "auxiliary update step {}: {e}",
                self.aux_adam.step_count() + 1
            ))
        })?;
        Ok(value)
    }
}

impl Extractor for OfeExtractor {
    fn obs_dim(&self) -> usize {
        self.spec.obs_dim
    }

    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    fn z_o_dim(&self) -> usize {
        self.spec.z_o_dim()
    }

    fn z_oa_dim(&self) -> usize {
        self.spec.z_oa_dim()
    }

    fn encode_obs(&mut self, g: &mut Graph, obs: Node, mode: EncodeMode) -> Result<Node> {
        check_finite_input(g, obs, "observation input")?;
        if g.value(obs).cols() != self.spec.obs_dim {
            return Err(LabError::Config(format!(
                "encode_obs: input width {} does not match obs_dim {}",
                g.value(obs).cols(),
                self.spec.obs_dim
            )));
        }
        let z = self.phi_o.forward(g, &mut self.store, obs, mode)?;
        debug_assert_eq!(g.value(z).cols(), self.spec.z_o_dim());
        Ok(z)
    }

    fn encode_obs_action(
        &mut self,
        g: &mut Graph,
        z_o: Node,
        action: Node,
        mode: EncodeMode,
    ) -> Result<Node> {
        if g.value(z_o).cols() != self.spec.z_o_dim() {
            return Err(LabError::Config(format!(
                "encode_obs_action: z_o width {} does not match {}",
                g.value(z_o).cols(),
                self.spec.z_o_dim()
            )));
        }
        if g.value(action).cols() != self.spec.action_dim {
            return Err(LabError::Config(format!(
                "encode_obs_action: action width {} does not match {}",
                g.value(action).cols(),
                self.spec.action_dim
            )));
        }
        let joined = g.concat(z_o, action);
        let z = self.phi_oa.forward(g, &mut self.store, joined, mode)?;
        debug_assert_eq!(g.value(z).cols(), self.spec.z_oa_dim());
        Ok(z)
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
        // trunk only; the prediction head has no place in the agent losses
        let mut ids = self.phi_o.trainable_ids();
        ids.extend(self.phi_oa.trainable_ids());
        self.rl_adam = Some(Adam::new(&self.store, ids, lr));
        Ok(())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn describe(&self) -> String {
        format!("ofe-{}", self.spec.summary())
    }
}
