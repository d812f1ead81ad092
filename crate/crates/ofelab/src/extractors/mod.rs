//! Feature extractors: the trained observation/observation-action encodings
//! agents consume.
//!
//! [`OfeExtractor`] is the online feature extractor trained with the
//! next-observation prediction loss; [`RawExtractor`] is the identity
//! baseline. The model-network baseline in [`crate::mlmodel`] implements the
//! same [`Extractor`] trait.

mod ofe;

pub use ofe::{LayerCount, OfeExtractor, ParamCountReport};

use gradkit::{Activation, Graph, Matrix, Node, ParamMode, ParamStore};

use crate::error::{LabError, Result};
use crate::replay::Batch;

/// Connectivity family of a feature-extractor block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// each layer outputs `[x, act(W x + b)]`
    Densenet,
    /// plain feed-forward chain
    Mlp,
    /// residual blocks `act(W2 act(W1 x) + x)`, two weight layers per block
    Resnet,
}

impl Connectivity {
    pub fn name(self) -> &'static str {
        match self {
            Connectivity::Densenet => "densenet",
            Connectivity::Mlp => "mlp",
            Connectivity::Resnet => "resnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "densenet" => Ok(Connectivity::Densenet),
            "mlp" => Ok(Connectivity::Mlp),
            "resnet" => Ok(Connectivity::Resnet),
            other => Err(LabError::Config(format!("unknown connectivity {other:?}"))),
        }
    }
}

/// Declarative description of a feature-extractor architecture.
///
/// Both blocks (observation and observation-action) use the same layer count
/// and add `total_increment` dimensions each. `prediction_mask` lists the
/// observation indices the auxiliary head predicts, in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub connectivity: Connectivity,
    pub layers_per_block: usize,
    pub total_increment: usize,
    pub activation: Activation,
    pub use_batch_norm: bool,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub prediction_mask: Vec<usize>,
}

impl ArchSpec {
    pub fn new(
        connectivity: Connectivity,
        layers_per_block: usize,
        total_increment: usize,
        activation: Activation,
        use_batch_norm: bool,
        obs_dim: usize,
        action_dim: usize,
    ) -> Self {
        ArchSpec {
            connectivity,
            layers_per_block,
            total_increment,
            activation,
            use_batch_norm,
            obs_dim,
            action_dim,
            prediction_mask: (0..obs_dim).collect(),
        }
    }

    /// Exclude the given observation indices from the prediction target.
    pub fn mask_out(mut self, excluded: &[usize]) -> Self {
        self.prediction_mask = (0..self.obs_dim).filter(|i| !excluded.contains(i)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.action_dim == 0 {
            return Err(LabError::Config("obs_dim and action_dim must be positive".into()));
        }
        if self.layers_per_block == 0 {
            return Err(LabError::Config(
                "feature extractors need at least one layer per block".into(),
            ));
        }
        match self.connectivity {
            Connectivity::Densenet => {
                if self.total_increment % self.layers_per_block != 0 {
                    return Err(LabError::Config(format!(
                        "densenet increment {} is not divisible by {} layers",
                        self.total_increment, self.layers_per_block
                    )));
                }
                if self.total_increment == 0 {
                    return Err(LabError::Config("densenet increment must be positive".into()));
                }
            }
            Connectivity::Resnet => {
                if self.layers_per_block % 2 != 0 {
                    return Err(LabError::Config(
                        "resnet blocks hold two weight layers, so the layer count must be even"
                            .into(),
                    ));
                }
            }
            Connectivity::Mlp => {}
        }
        if self.prediction_mask.is_empty() {
            return Err(LabError::Config("prediction mask must keep at least one index".into()));
        }
        if self.prediction_mask.iter().any(|&i| i >= self.obs_dim) {
            return Err(LabError::Config("prediction mask index out of range".into()));
        }
        Ok(())
    }

    /// Width of the observation representation.
    pub fn z_o_dim(&self) -> usize {
        self.obs_dim + self.total_increment
    }

    /// Width of the observation-action representation.
    pub fn z_oa_dim(&self) -> usize {
        self.z_o_dim() + self.action_dim + self.total_increment
    }

    /// Per-layer unit count for densenet blocks.
    pub fn units_per_layer(&self) -> usize {
        self.total_increment / self.layers_per_block
    }

    pub fn summary(&self) -> String {
        format!(
            "{}-{}l-{}inc-{}{}",
            self.connectivity.name(),
            self.layers_per_block,
            self.total_increment,
            self.activation.name(),
            if self.use_batch_norm { "-bn" } else { "" }
        )
    }
}

/// How an encoding pass treats parameters and batch-norm statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Auxiliary training: batch statistics, moving statistics updated,
    /// parameters trainable.
    AuxTrain,
    /// Agent update with gradients flowing into the extractor (`no_aux`
    /// wiring): batch statistics, no stats update, parameters trainable.
    Attached,
    /// Agent update, detached: batch statistics, no stats update, parameters
    /// constant.
    Detached,
    /// Action selection / test scoring: moving statistics, parameters
    /// constant.
    Eval,
}

impl EncodeMode {
    pub(crate) fn param_mode(self) -> ParamMode {
        match self {
            EncodeMode::AuxTrain | EncodeMode::Attached => ParamMode::Trainable,
            EncodeMode::Detached | EncodeMode::Eval => ParamMode::Detached,
        }
    }

    pub(crate) fn batch_stats(self) -> bool {
        !matches!(self, EncodeMode::Eval)
    }

    pub(crate) fn update_stats(self) -> bool {
        matches!(self, EncodeMode::AuxTrain)
    }
}

/// Common interface between agents and every extractor variant.
pub trait Extractor {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn z_o_dim(&self) -> usize;
    fn z_oa_dim(&self) -> usize;

    /// Encode a batch of observations into `z_o`.
    fn encode_obs(&mut self, g: &mut Graph, obs: Node, mode: EncodeMode) -> Result<Node>;

    /// Encode `(z_o, action)` into `z_oa`. `z_o` must come from
    /// [`Extractor::encode_obs`] on the same graph.
    fn encode_obs_action(
        &mut self,
        g: &mut Graph,
        z_o: Node,
        action: Node,
        mode: EncodeMode,
    ) -> Result<Node>;

    /// One optimizer step on the extractor's own objective. `None` when it
    /// has no auxiliary objective (raw baseline).
    fn aux_update(&mut self, batch: &Batch) -> Result<Option<f64>>;

    /// Route agent-loss gradients captured on `g` into the extractor and
    /// apply its RL optimizer. Only meaningful after
    /// [`Extractor::enable_rl_updates`].
    fn apply_rl_grads(&mut self, g: &Graph) -> Result<()>;

    /// Create the optimizer used by [`Extractor::apply_rl_grads`].
    fn enable_rl_updates(&mut self, lr: f64) -> Result<()>;

    fn store(&self) -> &ParamStore;

    /// Total scalar parameter entries (batch-norm statistics included).
    fn param_entry_total(&self) -> usize {
        self.store().count_entries(&self.store().ids())
    }

    fn describe(&self) -> String;
}

/// Identity baseline: `z_o = o`, `z_oa = [o, a]`.
pub struct RawExtractor {
    obs_dim: usize,
    action_dim: usize,
    store: ParamStore,
}

impl RawExtractor {
    pub fn new(obs_dim: usize, action_dim: usize) -> Self {
        RawExtractor {
            obs_dim,
            action_dim,
            store: ParamStore::new(),
        }
    }
}

impl Extractor for RawExtractor {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn z_o_dim(&self) -> usize {
        self.obs_dim
    }

    fn z_oa_dim(&self) -> usize {
        self.obs_dim + self.action_dim
    }

    fn encode_obs(&mut self, g: &mut Graph, obs: Node, _mode: EncodeMode) -> Result<Node> {
        check_finite_input(g, obs, "raw extractor observation")?;
        Ok(obs)
    }

    fn encode_obs_action(
        &mut self,
        g: &mut Graph,
        z_o: Node,
        action: Node,
        _mode: EncodeMode,
    ) -> Result<Node> {
        if g.value(z_o).cols() != self.obs_dim {
            return Err(LabError::Config(format!(
                "raw extractor: z_o width {} does not match obs_dim {}",
                g.value(z_o).cols(),
                self.obs_dim
            )));
        }
        Ok(g.concat(z_o, action))
    }

    fn aux_update(&mut self, _batch: &Batch) -> Result<Option<f64>> {
        Ok(None)
    }

    fn apply_rl_grads(&mut self, _g: &Graph) -> Result<()> {
        Ok(())
    }

    fn enable_rl_updates(&mut self, _lr: f64) -> Result<()> {
        Ok(())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn describe(&self) -> String {
        "raw".into()
    }
}

pub(crate) fn check_finite_input(g: &Graph, node: Node, what: &str) -> Result<()> {
    if !g.value(node).all_finite() {
        return Err(LabError::Numeric(format!("non-finite {what}")));
    }
    Ok(())
}

/// Copy the masked columns of `src` into a fresh matrix (prediction targets).
pub(crate) fn gather_cols(src: &Matrix, mask: &[usize]) -> Matrix {
    let rows = src.rows();
    let mut out = Matrix::zeros(rows, mask.len());
    for i in 0..rows {
        for (k, &j) in mask.iter().enumerate() {
            out.set(i, k, src.get(i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walker_scale_dims() {
        let spec = ArchSpec::new(
            Connectivity::Densenet,
            6,
            120,
            Activation::Swish,
            true,
            17,
            6,
        );
        spec.validate().unwrap();
        assert_eq!(spec.z_o_dim(), 137);
        assert_eq!(spec.z_oa_dim(), 263);
        assert_eq!(spec.units_per_layer(), 20);
    }

    #[test]
    fn indivisible_densenet_increment_is_rejected() {
        let spec = ArchSpec::new(
            Connectivity::Densenet,
            6,
            100,
            Activation::Relu,
            true,
            17,
            6,
        );
        assert!(matches!(spec.validate(), Err(LabError::Config(_))));
    }

    #[test]
    fn zero_layer_blocks_are_rejected() {
        let spec = ArchSpec::new(Connectivity::Mlp, 0, 120, Activation::Relu, false, 17, 6);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn odd_resnet_layer_counts_are_rejected() {
        let spec = ArchSpec::new(Connectivity::Resnet, 3, 120, Activation::Relu, false, 17, 6);
        assert!(spec.validate().is_err());
        let spec = ArchSpec::new(Connectivity::Resnet, 4, 120, Activation::Relu, false, 17, 6);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn raw_extractor_is_identity_and_concat() {
        let mut ext = RawExtractor::new(3, 2);
        let mut g = Graph::new();
        let o = g.constant(Matrix::row_from(&[1.0, 2.0, 3.0]));
        let z = ext.encode_obs(&mut g, o, EncodeMode::Eval).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 2.0, 3.0]);
        let a = g.constant(Matrix::row_from(&[-1.0, 0.5]));
        let zoa = ext.encode_obs_action(&mut g, z, a, EncodeMode::Eval).unwrap();
        assert_eq!(g.value(zoa).data(), &[1.0, 2.0, 3.0, -1.0, 0.5]);
        assert_eq!(ext.z_oa_dim(), 5);
    }

    #[test]
    fn mask_out_removes_excluded_indices() {
        let spec = ArchSpec::new(
            Connectivity::Densenet,
            2,
            32,
            Activation::Relu,
            true,
            6,
            2,
        )
        .mask_out(&[4, 5]);
        assert_eq!(spec.prediction_mask, vec![0, 1, 2, 3]);
    }
}
