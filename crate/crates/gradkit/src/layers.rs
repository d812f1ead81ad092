//! Dense layers and batch normalization on top of the tape.

use rand::Rng;

use crate::error::{GradError, Result};
use crate::graph::{Graph, Node, UnaryFn};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};

/// Activation functions available to dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    LeakyRelu,
    Swish,
    Selu,
    Identity,
}

impl Activation {
    pub fn unary(self) -> UnaryFn {
        match self {
            Activation::Relu => UnaryFn::Relu,
            Activation::Tanh => UnaryFn::Tanh,
            Activation::LeakyRelu => UnaryFn::LeakyRelu,
            Activation::Swish => UnaryFn::Swish,
            Activation::Selu => UnaryFn::Selu,
            Activation::Identity => UnaryFn::Identity,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Swish => "swish",
            Activation::Selu => "selu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "swish" => Ok(Activation::Swish),
            "selu" => Ok(Activation::Selu),
            "identity" => Ok(Activation::Identity),
            other => Err(GradError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Whether a forward pass treats parameters as trainable leaves or detached
/// constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Detached,
}

/// Fully connected layer: `activation(x . weight^T + bias)`.
///
/// Weights are `out x in`, initialized U(-1/sqrt(in), 1/sqrt(in)) like the
/// bias.
pub struct DenseLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let name = name.into();
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = store.insert(
            format!("{name}/weight"),
            Matrix::uniform(out_dim, in_dim, scale, rng),
        );
        let bias = store.insert(
            format!("{name}/bias"),
            Matrix::uniform(1, out_dim, scale, rng),
        );
        DenseLayer {
            name,
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    /// Affine part only, no activation.
    pub fn affine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Node,
        mode: ParamMode,
    ) -> Result<Node> {
        let (_, cols) = g.value(x).shape();
        if cols != self.in_dim {
            return Err(GradError::Config(format!(
                "layer {:?} expects input width {}, got {}",
                self.name, self.in_dim, cols
            )));
        }
        let (w, b) = match mode {
            ParamMode::Trainable => (g.param(store, self.weight), g.param(store, self.bias)),
            ParamMode::Detached => (
                g.param_const(store, self.weight),
                g.param_const(store, self.bias),
            ),
        };
        let z = g.matmul_nt(x, w);
        Ok(g.add_row(z, b))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Node,
        mode: ParamMode,
    ) -> Result<Node> {
        let z = self.affine(g, store, x, mode)?;
        let out = g.unary(z, self.activation.unary());
        if !g.value(out).all_finite() {
            return Err(GradError::Numeric(format!(
                "non-finite output in dense layer {:?}",
                self.name
            )));
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Per-column batch normalization.
///
/// gamma/beta are trained; moving mean/variance are updated by exponential
/// average (`moving = momentum * moving + (1 - momentum) * batch`) only when a
/// train-mode pass asks for it. All four vectors live in the parameter store
/// so snapshots, parameter counts, and freeze checks see them; the optimizer
/// is only ever given gamma and beta.
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub moving_mean: ParamId,
    pub moving_var: ParamId,
    pub width: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: impl Into<String>, width: usize) -> Self {
        let name = name.into();
        let gamma = store.insert(format!("{name}/gamma"), Matrix::full(1, width, 1.0));
        let beta = store.insert(format!("{name}/beta"), Matrix::zeros(1, width));
        let moving_mean = store.insert(format!("{name}/moving_mean"), Matrix::zeros(1, width));
        let moving_var = store.insert(format!("{name}/moving_var"), Matrix::full(1, width, 1.0));
        BatchNorm {
            name,
            gamma,
            beta,
            moving_mean,
            moving_var,
            width,
            momentum: 0.99,
            epsilon: 1e-5,
        }
    }

    /// Train-mode pass over batch statistics. `update_stats` folds the batch
    /// mean/variance into the moving statistics.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Node,
        mode: ParamMode,
        update_stats: bool,
    ) -> Result<Node> {
        let (rows, cols) = g.value(x).shape();
        if cols != self.width {
            return Err(GradError::Config(format!(
                "batch norm {:?} expects width {}, got {}",
                self.name, self.width, cols
            )));
        }
        if rows < 2 {
            return Err(GradError::Usage(format!(
                "batch norm {:?}: train mode needs batch >= 2, got {}",
                self.name, rows
            )));
        }
        let (gamma, beta) = match mode {
            ParamMode::Trainable => (g.param(store, self.gamma), g.param(store, self.beta)),
            ParamMode::Detached => (
                g.param_const(store, self.gamma),
                g.param_const(store, self.beta),
            ),
        };
        let (out, mean, var) = g.batch_norm_train(x, gamma, beta, self.epsilon);
        if update_stats {
            let mm = store.value_mut(self.moving_mean);
            for (m, b) in mm.data_mut().iter_mut().zip(mean.iter()) {
                *m = self.momentum * *m + (1.0 - self.momentum) * b;
            }
            let mv = store.value_mut(self.moving_var);
            for (v, b) in mv.data_mut().iter_mut().zip(var.iter()) {
                *v = self.momentum * *v + (1.0 - self.momentum) * b;
            }
        }
        if !g.value(out).all_finite() {
            return Err(GradError::Numeric(format!(
                "non-finite output in batch norm {:?}",
                self.name
            )));
        }
        Ok(out)
    }

    /// Eval-mode pass over moving statistics: a fixed per-column affine map.
    pub fn forward_eval(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Node,
        mode: ParamMode,
    ) -> Result<Node> {
        let (_, cols) = g.value(x).shape();
        if cols != self.width {
            return Err(GradError::Config(format!(
                "batch norm {:?} expects width {}, got {}",
                self.name, self.width, cols
            )));
        }
        let (gamma, beta) = match mode {
            ParamMode::Trainable => (g.param(store, self.gamma), g.param(store, self.beta)),
            ParamMode::Detached => (
                g.param_const(store, self.gamma),
                g.param_const(store, self.beta),
            ),
        };
        let inv_std: Vec<f64> = store
            .value(self.moving_var)
            .data()
            .iter()
            .map(|&v| 1.0 / (v + self.epsilon).sqrt())
            .collect();
        let inv_std = g.constant(Matrix::from_vec(1, self.width, inv_std));
        let mean = g.param_const(store, self.moving_mean);
        // y = gamma * (x - mean) * inv_std + beta
        let scale = g.mul(gamma, inv_std);
        let scaled_mean = g.mul(mean, scale);
        let shift = g.sub(beta, scaled_mean);
        let xs = g.mul_row(x, scale);
        Ok(g.add_row(xs, shift))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.moving_mean, self.moving_var]
    }

    /// gamma, beta, moving mean and moving variance all count.
    pub fn param_count(&self) -> usize {
        4 * self.width
    }
}

/// Mean over the batch of the squared Euclidean distance between rows of
/// `pred` and rows of `target`.
pub fn mse(g: &mut Graph, pred: Node, target: Node) -> Node {
    let batch = g.value(pred).rows() as f64;
    let diff = g.sub(pred, target);
    let sq = g.unary(diff, UnaryFn::Square);
    let total = g.sum_all(sq);
    g.scale(total, 1.0 / batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn relu_dense_matches_definition() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let layer = DenseLayer::new(&mut store, "l", 3, 3, Activation::Relu, &mut rng);
        store.set_value(layer.weight, Matrix::eye(3));
        store.set_value(layer.bias, Matrix::zeros(1, 3));
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_from(&[-1.0, 0.0, 2.0]));
        let y = layer.forward(&mut g, &store, x, ParamMode::Detached).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn swish_at_zero_is_zero() {
        assert_eq!(UnaryFn::Swish.eval(0.0), 0.0);
    }

    #[test]
    fn selu_at_one_matches_reference_constant() {
        let got = UnaryFn::Selu.eval(1.0);
        assert!((got - 1.0507009873554805).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let layer = DenseLayer::new(&mut store, "id", 2, 2, Activation::Identity, &mut rng);
        store.set_value(layer.weight, Matrix::eye(2));
        store.set_value(layer.bias, Matrix::zeros(1, 2));
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_from(&[3.0, -1.5]));
        let y = layer.forward(&mut g, &store, x, ParamMode::Detached).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.5]);
    }

    #[test]
    fn dense_rejects_width_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let layer = DenseLayer::new(&mut store, "l", 4, 2, Activation::Tanh, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(1, 3));
        let err = layer
            .forward(&mut g, &store, x, ParamMode::Detached)
            .unwrap_err();
        assert!(matches!(err, GradError::Config(_)));
    }

    #[test]
    fn batch_norm_normalizes_two_point_column() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(2, 1, vec![1.0, 3.0]));
        let y = bn
            .forward_train(&mut g, &mut store, x, ParamMode::Detached, false)
            .unwrap();
        let out = g.value(y).data().to_vec();
        assert!((out[0] + 1.0).abs() < 1e-5, "got {out:?}");
        assert!((out[1] - 1.0).abs() < 1e-5, "got {out:?}");
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_from(&[0.5, -2.0, 7.0]));
        let y = bn
            .forward_eval(&mut g, &store, x, ParamMode::Detached)
            .unwrap();
        // output is x / sqrt(1 + eps), identity up to the epsilon scaling
        for (a, b) in g.value(y).data().iter().zip([0.5, -2.0, 7.0]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        store.set_value(bn.gamma, Matrix::zeros(1, 2));
        store.set_value(bn.beta, Matrix::row_from(&[0.25, -0.5]));
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = bn
            .forward_train(&mut g, &mut store, x, ParamMode::Detached, false)
            .unwrap();
        assert_eq!(g.value(y).row(0), &[0.25, -0.5]);
        assert_eq!(g.value(y).row(1), &[0.25, -0.5]);
    }

    #[test]
    fn batch_of_one_in_train_mode_is_a_usage_error() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(1, 2));
        let err = bn
            .forward_train(&mut g, &mut store, x, ParamMode::Detached, false)
            .unwrap_err();
        assert!(matches!(err, GradError::Usage(_)));
    }

    #[test]
    fn moving_stats_follow_exponential_average() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(2, 1, vec![1.0, 3.0]));
        bn.forward_train(&mut g, &mut store, x, ParamMode::Detached, true)
            .unwrap();
        // mean 2, biased var 1: moving_mean = 0.99*0 + 0.01*2, moving_var = 0.99*1 + 0.01*1
        assert!((store.value(bn.moving_mean).get(0, 0) - 0.02).abs() < 1e-12);
        assert!((store.value(bn.moving_var).get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_of_single_row_is_sum_of_squares() {
        let mut g = Graph::new();
        let p = g.constant(Matrix::row_from(&[1.0, 2.0]));
        let t = g.constant(Matrix::row_from(&[0.0, 4.0]));
        let loss = mse(&mut g, p, t);
        assert_eq!(g.value(loss).get(0, 0), 1.0 + 4.0);
    }
}
