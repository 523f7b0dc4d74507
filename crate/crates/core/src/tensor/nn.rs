//! Named parameters and the layer building blocks used by every network:
//! fully connected layers, batch norm, and shared MLP stacks.

use std::collections::HashMap;

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::{Tensor, TensorError};

/// A named tensor registered in a [`ParamSet`]. Trainable entries carry
/// `requires_grad`; running statistics are registered as non-trainable.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat, insertion-ordered store of all model state. The order is the
/// iteration order everywhere (optimizer, checkpoints), which keeps runs
/// reproducible.
#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateName { name: name.to_string() });
        }
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = trainable;
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(Parameter {
            name: name.to_string(),
            tensor,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    /// Count of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            if p.trainable() {
                p.tensor.zero_grad();
            }
        }
    }

    pub(crate) fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].tensor.data
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].tensor.data
    }
}

impl Graph {
    /// Load a parameter as a leaf of this graph. Gradients flow back to the
    /// parameter through [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let entry = params.get(id);
        let mut t = entry.tensor.clone();
        t.grad = None;
        self.push_param_leaf(t, id.0)
    }

    /// Add every param-leaf gradient of this graph into the owning
    /// parameters. Leaves the loss never reached contribute zeros.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for node in 0..self.len() {
            let id = NodeId(node);
            let Some(idx) = self.param_index(id) else { continue };
            if !params.entries[idx].trainable() {
                continue;
            }
            let Some(grad) = self.grad(id) else { continue };
            let grad = grad.to_vec();
            let target = &mut params.entries[idx].tensor;
            let buf = target
                .grad
                .get_or_insert_with(|| vec![0.0; target.data.len()]);
            for (a, b) in buf.iter_mut().zip(&grad) {
                *a += b;
            }
        }
    }
}

/// Glorot-uniform weight draw.
fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

/// Fully connected layer `y = x·W + b`.
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let weight = params.register(
            &format!("{name}.weight"),
            vec![in_dim, out_dim],
            glorot(rng, in_dim, out_dim),
            true,
        )?;
        let bias = params.register(&format!("{name}.bias"), vec![out_dim], vec![0.0; out_dim], true)?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias_row(y, b)
    }
}

/// Batch normalization over the row axis with running statistics for
/// inference. `momentum` is the retention factor of the running average.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Result<Self, TensorError> {
        let gamma = params.register(&format!("{name}.gamma"), vec![channels], vec![1.0; channels], true)?;
        let beta = params.register(&format!("{name}.beta"), vec![channels], vec![0.0; channels], true)?;
        let running_mean = params.register(
            &format!("{name}.running_mean"),
            vec![channels],
            vec![0.0; channels],
            false,
        )?;
        let running_var = params.register(
            &format!("{name}.running_var"),
            vec![channels],
            vec![1.0; channels],
            false,
        )?;
        Ok(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId, TensorError> {
        let gamma = g.param(params, self.gamma);
        let beta = g.param(params, self.beta);
        if training {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
            let m = self.momentum;
            for (rm, bm) in params.data_mut(self.running_mean).iter_mut().zip(&stats.mean) {
                *rm = m * *rm + (1.0 - m) * bm;
            }
            for (rv, bv) in params
                .data_mut(self.running_var)
                .iter_mut()
                .zip(&stats.var_unbiased)
            {
                *rv = m * *rv + (1.0 - m) * bv;
            }
            Ok(y)
        } else {
            let mean = params.data(self.running_mean).to_vec();
            let var = params.data(self.running_var).to_vec();
            g.batch_norm_infer(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

struct MlpStage {
    linear: Linear,
    bn: Option<BatchNorm>,
    relu: bool,
}

/// Shared MLP: a stack of fully connected layers applied row-wise, each
/// optionally followed by batch norm and ReLU.
pub struct Mlp {
    stages: Vec<MlpStage>,
}

impl Mlp {
    /// `dims` lists input, hidden, and output widths. When
    /// `activate_last` is false the final stage is a plain linear map
    /// (used for attention logits).
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        batch_norm: bool,
        activate_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut stages = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            let activate = !last || activate_last;
            let stage_name = format!("{name}.{i}");
            let linear = Linear::new(params, &stage_name, dims[i], dims[i + 1], rng)?;
            let bn = if batch_norm && activate {
                Some(BatchNorm::new(params, &format!("{stage_name}.bn"), dims[i + 1])?)
            } else {
                None
            };
            stages.push(MlpStage { linear, bn, relu: activate });
        }
        Ok(Mlp { stages })
    }

    pub fn in_dim(&self) -> usize {
        self.stages[0].linear.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.stages.last().unwrap().linear.out_dim
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId, TensorError> {
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.linear.forward(g, params, cur)?;
            if let Some(bn) = &stage.bn {
                cur = bn.forward(g, params, cur, training)?;
            }
            if stage.relu {
                cur = g.relu(cur);
            }
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut params = ParamSet::new();
        params.register("w", vec![1], vec![0.0], true).unwrap();
        let err = params.register("w", vec![1], vec![0.0], true).unwrap_err();
        assert!(matches!(err, TensorError::DuplicateName { .. }));
    }

    #[test]
    fn param_grads_flow_back_to_the_set() {
        let mut params = ParamSet::new();
        let w = params
            .register("w", vec![2, 1], vec![3.0, -2.0], true)
            .unwrap();
        params.zero_grads();
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let wn = g.param(&params, w);
        let y = g.matmul(x, wn).unwrap();
        let loss = g.mean_all(y);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut params);
        let grad = params.get(w).tensor.grad.as_deref().unwrap();
        assert_eq!(grad, &[1.0, 2.0]);
    }

    #[test]
    fn linear_applies_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let lin = Linear::new(&mut params, "fc", 2, 2, &mut rng).unwrap();
        params.data_mut(lin.weight).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params.data_mut(lin.bias).copy_from_slice(&[10.0, 20.0]);
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let y = lin.forward(&mut g, &params, x).unwrap();
        assert_eq!(g.data(y), &[11.0, 22.0]);
    }

    #[test]
    fn batch_norm_running_stats_track_batches() {
        let mut params = ParamSet::new();
        let bn = BatchNorm::new(&mut params, "bn", 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(vec![2, 1], vec![1.0, 3.0]).unwrap();
        bn.forward(&mut g, &mut params, x, true).unwrap();
        // mean 2, unbiased var 2, blended into (0, 1) with momentum 0.9
        let rm = params.data(bn.running_mean)[0];
        let rv = params.data(bn.running_var)[0];
        assert!((rm - 0.2).abs() < 1e-12);
        assert!((rv - (0.9 + 0.2)).abs() < 1e-12);

        // inference normalizes with the running stats and mutates nothing
        let mut g2 = Graph::new();
        let x2 = g2.constant(vec![1, 1], vec![0.2]).unwrap();
        let y2 = bn.forward(&mut g2, &mut params, x2, false).unwrap();
        assert!((g2.data(y2)[0]).abs() < 1e-12);
        assert!((params.data(bn.running_mean)[0] - rm).abs() == 0.0);
    }

    #[test]
    fn mlp_shapes_and_final_linear_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "m", &[3, 5, 4], true, false, &mut rng).unwrap();
        assert_eq!(mlp.in_dim(), 3);
        assert_eq!(mlp.out_dim(), 4);
        let mut g = Graph::new();
        let x = g.constant(vec![6, 3], vec![0.1; 18]).unwrap();
        let y = mlp.forward(&mut g, &mut params, x, true).unwrap();
        assert_eq!(g.shape(y), &[6, 4]);
        // final stage has no bn entries
        assert!(params.id_of("m.1.bn.gamma").is_none());
        assert!(params.id_of("m.0.bn.gamma").is_some());
    }
}
