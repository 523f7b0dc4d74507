//! Define-by-run computation graph.
//!
//! Every operation appends one node holding its forward value plus whatever
//! the backward pass needs (input ids, saved statistics, argmax positions).
//! `backward` walks the tape from the loss node toward the leaves,
//! accumulating gradients in a fixed order so repeated runs are bit-stable.

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

struct Node {
    value: Tensor,
    op: Op,
    /// Index into the `ParamSet` this leaf was loaded from, if any.
    pub(crate) param: Option<usize>,
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBiasRow { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Relu { a: NodeId },
    SoftmaxAxis { a: NodeId, axis: usize },
    SumAxis { a: NodeId, axis: usize },
    MaxAxis { a: NodeId, argmax: Vec<usize> },
    MeanAll { a: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    GatherRows { a: NodeId, indices: Vec<usize> },
    ScatterRows { a: NodeId, indices: Vec<usize> },
    ScaleRows { a: NodeId, weights: Vec<f64> },
    Reshape { a: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, invstd: Vec<f64>, training: bool },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

/// Batch statistics captured by a training-mode batch norm, handed back to
/// the caller so it can update running averages.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_biased: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, None)
    }

    /// Leaf that never receives gradient (geometry, masks, labels as data).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId, TensorError> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub(crate) fn push_param_leaf(&mut self, value: Tensor, param_index: usize) -> NodeId {
        self.push(value, Op::Leaf, Some(param_index))
    }

    fn push(&mut self, value: Tensor, op: Op, param: Option<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, param });
        id
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let mut t = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        t.requires_grad = requires_grad;
        self.push(t, op, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Gradient of a node, zeros if backward never reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match self.nodes[id.0].value.grad {
            Some(ref g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].value.data.len()],
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    pub(crate) fn param_index(&self, id: NodeId) -> Option<usize> {
        self.nodes[id.0].param
    }

    fn rank2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::DimensionMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.result(vec![m, n], data, rg, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimensionMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.result(shape, data, rg, Op::Add { a, b }))
    }

    /// `a[m,n] + bias[n]`, bias broadcast over rows.
    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.rank2(a, "add_bias_row")?;
        if self.shape(bias) != [n] {
            return Err(TensorError::DimensionMismatch {
                op: "add_bias_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bias_data = self.data(bias);
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias_data[j];
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.result(vec![m, n], data, rg, Op::AddBiasRow { a, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimensionMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.result(shape, data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.result(shape, data, rg, Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.result(shape, data, rg, Op::Relu { a })
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(src[at(k)]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    data[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    data[at(k)] /= sum;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.result(shape, data, rg, Op::SoftmaxAxis { a, axis }))
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        let out_shape = removed_axis(&shape, axis);
        let rg = self.requires(a);
        Ok(self.result(out_shape, data, rg, Op::SumAxis { a, axis }))
    }

    /// Max along `axis`, removing it. Ties resolve to the lowest index, and
    /// the backward pass routes gradient only to that element.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.data(a);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let flat = (o * len + k) * inner + i;
                    let out = o * inner + i;
                    if src[flat] > data[out] {
                        data[out] = src[flat];
                        argmax[out] = flat;
                    }
                }
            }
        }
        let out_shape = removed_axis(&shape, axis);
        let rg = self.requires(a);
        Ok(self.result(out_shape, data, rg, Op::MaxAxis { a, argmax }))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let src = self.data(a);
        let mean = src.iter().sum::<f64>() / src.len() as f64;
        let rg = self.requires(a);
        self.result(vec![1], vec![mean], rg, Op::MeanAll { a })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, p) = self.rank2(a, "concat_cols")?;
        let (m2, q) = self.rank2(b, "concat_cols")?;
        if m != m2 {
            return Err(TensorError::DimensionMismatch {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&da[i * p..(i + 1) * p]);
            data.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.result(vec![m, p + q], data, rg, Op::ConcatCols { a, b }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let (_, n) = self.rank2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (m, n2) = self.rank2(p, "concat_rows")?;
            if n2 != n {
                return Err(TensorError::DimensionMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += m;
            data.extend_from_slice(self.data(p));
            rg |= self.requires(p);
        }
        Ok(self.result(vec![rows, n], data, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Select rows of a 2-D tensor by index; duplicates allowed, gradients
    /// accumulate back into the source rows.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let (m, n) = self.rank2(a, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(TensorError::DimensionMismatch {
                op: "gather_rows",
                lhs: vec![m, n],
                rhs: vec![bad],
            });
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.requires(a);
        Ok(self.result(
            vec![indices.len(), n],
            data,
            rg,
            Op::GatherRows { a, indices: indices.to_vec() },
        ))
    }

    /// Place rows of `a` at `indices` within a zero matrix of `out_rows`
    /// rows. Indices must be distinct.
    pub fn scatter_rows(
        &mut self,
        a: NodeId,
        indices: &[usize],
        out_rows: usize,
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.rank2(a, "scatter_rows")?;
        debug_assert_eq!(m, indices.len());
        let mut seen = vec![false; out_rows];
        for &i in indices {
            if i >= out_rows || seen[i] {
                return Err(TensorError::DimensionMismatch {
                    op: "scatter_rows",
                    lhs: vec![out_rows, n],
                    rhs: vec![i],
                });
            }
            seen[i] = true;
        }
        let src = self.data(a);
        let mut data = vec![0.0; out_rows * n];
        for (r, &i) in indices.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.requires(a);
        Ok(self.result(
            vec![out_rows, n],
            data,
            rg,
            Op::ScatterRows { a, indices: indices.to_vec() },
        ))
    }

    /// Multiply each row of `a[m,n]` by a fixed (non-differentiated) weight.
    pub fn scale_rows(&mut self, a: NodeId, weights: &[f64]) -> Result<NodeId, TensorError> {
        let (m, n) = self.rank2(a, "scale_rows")?;
        if weights.len() != m {
            return Err(TensorError::DimensionMismatch {
                op: "scale_rows",
                lhs: vec![m, n],
                rhs: vec![weights.len()],
            });
        }
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] * weights[i];
            }
        }
        let rg = self.requires(a);
        Ok(self.result(vec![m, n], data, rg, Op::ScaleRows { a, weights: weights.to_vec() }))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(a).len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: new_shape,
                len: self.data(a).len(),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.requires(a);
        Ok(self.result(new_shape, data, rg, Op::Reshape { a }))
    }

    /// Training-mode batch norm over rows of `x[rows,channels]`. Normalizes
    /// with the biased batch variance and returns the statistics so the
    /// caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats), TensorError> {
        let (rows, ch) = self.rank2(x, "batch_norm")?;
        if rows < 2 {
            return Err(TensorError::BatchTooSmall { rows });
        }
        self.check_bn_params(ch, gamma, beta)?;
        let src = self.data(x);
        let mut mean = vec![0.0; ch];
        for i in 0..rows {
            for c in 0..ch {
                mean[c] += src[i * ch + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; ch];
        for i in 0..rows {
            for c in 0..ch {
                let d = src[i * ch + c] - mean[c];
                var[c] += d * d;
            }
        }
        let var_biased: Vec<f64> = var.iter().map(|v| v / rows as f64).collect();
        let var_unbiased: Vec<f64> = var.iter().map(|v| v / (rows as f64 - 1.0)).collect();
        let invstd: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let node = self.bn_forward(x, gamma, beta, mean.clone(), invstd, true);
        Ok((
            node,
            BatchStats {
                mean,
                var_biased,
                var_unbiased,
            },
        ))
    }

    /// Inference-mode batch norm using fixed statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (_, ch) = self.rank2(x, "batch_norm")?;
        self.check_bn_params(ch, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return Err(TensorError::DimensionMismatch {
                op: "batch_norm",
                lhs: vec![ch],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_forward(x, gamma, beta, mean.to_vec(), invstd, false))
    }

    fn check_bn_params(&self, ch: usize, gamma: NodeId, beta: NodeId) -> Result<(), TensorError> {
        for id in [gamma, beta] {
            if self.shape(id) != [ch] {
                return Err(TensorError::DimensionMismatch {
                    op: "batch_norm",
                    lhs: vec![ch],
                    rhs: self.shape(id).to_vec(),
                });
            }
        }
        Ok(())
    }

    fn bn_forward(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        training: bool,
    ) -> NodeId {
        let (rows, ch) = (self.shape(x)[0], self.shape(x)[1]);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut data = vec![0.0; rows * ch];
        for i in 0..rows {
            for c in 0..ch {
                let xhat = (src[i * ch + c] - mean[c]) * invstd[c];
                data[i * ch + c] = g[c] * xhat + b[c];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.result(
            vec![rows, ch],
            data,
            rg,
            Op::BatchNorm { x, gamma, beta, mean, invstd, training },
        )
    }

    /// Mean negative log-softmax of the labeled class.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        let (batch, classes) = self.rank2(logits, "cross_entropy")?;
        if labels.len() != batch {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy",
                lhs: vec![batch, classes],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let src = self.data(logits);
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &src[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss -= row[label] - lse;
        }
        loss /= batch as f64;
        let rg = self.requires(logits);
        Ok(self.result(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        ))
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Gradients of nodes the loss does not depend on are left untouched.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].value.grad.clone() else {
                continue;
            };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.step_backward(i, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, src: &[f64]) {
        let t = &mut self.nodes[id.0].value;
        let g = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
        for (a, b) in g.iter_mut().zip(src) {
            *a += b;
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn step_backward(&mut self, i: usize, grad: &[f64]) {
        // Clones of input buffers keep the borrow checker out of the hot
        // match; buffers are small at desk scale.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let da = matmul_nt(grad, self.data(b), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db = matmul_tn(self.data(a), grad, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accumulate(a, grad);
                }
                if self.needs(b) {
                    self.accumulate(b, grad);
                }
            }
            Op::AddBiasRow { a, bias } => {
                let (a, bias) = (*a, *bias);
                if self.needs(a) {
                    self.accumulate(a, grad);
                }
                if self.needs(bias) {
                    let n = self.shape(bias)[0];
                    let mut db = vec![0.0; n];
                    for (flat, g) in grad.iter().enumerate() {
                        db[flat % n] += g;
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f64> = grad.iter().zip(self.data(b)).map(|(g, v)| g * v).collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = grad.iter().zip(self.data(a)).map(|(g, v)| g * v).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let (a, factor) = (*a, *factor);
                if self.needs(a) {
                    let da: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.needs(a) {
                    // subgradient at 0 is 0
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.data(a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::SoftmaxAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                if self.needs(a) {
                    let shape = self.shape(NodeId(i)).to_vec();
                    let (outer, len, inner) = axis_split(&shape, axis).expect("checked at forward");
                    let out = &self.nodes[i].value.data;
                    let mut da = vec![0.0; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + ii;
                            let mut dot = 0.0;
                            for k in 0..len {
                                dot += grad[at(k)] * out[at(k)];
                            }
                            for k in 0..len {
                                da[at(k)] = out[at(k)] * (grad[at(k)] - dot);
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::SumAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                if self.needs(a) {
                    let shape = self.shape(a).to_vec();
                    let (outer, len, inner) = axis_split(&shape, axis).expect("checked at forward");
                    let mut da = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for k in 0..len {
                            for ii in 0..inner {
                                da[(o * len + k) * inner + ii] = grad[o * inner + ii];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::MaxAxis { a, argmax } => {
                let a = *a;
                if self.needs(a) {
                    let mut da = vec![0.0; self.data(a).len()];
                    for (out, &flat) in argmax.clone().iter().enumerate() {
                        da[flat] += grad[out];
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::MeanAll { a } => {
                let a = *a;
                if self.needs(a) {
                    let n = self.data(a).len();
                    let da = vec![grad[0] / n as f64; n];
                    self.accumulate(a, &da);
                }
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let p = self.shape(a)[1];
                let q = self.shape(b)[1];
                let m = self.shape(a)[0];
                if self.needs(a) {
                    let mut da = vec![0.0; m * p];
                    for r in 0..m {
                        da[r * p..(r + 1) * p].copy_from_slice(&grad[r * (p + q)..r * (p + q) + p]);
                    }
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; m * q];
                    for r in 0..m {
                        db[r * q..(r + 1) * q]
                            .copy_from_slice(&grad[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.data(p).len();
                    if self.needs(p) {
                        let slice = grad[offset..offset + len].to_vec();
                        self.accumulate(p, &slice);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { a, indices } => {
                let (a, indices) = (*a, indices.clone());
                if self.needs(a) {
                    let n = self.shape(a)[1];
                    let mut da = vec![0.0; self.data(a).len()];
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..n {
                            da[src * n + j] += grad[r * n + j];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::ScatterRows { a, indices } => {
                let (a, indices) = (*a, indices.clone());
                if self.needs(a) {
                    let n = self.shape(a)[1];
                    let mut da = vec![0.0; self.data(a).len()];
                    for (r, &dst) in indices.iter().enumerate() {
                        da[r * n..(r + 1) * n].copy_from_slice(&grad[dst * n..(dst + 1) * n]);
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::ScaleRows { a, weights } => {
                let (a, weights) = (*a, weights.clone());
                if self.needs(a) {
                    let n = self.shape(a)[1];
                    let mut da = vec![0.0; self.data(a).len()];
                    for (r, &w) in weights.iter().enumerate() {
                        for j in 0..n {
                            da[r * n + j] = grad[r * n + j] * w;
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if self.needs(a) {
                    self.accumulate(a, grad);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, training } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, invstd, training) = (mean.clone(), invstd.clone(), *training);
                let rows = self.shape(x)[0];
                let ch = self.shape(x)[1];
                let xd = self.data(x).to_vec();
                let gd = self.data(gamma).to_vec();
                let xhat = |r: usize, c: usize| (xd[r * ch + c] - mean[c]) * invstd[c];
                if self.needs(gamma) {
                    let mut dg = vec![0.0; ch];
                    for r in 0..rows {
                        for c in 0..ch {
                            dg[c] += grad[r * ch + c] * xhat(r, c);
                        }
                    }
                    self.accumulate(gamma, &dg);
                }
                if self.needs(beta) {
                    let mut db = vec![0.0; ch];
                    for r in 0..rows {
                        for c in 0..ch {
                            db[c] += grad[r * ch + c];
                        }
                    }
                    self.accumulate(beta, &db);
                }
                if self.needs(x) {
                    let mut dx = vec![0.0; rows * ch];
                    if training {
                        // statistics depend on x, so backprop through them
                        let nf = rows as f64;
                        for c in 0..ch {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for r in 0..rows {
                                let gh = grad[r * ch + c] * gd[c];
                                s1 += gh;
                                s2 += gh * xhat(r, c);
                            }
                            for r in 0..rows {
                                let gh = grad[r * ch + c] * gd[c];
                                dx[r * ch + c] = invstd[c] / nf * (nf * gh - s1 - xhat(r, c) * s2);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..ch {
                                dx[r * ch + c] = grad[r * ch + c] * gd[c] * invstd[c];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let (logits, labels) = (*logits, labels.clone());
                if self.needs(logits) {
                    let batch = labels.len();
                    let classes = self.shape(logits)[1];
                    let src = self.data(logits);
                    let mut dl = vec![0.0; batch * classes];
                    for (b, &label) in labels.iter().enumerate() {
                        let row = &src[b * classes..(b + 1) * classes];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for c in 0..classes {
                            let p = exps[c] / sum;
                            let t = if c == label { 1.0 } else { 0.0 };
                            dl[b * classes + c] = grad[0] * (p - t) / batch as f64;
                        }
                    }
                    self.accumulate(logits, &dl);
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn thread_count() -> usize {
    use std::sync::OnceLock;
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("ASTA3D_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// C[m,n] = A[m,k] · B[k,n]. Rows are independent, so the optional
/// row-chunk parallelism is bit-identical to the serial path.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let threads = thread_count().min(m.max(1));
    if threads <= 1 || m * k * n < 1 << 18 {
        matmul_nn_rows(a, b, &mut c, 0, m, k, n);
    } else {
        let chunk = m.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, c_chunk) in c.chunks_mut(chunk * n).enumerate() {
                let rows = c_chunk.len() / n;
                scope.spawn(move || {
                    matmul_nn_rows(a, b, c_chunk, t * chunk, rows, k, n);
                });
            }
        });
    }
    c
}

fn matmul_nn_rows(a: &[f64], b: &[f64], c: &mut [f64], row0: usize, rows: usize, k: usize, n: usize) {
    for i in 0..rows {
        let arow = &a[(row0 + i) * k..(row0 + i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,k] = G[m,n] · Bᵀ where B is [k,n].
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = Aᵀ · G where A is [m,k], G is [m,n].
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}
