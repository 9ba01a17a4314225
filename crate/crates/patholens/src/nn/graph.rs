//! Layer DAG: construction, shape inference, forward and backward passes.

use super::ops::{self, BatchNorm2d, BnBatchStats, Conv2d, Dense};
use super::{Shape, Value};
use crate::config::derive_seed;
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op {
    Input { channels: usize },
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    MaxPool2d { kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize) },
    AvgPool2d { kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize) },
    GlobalAvgPool,
    Flatten,
    Dense(Dense),
    Add,
    Scale { factor: f64 },
    Concat,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Side data produced by a caching forward pass.
pub enum Aux {
    MaxIdx(Array4<usize>),
    BnStats(BnBatchStats),
}

/// Result of a forward pass. `values[i]` is `Some` for every node when the
/// pass was run with caching (required for [`Graph::backward`]).
pub struct Forward {
    pub values: Vec<Option<Value>>,
    pub aux: Vec<Option<Aux>>,
    pub training: bool,
    pub logits: Array2<f64>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Backward {
    /// d(scalar)/d(node output), same topology as `Forward::values`.
    pub node_grads: Vec<Option<Value>>,
    /// Flattened parameter gradients in [`Graph::param_specs`] order.
    pub param_grads: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    input: NodeId,
    output: NodeId,
    input_channels: usize,
}

/// Incremental builder; nodes must be added in topological order.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input: NodeId,
}

impl GraphBuilder {
    pub fn new(input_channels: usize) -> Self {
        let nodes = vec![Node {
            name: "input".to_string(),
            op: Op::Input { channels: input_channels },
            inputs: vec![],
        }];
        GraphBuilder { nodes, input: 0 }
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    fn push(&mut self, name: impl Into<String>, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let name = name.into();
        debug_assert!(
            !self.nodes.iter().any(|n| n.name == name),
            "duplicate node name {name}"
        );
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node { name, op, inputs });
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> NodeId {
        assert!(in_channels % groups == 0 && out_channels % groups == 0);
        let conv = Conv2d {
            weight: Array4::zeros((out_channels, in_channels / groups, kernel.0, kernel.1)),
            bias: Array1::zeros(out_channels),
            stride,
            padding,
            groups,
        };
        self.push(name, Op::Conv2d(conv), vec![input])
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, input: NodeId, channels: usize) -> NodeId {
        self.push(name, Op::BatchNorm2d(BatchNorm2d::new(channels)), vec![input])
    }

    pub fn relu(&mut self, name: impl Into<String>, input: NodeId) -> NodeId {
        self.push(name, Op::Relu, vec![input])
    }

    pub fn max_pool(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> NodeId {
        self.push(name, Op::MaxPool2d { kernel, stride, padding }, vec![input])
    }

    pub fn avg_pool(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> NodeId {
        self.push(name, Op::AvgPool2d { kernel, stride, padding }, vec![input])
    }

    pub fn global_avg_pool(&mut self, name: impl Into<String>, input: NodeId) -> NodeId {
        self.push(name, Op::GlobalAvgPool, vec![input])
    }

    pub fn flatten(&mut self, name: impl Into<String>, input: NodeId) -> NodeId {
        self.push(name, Op::Flatten, vec![input])
    }

    pub fn dense(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        in_features: usize,
        out_features: usize,
    ) -> NodeId {
        let dense = Dense {
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
        };
        self.push(name, Op::Dense(dense), vec![input])
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Add, vec![a, b])
    }

    pub fn scale(&mut self, name: impl Into<String>, input: NodeId, factor: f64) -> NodeId {
        self.push(name, Op::Scale { factor }, vec![input])
    }

    pub fn concat(&mut self, name: impl Into<String>, inputs: Vec<NodeId>) -> NodeId {
        assert!(!inputs.is_empty());
        self.push(name, Op::Concat, inputs)
    }

    pub fn build(self, output: NodeId) -> Graph {
        let input_channels = match self.nodes[self.input].op {
            Op::Input { channels } => channels,
            _ => unreachable!(),
        };
        Graph { nodes: self.nodes, input: self.input, output, input_channels }
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Output classes of the final dense layer.
    pub fn num_outputs(&self) -> usize {
        match &self.nodes[self.output].op {
            Op::Dense(d) => d.weight.dim().0,
            _ => 0,
        }
    }

    /// Static per-node output shapes for an input of `(h, w)`.
    pub fn infer_shapes(&self, input_hw: (usize, usize)) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let input_shape = |k: usize| shapes[node.inputs[k]];
            let spatial_input = |k: usize| {
                input_shape(k).spatial().ok_or_else(|| {
                    Error::Model(format!("node {} expects a spatial input", node.name))
                })
            };
            let shape = match &node.op {
                Op::Input { channels } => {
                    Shape::Spatial { c: *channels, h: input_hw.0, w: input_hw.1 }
                }
                Op::Conv2d(conv) => {
                    let (c, h, w) = spatial_input(0)?;
                    let (oc, icg, _, _) = conv.weight.dim();
                    if c != icg * conv.groups {
                        return Err(Error::Model(format!(
                            "node {}: expected {} input channels, got {c}",
                            node.name,
                            icg * conv.groups
                        )));
                    }
                    let (oh, ow) = conv.out_hw(h, w).ok_or_else(|| {
                        Error::Model(format!(
                            "node {}: kernel larger than padded input {h}x{w}",
                            node.name
                        ))
                    })?;
                    Shape::Spatial { c: oc, h: oh, w: ow }
                }
                Op::BatchNorm2d(bn) => {
                    let (c, h, w) = spatial_input(0)?;
                    if c != bn.gamma.len() {
                        return Err(Error::Model(format!(
                            "node {}: batch norm over {} channels applied to {c}",
                            node.name,
                            bn.gamma.len()
                        )));
                    }
                    Shape::Spatial { c, h, w }
                }
                Op::Relu | Op::Scale { .. } => input_shape(0),
                Op::MaxPool2d { kernel, stride, padding }
                | Op::AvgPool2d { kernel, stride, padding } => {
                    let (c, h, w) = spatial_input(0)?;
                    let (oh, ow) =
                        ops::pool_out_hw((h, w), *kernel, *stride, *padding).ok_or_else(|| {
                            Error::Model(format!(
                                "node {}: pool window larger than input {h}x{w}",
                                node.name
                            ))
                        })?;
                    Shape::Spatial { c, h: oh, w: ow }
                }
                Op::GlobalAvgPool => {
                    let (c, _, _) = spatial_input(0)?;
                    Shape::Flat { d: c }
                }
                Op::Flatten => {
                    let (c, h, w) = spatial_input(0)?;
                    Shape::Flat { d: c * h * w }
                }
                Op::Dense(dense) => {
                    let d = match input_shape(0) {
                        Shape::Flat { d } => d,
                        Shape::Spatial { .. } => {
                            return Err(Error::Model(format!(
                                "node {} expects a flat input",
                                node.name
                            )))
                        }
                    };
                    let (out, inp) = dense.weight.dim();
                    if d != inp {
                        return Err(Error::Model(format!(
                            "node {}: dense expects {inp} features, got {d}",
                            node.name
                        )));
                    }
                    Shape::Flat { d: out }
                }
                Op::Add => {
                    let a = input_shape(0);
                    let b = input_shape(1);
                    if a != b {
                        return Err(Error::Model(format!(
                            "node {}: add inputs {a} vs {b} differ",
                            node.name
                        )));
                    }
                    a
                }
                Op::Concat => {
                    let (c0, h, w) = spatial_input(0)?;
                    let mut total = c0;
                    for k in 1..node.inputs.len() {
                        let (c, hk, wk) = spatial_input(k)?;
                        if (hk, wk) != (h, w) {
                            return Err(Error::Model(format!(
                                "node {}: concat spatial dims differ",
                                node.name
                            )));
                        }
                        total += c;
                    }
                    Shape::Spatial { c: total, h, w }
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// He-normal initialization for conv/dense weights, zero biases, identity
    /// batch norms. Each parameter has its own stream derived from
    /// `(seed, node name)`, so initialization is stable per layer.
    pub fn init_seeded(&mut self, seed: u64) {
        for node in &mut self.nodes {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &node.name, 0));
            match &mut node.op {
                Op::Conv2d(conv) => {
                    let (_, icg, kh, kw) = conv.weight.dim();
                    let fan_in = (icg * kh * kw) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                    conv.weight.mapv_inplace(|_| dist.sample(&mut rng));
                    conv.bias.fill(0.0);
                }
                Op::Dense(dense) => {
                    let (_, fan_in) = dense.weight.dim();
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    dense.weight.mapv_inplace(|_| dist.sample(&mut rng));
                    dense.bias.fill(0.0);
                }
                Op::BatchNorm2d(bn) => {
                    bn.gamma.fill(1.0);
                    bn.beta.fill(0.0);
                    bn.running_mean.fill(0.0);
                    bn.running_var.fill(1.0);
                }
                _ => {}
            }
        }
    }

    /// Trainable parameter names and shapes, in deterministic graph order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Conv2d(c) => {
                    specs.push((format!("{}.weight", node.name), c.weight.shape().to_vec()));
                    specs.push((format!("{}.bias", node.name), c.bias.shape().to_vec()));
                }
                Op::BatchNorm2d(b) => {
                    specs.push((format!("{}.gamma", node.name), b.gamma.shape().to_vec()));
                    specs.push((format!("{}.beta", node.name), b.beta.shape().to_vec()));
                }
                Op::Dense(d) => {
                    specs.push((format!("{}.weight", node.name), d.weight.shape().to_vec()));
                    specs.push((format!("{}.bias", node.name), d.bias.shape().to_vec()));
                }
                _ => {}
            }
        }
        specs
    }

    /// Non-trainable buffers (batch-norm running statistics).
    pub fn buffer_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for node in &self.nodes {
            if let Op::BatchNorm2d(b) = &node.op {
                specs.push((format!("{}.running_mean", node.name), b.running_mean.shape().to_vec()));
                specs.push((format!("{}.running_var", node.name), b.running_var.shape().to_vec()));
            }
        }
        specs
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for node in &self.nodes {
            match &node.op {
                Op::Conv2d(c) => {
                    f(&format!("{}.weight", node.name), c.weight.as_slice().unwrap());
                    f(&format!("{}.bias", node.name), c.bias.as_slice().unwrap());
                }
                Op::BatchNorm2d(b) => {
                    f(&format!("{}.gamma", node.name), b.gamma.as_slice().unwrap());
                    f(&format!("{}.beta", node.name), b.beta.as_slice().unwrap());
                }
                Op::Dense(d) => {
                    f(&format!("{}.weight", node.name), d.weight.as_slice().unwrap());
                    f(&format!("{}.bias", node.name), d.bias.as_slice().unwrap());
                }
                _ => {}
            }
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Conv2d(c) => {
                    f(&format!("{}.weight", node.name), c.weight.as_slice_mut().unwrap());
                    f(&format!("{}.bias", node.name), c.bias.as_slice_mut().unwrap());
                }
                Op::BatchNorm2d(b) => {
                    f(&format!("{}.gamma", node.name), b.gamma.as_slice_mut().unwrap());
                    f(&format!("{}.beta", node.name), b.beta.as_slice_mut().unwrap());
                }
                Op::Dense(d) => {
                    f(&format!("{}.weight", node.name), d.weight.as_slice_mut().unwrap());
                    f(&format!("{}.bias", node.name), d.bias.as_slice_mut().unwrap());
                }
                _ => {}
            }
        }
    }

    pub fn for_each_buffer(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for node in &self.nodes {
            if let Op::BatchNorm2d(b) = &node.op {
                f(&format!("{}.running_mean", node.name), b.running_mean.as_slice().unwrap());
                f(&format!("{}.running_var", node.name), b.running_var.as_slice().unwrap());
            }
        }
    }

    pub fn for_each_buffer_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for node in &mut self.nodes {
            if let Op::BatchNorm2d(b) = &mut node.op {
                f(&format!("{}.running_mean", node.name), b.running_mean.as_slice_mut().unwrap());
                f(&format!("{}.running_var", node.name), b.running_var.as_slice_mut().unwrap());
            }
        }
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.input_channels {
            return Err(Error::Model(format!(
                "expected {} input channels, got {c}",
                self.input_channels
            )));
        }
        self.infer_shapes((h, w)).map(|_| ())
    }

    fn eval_node(
        &self,
        node: &Node,
        values: &[Option<Value>],
        training: bool,
    ) -> Result<(Value, Option<Aux>)> {
        let spatial = |k: usize| -> Result<&Array4<f64>> {
            values[node.inputs[k]]
                .as_ref()
                .and_then(Value::as_spatial)
                .ok_or_else(|| Error::Model(format!("node {} missing spatial input", node.name)))
        };
        let flat = |k: usize| -> Result<&Array2<f64>> {
            values[node.inputs[k]]
                .as_ref()
                .and_then(Value::as_flat)
                .ok_or_else(|| Error::Model(format!("node {} missing flat input", node.name)))
        };
        let out = match &node.op {
            Op::Input { .. } => unreachable!("input node evaluated separately"),
            Op::Conv2d(conv) => (Value::Spatial(ops::conv2d_forward(spatial(0)?, conv)), None),
            Op::BatchNorm2d(bn) => {
                let (y, stats) = ops::batchnorm_forward(spatial(0)?, bn, training);
                (Value::Spatial(y), stats.map(Aux::BnStats))
            }
            Op::Relu => {
                let v = match values[node.inputs[0]].as_ref().unwrap() {
                    Value::Spatial(a) => Value::Spatial(a.mapv(|v| v.max(0.0))),
                    Value::Flat(a) => Value::Flat(a.mapv(|v| v.max(0.0))),
                };
                (v, None)
            }
            Op::MaxPool2d { kernel, stride, padding } => {
                let (y, idx) = ops::maxpool_forward(spatial(0)?, *kernel, *stride, *padding);
                (Value::Spatial(y), Some(Aux::MaxIdx(idx)))
            }
            Op::AvgPool2d { kernel, stride, padding } => {
                (Value::Spatial(ops::avgpool_forward(spatial(0)?, *kernel, *stride, *padding)), None)
            }
            Op::GlobalAvgPool => {
                let x = spatial(0)?;
                let (_, _, h, w) = x.dim();
                let y = x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64;
                (Value::Flat(y), None)
            }
            Op::Flatten => {
                let x = spatial(0)?;
                let (n, c, h, w) = x.dim();
                let y = x.to_owned().into_shape_with_order((n, c * h * w)).unwrap();
                (Value::Flat(y), None)
            }
            Op::Dense(dense) => (Value::Flat(ops::dense_forward(flat(0)?, dense)), None),
            Op::Add => {
                let v = match (values[node.inputs[0]].as_ref().unwrap(), values[node.inputs[1]].as_ref().unwrap()) {
                    (Value::Spatial(a), Value::Spatial(b)) => Value::Spatial(a + b),
                    (Value::Flat(a), Value::Flat(b)) => Value::Flat(a + b),
                    _ => return Err(Error::Model(format!("node {}: add kind mismatch", node.name))),
                };
                (v, None)
            }
            Op::Scale { factor } => {
                let v = match values[node.inputs[0]].as_ref().unwrap() {
                    Value::Spatial(a) => Value::Spatial(a * *factor),
                    Value::Flat(a) => Value::Flat(a * *factor),
                };
                (v, None)
            }
            Op::Concat => {
                let parts: Vec<&Array4<f64>> =
                    (0..node.inputs.len()).map(spatial).collect::<Result<_>>()?;
                let (n, _, h, w) = parts[0].dim();
                let total: usize = parts.iter().map(|p| p.dim().1).sum();
                let mut out = Array4::zeros((n, total, h, w));
                let mut offset = 0;
                for p in parts {
                    let c = p.dim().1;
                    out.slice_mut(s![.., offset..offset + c, .., ..]).assign(p);
                    offset += c;
                }
                (Value::Spatial(out), None)
            }
        };
        Ok(out)
    }

    fn run_forward(
        &self,
        x: &Array4<f64>,
        training: bool,
        keep: bool,
    ) -> Result<(Forward, Vec<(NodeId, BnBatchStats, f64)>)> {
        self.check_input(x)?;
        let n_nodes = self.nodes.len();
        let mut values: Vec<Option<Value>> = vec![None; n_nodes];
        let mut aux: Vec<Option<Aux>> = (0..n_nodes).map(|_| None).collect();
        values[self.input] = Some(Value::Spatial(x.clone()));

        // Reference counts let the no-cache path free activations early.
        let mut remaining = vec![0usize; n_nodes];
        for node in &self.nodes {
            for &i in &node.inputs {
                remaining[i] += 1;
            }
        }
        remaining[self.output] += 1;

        let mut bn_updates = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if id == self.input {
                continue;
            }
            let (value, node_aux) = self.eval_node(node, &values, training)?;
            if let (true, Some(Aux::BnStats(ref st))) = (training, &node_aux) {
                let (n, _, h, w) = values[node.inputs[0]]
                    .as_ref()
                    .and_then(Value::as_spatial)
                    .expect("bn input is spatial")
                    .dim();
                let count = (n * h * w) as f64;
                bn_updates.push((
                    id,
                    BnBatchStats { mean: st.mean.clone(), var: st.var.clone() },
                    count,
                ));
            }
            if keep {
                aux[id] = node_aux;
            }
            values[id] = Some(value);
            if !keep {
                for &i in &node.inputs {
                    remaining[i] -= 1;
                    if remaining[i] == 0 && i != self.output {
                        values[i] = None;
                    }
                }
            }
        }

        let logits = values[self.output]
            .as_ref()
            .and_then(Value::as_flat)
            .ok_or_else(|| Error::Model("graph output is not a flat vector".into()))?
            .clone();
        if !keep {
            values = vec![None; n_nodes];
        }
        Ok((Forward { values, aux, training, logits }, bn_updates))
    }

    /// Inference-mode forward. With `keep_values` every node activation is
    /// cached so [`Graph::backward`] can run afterwards.
    pub fn forward_infer(&self, x: &Array4<f64>, keep_values: bool) -> Result<Forward> {
        let (fwd, _) = self.run_forward(x, false, keep_values)?;
        Ok(fwd)
    }

    /// Training-mode forward: batch-norm layers use batch statistics and
    /// update their running estimates. Always caches activations.
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Result<Forward> {
        let (fwd, bn_updates) = self.run_forward(x, true, true)?;
        for (id, stats, count) in bn_updates {
            if let Op::BatchNorm2d(bn) = &mut self.nodes[id].op {
                let m = bn.momentum;
                // Unbiased variance for the running estimate, per convention.
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                bn.running_mean.zip_mut_with(&stats.mean, |r, &b| *r = (1.0 - m) * *r + m * b);
                bn.running_var
                    .zip_mut_with(&stats.var, |r, &b| *r = (1.0 - m) * *r + m * b * unbias);
            }
        }
        Ok(fwd)
    }

    /// Reverse pass from `d_logits` (shape = logits). Requires a cached
    /// forward. Returns per-node and per-parameter gradients.
    pub fn backward(&self, fwd: &Forward, d_logits: Array2<f64>) -> Result<Backward> {
        if fwd.values.iter().any(|v| v.is_none()) {
            return Err(Error::Model("backward requires a caching forward pass".into()));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Value>> = vec![None; n_nodes];
        grads[self.output] = Some(Value::Flat(d_logits));
        let mut param_grads: Vec<(String, Vec<f64>)> = Vec::new();

        for id in (0..n_nodes).rev() {
            if id == self.input {
                continue;
            }
            let node = &self.nodes[id];
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue, // node does not feed the output
            };
            let value_of = |k: usize| fwd.values[node.inputs[k]].as_ref().unwrap();
            let send = |grads: &mut Vec<Option<Value>>, target: NodeId, v: Value| {
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&v),
                    slot @ None => *slot = Some(v),
                }
            };
            match &node.op {
                Op::Input { .. } => unreachable!(),
                Op::Conv2d(conv) => {
                    let x = value_of(0).as_spatial().unwrap();
                    let dy = g.as_spatial().unwrap();
                    let cg = ops::conv2d_backward(x, conv, dy);
                    param_grads.push((
                        format!("{}.weight", node.name),
                        cg.d_weight.into_raw_vec_and_offset().0,
                    ));
                    param_grads.push((
                        format!("{}.bias", node.name),
                        cg.d_bias.into_raw_vec_and_offset().0,
                    ));
                    send(&mut grads, node.inputs[0], Value::Spatial(cg.d_input));
                }
                Op::BatchNorm2d(bn) => {
                    let x = value_of(0).as_spatial().unwrap();
                    let dy = g.as_spatial().unwrap();
                    let stats = match &fwd.aux[id] {
                        Some(Aux::BnStats(st)) => Some(st),
                        _ => None,
                    };
                    if fwd.training && stats.is_none() {
                        return Err(Error::Model(format!(
                            "node {}: missing batch statistics",
                            node.name
                        )));
                    }
                    let bg = ops::batchnorm_backward(x, bn, stats, dy);
                    param_grads.push((
                        format!("{}.gamma", node.name),
                        bg.d_gamma.into_raw_vec_and_offset().0,
                    ));
                    param_grads.push((
                        format!("{}.beta", node.name),
                        bg.d_beta.into_raw_vec_and_offset().0,
                    ));
                    send(&mut grads, node.inputs[0], Value::Spatial(bg.d_input));
                }
                Op::Relu => {
                    let dg = match (fwd.values[id].as_ref().unwrap(), &g) {
                        (Value::Spatial(y), Value::Spatial(dy)) => {
                            let mut dx = dy.clone();
                            dx.zip_mut_with(y, |d, &yv| {
                                if yv <= 0.0 {
                                    *d = 0.0;
                                }
                            });
                            Value::Spatial(dx)
                        }
                        (Value::Flat(y), Value::Flat(dy)) => {
                            let mut dx = dy.clone();
                            dx.zip_mut_with(y, |d, &yv| {
                                if yv <= 0.0 {
                                    *d = 0.0;
                                }
                            });
                            Value::Flat(dx)
                        }
                        _ => unreachable!(),
                    };
                    send(&mut grads, node.inputs[0], dg);
                }
                Op::MaxPool2d { .. } => {
                    let x = value_of(0).as_spatial().unwrap();
                    let dy = g.as_spatial().unwrap();
                    let idx = match &fwd.aux[id] {
                        Some(Aux::MaxIdx(idx)) => idx,
                        _ => return Err(Error::Model(format!("node {}: missing pool indices", node.name))),
                    };
                    let dx = ops::maxpool_backward(x.dim(), idx, dy);
                    send(&mut grads, node.inputs[0], Value::Spatial(dx));
                }
                Op::AvgPool2d { kernel, stride, padding } => {
                    let x = value_of(0).as_spatial().unwrap();
                    let dy = g.as_spatial().unwrap();
                    let dx = ops::avgpool_backward(x.dim(), *kernel, *stride, *padding, dy);
                    send(&mut grads, node.inputs[0], Value::Spatial(dx));
                }
                Op::GlobalAvgPool => {
                    let x = value_of(0).as_spatial().unwrap();
                    let (n, c, h, w) = x.dim();
                    let dy = g.as_flat().unwrap();
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = Array4::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = dy[[ni, ci]] * inv;
                            dx.slice_mut(s![ni, ci, .., ..]).fill(gv);
                        }
                    }
                    send(&mut grads, node.inputs[0], Value::Spatial(dx));
                }
                Op::Flatten => {
                    let x = value_of(0).as_spatial().unwrap();
                    let dy = g.as_flat().unwrap();
                    let dx = dy.to_owned().into_shape_with_order(x.dim()).unwrap();
                    send(&mut grads, node.inputs[0], Value::Spatial(dx));
                }
                Op::Dense(dense) => {
                    let x = value_of(0).as_flat().unwrap();
                    let dy = g.as_flat().unwrap();
                    let dg = ops::dense_backward(x, dense, dy);
                    param_grads.push((
                        format!("{}.weight", node.name),
                        dg.d_weight.into_raw_vec_and_offset().0,
                    ));
                    param_grads.push((
                        format!("{}.bias", node.name),
                        dg.d_bias.into_raw_vec_and_offset().0,
                    ));
                    send(&mut grads, node.inputs[0], Value::Flat(dg.d_input));
                }
                Op::Add => {
                    send(&mut grads, node.inputs[0], g.clone());
                    send(&mut grads, node.inputs[1], g.clone());
                }
                Op::Scale { factor } => {
                    let dg = match &g {
                        Value::Spatial(a) => Value::Spatial(a * *factor),
                        Value::Flat(a) => Value::Flat(a * *factor),
                    };
                    send(&mut grads, node.inputs[0], dg);
                }
                Op::Concat => {
                    let dy = g.as_spatial().unwrap();
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let c = fwd.values[inp].as_ref().unwrap().as_spatial().unwrap().dim().1;
                        let part = dy.slice(s![.., offset..offset + c, .., ..]).to_owned();
                        send(&mut grads, inp, Value::Spatial(part));
                        offset += c;
                    }
                }
            }
            grads[id] = Some(g);
        }

        // Emit parameter gradients in param_specs order (missing entries are
        // zero: parameters of nodes that do not feed the output).
        let mut ordered = Vec::new();
        for (name, shape) in self.param_specs() {
            let len: usize = shape.iter().product();
            let found = param_grads.iter().position(|(n, _)| n == &name);
            match found {
                Some(i) => ordered.push(param_grads.swap_remove(i)),
                None => ordered.push((name, vec![0.0; len])),
            }
        }
        Ok(Backward { node_grads: grads, param_grads: ordered })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// A small graph touching every op kind: conv, bn, relu, max/avg pool,
    /// two residual branches with scale + add, concat, a 1x1 conv, flatten,
    /// gap and two dense consumers merged by add.
    fn zoo_graph() -> Graph {
        let mut b = GraphBuilder::new(2);
        let x = b.input();
        let c1 = b.conv("c1", x, 2, 4, (3, 3), (1, 1), (1, 1), 1);
        let n1 = b.batch_norm("n1", c1, 4);
        let r1 = b.relu("r1", n1);
        let p1 = b.max_pool("p1", r1, (2, 2), (2, 2), (0, 0));
        let ba = b.conv("ba", p1, 4, 3, (1, 1), (1, 1), (0, 0), 1);
        let bb = b.conv("bb", p1, 4, 3, (3, 3), (1, 1), (1, 1), 1);
        let bbs = b.scale("bbs", bb, 0.5);
        let sum = b.add("sum", ba, bbs);
        let rs = b.relu("rs", sum);
        let ap = b.avg_pool("ap", p1, (3, 3), (1, 1), (1, 1));
        let cat = b.concat("cat", vec![rs, ap]);
        let dw = b.conv("dw", cat, 7, 7, (3, 3), (1, 1), (1, 1), 7);
        let c2 = b.conv("c2", dw, 7, 2, (1, 1), (1, 1), (0, 0), 1);
        let fl = b.flatten("fl", c2);
        let d1 = b.dense("d1", fl, 2 * 3 * 3, 3);
        let gp = b.global_avg_pool("gp", c2);
        let d2 = b.dense("d2", gp, 2, 3);
        let out = b.add("out", d1, d2);
        b.build(out)
    }

    fn scalar_loss(graph: &mut Graph, x: &Array4<f64>, coeff: &Array2<f64>, training: bool) -> f64 {
        let logits = if training {
            graph.forward_train(x).unwrap().logits
        } else {
            graph.forward_infer(x, false).unwrap().logits
        };
        (&logits * coeff).sum()
    }

    fn check_gradients(training: bool) {
        let mut graph = zoo_graph();
        graph.init_seeded(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| rng.random_range(-1.0..1.0));
        let coeff = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));

        let fwd = if training {
            graph.forward_train(&x).unwrap()
        } else {
            graph.forward_infer(&x, true).unwrap()
        };
        let bwd = graph.backward(&fwd, coeff.clone()).unwrap();

        let h = 1e-5;
        let assert_close = |analytic: f64, fd: f64, what: &str| {
            let scale = analytic.abs().max(fd.abs());
            if scale > 1e-8 {
                let rel = (analytic - fd).abs() / scale;
                assert!(rel < 1e-5, "{what}: analytic {analytic} vs fd {fd} (rel {rel})");
            } else {
                assert!((analytic - fd).abs() < 1e-8, "{what}: {analytic} vs {fd}");
            }
        };

        // Parameter gradients: probe a few elements of every tensor.
        for (pi, (name, grad)) in bwd.param_grads.iter().enumerate() {
            let probes: Vec<usize> = [0, grad.len() / 3, grad.len() / 2, grad.len() - 1]
                .into_iter()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            fn nudge(graph: &mut Graph, pi: usize, k: usize, delta: f64) {
                let mut idx = 0;
                graph.for_each_param_mut(&mut |_, values| {
                    if idx == pi {
                        values[k] += delta;
                    }
                    idx += 1;
                });
            }
            for k in probes {
                nudge(&mut graph, pi, k, h);
                let up = scalar_loss(&mut graph, &x, &coeff, training);
                nudge(&mut graph, pi, k, -2.0 * h);
                let down = scalar_loss(&mut graph, &x, &coeff, training);
                nudge(&mut graph, pi, k, h);
                assert_close(grad[k], (up - down) / (2.0 * h), &format!("{name}[{k}]"));
            }
        }

        // Input gradient at a handful of pixels.
        let d_input = bwd.node_grads[0].as_ref().unwrap().as_spatial().unwrap().clone();
        for &(n, c, y, xx) in &[(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 5), (1, 0, 2, 4)] {
            let mut xp = x.clone();
            xp[[n, c, y, xx]] += h;
            let up = scalar_loss(&mut graph, &xp, &coeff, training);
            xp[[n, c, y, xx]] -= 2.0 * h;
            let down = scalar_loss(&mut graph, &xp, &coeff, training);
            assert_close(
                d_input[[n, c, y, xx]],
                (up - down) / (2.0 * h),
                &format!("input[{n},{c},{y},{xx}]"),
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_eval_mode() {
        check_gradients(false);
    }

    #[test]
    fn gradients_match_finite_differences_in_train_mode() {
        check_gradients(true);
    }

    #[test]
    fn no_cache_forward_matches_cached_forward() {
        let mut graph = zoo_graph();
        graph.init_seeded(5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Array4::from_shape_fn((3, 2, 6, 6), |_| rng.random_range(-1.0..1.0));
        let lean = graph.forward_infer(&x, false).unwrap();
        let full = graph.forward_infer(&x, true).unwrap();
        assert_eq!(lean.logits, full.logits);
        assert!(full.values.iter().all(|v| v.is_some()));
    }

    #[test]
    fn backward_requires_cached_values() {
        let mut graph = zoo_graph();
        graph.init_seeded(5);
        let x = Array4::zeros((1, 2, 6, 6));
        let fwd = graph.forward_infer(&x, false).unwrap();
        assert!(graph.backward(&fwd, Array2::zeros((1, 3))).is_err());
    }
}
