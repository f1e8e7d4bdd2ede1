//! Directed acyclic model graphs.
//!
//! A [`ModelGraph`] owns its layer nodes, a cached topological order and the
//! per-node output shapes. Nodes with an empty `inputs` list read the graph
//! input; exactly one node (a [`LayerSpec::SoftmaxOutput`]) has no successors
//! and yields the logits.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{conv_out_extent, Window};
use crate::layers::{
    self, BatchNormCache, ConvCache, DropoutMask, GradBundle, LayerParams, LrnCache, LrnParams, MaxPoolCache, Mode,
    RunningStats,
};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Fc,
    Relu,
    MaxPool,
    Lrn,
    BatchNorm,
    Dropout,
    Concat,
    ResidualAdd,
    GlobalAvgPool,
    SoftmaxOutput,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Lrn => "lrn",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Dropout => "dropout",
            LayerKind::Concat => "concat",
            LayerKind::ResidualAdd => "residual-add",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::SoftmaxOutput => "softmax-output",
        }
    }
}

/// Kind plus geometry of one node.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        units: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Lrn(LrnParams),
    BatchNorm,
    Dropout {
        rate: f64,
    },
    Concat,
    ResidualAdd,
    GlobalAvgPool,
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv { .. } => LayerKind::Conv,
            LayerSpec::Fc { .. } => LayerKind::Fc,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
            LayerSpec::Lrn(_) => LayerKind::Lrn,
            LayerSpec::BatchNorm => LayerKind::BatchNorm,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Concat => LayerKind::Concat,
            LayerSpec::ResidualAdd => LayerKind::ResidualAdd,
            LayerSpec::GlobalAvgPool => LayerKind::GlobalAvgPool,
            LayerSpec::SoftmaxOutput => LayerKind::SoftmaxOutput,
        }
    }

    fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Fc { .. } | LayerSpec::BatchNorm
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub spec: LayerSpec,
    pub params: Option<LayerParams>,
    pub trainable: bool,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn kind(&self) -> LayerKind {
        self.spec.kind()
    }

    /// Parameter count by formula (conv `Cout·(Cin·k²+1)`, fc `Dout·(Din+1)`,
    /// batchnorm `2·C`).
    pub fn param_count(&self) -> usize {
        self.params.as_ref().map_or(0, LayerParams::count)
    }
}

/// Accumulates nodes; [`GraphBuilder::build`] validates and initializes.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    input_shape: [usize; 3],
    class_count: usize,
    nodes: Vec<LayerNode>,
}

impl GraphBuilder {
    pub fn new(input_shape: [usize; 3], class_count: usize) -> Self {
        GraphBuilder {
            input_shape,
            class_count,
            nodes: Vec::new(),
        }
    }

    /// Adds a node and returns its id. An empty `inputs` reads the graph input.
    pub fn add(&mut self, id: impl Into<String>, spec: LayerSpec, inputs: &[&str]) -> String {
        let id = id.into();
        self.nodes.push(LayerNode {
            id: id.clone(),
            trainable: spec.has_params(),
            spec,
            params: None,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        id
    }

    pub fn conv(
        &mut self,
        id: &str,
        input: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> String {
        let spec = LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        };
        self.add(id, spec, &inputs_of(input))
    }

    pub fn fc(&mut self, id: &str, input: &str, units: usize) -> String {
        self.add(id, LayerSpec::Fc { units }, &inputs_of(input))
    }

    pub fn relu(&mut self, id: &str, input: &str) -> String {
        self.add(id, LayerSpec::Relu, &inputs_of(input))
    }

    pub fn maxpool(&mut self, id: &str, input: &str, kernel: usize, stride: usize, pad: usize) -> String {
        self.add(id, LayerSpec::MaxPool { kernel, stride, pad }, &inputs_of(input))
    }

    /// Builds the graph, initializing parameters from `seed`: He-uniform
    /// weights (`±√(6/fan_in)`), zero biases, unit batch-norm scale.
    pub fn build(self, seed: u64) -> Result<ModelGraph> {
        let mut g = ModelGraph::assemble(self.nodes, self.input_shape, self.class_count)?;
        for i in 0..g.nodes.len() {
            g.init_node(i, seed)?;
        }
        g.shapes = g.infer(true)?;
        g.check_head()?;
        Ok(g)
    }
}

fn inputs_of(input: &str) -> Vec<&str> {
    if input.is_empty() {
        Vec::new()
    } else {
        vec![input]
    }
}

/// Structural summary: layer counts per kind and parameter totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub counts: BTreeMap<LayerKind, usize>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub shapes: Vec<(String, Vec<usize>)>,
}

impl Census {
    pub fn count(&self, kind: LayerKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn conv(&self) -> usize {
        self.count(LayerKind::Conv)
    }

    pub fn fc(&self) -> usize {
        self.count(LayerKind::Fc)
    }
}

/// JSON-friendly view of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub total_params: usize,
    pub trainable_params: usize,
    pub nodes: Vec<NodeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub params: usize,
}

/// Per-node state captured by a train-mode forward pass.
#[derive(Debug, Clone)]
enum NodeCache {
    Conv(ConvCache),
    Fc(Tensor),
    Relu(Tensor),
    MaxPool(MaxPoolCache),
    Lrn(LrnCache),
    BatchNorm(BatchNormCache),
    /// Frozen batch norm runs on running statistics; backward is a scale.
    BatchNormFixed,
    Dropout(Option<DropoutMask>),
    Concat(Vec<usize>),
    Residual,
    Gap(Vec<usize>),
    Output(Vec<usize>),
}

/// Activation cache of a train-mode forward pass, consumed by
/// [`ModelGraph::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    caches: Vec<Option<NodeCache>>,
    input_shape: Vec<usize>,
    from_features: bool,
}

/// Activations of the static frontier: frozen, deterministic nodes whose
/// outputs feed trainable parts of the graph. Batch-major, one tensor per
/// frontier node.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    nodes: Vec<usize>,
    values: Vec<Tensor>,
}

impl Features {
    pub fn batch(&self) -> usize {
        self.values.first().map_or(0, |v| v.shape()[0])
    }

    pub fn sample(&self, i: usize) -> Features {
        Features {
            nodes: self.nodes.clone(),
            values: self.values.iter().map(|v| v.sample(i)).collect(),
        }
    }

    /// Concatenates samples along the batch axis.
    pub fn stack(parts: &[&Features]) -> Result<Features> {
        let first = parts.first().ok_or(Error::EmptyInput("Features::stack"))?;
        let mut values = Vec::with_capacity(first.values.len());
        for k in 0..first.values.len() {
            let column: Vec<&Tensor> = parts.iter().map(|f| &f.values[k]).collect();
            values.push(Tensor::stack(&column)?);
        }
        Ok(Features {
            nodes: first.nodes.clone(),
            values,
        })
    }
}

/// Parameter gradients of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Output of [`ModelGraph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Keyed by node id; exactly the trainable parameterized nodes.
    pub params: BTreeMap<String, ParamGrad>,
    /// Gradient w.r.t. the graph input, when requested.
    pub input: Option<Tensor>,
}

enum Source<'a> {
    Input(&'a Tensor),
    Features(&'a Features),
}

struct Execution {
    output: Tensor,
    caches: Vec<Option<NodeCache>>,
    bn_updates: Vec<(usize, RunningStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    index: BTreeMap<String, usize>,
    input_shape: [usize; 3],
    class_count: usize,
    /// Resolved predecessor indices; empty means the graph input.
    preds: Vec<Vec<usize>>,
    order: Vec<usize>,
    output: usize,
    shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    fn assemble(nodes: Vec<LayerNode>, input_shape: [usize; 3], class_count: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        if input_shape.contains(&0) {
            return Err(Error::InvalidGraph(alloc::format!(
                "input shape {input_shape:?} has a zero extent"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::InvalidGraph(alloc::format!("duplicate node id `{}`", n.id)));
            }
        }
        let mut preds = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let p = n
                .inputs
                .iter()
                .map(|id| index.get(id).copied().ok_or_else(|| Error::UnknownNode(id.clone())))
                .collect::<Result<Vec<_>>>()?;
            let arity_ok = match n.spec {
                LayerSpec::ResidualAdd => p.len() == 2,
                LayerSpec::Concat => !p.is_empty(),
                _ => p.len() <= 1,
            };
            if !arity_ok {
                return Err(Error::InvalidGraph(alloc::format!(
                    "node `{}` ({}) cannot take {} inputs",
                    n.id,
                    n.kind().name(),
                    p.len()
                )));
            }
            preds.push(p);
        }
        // Kahn's algorithm; ready nodes are taken in insertion order
        let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut succs = vec![Vec::new(); nodes.len()];
        for (v, p) in preds.iter().enumerate() {
            for &u in p {
                succs[u].push(v);
            }
        }
        let mut ready: alloc::collections::BTreeSet<usize> = (0..nodes.len()).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(nodes.len());
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &s in &succs[v] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != nodes.len() {
            return Err(Error::InvalidGraph("graph contains a cycle".into()));
        }
        let sinks: Vec<usize> = (0..nodes.len()).filter(|&v| succs[v].is_empty()).collect();
        let output = match sinks.as_slice() {
            [one] => *one,
            _ => {
                return Err(Error::InvalidGraph(alloc::format!(
                    "expected exactly one output node, found {}",
                    sinks.len()
                )))
            }
        };
        if nodes[output].spec != LayerSpec::SoftmaxOutput {
            return Err(Error::InvalidGraph(alloc::format!(
                "output node `{}` must be softmax-output",
                nodes[output].id
            )));
        }
        Ok(ModelGraph {
            nodes,
            index,
            input_shape,
            class_count,
            preds,
            order,
            output,
            shapes: Vec::new(),
        })
    }

    fn input_of(&self, v: usize, k: usize, shapes: &[Vec<usize>]) -> Vec<usize> {
        match self.preds[v].get(k) {
            Some(&u) => shapes[u].clone(),
            None => self.input_shape.to_vec(),
        }
    }

    /// Per-node output shapes (batch axis excluded). With `check_params`, the
    /// stored parameters must agree with the geometry.
    fn infer(&self, check_params: bool) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![Vec::new(); self.nodes.len()];
        for &v in &self.order {
            let node = &self.nodes[v];
            let x = self.input_of(v, 0, &shapes);
            let conflict = |expected: Vec<usize>, found: Vec<usize>| Error::ShapeConflict {
                node: node.id.clone(),
                expected,
                found,
            };
            let need_image = |s: &[usize]| -> Result<(usize, usize, usize)> {
                match *s {
                    [c, h, w] => Ok((c, h, w)),
                    _ => Err(Error::ShapeConflict {
                        node: node.id.clone(),
                        expected: vec![0, 0, 0],
                        found: s.to_vec(),
                    }),
                }
            };
            let geometry = |e: Error| match e {
                Error::InvalidGeometry(m) => Error::InvalidGeometry(alloc::format!("node `{}`: {m}", node.id)),
                other => other,
            };
            let out = match &node.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (c, h, w) = need_image(&x)?;
                    let ho = conv_out_extent(h, *kernel, *stride, *pad).map_err(geometry)?;
                    let wo = conv_out_extent(w, *kernel, *stride, *pad).map_err(geometry)?;
                    if check_params {
                        let expected = vec![*out_channels, c, *kernel, *kernel];
                        let p = self.require_params(v)?;
                        if p.weights.shape() != expected.as_slice() || p.bias.len() != *out_channels {
                            return Err(conflict(expected, p.weights.shape().to_vec()));
                        }
                    }
                    vec![*out_channels, ho, wo]
                }
                LayerSpec::Fc { units } => {
                    if check_params {
                        let expected = vec![*units, x.iter().product()];
                        let p = self.require_params(v)?;
                        if p.weights.shape() != expected.as_slice() || p.bias.len() != *units {
                            return Err(conflict(expected, p.weights.shape().to_vec()));
                        }
                    }
                    vec![*units]
                }
                LayerSpec::Relu | LayerSpec::Dropout { .. } => x,
                LayerSpec::Lrn(_) => {
                    need_image(&x)?;
                    x
                }
                LayerSpec::BatchNorm => {
                    let (c, _, _) = need_image(&x)?;
                    if check_params {
                        let p = self.require_params(v)?;
                        if p.weights.shape() != [c] || p.bias.len() != c {
                            return Err(conflict(vec![c], p.weights.shape().to_vec()));
                        }
                    }
                    x
                }
                LayerSpec::MaxPool { kernel, stride, pad } => {
                    let (c, h, w) = need_image(&x)?;
                    if 2 * pad > *kernel {
                        return Err(Error::InvalidGeometry(alloc::format!(
                            "node `{}`: pool padding {pad} exceeds half of kernel {kernel}",
                            node.id
                        )));
                    }
                    let ho = conv_out_extent(h, *kernel, *stride, *pad).map_err(geometry)?;
                    let wo = conv_out_extent(w, *kernel, *stride, *pad).map_err(geometry)?;
                    vec![c, ho, wo]
                }
                LayerSpec::Concat => {
                    let (_, h, w) = need_image(&x)?;
                    let mut total = 0;
                    for k in 0..self.preds[v].len().max(1) {
                        let s = self.input_of(v, k, &shapes);
                        let (c, sh, sw) = need_image(&s)?;
                        if (sh, sw) != (h, w) {
                            return Err(conflict(vec![c, h, w], s));
                        }
                        total += c;
                    }
                    vec![total, h, w]
                }
                LayerSpec::ResidualAdd => {
                    let y = self.input_of(v, 1, &shapes);
                    if x != y {
                        return Err(conflict(x, y));
                    }
                    x
                }
                LayerSpec::GlobalAvgPool => {
                    let (c, _, _) = need_image(&x)?;
                    vec![c]
                }
                LayerSpec::SoftmaxOutput => vec![x.iter().product()],
            };
            shapes[v] = out;
        }
        Ok(shapes)
    }

    fn require_params(&self, v: usize) -> Result<&LayerParams> {
        self.nodes[v].params.as_ref().ok_or_else(|| Error::Parameter {
            name: self.nodes[v].id.clone(),
            reason: "parameters missing".into(),
        })
    }

    fn check_head(&self) -> Result<()> {
        let out = &self.shapes[self.output];
        if out.as_slice() != [self.class_count] {
            return Err(Error::ShapeConflict {
                node: self.nodes[self.output].id.clone(),
                expected: vec![self.class_count],
                found: out.clone(),
            });
        }
        Ok(())
    }

    /// Fresh parameters for node `v`. Each node draws from its own stream,
    /// keyed by the seed and the node id.
    fn init_node(&mut self, v: usize, seed: u64) -> Result<()> {
        let shapes = self.infer(false)?;
        let x = self.input_of(v, 0, &shapes);
        let mut r = rng::rng(rng::derive_seed(seed, rng::fnv1a(self.nodes[v].id.as_bytes())));
        let params = match self.nodes[v].spec {
            LayerSpec::Conv {
                out_channels, kernel, ..
            } => {
                let fan_in = x[0] * kernel * kernel;
                Some(he_uniform(&[out_channels, x[0], kernel, kernel], fan_in, &mut r))
            }
            LayerSpec::Fc { units } => {
                let fan_in: usize = x.iter().product();
                Some(he_uniform(&[units, fan_in], fan_in, &mut r))
            }
            LayerSpec::BatchNorm => {
                let c = x[0];
                Some(LayerParams {
                    weights: Tensor::full(&[c], 1.0),
                    bias: vec![0.0; c],
                    running: Some(RunningStats {
                        mean: vec![0.0; c],
                        var: vec![1.0; c],
                    }),
                })
            }
            _ => None,
        };
        self.nodes[v].params = params;
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn params(&self, id: &str) -> Option<&LayerParams> {
        self.node(id).and_then(|n| n.params.as_ref())
    }

    pub fn params_mut(&mut self, id: &str) -> Option<&mut LayerParams> {
        let i = *self.index.get(id)?;
        self.nodes[i].params.as_mut()
    }

    /// Node ids in execution order.
    pub fn topological_ids(&self) -> Vec<&str> {
        self.order.iter().map(|&v| self.nodes[v].id.as_str()).collect()
    }

    /// Cached output shape of node `id` (batch axis excluded).
    pub fn shape_of(&self, id: &str) -> Option<&[usize]> {
        self.index.get(id).map(|&i| self.shapes[i].as_slice())
    }

    /// Recomputes every node's output shape from the input shape, checking
    /// parameter shapes along the way.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let shapes = self.infer(true)?;
        Ok(self.nodes.iter().map(|n| n.id.clone()).zip(shapes).collect())
    }

    pub fn census(&self) -> Census {
        let mut counts = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry(n.kind()).or_insert(0) += 1;
        }
        Census {
            counts,
            total_params: self.nodes.iter().map(LayerNode::param_count).sum(),
            trainable_params: self
                .nodes
                .iter()
                .filter(|n| n.trainable)
                .map(LayerNode::param_count)
                .sum(),
            shapes: self
                .order
                .iter()
                .map(|&v| (self.nodes[v].id.clone(), self.shapes[v].clone()))
                .collect(),
        }
    }

    pub fn summary(&self) -> GraphSummary {
        let census = self.census();
        GraphSummary {
            input_shape: self.input_shape,
            class_count: self.class_count,
            total_params: census.total_params,
            trainable_params: census.trainable_params,
            nodes: self
                .order
                .iter()
                .map(|&v| {
                    let n = &self.nodes[v];
                    NodeSummary {
                        id: n.id.clone(),
                        kind: n.kind(),
                        inputs: n.inputs.clone(),
                        shape: self.shapes[v].clone(),
                        trainable: n.trainable,
                        params: n.param_count(),
                    }
                })
                .collect(),
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        match *batch.shape() {
            [n, c, h, w] if [c, h, w] == self.input_shape => Ok(n),
            _ => {
                let mut expected = vec![0];
                expected.extend_from_slice(&self.input_shape);
                Err(Error::ShapeMismatch {
                    op: "forward input",
                    left: expected,
                    right: batch.shape().to_vec(),
                })
            }
        }
    }

    /// Whether batch norm at `v` uses batch statistics in train mode.
    fn bn_learns(&self, v: usize) -> bool {
        self.nodes[v].trainable
    }

    /// Nodes whose train-mode output is a fixed function of the graph input:
    /// no trainable parameters, no active dropout, all inputs static.
    pub fn static_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        for &v in &self.order {
            let n = &self.nodes[v];
            let deterministic = match n.spec {
                LayerSpec::Dropout { rate } => rate == 0.0,
                LayerSpec::SoftmaxOutput => false,
                _ => true,
            };
            let frozen = !(n.spec.has_params() && n.trainable);
            mask[v] = deterministic && frozen && self.preds[v].iter().all(|&u| mask[u]);
        }
        mask
    }

    /// Whether every node reading the graph input is static, so a pass can
    /// start from [`ModelGraph::static_features`] alone.
    pub fn features_cover_input(&self) -> bool {
        let mask = self.static_mask();
        (0..self.nodes.len()).all(|v| !self.preds[v].is_empty() || mask[v])
    }

    /// Static nodes with at least one non-static consumer.
    fn frontier(&self, mask: &[bool]) -> Vec<usize> {
        let mut hit = vec![false; self.nodes.len()];
        for v in 0..self.nodes.len() {
            if !mask[v] {
                for &u in &self.preds[v] {
                    if mask[u] {
                        hit[u] = true;
                    }
                }
            }
        }
        (0..self.nodes.len()).filter(|&v| hit[v]).collect()
    }

    /// Activations of the static frontier for `batch`. They are identical in
    /// train and eval mode, so a trainer can compute them once per sample.
    pub fn static_features(&self, batch: &Tensor) -> Result<Features> {
        self.check_batch(batch)?;
        let mask = self.static_mask();
        let nodes = self.frontier(&mask);
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for &v in &self.order {
            if !mask[v] {
                continue;
            }
            let ins: Vec<&Tensor> = if self.preds[v].is_empty() {
                vec![batch]
            } else {
                self.preds[v]
                    .iter()
                    .map(|&u| values[u].as_ref().expect("static input computed"))
                    .collect()
            };
            let (y, _) = self.run_node(v, &ins, None)?;
            values[v] = Some(y);
        }
        Ok(Features {
            values: nodes
                .iter()
                .map(|&v| values[v].take().expect("frontier computed"))
                .collect(),
            nodes,
        })
    }

    /// Eval-mode forward pass; safe to call concurrently.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        Ok(self.execute(Source::Input(batch), None)?.output)
    }

    /// Forward pass returning the logits (N×class_count). In train mode the
    /// activation cache is returned and batch-norm running statistics are
    /// updated; `dropout_seed` fixes every dropout mask.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, dropout_seed: u64) -> Result<(Tensor, Option<ForwardCache>)> {
        self.check_batch(batch)?;
        match mode {
            Mode::Eval => Ok((self.execute(Source::Input(batch), None)?.output, None)),
            Mode::Train => {
                let exec = self.execute(Source::Input(batch), Some(dropout_seed))?;
                Ok((
                    exec.output.clone(),
                    Some(self.commit(exec, batch.shape().to_vec(), false)),
                ))
            }
        }
    }

    /// Train-mode forward pass starting from precomputed static features.
    pub fn forward_train_features(&mut self, features: &Features, dropout_seed: u64) -> Result<(Tensor, ForwardCache)> {
        let mask = self.static_mask();
        if features.nodes != self.frontier(&mask) {
            return Err(Error::InvalidGraph(
                "features do not match the graph's static frontier".into(),
            ));
        }
        let exec = self.execute(Source::Features(features), Some(dropout_seed))?;
        let mut shape = vec![features.batch()];
        shape.extend_from_slice(&self.input_shape);
        Ok((exec.output.clone(), self.commit(exec, shape, true)))
    }

    /// Eval-mode forward pass starting from precomputed static features.
    pub fn forward_eval_features(&self, features: &Features) -> Result<Tensor> {
        let mask = self.static_mask();
        if features.nodes != self.frontier(&mask) {
            return Err(Error::InvalidGraph(
                "features do not match the graph's static frontier".into(),
            ));
        }
        Ok(self.execute(Source::Features(features), None)?.output)
    }

    fn commit(&mut self, exec: Execution, input_shape: Vec<usize>, from_features: bool) -> ForwardCache {
        for (v, stats) in exec.bn_updates {
            if let Some(p) = self.nodes[v].params.as_mut() {
                p.running = Some(stats);
            }
        }
        ForwardCache {
            caches: exec.caches,
            input_shape,
            from_features,
        }
    }

    /// Runs the graph. `train` carries the dropout seed in train mode.
    fn execute(&self, source: Source<'_>, train: Option<u64>) -> Result<Execution> {
        self.execute_observed(source, train, &mut |_, _| {})
    }

    /// Eval-mode pass calling `observe(id, output)` for every node in
    /// execution order.
    pub fn observe_eval(&self, batch: &Tensor, observe: &mut dyn FnMut(&str, &Tensor)) -> Result<Tensor> {
        self.check_batch(batch)?;
        let exec = self.execute_observed(Source::Input(batch), None, &mut |v, t| observe(&self.nodes[v].id, t))?;
        Ok(exec.output)
    }

    /// Executed output shape of every node (batch axis excluded).
    pub fn traced_shapes(&self, batch: &Tensor) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut out = BTreeMap::new();
        self.observe_eval(batch, &mut |id, t| {
            out.insert(id.to_string(), t.shape()[1..].to_vec());
        })?;
        Ok(out)
    }

    fn execute_observed(
        &self,
        source: Source<'_>,
        train: Option<u64>,
        observe: &mut dyn FnMut(usize, &Tensor),
    ) -> Result<Execution> {
        let count = self.nodes.len();
        let mut remaining: Vec<usize> = vec![0; count];
        for p in &self.preds {
            for &u in p {
                remaining[u] += 1;
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; count];
        let mut caches: Vec<Option<NodeCache>> = vec![None; count];
        let mut bn_updates = Vec::new();
        let skip = match source {
            Source::Features(f) => {
                let mask = self.static_mask();
                for (&v, t) in f.nodes.iter().zip(&f.values) {
                    values[v] = Some(t.clone());
                }
                mask
            }
            Source::Input(_) => vec![false; count],
        };
        let input = match source {
            Source::Input(t) => Some(t),
            Source::Features(_) => None,
        };
        for &v in &self.order {
            if skip[v] {
                continue;
            }
            let y = {
                let ins: Vec<&Tensor> = if self.preds[v].is_empty() {
                    vec![input
                        .ok_or_else(|| Error::InvalidGraph("graph input needed but only features given".into()))?]
                } else {
                    self.preds[v]
                        .iter()
                        .map(|&u| {
                            values[u].as_ref().ok_or_else(|| {
                                Error::InvalidGraph(alloc::format!("value of `{}` unavailable", self.nodes[u].id))
                            })
                        })
                        .collect::<Result<_>>()?
                };
                let seed = train.map(|s| rng::derive_seed(s, v as u64));
                let (y, cache) = self.run_node(v, &ins, seed)?;
                if let Some(cache) = cache {
                    match cache {
                        (c, Some(stats)) => {
                            bn_updates.push((v, stats));
                            caches[v] = Some(c);
                        }
                        (c, None) => caches[v] = Some(c),
                    }
                }
                y
            };
            for &u in &self.preds[v] {
                remaining[u] -= 1;
                if remaining[u] == 0 {
                    values[u] = None;
                }
            }
            observe(v, &y);
            values[v] = Some(y);
        }
        let output = values[self.output].take().expect("output computed");
        Ok(Execution {
            output,
            caches,
            bn_updates,
        })
    }

    /// Forward of one node. `train` is the node's dropout seed in train mode;
    /// the cache (and batch-norm statistics) are returned only then.
    #[allow(clippy::type_complexity)]
    fn run_node(
        &self,
        v: usize,
        ins: &[&Tensor],
        train: Option<u64>,
    ) -> Result<(Tensor, Option<(NodeCache, Option<RunningStats>)>)> {
        let node = &self.nodes[v];
        let x = ins[0];
        let training = train.is_some();
        let plain = |y: Tensor, c: NodeCache| Ok((y, training.then_some((c, None))));
        match &node.spec {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = self.require_params(v)?;
                if training {
                    let (y, c) = layers::conv2d_train(x, p, *stride, *pad)?;
                    plain(y, NodeCache::Conv(c))
                } else {
                    Ok((layers::conv2d(x, p, *stride, *pad)?, None))
                }
            }
            LayerSpec::Fc { .. } => {
                let y = layers::fully_connected(x, self.require_params(v)?)?;
                if training {
                    plain(y, NodeCache::Fc(x.clone()))
                } else {
                    Ok((y, None))
                }
            }
            LayerSpec::Relu => {
                let y = layers::relu(x);
                if training {
                    plain(y, NodeCache::Relu(x.clone()))
                } else {
                    Ok((y, None))
                }
            }
            LayerSpec::MaxPool { kernel, stride, pad } => {
                let (y, c) = layers::maxpool(x, Window::square(*kernel, *stride, *pad)?)?;
                plain(y, NodeCache::MaxPool(c))
            }
            LayerSpec::Lrn(p) => {
                let (y, c) = layers::local_response_norm(x, *p)?;
                plain(y, NodeCache::Lrn(c))
            }
            LayerSpec::BatchNorm => {
                let p = self.require_params(v)?;
                if training && self.bn_learns(v) {
                    let mut q = p.clone();
                    let (y, c) = layers::batch_norm_train(x, &mut q)?;
                    Ok((y, Some((NodeCache::BatchNorm(c), q.running))))
                } else {
                    let y = layers::batch_norm_eval(x, p)?;
                    plain(y, NodeCache::BatchNormFixed)
                }
            }
            LayerSpec::Dropout { rate } => {
                let mode = if training { Mode::Train } else { Mode::Eval };
                let (y, mask) = layers::dropout(x, *rate, mode, train.unwrap_or(0))?;
                plain(y, NodeCache::Dropout(mask))
            }
            LayerSpec::Concat => {
                let y = layers::concat_channels(ins)?;
                plain(y, NodeCache::Concat(ins.iter().map(|t| t.shape()[1]).collect()))
            }
            LayerSpec::ResidualAdd => plain(layers::residual_add(ins[0], ins[1])?, NodeCache::Residual),
            LayerSpec::GlobalAvgPool => plain(layers::global_avg_pool(x)?, NodeCache::Gap(x.shape().to_vec())),
            LayerSpec::SoftmaxOutput => {
                let (n, d) = x.batch_view();
                plain(x.clone().reshape(&[n, d])?, NodeCache::Output(x.shape().to_vec()))
            }
        }
    }

    /// Nodes that need an upstream gradient: trainable parameterized nodes and
    /// everything downstream of them (plus input readers when requested).
    fn requires_grad(&self, want_input: bool) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for &v in &self.order {
            let n = &self.nodes[v];
            req[v] = (n.spec.has_params() && n.trainable)
                || self.preds[v].iter().any(|&u| req[u])
                || (want_input && self.preds[v].is_empty());
        }
        req
    }

    /// Reverse-mode pass from `d_logits`. Frozen nodes propagate input
    /// gradients but never compute parameter gradients; branches with nothing
    /// trainable upstream are skipped entirely.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor, want_input: bool) -> Result<Gradients> {
        if want_input && cache.from_features {
            return Err(Error::InvalidGraph(
                "input gradient unavailable for a feature-driven pass".into(),
            ));
        }
        let n = cache.input_shape[0];
        let expected = [n, self.class_count];
        if d_logits.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "backward logits",
                left: expected.to_vec(),
                right: d_logits.shape().to_vec(),
            });
        }
        let req = self.requires_grad(want_input);
        let mut upstream: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        upstream[self.output] = Some(d_logits.clone());
        let mut params = BTreeMap::new();
        let mut d_input: Option<Tensor> = None;
        for &v in self.order.iter().rev() {
            if !req[v] {
                continue;
            }
            let Some(g) = upstream[v].take() else { continue };
            let node = &self.nodes[v];
            let c = cache.caches[v]
                .as_ref()
                .ok_or_else(|| Error::InvalidGraph(alloc::format!("no cached activations for `{}`", node.id)))?;
            let want_params = node.spec.has_params() && node.trainable;
            let mut to_inputs: Vec<Tensor> = Vec::with_capacity(1);
            match (c, &node.spec) {
                (NodeCache::Conv(cc), _) => {
                    let b = layers::conv2d_backward(cc, self.require_params(v)?, &g, want_params)?;
                    to_inputs.push(self.take_params(v, b, want_params, &mut params));
                }
                (NodeCache::Fc(x), _) => {
                    let b = layers::fully_connected_backward(x, self.require_params(v)?, &g, want_params)?;
                    to_inputs.push(self.take_params(v, b, want_params, &mut params));
                }
                (NodeCache::Relu(x), _) => to_inputs.push(layers::relu_backward(x, &g)?),
                (NodeCache::MaxPool(mc), _) => to_inputs.push(layers::maxpool_backward(mc, &g)?),
                (NodeCache::Lrn(lc), LayerSpec::Lrn(p)) => {
                    to_inputs.push(layers::local_response_norm_backward(lc, *p, &g)?)
                }
                (NodeCache::BatchNorm(bc), _) => {
                    let b = layers::batch_norm_backward(bc, self.require_params(v)?, &g, want_params)?;
                    to_inputs.push(self.take_params(v, b, want_params, &mut params));
                }
                (NodeCache::BatchNormFixed, _) => {
                    let p = self.require_params(v)?;
                    let stats = p.running.as_ref().ok_or_else(|| Error::Parameter {
                        name: node.id.clone(),
                        reason: "running statistics missing".into(),
                    })?;
                    let (_, ch, h, w) = g.dims4()?;
                    let plane = h * w;
                    let mut d = g.clone();
                    for (i, val) in d.data_mut().iter_mut().enumerate() {
                        let c = (i / plane) % ch;
                        *val *= p.weights.data()[c] / libm::sqrt(stats.var[c] + layers::batchnorm::BN_EPS);
                    }
                    to_inputs.push(d);
                }
                (NodeCache::Dropout(mask), _) => to_inputs.push(layers::dropout_backward(mask.as_ref(), &g)?),
                (NodeCache::Concat(counts), _) => to_inputs = layers::split_channels(&g, counts)?,
                (NodeCache::Residual, _) => {
                    let (a, b) = layers::residual_add_backward(&g);
                    to_inputs = vec![a, b];
                }
                (NodeCache::Gap(shape), _) => to_inputs.push(layers::global_avg_pool_backward(shape, &g)?),
                (NodeCache::Output(shape), _) => to_inputs.push(g.reshape(shape)?),
                (NodeCache::Lrn(_), _) => unreachable!("lrn cache on a non-lrn node"),
            }
            if self.preds[v].is_empty() {
                if want_input {
                    let d = to_inputs.swap_remove(0);
                    match d_input.as_mut() {
                        Some(acc) => acc.add_assign(&d)?,
                        None => d_input = Some(d),
                    }
                }
                continue;
            }
            for (&u, d) in self.preds[v].iter().zip(to_inputs) {
                if !req[u] {
                    continue;
                }
                match upstream[u].as_mut() {
                    Some(acc) => acc.add_assign(&d)?,
                    None => upstream[u] = Some(d),
                }
            }
        }
        Ok(Gradients { params, input: d_input })
    }

    fn take_params(&self, v: usize, b: GradBundle, want: bool, out: &mut BTreeMap<String, ParamGrad>) -> Tensor {
        if want {
            if let (Some(weights), Some(bias)) = (b.d_weights, b.d_bias) {
                out.insert(self.nodes[v].id.clone(), ParamGrad { weights, bias });
            }
        }
        b.d_input
    }

    /// Replaces the last fully-connected layer with a freshly initialized,
    /// trainable one producing `class_count` outputs. Every other node is left
    /// untouched.
    pub fn replace_head(&mut self, class_count: usize, seed: u64) -> Result<()> {
        if class_count == 0 {
            return Err(Error::InvalidConfig("class count must be positive".into()));
        }
        let head = self
            .order
            .iter()
            .rev()
            .copied()
            .find(|&v| self.nodes[v].kind() == LayerKind::Fc)
            .ok_or_else(|| Error::InvalidGraph("graph has no fully-connected head".into()))?;
        self.nodes[head].spec = LayerSpec::Fc { units: class_count };
        self.nodes[head].trainable = true;
        self.class_count = class_count;
        self.init_node(head, seed)?;
        self.shapes = self.infer(true)?;
        self.check_head()
    }

    /// Marks `id` and all of its ancestors as not trainable.
    pub fn freeze_through(&mut self, id: &str) -> Result<()> {
        let start = *self.index.get(id).ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        let mut stack = vec![start];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(v) = stack.pop() {
            if core::mem::replace(&mut seen[v], true) {
                continue;
            }
            self.nodes[v].trainable = false;
            stack.extend_from_slice(&self.preds[v]);
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, id: &str, trainable: bool) -> Result<()> {
        let v = *self.index.get(id).ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        self.nodes[v].trainable = trainable;
        Ok(())
    }

    /// Ids of nodes whose parameters an optimizer may update.
    pub fn trainable_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.trainable && n.params.is_some())
            .map(|n| n.id.clone())
            .collect()
    }

    /// Every stored tensor as `(name, shape, values)`, in node order:
    /// `<id>.weight`, `<id>.bias`, then `<id>.running_mean` / `<id>.running_var`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let Some(p) = &n.params else { continue };
            out.push((
                alloc::format!("{}.weight", n.id),
                p.weights.shape().to_vec(),
                p.weights.data(),
            ));
            out.push((alloc::format!("{}.bias", n.id), vec![p.bias.len()], p.bias.as_slice()));
            if let Some(r) = &p.running {
                out.push((
                    alloc::format!("{}.running_mean", n.id),
                    vec![r.mean.len()],
                    r.mean.as_slice(),
                ));
                out.push((
                    alloc::format!("{}.running_var", n.id),
                    vec![r.var.len()],
                    r.var.as_slice(),
                ));
            }
        }
        out
    }

    /// Loads tensors by name. Every stored tensor must be present with the
    /// same shape and no extra names are allowed; nothing is modified on error.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for (name, shape) in &expected {
            let t = tensors.get(name).ok_or_else(|| Error::Parameter {
                name: name.clone(),
                reason: "missing from weight file".into(),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Parameter {
                    name: name.clone(),
                    reason: alloc::format!("shape {:?} does not match graph shape {:?}", t.shape(), shape),
                });
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)) {
            return Err(Error::Parameter {
                name: extra.clone(),
                reason: "not a tensor of this graph".into(),
            });
        }
        for n in &mut self.nodes {
            let Some(p) = n.params.as_mut() else { continue };
            let get = |suffix: &str| tensors[&alloc::format!("{}.{suffix}", n.id)].data().to_vec();
            p.weights = Tensor::new(p.weights.shape().to_vec(), get("weight"))?;
            p.bias = get("bias");
            if let Some(r) = p.running.as_mut() {
                r.mean = get("running_mean");
                r.var = get("running_var");
            }
        }
        Ok(())
    }
}

fn he_uniform(shape: &[usize], fan_in: usize, r: &mut rng::ChaCha8Rng) -> LayerParams {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    let weights = Tensor::from_fn(shape, |_| rng::uniform_symmetric(r, bound));
    LayerParams::new(weights, vec![0.0; shape[0]])
}

/// Whole-graph gradient check on a conv → relu → fc toy network with respect
/// to the input and every parameter. Instances whose relu pre-activations come
/// within 1e-3 of the kink are redrawn.
pub fn toy_graph_check(seed: u64) -> Result<f64> {
    use crate::gradcheck::{grad_check, random_tensor, GRAD_EPS};
    for attempt in 0u64.. {
        let s = rng::derive_seed(seed, attempt);
        let mut r = rng::rng(s);
        let mut b = GraphBuilder::new([2, 5, 5], 3);
        b.conv("conv", "", 3, 3, 1, 1);
        b.relu("relu", "conv");
        b.fc("fc", "relu", 3);
        b.add("out", LayerSpec::SoftmaxOutput, &["fc"]);
        let mut g = b.build(s)?;
        for id in ["conv", "fc"] {
            let p = g.params_mut(id).expect("parameterized");
            p.bias = p.bias.iter().map(|_| r.gen_range(-0.5..0.5)).collect();
        }
        let x = random_tensor(&[2, 2, 5, 5], &mut r);
        let conv = g.params("conv").expect("conv params");
        let pre = layers::conv2d(&x, conv, 1, 1)?;
        if pre.data().iter().any(|v| libm::fabs(*v) < 1e-3) {
            continue;
        }
        let (logits, cache) = g.forward(&x, Mode::Train, 0)?;
        let proj = random_tensor(logits.shape(), &mut r);
        let grads = g.backward(&cache.expect("train cache"), &proj, true)?;
        let mut worst = grad_check(
            |t| g.forward_eval(t)?.dot(&proj),
            &x,
            grads.input.as_ref().expect("requested"),
            GRAD_EPS,
        )?;
        for id in ["conv", "fc"] {
            let pg = &grads.params[id];
            let w = g.params(id).expect("params").weights.clone();
            worst = worst.max(grad_check(
                |t| {
                    let mut h = g.clone();
                    h.params_mut(id).expect("params").weights = t.clone();
                    h.forward_eval(&x)?.dot(&proj)
                },
                &w,
                &pg.weights,
                GRAD_EPS,
            )?);
            let bias = Tensor::new(vec![pg.bias.len()], g.params(id).expect("params").bias.clone())?;
            worst = worst.max(grad_check(
                |t| {
                    let mut h = g.clone();
                    h.params_mut(id).expect("params").bias = t.data().to_vec();
                    h.forward_eval(&x)?.dot(&proj)
                },
                &bias,
                &Tensor::new(vec![pg.bias.len()], pg.bias.clone())?,
                GRAD_EPS,
            )?);
        }
        return Ok(worst);
    }
    unreachable!("attempt counter is unbounded")
}
