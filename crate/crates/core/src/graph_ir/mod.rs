//! Application-graph IR: tensors, layer nodes and the lowering passes that
//! turn a quantized model into a linear chain of chip-executable layers.

mod manifest;
mod passes;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

pub use manifest::{read_bundle, read_model, write_bundle, write_model, TensorBundle};
pub use passes::{fuse_linear_relu, pow2_exponent, strip_qdq};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("cycle among nodes {0:?}")]
    Cycle(Vec<u32>),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("node {node}: {msg}")]
    Node { node: u32, msg: String },
    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "float32")]
    F32,
    #[serde(rename = "int8")]
    I8,
    #[serde(rename = "int32")]
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DType::F32)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "float32",
            DType::I8 => "int8",
            DType::I32 => "int32",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Power-of-two exponent of the quantization scale (integer tensors only).
    pub scale_exp: Option<i32>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, dtype: DType, scale_exp: Option<i32>) -> Self {
        Self { name: name.into(), shape, dtype, scale_exp }
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self::new(name, shape, DType::F32, None)
    }

    pub fn i8(name: impl Into<String>, shape: Vec<usize>, exp: i32) -> Self {
        Self::new(name, shape, DType::I8, Some(exp))
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * self.dtype.size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Linear,
    #[serde(rename = "ReLU")]
    Relu,
    Add,
    Softmax,
    Quantize,
    Dequantize,
    #[serde(rename = "LinearReLU")]
    LinearRelu,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Linear => "Linear",
            NodeKind::Relu => "ReLU",
            NodeKind::Add => "Add",
            NodeKind::Softmax => "Softmax",
            NodeKind::Quantize => "Quantize",
            NodeKind::Dequantize => "Dequantize",
            NodeKind::LinearRelu => "LinearReLU",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "Linear" | "Gemm" | "MatMul" => NodeKind::Linear,
            "ReLU" | "Relu" => NodeKind::Relu,
            "Add" => NodeKind::Add,
            "Softmax" => NodeKind::Softmax,
            "Quantize" | "QuantizeLinear" => NodeKind::Quantize,
            "Dequantize" | "DequantizeLinear" => NodeKind::Dequantize,
            "LinearReLU" => NodeKind::LinearRelu,
            other => return Err(GraphError::UnsupportedLayer(other.to_string())),
        })
    }

    pub fn is_linear(self) -> bool {
        matches!(self, NodeKind::Linear | NodeKind::LinearRelu)
    }

    pub fn is_qdq(self) -> bool {
        matches!(self, NodeKind::Quantize | NodeKind::Dequantize)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub weight: Option<String>,
    pub bias: Option<String>,
    /// Exponents of the integer inputs, one per input once quantized.
    pub in_exps: Vec<i32>,
    pub out_exp: i32,
    pub relu_fused: bool,
    /// Real-valued scale carried by Quantize/Dequantize nodes.
    pub scale: Option<f64>,
}

impl Node {
    fn bare(id: u32, kind: NodeKind, inputs: &[&str], outputs: &[&str]) -> Self {
        Self {
            id,
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            weight: None,
            bias: None,
            in_exps: Vec::new(),
            out_exp: 0,
            relu_fused: kind == NodeKind::LinearRelu,
            scale: None,
        }
    }

    pub fn linear(id: u32, input: &str, output: &str, weight: &str, bias: Option<&str>) -> Self {
        let mut n = Self::bare(id, NodeKind::Linear, &[input], &[output]);
        n.weight = Some(weight.to_string());
        n.bias = bias.map(str::to_string);
        n
    }

    pub fn relu(id: u32, input: &str, output: &str) -> Self {
        Self::bare(id, NodeKind::Relu, &[input], &[output])
    }

    pub fn add(id: u32, a: &str, b: &str, output: &str) -> Self {
        Self::bare(id, NodeKind::Add, &[a, b], &[output])
    }

    pub fn softmax(id: u32, input: &str, output: &str) -> Self {
        Self::bare(id, NodeKind::Softmax, &[input], &[output])
    }

    pub fn quantize(id: u32, input: &str, output: &str, scale: f64) -> Self {
        let mut n = Self::bare(id, NodeKind::Quantize, &[input], &[output]);
        n.scale = Some(scale);
        n
    }

    pub fn dequantize(id: u32, input: &str, output: &str, scale: f64) -> Self {
        let mut n = Self::bare(id, NodeKind::Dequantize, &[input], &[output]);
        n.scale = Some(scale);
        n
    }

    pub fn with_exps(mut self, in_exps: Vec<i32>, out_exp: i32) -> Self {
        self.in_exps = in_exps;
        self.out_exp = out_exp;
        self
    }

    pub fn input(&self) -> &str {
        &self.inputs[0]
    }

    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

/// A single finding from [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: Option<u32>,
    pub message: String,
}

impl Diagnostic {
    fn graph(message: impl Into<String>) -> Self {
        Self { node: None, message: message.into() }
    }

    fn node(id: u32, message: impl Into<String>) -> Self {
        Self { node: Some(id), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "node {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplicationGraph {
    pub nodes: Vec<Node>,
    pub tensors: BTreeMap<String, TensorSpec>,
    /// Little-endian raw payloads of constant tensors (weights, biases).
    pub constants: BTreeMap<String, Vec<u8>>,
    pub graph_inputs: Vec<String>,
    pub graph_outputs: Vec<String>,
}

impl ApplicationGraph {
    pub fn add_tensor(&mut self, spec: TensorSpec) {
        self.tensors.insert(spec.name.clone(), spec);
    }

    pub fn add_constant_f32(&mut self, name: &str, shape: Vec<usize>, values: &[f32]) {
        self.add_tensor(TensorSpec::f32(name, shape));
        self.constants.insert(name.to_string(), f32_to_bytes(values));
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorSpec> {
        self.tensors.get(name).ok_or_else(|| GraphError::UnknownTensor(name.to_string()))
    }

    pub fn node(&self, id: u32) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn constant(&self, name: &str) -> Result<&[u8]> {
        self.constants
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| GraphError::UnknownTensor(name.to_string()))
    }

    pub fn constant_f32(&self, name: &str) -> Result<Vec<f32>> {
        Ok(bytes_to_f32(self.constant(name)?))
    }

    pub fn constant_i8(&self, name: &str) -> Result<Vec<i8>> {
        Ok(self.constant(name)?.iter().map(|&b| b as i8).collect())
    }

    pub fn constant_i32(&self, name: &str) -> Result<Vec<i32>> {
        Ok(self
            .constant(name)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Node that writes `tensor`, if any.
    pub fn producer(&self, tensor: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.outputs.iter().any(|o| o == tensor))
    }

    /// Nodes reading `tensor` as an activation input.
    pub fn consumers(&self, tensor: &str) -> Vec<&Node> {
        self.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == tensor)).collect()
    }

    /// True once weights are stored as int8 and activations carry exponents.
    pub fn is_quantized(&self) -> bool {
        let mut saw_weight = false;
        for n in self.nodes.iter().filter(|n| n.kind.is_linear()) {
            saw_weight = true;
            match n.weight.as_deref().and_then(|w| self.tensors.get(w)) {
                Some(t) if t.dtype == DType::I8 => {}
                _ => return false,
            }
        }
        if saw_weight {
            return true;
        }
        self.graph_inputs
            .iter()
            .filter_map(|i| self.tensors.get(i))
            .all(|t| t.dtype == DType::I8)
            && !self.graph_inputs.is_empty()
    }

    pub fn next_node_id(&self) -> u32 {
        self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0)
    }

    /// Producer→consumer edges as pairs of node indices into `self.nodes`.
    fn edges(&self) -> Vec<(usize, usize)> {
        let mut producer_of: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                producer_of.insert(o.as_str(), i);
            }
        }
        let mut edges = Vec::new();
        for (j, n) in self.nodes.iter().enumerate() {
            for input in &n.inputs {
                if let Some(&i) = producer_of.get(input.as_str()) {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    /// Node ids of every strongly connected component that forms a cycle.
    fn cycles(&self) -> Vec<Vec<u32>> {
        let mut g = DiGraph::<u32, ()>::new();
        let idx: Vec<_> = self.nodes.iter().map(|n| g.add_node(n.id)).collect();
        let edges = self.edges();
        for &(a, b) in &edges {
            g.add_edge(idx[a], idx[b], ());
        }
        let mut out: Vec<Vec<u32>> = tarjan_scc(&g)
            .into_iter()
            .filter(|scc| scc.len() > 1 || edges.iter().any(|&(a, b)| a == b && idx[a] == scc[0]))
            .map(|scc| {
                let mut ids: Vec<u32> = scc.iter().map(|&ix| g[ix]).collect();
                ids.sort_unstable();
                ids
            })
            .collect();
        out.sort();
        out
    }
}

pub fn f32_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn i32_to_bytes(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Checks every structural invariant of the graph. Never fails; an empty
/// list means the graph is well formed.
pub fn validate(graph: &ApplicationGraph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();

    for (key, t) in &graph.tensors {
        if key != &t.name {
            diags.push(Diagnostic::graph(format!("tensor key `{key}` does not match name `{}`", t.name)));
        }
        if t.shape.is_empty() || t.shape.contains(&0) {
            diags.push(Diagnostic::graph(format!("tensor `{}` has invalid shape {:?}", t.name, t.shape)));
        }
        if t.dtype.is_integer() != t.scale_exp.is_some() {
            diags.push(Diagnostic::graph(format!(
                "tensor `{}`: scale_exp must be present exactly for integer dtypes ({})",
                t.name, t.dtype
            )));
        }
    }

    for (name, payload) in &graph.constants {
        match graph.tensors.get(name) {
            None => diags.push(Diagnostic::graph(format!("constant `{name}` has no tensor entry"))),
            Some(t) if t.byte_len() != payload.len() => diags.push(Diagnostic::graph(format!(
                "constant `{name}` holds {} bytes, expected {}",
                payload.len(),
                t.byte_len()
            ))),
            _ => {}
        }
    }

    let mut seen_ids = BTreeSet::new();
    let mut produced: HashMap<&str, u32> = HashMap::new();
    for n in &graph.nodes {
        if !seen_ids.insert(n.id) {
            diags.push(Diagnostic::node(n.id, "duplicate node id"));
        }
        check_arity(n, &mut diags);

        let mut refs: Vec<&str> = n.inputs.iter().chain(&n.outputs).map(String::as_str).collect();
        refs.extend(n.weight.as_deref());
        refs.extend(n.bias.as_deref());
        for r in refs {
            if !graph.tensors.contains_key(r) {
                diags.push(Diagnostic::node(n.id, format!("references missing tensor `{r}`")));
            }
        }
        for p in n.weight.iter().chain(&n.bias) {
            if graph.tensors.contains_key(p) && !graph.constants.contains_key(p) {
                diags.push(Diagnostic::node(n.id, format!("parameter `{p}` has no constant payload")));
            }
        }
        for o in &n.outputs {
            if let Some(prev) = produced.insert(o.as_str(), n.id) {
                diags.push(Diagnostic::node(n.id, format!("tensor `{o}` already produced by node {prev}")));
            }
            if graph.constants.contains_key(o) {
                diags.push(Diagnostic::node(n.id, format!("writes constant tensor `{o}`")));
            }
        }
        if n.kind.is_qdq() {
            match n.scale {
                Some(s) if s.is_finite() && s > 0.0 => {}
                _ => diags.push(Diagnostic::node(n.id, "quantize/dequantize without a positive scale")),
            }
        }
    }

    // Every activation read must come from a producer, a graph input or a constant.
    for n in &graph.nodes {
        for i in &n.inputs {
            if graph.tensors.contains_key(i)
                && !produced.contains_key(i.as_str())
                && !graph.graph_inputs.contains(i)
                && !graph.constants.contains_key(i)
            {
                diags.push(Diagnostic::node(n.id, format!("input `{i}` has no producer")));
            }
        }
    }
    for i in &graph.graph_inputs {
        if !graph.tensors.contains_key(i) {
            diags.push(Diagnostic::graph(format!("graph input references missing tensor `{i}`")));
        } else if produced.contains_key(i.as_str()) {
            diags.push(Diagnostic::graph(format!("graph input `{i}` is also produced by a node")));
        }
    }
    for o in &graph.graph_outputs {
        if !graph.tensors.contains_key(o) {
            diags.push(Diagnostic::graph(format!("graph output references missing tensor `{o}`")));
        } else if !produced.contains_key(o.as_str()) && !graph.graph_inputs.contains(o) {
            diags.push(Diagnostic::graph(format!("graph output `{o}` is never produced")));
        }
    }

    for cycle in graph.cycles() {
        diags.push(Diagnostic::graph(format!("cycle through nodes {cycle:?}")));
    }
    diags
}

fn check_arity(n: &Node, diags: &mut Vec<Diagnostic>) {
    let (ins, needs_weight) = match n.kind {
        NodeKind::Linear | NodeKind::LinearRelu => (1, true),
        NodeKind::Add => (2, false),
        _ => (1, false),
    };
    if n.inputs.len() != ins {
        diags.push(Diagnostic::node(n.id, format!("{} expects {ins} input(s), has {}", n.kind, n.inputs.len())));
    }
    if n.outputs.len() != 1 {
        diags.push(Diagnostic::node(n.id, format!("{} expects one output, has {}", n.kind, n.outputs.len())));
    }
    if needs_weight && n.weight.is_none() {
        diags.push(Diagnostic::node(n.id, format!("{} without weight", n.kind)));
    }
    if !needs_weight && (n.weight.is_some() || n.bias.is_some()) {
        diags.push(Diagnostic::node(n.id, format!("{} cannot carry parameters", n.kind)));
    }
    if n.relu_fused != (n.kind == NodeKind::LinearRelu) {
        diags.push(Diagnostic::node(n.id, "relu_fused flag inconsistent with node kind"));
    }
}

/// Linearizes the graph so every node follows its producers. Independent
/// nodes are ordered by ascending id.
pub fn topo_sort(graph: &ApplicationGraph) -> Result<Vec<Node>> {
    let n = graph.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (a, b) in graph.edges() {
        indegree[b] += 1;
        succ[a].push(b);
    }
    let mut ready: BinaryHeap<Reverse<(u32, usize)>> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| Reverse((graph.nodes[i].id, i)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, i))) = ready.pop() {
        order.push(graph.nodes[i].clone());
        for &j in &succ[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push(Reverse((graph.nodes[j].id, j)));
            }
        }
    }
    if order.len() != n {
        let ids = graph.cycles().into_iter().flatten().collect();
        return Err(GraphError::Cycle(ids));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn chain(kinds: &[NodeKind]) -> ApplicationGraph {
        let mut g = ApplicationGraph::default();
        g.add_tensor(TensorSpec::f32("t0", vec![4]));
        g.graph_inputs.push("t0".into());
        for (i, &k) in kinds.iter().enumerate() {
            let input = format!("t{i}");
            let output = format!("t{}", i + 1);
            g.add_tensor(TensorSpec::f32(&output, vec![4]));
            let node = match k {
                NodeKind::Linear => {
                    let w = format!("w{i}");
                    g.add_constant_f32(&w, vec![4, 4], &[0.0; 16]);
                    Node::linear(i as u32, &input, &output, &w, None)
                }
                NodeKind::Relu => Node::relu(i as u32, &input, &output),
                NodeKind::Softmax => Node::softmax(i as u32, &input, &output),
                _ => unreachable!(),
            };
            g.nodes.push(node);
        }
        g.graph_outputs.push(format!("t{}", kinds.len()));
        g
    }

    #[test]
    fn chain_is_valid_and_sorted_in_order() {
        let g = chain(&[NodeKind::Linear, NodeKind::Relu, NodeKind::Softmax]);
        assert!(validate(&g).is_empty(), "{:?}", validate(&g));
        let ids: Vec<u32> = topo_sort(&g).unwrap().iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn missing_tensor_is_named() {
        let mut g = chain(&[NodeKind::Relu]);
        g.nodes[0].inputs[0] = "x9".into();
        let d = validate(&g);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("x9"));
    }

    #[test]
    fn two_node_cycle_reported_once() {
        let mut g = ApplicationGraph::default();
        for t in ["a", "b"] {
            g.add_tensor(TensorSpec::f32(t, vec![2]));
        }
        g.nodes.push(Node::relu(3, "a", "b"));
        g.nodes.push(Node::relu(7, "b", "a"));
        let d = validate(&g);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("cycle") && d[0].message.contains('3') && d[0].message.contains('7'));
        match topo_sort(&g) {
            Err(GraphError::Cycle(ids)) => assert_eq!(ids, vec![3, 7]),
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn diamond_ties_break_by_id() {
        let mut g = ApplicationGraph::default();
        for t in ["x", "a", "b", "c", "d"] {
            g.add_tensor(TensorSpec::f32(t, vec![2]));
        }
        g.graph_inputs.push("x".into());
        g.graph_outputs.push("d".into());
        // Insert out of order to make sure ids, not positions, decide.
        g.nodes.push(Node::add(4, "b", "c", "d"));
        g.nodes.push(Node::relu(3, "a", "c"));
        g.nodes.push(Node::relu(2, "a", "b"));
        g.nodes.push(Node::relu(1, "x", "a"));
        assert!(validate(&g).is_empty());
        let ids: Vec<u32> = topo_sort(&g).unwrap().iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![1, 2, 3, 4]);
    }

    #[test]
    fn scale_exp_only_on_integer_tensors() {
        let mut g = chain(&[NodeKind::Relu]);
        g.tensors.get_mut("t1").unwrap().scale_exp = Some(-3);
        assert_eq!(validate(&g).len(), 1);
    }

    #[test]
    fn constant_length_checked() {
        let mut g = chain(&[NodeKind::Linear]);
        g.constants.get_mut("w0").unwrap().pop();
        let d = validate(&g);
        assert!(d.iter().any(|d| d.message.contains("w0")), "{d:?}");
    }

    #[test]
    fn unknown_kind_is_unsupported() {
        assert!(matches!(NodeKind::parse("Conv"), Err(GraphError::UnsupportedLayer(_))));
    }
}
