//! Power-of-two INT8 post-training quantization.
//!
//! Exponents are chosen per tensor by an exhaustive mean-squared-error sweep.
//! Optionally, cross-layer equalization first balances the weight ranges of
//! every Linear–ReLU–Linear pair.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::graph_ir::{
    f32_to_bytes, i32_to_bytes, topo_sort, validate, ApplicationGraph, DType, GraphError, Node, NodeKind, TensorSpec,
};
use crate::oracle::{float_forward_trace, OracleError};
use crate::parallel;

pub const MIN_EXP: i32 = -31;
pub const MAX_EXP: i32 = 31;
/// Exponent of softmax outputs: probabilities in [0, 1] at 2^-7 resolution.
pub const SOFTMAX_OUT_EXP: i32 = -7;

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("calibration sample {index} has {actual} elements, model input needs {expected}")]
    SampleShape { index: usize, expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("graph is not a float32 model: {0}")]
    NotFloat(String),
    #[error("graph failed validation: {0}")]
    Invalid(String),
    #[error("node {node}: requantization shift {shift} out of range")]
    Shift { node: u32, shift: i32 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Result<T, E = QuantError> = std::result::Result<T, E>;

/// A scale restricted to `2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pow2Scale(i32);

impl Pow2Scale {
    pub fn new(exponent: i32) -> Option<Self> {
        (MIN_EXP..=MAX_EXP).contains(&exponent).then_some(Self(exponent))
    }

    pub fn exponent(self) -> i32 {
        self.0
    }

    pub fn value(self) -> f64 {
        2f64.powi(self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    samples: Vec<Vec<f32>>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Vec<f32>>) -> Result<Self> {
        let first = samples.first().ok_or(QuantError::EmptyCalibration)?.len();
        if let Some((index, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != first) {
            return Err(QuantError::SampleShape { index, expected: first, actual: s.len() });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Vec<f32>] {
        &self.samples
    }

    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

fn round_scaled(v: f32, exponent: i32) -> f64 {
    (v as f64 * 2f64.powi(-exponent)).round()
}

/// `clamp(round_half_away_from_zero(v / 2^exponent), -128, 127)` per element.
pub fn quantize_tensor(values: &[f32], exponent: i32) -> Vec<i8> {
    values.iter().map(|&v| round_scaled(v, exponent).clamp(-128.0, 127.0) as i8).collect()
}

fn quantize_i32(values: &[f32], exponent: i32) -> Vec<i32> {
    values.iter().map(|&v| round_scaled(v, exponent).clamp(i32::MIN as f64, i32::MAX as f64) as i32).collect()
}

/// Exponent in `[-31, 31]` minimising the quantization MSE of `values` for a
/// signed `bits`-wide grid. Ties go to the smaller exponent; an all-zero
/// tensor maps to 0.
pub fn best_pow2_exponent(values: &[f32], bits: u32) -> i32 {
    if values.iter().all(|&v| v == 0.0) {
        return 0;
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let qmin = -((1i64 << (bits - 1)) as f64);
    let mut best = (f64::INFINITY, 0);
    for e in MIN_EXP..=MAX_EXP {
        let step = 2f64.powi(e);
        let sse: f64 = values
            .iter()
            .map(|&v| {
                let q = round_scaled(v, e).clamp(qmin, qmax);
                let d = v as f64 - q * step;
                d * d
            })
            .sum();
        let mse = sse / values.len() as f64;
        if mse < best.0 {
            best = (mse, e);
        }
    }
    best.1
}

/// Rescales the channels between two layers separated by a ReLU so each
/// channel's weight range is equal on both sides. Returns the equalized
/// `(w1, b1, w2)` and leaves the network function unchanged.
pub fn cross_layer_equalize(
    w1: &Array2<f32>,
    b1: Option<&Array1<f32>>,
    w2: &Array2<f32>,
) -> Result<(Array2<f32>, Option<Array1<f32>>, Array2<f32>)> {
    let m = w1.nrows();
    if w2.ncols() != m {
        return Err(QuantError::Shape(format!("w2 has {} columns but w1 has {m} rows", w2.ncols())));
    }
    if let Some(b) = b1 {
        if b.len() != m {
            return Err(QuantError::Shape(format!("b1 has {} entries but w1 has {m} rows", b.len())));
        }
    }
    let absmax = |lane: ndarray::ArrayView1<f32>| lane.iter().fold(0f32, |a, &v| a.max(v.abs())) as f64;
    let scales: Vec<f64> = w1
        .axis_iter(Axis(0))
        .zip(w2.axis_iter(Axis(1)))
        .map(|(row, col)| {
            let (r1, r2) = (absmax(row), absmax(col));
            if r1 == 0.0 || r2 == 0.0 {
                1.0
            } else {
                (r1 / r2).sqrt()
            }
        })
        .collect();

    let mut w1e = w1.clone();
    for (mut row, &s) in w1e.axis_iter_mut(Axis(0)).zip(&scales) {
        row.mapv_inplace(|v| (v as f64 / s) as f32);
    }
    let b1e = b1.map(|b| Array1::from_iter(b.iter().zip(&scales).map(|(&v, &s)| (v as f64 / s) as f32)));
    let mut w2e = w2.clone();
    for (mut col, &s) in w2e.axis_iter_mut(Axis(1)).zip(&scales) {
        col.mapv_inplace(|v| (v as f64 * s) as f32);
    }
    Ok((w1e, b1e, w2e))
}

fn weight_matrix(g: &ApplicationGraph, name: &str) -> Result<Array2<f32>> {
    let spec = g.tensor(name)?;
    let [r, c] = spec.shape[..] else {
        return Err(QuantError::Shape(format!("weight `{name}` is not 2-D")));
    };
    Array2::from_shape_vec((r, c), g.constant_f32(name)?).map_err(|e| QuantError::Shape(e.to_string()))
}

/// Pairs `(first, second)` of Linear nodes separated by exactly one ReLU
/// (fused or not) with sole-consumer edges, in topological order.
fn cle_pairs(g: &ApplicationGraph, order: &[Node]) -> Vec<(u32, u32)> {
    let sole = |t: &str| {
        let c = g.consumers(t);
        (c.len() == 1 && !g.graph_outputs.iter().any(|o| o == t)).then(|| c[0])
    };
    let mut pairs = Vec::new();
    for n in order {
        let relu_out = match n.kind {
            NodeKind::LinearRelu => Some(n.output()),
            NodeKind::Linear => sole(n.output()).filter(|r| r.kind == NodeKind::Relu).map(|r| r.output()),
            _ => None,
        };
        if let Some(next) = relu_out.and_then(sole).filter(|c| c.kind.is_linear()) {
            pairs.push((n.id, next.id));
        }
    }
    pairs
}

/// Applies cross-layer equalization to every eligible Linear–ReLU–Linear pair.
pub fn equalize_graph(graph: &ApplicationGraph) -> Result<ApplicationGraph> {
    let mut g = graph.clone();
    let order = topo_sort(&g)?;
    for (a, b) in cle_pairs(&g, &order) {
        let (na, nb) = (g.node(a).unwrap().clone(), g.node(b).unwrap().clone());
        let wa = na.weight.clone().unwrap();
        let wb = nb.weight.clone().unwrap();
        let w1 = weight_matrix(&g, &wa)?;
        let w2 = weight_matrix(&g, &wb)?;
        let b1 = na.bias.as_deref().map(|b| g.constant_f32(b).map(Array1::from)).transpose()?;
        let (w1e, b1e, w2e) = cross_layer_equalize(&w1, b1.as_ref(), &w2)?;
        g.constants.insert(wa, f32_to_bytes(w1e.as_slice().unwrap()));
        g.constants.insert(wb, f32_to_bytes(w2e.as_slice().unwrap()));
        if let (Some(name), Some(b)) = (na.bias, b1e) {
            g.constants.insert(name, f32_to_bytes(b.as_slice().unwrap()));
        }
    }
    Ok(g)
}

/// Post-training quantization of a float graph.
///
/// Emits int8 activations and weights, int32 biases at `e_in + e_w`, and a
/// Dequantize→Softmax→Quantize sandwich around each softmax so it can later be
/// folded by [`crate::graph_ir::strip_qdq`].
pub fn quantize_model(graph: &ApplicationGraph, calib: &CalibrationSet, use_cle: bool) -> Result<ApplicationGraph> {
    let diags = validate(graph);
    if !diags.is_empty() {
        let msgs: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(QuantError::Invalid(msgs.join("; ")));
    }
    if let Some(t) = graph.tensors.values().find(|t| t.dtype != DType::F32) {
        return Err(QuantError::NotFloat(format!("tensor `{}` is {}", t.name, t.dtype)));
    }
    if let Some(n) = graph.nodes.iter().find(|n| n.kind.is_qdq()) {
        return Err(QuantError::NotFloat(format!("node {} is {}", n.id, n.kind)));
    }
    if calib.size() == 0 {
        return Err(QuantError::EmptyCalibration);
    }

    let g = if use_cle { equalize_graph(graph)? } else { graph.clone() };
    let order = topo_sort(&g)?;

    // Calibration forward passes, reduced in sample order.
    let traces = parallel::map(calib.samples(), |s| float_forward_trace(&g, s));
    let mut activations: HashMap<String, Vec<f32>> = HashMap::new();
    for (index, trace) in traces.into_iter().enumerate() {
        let trace = trace.map_err(|e| match e {
            OracleError::InputLength { expected, actual, .. } => QuantError::SampleShape { index, expected, actual },
            other => other.into(),
        })?;
        for (name, v) in trace {
            activations.entry(name).or_default().extend(v);
        }
    }

    let mut exps: BTreeMap<String, i32> = BTreeMap::new();
    for name in &g.graph_inputs {
        exps.insert(name.clone(), best_pow2_exponent(&activations[name], 8));
    }
    for n in &order {
        let e = match n.kind {
            // ReLU keeps its input grid so Linear+ReLU fusion stays exact.
            NodeKind::Relu => exps[n.input()],
            NodeKind::Softmax => SOFTMAX_OUT_EXP,
            _ => best_pow2_exponent(&activations[n.output()], 8),
        };
        exps.insert(n.output().to_string(), e);
    }

    let mut q = ApplicationGraph {
        graph_inputs: g.graph_inputs.clone(),
        graph_outputs: g.graph_outputs.clone(),
        ..Default::default()
    };
    for (name, &e) in &exps {
        q.add_tensor(TensorSpec::i8(name, g.tensor(name)?.shape.clone(), e));
    }
    let mut next_id = g.next_node_id();
    for n in &order {
        let in_exps: Vec<i32> = n.inputs.iter().map(|i| exps[i]).collect();
        let out_exp = exps[n.output()];
        let mut qn = n.clone().with_exps(in_exps.clone(), out_exp);
        match n.kind {
            NodeKind::Linear | NodeKind::LinearRelu => {
                let wname = n.weight.as_deref().unwrap();
                let w = g.constant_f32(wname)?;
                let ew = best_pow2_exponent(&w, 8);
                let wspec = g.tensor(wname)?;
                q.add_tensor(TensorSpec::i8(wname, wspec.shape.clone(), ew));
                q.constants.insert(wname.to_string(), quantize_tensor(&w, ew).iter().map(|&v| v as u8).collect());
                if let Some(bname) = n.bias.as_deref() {
                    let eb = in_exps[0] + ew;
                    let b = g.constant_f32(bname)?;
                    q.add_tensor(TensorSpec::new(bname, g.tensor(bname)?.shape.clone(), DType::I32, Some(eb)));
                    q.constants.insert(bname.to_string(), i32_to_bytes(&quantize_i32(&b, eb)));
                }
                let shift = out_exp - in_exps[0] - ew;
                if !(MIN_EXP..=MAX_EXP).contains(&shift) {
                    return Err(QuantError::Shift { node: n.id, shift });
                }
                q.nodes.push(qn);
            }
            NodeKind::Softmax => {
                let (x, y) = (n.input().to_string(), n.output().to_string());
                let (xf, yf) = (format!("{x}.dq"), format!("{y}.sm"));
                let shape = g.tensor(&y)?.shape.clone();
                q.add_tensor(TensorSpec::f32(&xf, shape.clone()));
                q.add_tensor(TensorSpec::f32(&yf, shape));
                q.nodes.push(Node::dequantize(next_id, &x, &xf, 2f64.powi(in_exps[0])));
                q.nodes.push(Node::quantize(next_id + 1, &yf, &y, 2f64.powi(out_exp)));
                next_id += 2;
                qn.inputs = vec![xf];
                qn.outputs = vec![yf];
                qn.in_exps.clear();
                qn.out_exp = 0;
                q.nodes.push(qn);
            }
            _ => q.nodes.push(qn),
        }
    }
    q.nodes.sort_by_key(|n| n.id);
    Ok(q)
}
