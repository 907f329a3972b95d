//! Golden reference execution of float and quantized graphs.
//!
//! The integer kernels here define the arithmetic the simulated chip must
//! reproduce bit for bit: int32 accumulation, ReLU on the accumulator and a
//! sign-aware add-half-then-shift requantization to int8.

use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::graph_ir::{topo_sort, ApplicationGraph, DType, GraphError, Node, NodeKind};
use crate::quantizer::quantize_tensor;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("node {node}: shape mismatch ({msg})")]
    Shape { node: u32, msg: String },
    #[error("node {node}: exponent mismatch on `{tensor}`: node expects {expected:?}, tensor has {actual:?}")]
    Exponent { node: u32, tensor: String, expected: Option<i32>, actual: Option<i32> },
    #[error("node {node}: requantization shift {shift} outside [-31, 31]")]
    Shift { node: u32, shift: i32 },
    #[error("node {node}: expected {expected} data on `{tensor}`")]
    DType { node: u32, tensor: String, expected: &'static str },
    #[error("softmax over an empty vector")]
    EmptySoftmax,
    #[error("input has {actual} elements, graph input `{tensor}` needs {expected}")]
    InputLength { tensor: String, expected: usize, actual: usize },
    #[error("graph must have exactly one input and one output")]
    Arity,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = OracleError> = std::result::Result<T, E>;

/// Exponents feeding one matmul-style kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantKernelSpec {
    pub in_exp: i32,
    pub w_exp: i32,
    pub out_exp: i32,
    pub relu: bool,
}

impl QuantKernelSpec {
    /// Right-shift applied to the accumulator: `out_exp - (in_exp + w_exp)`.
    pub fn shift(&self) -> Option<i32> {
        let s = self.out_exp - self.in_exp - self.w_exp;
        (-31..=31).contains(&s).then_some(s)
    }
}

/// Scales an int32 accumulator by `2^-shift` into int8, rounding half away
/// from zero and saturating.
pub fn requantize(acc: i32, shift: i32) -> i8 {
    let acc = acc as i64;
    let v = if shift > 0 {
        let half = 1i64 << (shift - 1);
        if acc >= 0 {
            (acc + half) >> shift
        } else {
            -((-acc + half) >> shift)
        }
    } else {
        acc << (-shift).min(40)
    };
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

/// One output row: `Σ w·x + bias` in wrapping int32 arithmetic.
pub fn dot_i8(row: &[i8], x: &[i8], bias: i32) -> i32 {
    row.iter().zip(x).fold(bias, |acc, (&w, &v)| acc.wrapping_add(w as i32 * v as i32))
}

/// Finishes a matmul accumulator: optional ReLU then requantization.
pub fn finish_acc(acc: i32, relu: bool, shift: i32) -> i8 {
    requantize(if relu { acc.max(0) } else { acc }, shift)
}

/// Elementwise add after aligning both operands to the finer exponent.
pub fn add_i8(a: i8, b: i8, a_align: u32, b_align: u32, shift: i32) -> i8 {
    let sum = ((a as i32) << a_align).wrapping_add((b as i32) << b_align);
    requantize(sum, shift)
}

/// Alignment shifts and output shift for an Add with the given exponents.
pub fn add_params(ea: i32, eb: i32, eo: i32) -> (u32, u32, i32) {
    let emin = ea.min(eb);
    ((ea - emin) as u32, (eb - emin) as u32, eo - emin)
}

pub fn dequantize(q: &[i8], exp: i32) -> Vec<f32> {
    let scale = 2f32.powi(exp);
    q.iter().map(|&v| v as f32 * scale).collect()
}

/// Numerically stable float softmax.
pub fn softmax_f32(x: &[f32]) -> Vec<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Softmax on int8 data: dequantize, float softmax, quantize to `out_exp`.
pub fn softmax_int8(x: &[i8], in_exp: i32, out_exp: i32) -> Result<Vec<i8>> {
    if x.is_empty() {
        return Err(OracleError::EmptySoftmax);
    }
    Ok(quantize_tensor(&softmax_f32(&dequantize(x, in_exp)), out_exp))
}

/// `W·x + b` in float32 with W stored row-major `[rows, x.len()]`.
pub fn linear_f32(w: &[f32], x: &[f32], bias: Option<&[f32]>, relu: bool) -> Vec<f32> {
    let rows = w.len() / x.len().max(1);
    let w = ArrayView2::from_shape((rows, x.len()), w).expect("weight shape checked by caller");
    let mut y = w.dot(&ArrayView1::from(x));
    if let Some(b) = bias {
        y += &ArrayView1::from(b);
    }
    if relu {
        y.mapv_inplace(|v| v.max(0.0));
    }
    y.to_vec()
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

fn single_io(graph: &ApplicationGraph) -> Result<(&str, &str)> {
    match (graph.graph_inputs.as_slice(), graph.graph_outputs.as_slice()) {
        ([i], [o]) => Ok((i, o)),
        _ => Err(OracleError::Arity),
    }
}

fn linear_dims(graph: &ApplicationGraph, n: &Node, x_len: usize) -> Result<(usize, usize)> {
    let w = graph.tensor(n.weight.as_deref().unwrap_or_default())?;
    let (rows, cols) = match w.shape[..] {
        [r, c] => (r, c),
        _ => return Err(OracleError::Shape { node: n.id, msg: format!("weight shape {:?} is not 2-D", w.shape) }),
    };
    if cols != x_len {
        return Err(OracleError::Shape { node: n.id, msg: format!("weight has {cols} columns, input has {x_len}") });
    }
    if let Some(b) = n.bias.as_deref() {
        let bl = graph.tensor(b)?.numel();
        if bl != rows {
            return Err(OracleError::Shape { node: n.id, msg: format!("bias has {bl} entries, weight has {rows} rows") });
        }
    }
    Ok((rows, cols))
}

/// Float evaluation returning every activation tensor by name.
pub fn float_forward_trace(graph: &ApplicationGraph, input: &[f32]) -> Result<HashMap<String, Vec<f32>>> {
    let (in_name, _) = single_io(graph)?;
    let in_spec = graph.tensor(in_name)?;
    if in_spec.numel() != input.len() {
        return Err(OracleError::InputLength { tensor: in_name.into(), expected: in_spec.numel(), actual: input.len() });
    }
    let mut vals: HashMap<String, Vec<f32>> = HashMap::new();
    vals.insert(in_name.to_string(), input.to_vec());

    for n in topo_sort(graph)? {
        let get = |name: &str| -> Result<&Vec<f32>> {
            vals.get(name).ok_or_else(|| OracleError::DType { node: n.id, tensor: name.into(), expected: "float" })
        };
        let out = match n.kind {
            NodeKind::Linear | NodeKind::LinearRelu => {
                let x = get(n.input())?;
                linear_dims(graph, &n, x.len())?;
                let w = float_constant(graph, &n, n.weight.as_deref().unwrap_or_default())?;
                let b = n.bias.as_deref().map(|b| float_constant(graph, &n, b)).transpose()?;
                linear_f32(&w, x, b.as_deref(), n.kind == NodeKind::LinearRelu)
            }
            NodeKind::Relu => get(n.input())?.iter().map(|v| v.max(0.0)).collect(),
            NodeKind::Add => {
                let (a, b) = (get(&n.inputs[0])?, get(&n.inputs[1])?);
                if a.len() != b.len() {
                    return Err(OracleError::Shape { node: n.id, msg: format!("add of {} and {} elements", a.len(), b.len()) });
                }
                a.iter().zip(b).map(|(x, y)| x + y).collect()
            }
            NodeKind::Softmax => {
                let x = get(n.input())?;
                if x.is_empty() {
                    return Err(OracleError::EmptySoftmax);
                }
                softmax_f32(x)
            }
            NodeKind::Quantize | NodeKind::Dequantize => {
                return Err(OracleError::DType { node: n.id, tensor: n.input().into(), expected: "float-only graph" })
            }
        };
        vals.insert(n.output().to_string(), out);
    }
    Ok(vals)
}

fn float_constant(graph: &ApplicationGraph, n: &Node, name: &str) -> Result<Vec<f32>> {
    if graph.tensor(name)?.dtype != DType::F32 {
        return Err(OracleError::DType { node: n.id, tensor: name.into(), expected: "float32" });
    }
    Ok(graph.constant_f32(name)?)
}

/// Standard float32 evaluation of a float graph.
pub fn float_forward(graph: &ApplicationGraph, input: &[f32]) -> Result<Vec<f32>> {
    let (_, out) = single_io(graph)?;
    let mut vals = float_forward_trace(graph, input)?;
    Ok(vals.remove(out).expect("output computed"))
}

/// Bit-exact integer evaluation of a quantized graph. Quantize/Dequantize
/// nodes are honoured, so graphs before and after QDQ folding both run.
pub fn quant_forward(qgraph: &ApplicationGraph, input: &[i8]) -> Result<Vec<i8>> {
    let (in_name, out_name) = single_io(qgraph)?;
    let in_spec = qgraph.tensor(in_name)?;
    if in_spec.dtype != DType::I8 {
        return Err(OracleError::DType { node: u32::MAX, tensor: in_name.into(), expected: "int8" });
    }
    if in_spec.numel() != input.len() {
        return Err(OracleError::InputLength { tensor: in_name.into(), expected: in_spec.numel(), actual: input.len() });
    }
    let mut vals: HashMap<String, Value> = HashMap::new();
    vals.insert(in_name.to_string(), Value::I8(input.to_vec()));

    for n in topo_sort(qgraph)? {
        let out = eval_quant_node(qgraph, &n, &vals)?;
        let out_spec = qgraph.tensor(n.output())?;
        if let Value::I8(_) = out {
            if n.kind != NodeKind::Quantize && out_spec.scale_exp != Some(n.out_exp) {
                return Err(OracleError::Exponent {
                    node: n.id,
                    tensor: n.output().into(),
                    expected: Some(n.out_exp),
                    actual: out_spec.scale_exp,
                });
            }
        }
        vals.insert(n.output().to_string(), out);
    }
    match vals.remove(out_name) {
        Some(Value::I8(v)) => Ok(v),
        _ => Err(OracleError::DType { node: u32::MAX, tensor: out_name.into(), expected: "int8" }),
    }
}

fn int8_input<'a>(
    graph: &ApplicationGraph,
    n: &Node,
    slot: usize,
    vals: &'a HashMap<String, Value>,
) -> Result<(&'a [i8], i32)> {
    let name = &n.inputs[slot];
    let Some(Value::I8(v)) = vals.get(name) else {
        return Err(OracleError::DType { node: n.id, tensor: name.clone(), expected: "int8" });
    };
    let actual = graph.tensor(name)?.scale_exp;
    let expected = n.in_exps.get(slot).copied();
    if expected.is_none() || expected != actual {
        return Err(OracleError::Exponent { node: n.id, tensor: name.clone(), expected, actual });
    }
    Ok((v, actual.unwrap()))
}

fn eval_quant_node(graph: &ApplicationGraph, n: &Node, vals: &HashMap<String, Value>) -> Result<Value> {
    Ok(match n.kind {
        NodeKind::Linear | NodeKind::LinearRelu => {
            let (x, ex) = int8_input(graph, n, 0, vals)?;
            let (rows, cols) = linear_dims(graph, n, x.len())?;
            let wname = n.weight.as_deref().unwrap_or_default();
            let wspec = graph.tensor(wname)?;
            if wspec.dtype != DType::I8 {
                return Err(OracleError::DType { node: n.id, tensor: wname.into(), expected: "int8" });
            }
            let ew = wspec.scale_exp.unwrap_or_default();
            let w = graph.constant_i8(wname)?;
            let bias = match n.bias.as_deref() {
                Some(b) => {
                    let bspec = graph.tensor(b)?;
                    if bspec.dtype != DType::I32 || bspec.scale_exp != Some(ex + ew) {
                        return Err(OracleError::Exponent {
                            node: n.id,
                            tensor: b.into(),
                            expected: Some(ex + ew),
                            actual: bspec.scale_exp,
                        });
                    }
                    graph.constant_i32(b)?
                }
                None => vec![0; rows],
            };
            let spec = QuantKernelSpec { in_exp: ex, w_exp: ew, out_exp: n.out_exp, relu: n.kind == NodeKind::LinearRelu };
            let shift = spec.shift().ok_or(OracleError::Shift { node: n.id, shift: n.out_exp - ex - ew })?;
            Value::I8(
                w.chunks_exact(cols)
                    .zip(&bias)
                    .map(|(row, &b)| finish_acc(dot_i8(row, x, b), spec.relu, shift))
                    .collect(),
            )
        }
        NodeKind::Relu => {
            let (x, ex) = int8_input(graph, n, 0, vals)?;
            Value::I8(x.iter().map(|&v| requantize((v as i32).max(0), n.out_exp - ex)).collect())
        }
        NodeKind::Add => {
            let (a, ea) = int8_input(graph, n, 0, vals)?;
            let (b, eb) = int8_input(graph, n, 1, vals)?;
            if a.len() != b.len() {
                return Err(OracleError::Shape { node: n.id, msg: format!("add of {} and {} elements", a.len(), b.len()) });
            }
            let (al, bl, shift) = add_params(ea, eb, n.out_exp);
            if !(-31..=31).contains(&shift) {
                return Err(OracleError::Shift { node: n.id, shift });
            }
            Value::I8(a.iter().zip(b).map(|(&x, &y)| add_i8(x, y, al, bl, shift)).collect())
        }
        NodeKind::Softmax => match vals.get(n.input()) {
            Some(Value::F32(x)) => {
                if x.is_empty() {
                    return Err(OracleError::EmptySoftmax);
                }
                Value::F32(softmax_f32(x))
            }
            _ => {
                let (x, ex) = int8_input(graph, n, 0, vals)?;
                Value::I8(softmax_int8(x, ex, n.out_exp)?)
            }
        },
        NodeKind::Quantize => {
            let Some(Value::F32(x)) = vals.get(n.input()) else {
                return Err(OracleError::DType { node: n.id, tensor: n.input().into(), expected: "float" });
            };
            let e = qdq_exp(graph, n, n.output())?;
            Value::I8(quantize_tensor(x, e))
        }
        NodeKind::Dequantize => {
            let Some(Value::I8(x)) = vals.get(n.input()) else {
                return Err(OracleError::DType { node: n.id, tensor: n.input().into(), expected: "int8" });
            };
            let e = qdq_exp(graph, n, n.input())?;
            Value::F32(dequantize(x, e))
        }
    })
}

fn qdq_exp(graph: &ApplicationGraph, n: &Node, int_tensor: &str) -> Result<i32> {
    let scale = n.scale.unwrap_or(f64::NAN);
    let e = crate::graph_ir::pow2_exponent(scale).ok_or_else(|| GraphError::Node {
        node: n.id,
        msg: format!("scale {scale} is not a power of two"),
    })?;
    let actual = graph.tensor(int_tensor)?.scale_exp;
    if actual != Some(e) {
        return Err(OracleError::Exponent { node: n.id, tensor: int_tensor.into(), expected: Some(e), actual });
    }
    Ok(e)
}
