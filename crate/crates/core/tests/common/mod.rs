#![allow(dead_code)]

use neuroflow::graph_ir::{ApplicationGraph, NodeKind};
use neuroflow::pipeline::{compile, CompileOptions, Compiled};
use neuroflow::quantizer::CalibrationSet;
use neuroflow::synth::{mnist_mlp, random_inputs};

pub const TABLE2: &str = include_str!("../../../../data/table2.json");

/// Round half away from zero then saturate, computed in f64.
pub fn ref_requantize(acc: i64, shift: i32) -> i8 {
    let v = acc as f64 * 2f64.powi(-shift);
    let r = v.signum() * (v.abs() + 0.5).floor();
    r.clamp(-128.0, 127.0) as i8
}

/// Straight-line integer evaluation of a lowered chain of
/// Linear/LinearReLU/Add/Softmax nodes, written without the library kernels.
pub fn ref_quant_forward(g: &ApplicationGraph, input: &[i8]) -> Vec<i8> {
    use std::collections::HashMap;
    let mut vals: HashMap<String, Vec<i8>> = HashMap::new();
    vals.insert(g.graph_inputs[0].clone(), input.to_vec());
    let mut nodes = g.nodes.clone();
    nodes.sort_by_key(|n| n.id);
    // Repeatedly evaluate ready nodes; tiny graphs make this cheap.
    while vals.len() < g.nodes.len() + 1 {
        let before = vals.len();
        for n in &nodes {
            if vals.contains_key(&n.outputs[0]) || !n.inputs.iter().all(|i| vals.contains_key(i)) {
                continue;
            }
            let exp = |t: &str| g.tensors[t].scale_exp.unwrap();
            let x = &vals[&n.inputs[0]];
            let out: Vec<i8> = match n.kind {
                NodeKind::Linear | NodeKind::LinearRelu => {
                    let wn = n.weight.as_ref().unwrap();
                    let w: Vec<i8> = g.constants[wn].iter().map(|&b| b as i8).collect();
                    let b: Vec<i64> = match &n.bias {
                        Some(bn) => g.constants[bn]
                            .chunks_exact(4)
                            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64)
                            .collect(),
                        None => vec![0; w.len() / x.len()],
                    };
                    let shift = exp(&n.outputs[0]) - exp(&n.inputs[0]) - exp(wn);
                    w.chunks_exact(x.len())
                        .zip(&b)
                        .map(|(row, &bias)| {
                            let mut acc = bias + row.iter().zip(x).map(|(&a, &v)| a as i64 * v as i64).sum::<i64>();
                            if n.kind == NodeKind::LinearRelu {
                                acc = acc.max(0);
                            }
                            ref_requantize(acc, shift)
                        })
                        .collect()
                }
                NodeKind::Add => {
                    let y = &vals[&n.inputs[1]];
                    let (ea, eb) = (exp(&n.inputs[0]), exp(&n.inputs[1]));
                    let m = ea.min(eb);
                    x.iter()
                        .zip(y)
                        .map(|(&a, &b)| {
                            let s = ((a as i64) << (ea - m)) + ((b as i64) << (eb - m));
                            ref_requantize(s, exp(&n.outputs[0]) - m)
                        })
                        .collect()
                }
                NodeKind::Softmax => {
                    // float32 internals, as the kernel contract specifies
                    let s = 2f32.powi(exp(&n.inputs[0]));
                    let f: Vec<f32> = x.iter().map(|&v| v as f32 * s).collect();
                    let mx = f.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let e: Vec<f32> = f.iter().map(|v| (v - mx).exp()).collect();
                    let mut sum = 0f32;
                    for v in &e {
                        sum += v;
                    }
                    let eo = exp(&n.outputs[0]);
                    e.iter().map(|v| ref_requantize_f((v / sum) as f64, eo)).collect()
                }
                k => panic!("reference cannot evaluate {k}"),
            };
            vals.insert(n.outputs[0].clone(), out);
        }
        assert!(vals.len() > before, "graph has unreachable nodes");
    }
    vals.remove(&g.graph_outputs[0]).unwrap()
}

fn ref_requantize_f(v: f64, exp: i32) -> i8 {
    let q = v * 2f64.powi(-exp);
    (q.signum() * (q.abs() + 0.5).floor()).clamp(-128.0, 127.0) as i8
}

pub fn calib(n: usize, len: usize, seed: u64) -> CalibrationSet {
    CalibrationSet::new(random_inputs(n, len, seed)).unwrap()
}

pub fn compile_mnist(seed: u64, opts: &CompileOptions) -> Compiled {
    compile(&mnist_mlp(seed), Some(&calib(32, 784, seed ^ 0x5eed)), opts).unwrap()
}

/// Within `tol` (relative) of `target`.
pub fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target.abs()
}
