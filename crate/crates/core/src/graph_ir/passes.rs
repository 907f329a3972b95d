use super::{ApplicationGraph, DType, GraphError, Node, NodeKind, Result};

/// Exponent `e` such that `scale == 2^e`, if the scale is an exact power of two
/// inside the representable exponent range.
pub fn pow2_exponent(scale: f64) -> Option<i32> {
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    let e = scale.log2().round();
    if !(-31.0..=31.0).contains(&e) {
        return None;
    }
    let e = e as i32;
    (2f64.powi(e) == scale).then_some(e)
}

/// Replaces each Linear whose only consumer is a ReLU by a single LinearReLU
/// node. The fused node keeps the Linear's id and the ReLU's output tensor.
///
/// On quantized graphs a pair is only fused when the ReLU does not rescale
/// (input and output exponents equal the Linear's output exponent).
pub fn fuse_linear_relu(graph: &ApplicationGraph) -> ApplicationGraph {
    let mut g = graph.clone();
    let mut linear_ids: Vec<u32> = g.nodes.iter().filter(|n| n.kind == NodeKind::Linear).map(|n| n.id).collect();
    linear_ids.sort_unstable();

    for id in linear_ids {
        let Some(li) = g.nodes.iter().position(|n| n.id == id) else { continue };
        let mid = g.nodes[li].output().to_string();
        if g.graph_outputs.contains(&mid) {
            continue;
        }
        let consumers: Vec<usize> = g
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&mid))
            .map(|(i, _)| i)
            .collect();
        let [ri] = consumers[..] else { continue };
        let relu = &g.nodes[ri];
        if relu.kind != NodeKind::Relu || relu.inputs.len() != 1 {
            continue;
        }
        let lin_out_exp = g.nodes[li].out_exp;
        let rescales = relu.in_exps.iter().any(|&e| e != lin_out_exp) || relu.out_exp != lin_out_exp;
        if rescales {
            continue;
        }

        let relu = g.nodes.remove(ri);
        let li = g.nodes.iter().position(|n| n.id == id).expect("linear node still present");
        let lin = &mut g.nodes[li];
        lin.kind = NodeKind::LinearRelu;
        lin.relu_fused = true;
        lin.outputs = relu.outputs;
        g.tensors.remove(&mid);
    }
    g
}

/// Removes Quantize/Dequantize nodes, folding their power-of-two exponents
/// into the neighbouring compute nodes and reconnecting the dataflow.
pub fn strip_qdq(graph: &ApplicationGraph) -> Result<ApplicationGraph> {
    let mut g = graph.clone();

    for n in g.nodes.iter().filter(|n| n.kind.is_qdq()) {
        qdq_exponent(n)?;
    }

    // Dequantize: consumers read the integer tensor directly.
    while let Some(di) = g.nodes.iter().position(|n| n.kind == NodeKind::Dequantize) {
        let d = g.nodes.remove(di);
        let e = qdq_exponent(&d)?;
        let (src, float) = (d.input().to_string(), d.output().to_string());
        let src_spec = g.tensor(&src)?;
        if !src_spec.dtype.is_integer() || src_spec.scale_exp != Some(e) {
            return Err(GraphError::Node {
                node: d.id,
                msg: format!("dequantize exponent {e} does not match tensor `{src}` ({:?})", src_spec.scale_exp),
            });
        }

        let mut ci = 0;
        while ci < g.nodes.len() {
            let Some(slot) = g.nodes[ci].inputs.iter().position(|i| *i == float) else {
                ci += 1;
                continue;
            };
            if g.nodes[ci].kind == NodeKind::Quantize {
                let q = g.nodes.remove(ci);
                let eq = qdq_exponent(&q)?;
                if eq != e {
                    return Err(GraphError::Node {
                        node: q.id,
                        msg: format!("back-to-back dequantize/quantize rescales {e} -> {eq}"),
                    });
                }
                let out = q.output().to_string();
                rename_uses(&mut g, &out, &src);
                g.tensors.remove(&out);
                continue;
            }
            let c = &mut g.nodes[ci];
            c.inputs[slot] = src.clone();
            if c.in_exps.len() < c.inputs.len() {
                c.in_exps.resize(c.inputs.len(), 0);
            }
            c.in_exps[slot] = e;
            ci += 1;
        }
        for o in g.graph_outputs.iter_mut().filter(|o| **o == float) {
            *o = src.clone();
        }
        g.tensors.remove(&float);
    }

    // Quantize: the producer writes the integer tensor itself.
    while let Some(qi) = g.nodes.iter().position(|n| n.kind == NodeKind::Quantize) {
        let q = g.nodes.remove(qi);
        let e = qdq_exponent(&q)?;
        let (float, dst) = (q.input().to_string(), q.output().to_string());
        let dst_spec = g.tensor(&dst)?;
        if dst_spec.dtype != DType::I8 || dst_spec.scale_exp != Some(e) {
            return Err(GraphError::Node {
                node: q.id,
                msg: format!("quantize exponent {e} does not match tensor `{dst}` ({:?})", dst_spec.scale_exp),
            });
        }
        if g.nodes.iter().any(|n| n.inputs.contains(&float)) || g.graph_outputs.contains(&float) {
            return Err(GraphError::Node {
                node: q.id,
                msg: format!("float tensor `{float}` has consumers besides the quantize node"),
            });
        }
        if let Some(gi) = g.graph_inputs.iter().position(|i| *i == float) {
            g.graph_inputs[gi] = dst.clone();
        } else {
            let Some(p) = g.nodes.iter_mut().find(|n| n.outputs.contains(&float)) else {
                return Err(GraphError::Node { node: q.id, msg: format!("`{float}` has no producer") });
            };
            for o in p.outputs.iter_mut().filter(|o| **o == float) {
                *o = dst.clone();
            }
            p.out_exp = e;
        }
        g.tensors.remove(&float);
    }

    Ok(g)
}

fn qdq_exponent(n: &Node) -> Result<i32> {
    let scale = n.scale.unwrap_or(f64::NAN);
    pow2_exponent(scale).ok_or_else(|| GraphError::Node {
        node: n.id,
        msg: format!("{} scale {scale} is not a power of two in [2^-31, 2^31]", n.kind),
    })
}

fn rename_uses(g: &mut ApplicationGraph, from: &str, to: &str) {
    for n in &mut g.nodes {
        for i in n.inputs.iter_mut().filter(|i| *i == from) {
            *i = to.to_string();
        }
    }
    for o in g.graph_outputs.iter_mut().filter(|o| *o == from) {
        *o = to.to_string();
    }
}
