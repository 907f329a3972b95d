mod common;

use common::*;
use neuroflow::graph_ir::{pow2_exponent, NodeKind};
use neuroflow::partitioner::{ChipDescriptor, PlanOptions};
use neuroflow::pipeline::*;
use neuroflow::synth::mnist_mlp;

#[test]
fn default_compile_reproduces_worker_table() {
    let c = compile_mnist(1, &CompileOptions::default());
    let rows: Vec<(usize, usize, usize)> = c.plans.iter().map(|p| (p.num_workers, p.tile_out, p.padded_out)).collect();
    assert_eq!(rows, [(8, 64, 512), (4, 64, 256), (1, 16, 16), (1, 16, 16)]);
    assert_eq!(c.plans[2].real_out, 16);
    assert_eq!(c.report.layers.len(), 4);
    assert_eq!(c.mapping.enabled_workers.len(), 8);
    assert!(c.lowered.nodes.iter().all(|n| !n.kind.is_qdq()));
}

#[test]
fn recompiling_the_quantized_graph_is_idempotent() {
    let c = compile_mnist(2, &CompileOptions::default());
    let again = compile(&c.quantized, None, &CompileOptions::default()).unwrap();
    assert_eq!(again.image, c.image);
    assert_eq!(again.manifest, c.manifest);
}

#[test]
fn float_model_needs_calibration() {
    let err = compile(&mnist_mlp(3), None, &CompileOptions::default()).unwrap_err();
    assert!(matches!(err, CompileError::MissingCalibration));
}

#[test]
fn invalid_graph_fails_in_validate() {
    let mut g = mnist_mlp(4);
    g.nodes[0].inputs[0] = "ghost".into();
    let err = compile(&g, Some(&calib(2, 784, 5)), &CompileOptions::default()).unwrap_err();
    assert!(err.to_string().starts_with("validate:"), "{err}");
}

#[test]
fn bad_qdq_scale_fails_in_strip_qdq() {
    let c = compile_mnist(6, &CompileOptions::default());
    let mut q = c.quantized.clone();
    let n = q.nodes.iter_mut().find(|n| n.kind == NodeKind::Quantize).unwrap();
    n.scale = Some(0.3);
    assert_eq!(pow2_exponent(0.3), None);
    let err = lower(q, &CompileOptions::default()).unwrap_err();
    assert!(err.to_string().starts_with("strip_qdq:"), "{err}");
}

#[test]
fn tiny_sram_fails_in_plan() {
    let opts = CompileOptions { chip: ChipDescriptor::default().with_sram_budget(1024), ..Default::default() };
    let err = compile(&mnist_mlp(7), Some(&calib(2, 784, 8)), &opts).unwrap_err();
    assert!(matches!(err, CompileError::Plan(_)), "{err}");
}

#[test]
fn small_chip_fails_in_map() {
    let opts = CompileOptions { chip: ChipDescriptor::with_pes(4), plan: PlanOptions { tile_target: 16 }, ..Default::default() };
    let err = compile(&mnist_mlp(9), Some(&calib(2, 784, 10)), &opts).unwrap_err();
    assert!(matches!(err, CompileError::Plan(_) | CompileError::Map(_)), "{err}");
}

#[test]
fn enabling_all_workers_grows_the_timing_area() {
    let few = compile_mnist(11, &CompileOptions::default());
    let all = compile_mnist(11, &CompileOptions { enable_all_workers: true, ..Default::default() });
    assert_eq!(all.mapping.enabled_workers.len(), 151);
    assert_eq!(all.image.global.timing_slots, 152);
    assert_eq!(all.image.global.timing_area_len as usize, (4 * 152 + 1) * 16);
    assert!(all.image.global.timing_area_len > few.image.global.timing_area_len);
}
