mod common;

use common::*;
use neuroflow::chipsim::*;
use neuroflow::dram_image::{build_image, DramImage, GLOBAL_FIXED_WORDS};
use neuroflow::graph_ir::{ApplicationGraph, TensorSpec};
use neuroflow::oracle::quant_forward;
use neuroflow::partitioner::{map_model, ChipDescriptor, PlanOptions};
use neuroflow::pipeline::{compile, CompileOptions};
use neuroflow::synth::{random_int8_inputs, residual_mlp};

fn mnist_chip(timing: TimingModel) -> (neuroflow::pipeline::Compiled, ChipState) {
    let c = compile_mnist(5, &CompileOptions::default());
    let chip = load_image(c.image.bytes(), timing).unwrap();
    (c, chip)
}

#[test]
fn loads_with_all_pes_asleep() {
    let (_, chip) = mnist_chip(TimingModel::default());
    assert_eq!(chip.num_pes(), 152);
    assert_eq!(chip.scheduler_pe().to_string(), "(0,0)/0");
    assert_eq!(chip.enabled_workers(), 8);
    assert!(chip.pe_modes().iter().all(|&m| m == PeMode::Sleep));
}

#[test]
fn output_matches_both_oracles() {
    let (c, chip) = mnist_chip(TimingModel::default());
    for x in random_int8_inputs(20, 784, 6) {
        let sim = chip.run_i8(&x).unwrap().output_i8();
        assert_eq!(sim, quant_forward(&c.quantized, &x).unwrap());
        assert_eq!(sim, ref_quant_forward(&c.lowered, &x));
    }
}

#[test]
fn residual_network_runs_bit_exact() {
    let g = residual_mlp(96, 40, 12, 7);
    let c = compile(&g, Some(&calib(16, 40, 8)), &CompileOptions::default()).unwrap();
    let chip = load_image(c.image.bytes(), TimingModel::default()).unwrap();
    for x in random_int8_inputs(20, 40, 9) {
        let sim = chip.run_i8(&x).unwrap().output_i8();
        assert_eq!(sim, ref_quant_forward(&c.lowered, &x));
        assert_eq!(sim, quant_forward(&c.quantized, &x).unwrap());
    }
    let add = c.image.layers.iter().find(|l| l.io.num_inputs == 2).expect("add layer");
    assert_eq!(add.header.kind().unwrap(), neuroflow::dram_image::LayerType::Add);
}

#[test]
fn runs_are_deterministic() {
    let (_, chip) = mnist_chip(TimingModel::default());
    let x = random_int8_inputs(1, 784, 10).remove(0);
    let (a, b) = (chip.run_i8(&x).unwrap(), chip.run_i8(&x).unwrap());
    assert_eq!(a, b);
    assert!(!a.trace.is_empty());
}

#[test]
fn tiling_does_not_change_outputs() {
    let g = neuroflow::synth::mnist_mlp(12);
    let cal = calib(16, 784, 13);
    let inputs = random_int8_inputs(10, 784, 14);
    let outs: Vec<Vec<Vec<u8>>> = [16, 128]
        .iter()
        .map(|&tile_target| {
            let opts = CompileOptions { plan: PlanOptions { tile_target }, ..Default::default() };
            let c = compile(&g, Some(&cal), &opts).unwrap();
            let chip = load_image(c.image.bytes(), TimingModel::default()).unwrap();
            inputs.iter().map(|x| chip.run_i8(x).unwrap().output).collect()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn disabled_worker_deadlocks() {
    let (c, _) = mnist_chip(TimingModel::default());
    let mut bytes = c.image.serialize();
    // Worker-table word of PE 1, the first worker of every layer.
    let at = 4 * (GLOBAL_FIXED_WORDS + 1);
    let w = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) & !(1 << 31);
    bytes[at..at + 4].copy_from_slice(&w.to_le_bytes());
    let chip = load_image(&bytes, TimingModel::default()).unwrap();
    match chip.run(&[0; 784]) {
        Err(SimError::Deadlock { layer, .. }) => assert_eq!(layer, 0),
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn empty_model_passes_input_through() {
    let mut g = ApplicationGraph::default();
    g.add_tensor(TensorSpec::i8("x", vec![8], -7));
    g.graph_inputs.push("x".into());
    g.graph_outputs.push("x".into());
    let chip_desc = ChipDescriptor::default();
    let built = build_image(&g, &[], &[], &map_model(&[], &chip_desc).unwrap(), &chip_desc).unwrap();
    let chip = load_image(built.image.bytes(), TimingModel::default()).unwrap();
    let out = chip.run(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
    assert_eq!(out.output, [1, 2, 3, 4, 5, 6, 7, 8]);
    assert!(out.timelog.layers.is_empty());
}

#[test]
fn wrong_input_length_is_rejected() {
    let (_, chip) = mnist_chip(TimingModel::default());
    assert!(matches!(chip.run(&[0; 100]), Err(SimError::InputLength { expected: 784, actual: 100 })));
}

#[test]
fn bad_timing_model_is_rejected() {
    let (c, _) = mnist_chip(TimingModel::default());
    let t = TimingModel { dram_bytes_per_ns: 0.0, ..Default::default() };
    assert!(load_image(c.image.bytes(), t).is_err());
}

#[test]
fn layer_times_follow_the_phase_sums() {
    let (_, chip) = mnist_chip(TimingModel::default());
    let log = chip.run(&[0; 784]).unwrap().timelog;
    // Default model: dma(n) = 1000 + 4n, header 9000, trigger 500,
    // noc 200, irq 300, store 1000, fixed 20000, scalar 50, exp 400, mla 1.5/ns.
    // FC3: cfg 80 B, input 256, prepare 20000+256*50, bias 64 B, one 4096 B
    // chunk, 4096 MACs, 16 requant ops, 16 B out.
    let fc3_busy = 1320 + 2024 + 32800 + 1256 + 17384 + 2731 + 800 + 1064;
    assert_eq!(log.layers[2].runtime_ns, 9000 + 500 + 1000 + fc3_busy + 1000);
    // Softmax: cfg 64 B, 16 B in, prepare 20000, 16 x (400 + 3*50), 16 B out.
    let sm_busy = 1256 + 1064 + 20000 + 8800 + 1064;
    assert_eq!(log.layers[3].runtime_ns, 9000 + 500 + 1000 + sm_busy + 1000);
    // Setup: irq + dma(672) + 6000 + 8*200. Cleanup: dma(32) + 2000 + 8*300 + dma(592).
    assert_eq!(log.setup_ns, 300 + 3688 + 7600);
    assert_eq!(log.cleanup_ns, 1128 + 4400 + 3368);
}

#[test]
fn slower_memory_never_speeds_up_a_run() {
    let (c, chip) = mnist_chip(TimingModel::default());
    let fast = chip.run(&[0; 784]).unwrap().timelog;
    let slow_model = TimingModel { dram_bytes_per_ns: 0.1, ..Default::default() };
    let slow = load_image(c.image.bytes(), slow_model).unwrap().run(&[0; 784]).unwrap().timelog;
    for (f, s) in fast.layers.iter().zip(&slow.layers) {
        assert!(s.runtime_ns >= f.runtime_ns);
    }
    assert!(slow.total_ns() > fast.total_ns());
}

#[test]
fn overlapped_weight_stream_is_faster_with_same_output() {
    let (c, serial) = mnist_chip(TimingModel::default());
    let overlap = load_image(c.image.bytes(), TimingModel { overlap: true, ..Default::default() }).unwrap();
    let x = random_int8_inputs(1, 784, 15).remove(0);
    let (a, b) = (serial.run_i8(&x).unwrap(), overlap.run_i8(&x).unwrap());
    assert_eq!(a.output, b.output);
    assert!(b.timelog.layers[0].runtime_ns < a.timelog.layers[0].runtime_ns);
}

#[test]
fn timing_area_is_filled_after_a_run() {
    let (c, chip) = mnist_chip(TimingModel::default());
    let out = chip.run(&[0; 784]).unwrap();
    let image = DramImage::parse(&out.dram).unwrap();
    assert_eq!(image.global, c.image.global);
    let log = neuroflow::profiler::collect(&out.dram).unwrap();
    assert_eq!(log, out.timelog);
}

fn table2() -> CalibrationTargets {
    serde_json::from_str(TABLE2).unwrap()
}

#[test]
fn calibration_recovers_rates_from_fc1() {
    let model = calibrate_timing(&table2()).unwrap().model;
    // A 64-row FC1 tile streams 64 x 784 = 50176 weight bytes in 192 us
    // and performs as many MACs in 29 us.
    assert!((model.dram_bytes_per_ns - 50176.0 / 192_000.0).abs() < 1e-9);
    assert!((model.mla_macs_per_ns - 50176.0 / 29_000.0).abs() < 1e-9);
    assert!((model.dram_bytes_per_ns - 0.2613).abs() < 1e-4);
    assert!((model.mla_macs_per_ns - 1.7302).abs() < 1e-4);
}

#[test]
fn calibration_hits_both_overhead_points() {
    let cal = calibrate_timing(&table2()).unwrap();
    let points: Vec<_> =
        cal.residuals.iter().filter(|r| r.name.starts_with("setup") || r.name.starts_with("cleanup")).collect();
    assert_eq!(points.len(), 4);
    for r in points {
        assert!(r.relative().abs() < 1e-3, "{}: {}", r.name, r.relative());
    }
}

#[test]
fn zero_targets_are_infeasible() {
    let mut t = table2();
    for l in &mut t.layers {
        l.runtime_us = 0.0;
    }
    assert!(calibrate_timing(&t).is_err());
    let mut t = table2();
    t.layers.clear();
    assert!(calibrate_timing(&t).is_err());
}

#[test]
fn odd_row_length_chunks_run_bit_exact() {
    // 16 rows of 2971 bytes overflow half the budget, so the slice splits
    // into 8-row chunks whose lengths are not a multiple of 16.
    let g = neuroflow::synth::random_mlp(&neuroflow::synth::MlpSpec::new(&[2971, 16]), 30);
    let c = compile(&g, Some(&calib(4, 2971, 31)), &CompileOptions::default()).unwrap();
    let chunks = &c.image.layers[0].workers[0].chunks;
    assert_eq!(chunks.len(), 2);
    assert!(chunks.iter().all(|ch| ch.len == 8 * 2971 && ch.addr % 16 == 0));
    let chip = load_image(c.image.bytes(), TimingModel::default()).unwrap();
    for x in random_int8_inputs(5, 2971, 32) {
        assert_eq!(chip.run_i8(&x).unwrap().output_i8(), ref_quant_forward(&c.lowered, &x));
    }
}
