//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, even when all pass.

mod common;

use std::time::{Duration, Instant};

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use neuroflow::chipsim::{calibrate_timing, CalibrationTargets, TimingModel};
use neuroflow::chipsim::{load_image, ChipState};
use neuroflow::dram_image::{DramImage, HEADER_BYTES};
use neuroflow::graph_ir::{fuse_linear_relu, strip_qdq, ApplicationGraph};
use neuroflow::oracle::{float_forward, quant_forward};
use neuroflow::parallel;
use neuroflow::partitioner::PlanOptions;
use neuroflow::pipeline::{compile, CompileOptions};
use neuroflow::quantizer::{cross_layer_equalize, equalize_graph, quantize_model};
use neuroflow::synth::{mnist_mlp, random_inputs, random_int8_inputs, random_mlp, residual_mlp, MlpSpec};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn calibrated() -> TimingModel {
    let targets: CalibrationTargets = serde_json::from_str(TABLE2).unwrap();
    calibrate_timing(&targets).unwrap().model
}

fn bit_exact() -> Outcome {
    let start = Instant::now();
    let c = compile_mnist(11, &CompileOptions::default());
    let chip = load_image(c.image.bytes(), TimingModel::default()).map_err(|e| e.to_string())?;
    let inputs = random_int8_inputs(1000, 784, 12);
    let bad: Vec<usize> = parallel::map_range(inputs.len(), |i| {
        let x = &inputs[i];
        let sim = chip.run_i8(x).unwrap().output_i8();
        let want = quant_forward(&c.quantized, x).unwrap();
        (sim != want || sim != ref_quant_forward(&c.lowered, x)).then_some(i)
    })
    .into_iter()
    .flatten()
    .collect();
    let took = start.elapsed();
    check(
        bad.is_empty() && took < Duration::from_secs(120),
        format!("{}/1000 mismatches in {:.1}s", bad.len(), took.as_secs_f64()),
    )
}

fn partition_invariance() -> Outcome {
    let g = mnist_mlp(21);
    let cal = calib(32, 784, 22);
    let inputs = random_int8_inputs(100, 784, 23);
    let mut outputs = Vec::new();
    let mut workers = Vec::new();
    for tile_target in [16, 32, 64, 128] {
        let opts = CompileOptions { plan: PlanOptions { tile_target }, ..Default::default() };
        let c = compile(&g, Some(&cal), &opts).map_err(|e| e.to_string())?;
        workers.push(c.plans.iter().map(|p| p.num_workers).collect::<Vec<_>>());
        let chip = load_image(c.image.bytes(), TimingModel::default()).map_err(|e| e.to_string())?;
        outputs.push(parallel::map(&inputs, |x| chip.run_i8(x).unwrap().output));
    }
    let same = outputs.iter().all(|o| *o == outputs[0]);
    check(same, format!("workers per target {workers:?}, outputs identical: {same}"))
}

fn worker_counts() -> Outcome {
    let c = compile_mnist(31, &CompileOptions::default());
    let workers: Vec<usize> = c.plans.iter().map(|p| p.num_workers).collect();
    let fc3 = c.plans[2].padded_out;
    check(workers == [8, 4, 1, 1] && fc3 == 16, format!("workers {workers:?}, FC3 padded_out {fc3}"))
}

fn run_calibrated(enable_all_workers: bool) -> neuroflow::profiler::TimeLog {
    let c = compile_mnist(41, &CompileOptions { enable_all_workers, ..Default::default() });
    let chip: ChipState = load_image(c.image.bytes(), calibrated()).unwrap();
    chip.run(&vec![0u8; 784]).unwrap().timelog
}

fn timing_reproduction() -> Outcome {
    let log = run_calibrated(false);
    let us: Vec<f64> = log.layers.iter().map(|l| l.runtime_ns as f64 / 1e3).collect();
    let layers_ok = us.len() == 4 && us.iter().zip([323.0, 217.0, 80.0, 50.0]).all(|(&v, t)| within(v, t, 0.25));
    let total = log.total_ns() as f64 / 1e3;
    let fc1 = &log.layers[0];
    let share = fc1.dma_share() * 100.0;
    let util = fc1.utilization() * 100.0;
    let ok = layers_ok && within(total, 688.0, 0.20) && (share - 59.0).abs() <= 10.0 && (util - 9.0).abs() <= 3.0;
    check(
        ok,
        format!(
            "layers {:?} us, total {total:.1} us, FC1 weight-fetch share {share:.1}%, MLA utilization {util:.1}% \
             (calibration-consistency check)",
            us.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
        ),
    )
}

fn scheduling_overhead() -> Outcome {
    let few = run_calibrated(false);
    let all = run_calibrated(true);
    let ovh = few.mean_overhead_ns() / 1e3;
    let (s8, c8) = (few.setup_ns as f64 / 1e3, few.cleanup_ns as f64 / 1e3);
    let (sa, ca) = (all.setup_ns as f64 / 1e3, all.cleanup_ns as f64 / 1e3);
    let ok = within(ovh, 13.0, 0.25)
        && within(s8, 12.0, 0.5)
        && within(c8, 9.0, 0.5)
        && within(sa, 39.0, 0.5)
        && within(ca, 93.0, 0.5);
    check(
        ok,
        format!(
            "mean overhead {ovh:.2} us; setup/cleanup {s8:.1}/{c8:.1} us at 8 workers, {sa:.1}/{ca:.1} us at 151"
        ),
    )
}

/// Seeded mix of plain and residual MLPs with varied widths.
fn random_graph(rng: &mut ChaCha8Rng) -> ApplicationGraph {
    let seed = rng.gen();
    if rng.gen_bool(0.25) {
        return residual_mlp(rng.gen_range(4..200), rng.gen_range(4..300), rng.gen_range(2..40), seed);
    }
    let depth = rng.gen_range(1..5);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.gen_range(2..600)).collect();
    random_mlp(&MlpSpec { dims: &dims, live_outputs: None, softmax: rng.gen_bool(0.5), bias: rng.gen_bool(0.8) }, seed)
}

fn image_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut problems = Vec::new();
    for i in 0..50 {
        let g = random_graph(&mut rng);
        let len = g.tensor(&g.graph_inputs[0]).unwrap().numel();
        let c = compile(&g, Some(&calib(8, len, i)), &CompileOptions::default()).map_err(|e| e.to_string())?;
        let bytes = c.image.serialize();
        let parsed = DramImage::parse(&bytes).map_err(|e| e.to_string())?;
        if parsed != c.image || parsed.serialize() != bytes {
            problems.push(format!("graph {i}: round trip differs"));
        }
        let chain = parsed.header_chain();
        if chain.len() != parsed.global.num_layers as usize + 1 {
            problems.push(format!("graph {i}: chain visits {} headers", chain.len()));
        }
        // Each layer block runs from its header to the next one.
        for (l, w) in parsed.layers.iter().zip(chain.windows(2)) {
            let inside = |a: u32| a >= w[0] + HEADER_BYTES as u32 && a < w[1];
            if w[1] <= w[0] || !l.worker_cfg_addrs.iter().all(|&a| inside(a)) {
                problems.push(format!("graph {i}: layer {} overlaps its neighbour", l.scheduler.layer_index));
            }
        }
    }
    check(problems.is_empty(), if problems.is_empty() { "50/50 graphs".into() } else { problems.join("; ") })
}

fn cle_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (mut worst_dev, mut worst_range) = (0f64, 0f64);
    for i in 0..20 {
        let dims: Vec<usize> = (0..rng.gen_range(3..5)).map(|_| rng.gen_range(4..64)).collect();
        let g = random_mlp(&MlpSpec::new(&dims), 100 + i);
        let e = equalize_graph(&g).map_err(|e| e.to_string())?;
        for x in random_inputs(100, dims[0], 200 + i) {
            let (a, b) = (float_forward(&g, &x).unwrap(), float_forward(&e, &x).unwrap());
            let scale = a.iter().fold(0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE) as f64;
            let dev = a.iter().zip(&b).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max) / scale;
            worst_dev = worst_dev.max(dev);
        }
        // Range equality on the first pair, straight from the kernel.
        let w = |n: &str| {
            let t = g.tensor(n).unwrap();
            ndarray::Array2::from_shape_vec((t.shape[0], t.shape[1]), g.constant_f32(n).unwrap()).unwrap()
        };
        let (w1, _, w2) = cross_layer_equalize(&w("fc1.w"), None, &w("fc2.w")).unwrap();
        for (row, col) in w1.axis_iter(Axis(0)).zip(w2.axis_iter(Axis(1))) {
            let r1 = row.iter().fold(0f32, |m, v| m.max(v.abs()));
            let r2 = col.iter().fold(0f32, |m, v| m.max(v.abs()));
            worst_range = worst_range.max((r1 - r2).abs() as f64);
        }
    }
    check(
        worst_dev <= 1e-4 && worst_range <= 1e-6,
        format!("max relative deviation {worst_dev:.2e}, max range gap {worst_range:.2e}"),
    )
}

fn fusion_qdq_equivalence() -> Outcome {
    let mut fused_diff = 0;
    let mut strip_diff = 0;
    for seed in 0..10 {
        let g = mnist_mlp(70 + seed);
        let fused = fuse_linear_relu(&g);
        for x in random_inputs(10, 784, 80 + seed) {
            let (a, b) = (float_forward(&g, &x).unwrap(), float_forward(&fused, &x).unwrap());
            if a.iter().map(|v| v.to_bits()).ne(b.iter().map(|v| v.to_bits())) {
                fused_diff += 1;
            }
        }
        let q = quantize_model(&g, &calib(16, 784, 90 + seed), true).map_err(|e| e.to_string())?;
        let s = strip_qdq(&q).map_err(|e| e.to_string())?;
        for x in random_int8_inputs(10, 784, 95 + seed) {
            if quant_forward(&q, &x).unwrap() != quant_forward(&s, &x).unwrap() {
                strip_diff += 1;
            }
        }
    }
    check(
        fused_diff == 0 && strip_diff == 0,
        format!("fuse: {fused_diff}/100 differ, strip_qdq: {strip_diff}/100 differ"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("bit-exact oracle equivalence", bit_exact),
        ("partition invariance", partition_invariance),
        ("worker-count reproduction", worker_counts),
        ("timing reproduction", timing_reproduction),
        ("scheduling overhead", scheduling_overhead),
        ("DRAM image round-trip", image_round_trip),
        ("CLE function preservation", cle_preservation),
        ("fusion/QDQ equivalence", fusion_qdq_equivalence),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let res = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into()))
        });
        match res {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!("{}/{} criteria passed", 8 - failed, 8);
    if failed > 0 {
        std::process::exit(1);
    }
}
