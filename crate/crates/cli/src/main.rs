use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use neuroflow::chipsim::{calibrate_timing, load_image, CalibrationTargets, ChipState, TimingModel};
use neuroflow::dram_image::ImageManifest;
use neuroflow::graph_ir::{bytes_to_f32, read_bundle, read_model, write_bundle, write_model, DType, TensorBundle, TensorSpec};
use neuroflow::oracle::quant_forward;
use neuroflow::parallel;
use neuroflow::partitioner::{ChipDescriptor, PlanOptions};
use neuroflow::pipeline::{compile, CompileOptions};
use neuroflow::profiler::{report, to_csv, ReportFormat};
use neuroflow::quantizer::{quantize_tensor, CalibrationSet};
use neuroflow::synth::{mnist_mlp, random_inputs, random_int8_inputs, MNIST_DIMS};

/// INT8 toolchain and simulator for the many-core inference chip.
#[derive(Parser)]
#[command(name = "neuroflow", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize, lower, partition and pack a model into a DRAM image.
    Compile(CompileArgs),
    /// Execute one input on the simulator.
    Run(RunArgs),
    /// Compare simulator and integer oracle on random inputs.
    Verify(VerifyArgs),
    /// Run with a timing model and print the per-layer report.
    Profile(ProfileArgs),
    /// Fit a timing model to a measured runtime table.
    Calibrate(CalibrateArgs),
    /// Write a random-weight MNIST-shaped MLP and a calibration bundle.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration bundle; not needed for an already-quantized model.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Image path; sidecars are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_cle: bool,
    #[arg(long, default_value_t = PlanOptions::default().tile_target)]
    tile_target: usize,
    /// Usable SRAM bytes per PE.
    #[arg(long)]
    sram_budget: Option<usize>,
    #[arg(long)]
    num_pes: Option<usize>,
    /// Switch on every PE in the worker table.
    #[arg(long)]
    enable_all_workers: bool,
}

#[derive(Args)]
struct InputArgs {
    /// Headerless graph input: int8, or float32 LE with --float.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Treat the input file as float32 and quantize it with the graph-input exponent.
    #[arg(long)]
    float: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    output: PathBuf,
    /// Timing CSV destination.
    #[arg(long)]
    timing: Option<PathBuf>,
    #[arg(long)]
    timing_model: Option<PathBuf>,
    /// Overlap weight-chunk DMA with MLA work.
    #[arg(long)]
    overlap: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    image: PathBuf,
    /// Quantized model written by `compile` (`<image>.qmodel.json`).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    timing_model: Option<PathBuf>,
    #[arg(long)]
    overlap: bool,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    calib_samples: usize,
}

fn sidecar(image: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", image.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Every float32 tensor of the bundle, sorted by name; 2-D tensors give one
/// sample per row.
fn calibration_set(path: &Path) -> Result<CalibrationSet> {
    let bundle = read_bundle(path).with_context(|| format!("reading calibration bundle {}", path.display()))?;
    let mut samples = Vec::new();
    for (name, spec) in &bundle.tensors {
        if spec.dtype != DType::F32 {
            continue;
        }
        let values = bytes_to_f32(&bundle.data[name]);
        let row = spec.shape.last().copied().unwrap_or(values.len()).max(1);
        samples.extend(values.chunks(row).map(<[f32]>::to_vec));
    }
    log::info!("{} calibration samples from {}", samples.len(), path.display());
    Ok(CalibrationSet::new(samples)?)
}

fn cmd_compile(a: CompileArgs) -> Result<()> {
    // Read every input before any pass runs.
    let graph = read_model(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let calib = a.calib.as_deref().map(calibration_set).transpose()?;
    let mut chip = a.num_pes.map(ChipDescriptor::with_pes).unwrap_or_default();
    if let Some(b) = a.sram_budget {
        chip = chip.with_sram_budget(b);
    }
    let opts = CompileOptions {
        use_cle: !a.no_cle,
        plan: PlanOptions { tile_target: a.tile_target },
        chip,
        enable_all_workers: a.enable_all_workers,
    };
    let c = compile(&graph, calib.as_ref(), &opts)?;
    fs::write(&a.out, c.image.bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    write_json(&sidecar(&a.out, "manifest.json"), &c.manifest)?;
    write_json(&sidecar(&a.out, "plan.json"), &c.report)?;
    write_model(&c.quantized, &sidecar(&a.out, "qmodel.json"), serde_json::json!({ "source": a.model }))?;

    println!("{:<12} {:>7} {:>8} {:>10} {:>6} {:>10}", "layer", "workers", "tile_out", "padded_out", "chunks", "sram");
    for (l, r) in c.manifest.layers.iter().zip(&c.report.layers) {
        println!(
            "{:<12} {:>7} {:>8} {:>10} {:>6} {:>10}",
            l.name, r.workers, r.tile_out, r.padded_out, r.chunks, r.footprint
        );
    }
    println!("wrote {} ({} bytes)", a.out.display(), c.image.total_len());
    Ok(())
}

fn timing_model(path: Option<&Path>, overlap: bool) -> Result<TimingModel> {
    let mut model = match path {
        Some(p) => read_json(p)?,
        None => TimingModel::default(),
    };
    model.overlap |= overlap;
    Ok(model)
}

fn load(image: &Path, timing: TimingModel) -> Result<(ChipState, ImageManifest)> {
    let bytes = fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let chip = load_image(&bytes, timing)?;
    let manifest: ImageManifest = read_json(&sidecar(image, "manifest.json"))?;
    Ok((chip, manifest))
}

fn graph_input(a: &InputArgs, chip: &ChipState, manifest: &ImageManifest) -> Result<Vec<u8>> {
    let n = chip.input_len();
    let Some(path) = &a.input else {
        return Ok(vec![0; n]);
    };
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if !a.float {
        ensure!(raw.len() == n, "input {} has {} bytes, the image expects {n}", path.display(), raw.len());
        return Ok(raw);
    }
    ensure!(raw.len() == 4 * n, "float input {} has {} bytes, the image expects {}", path.display(), raw.len(), 4 * n);
    Ok(quantize_tensor(&bytes_to_f32(&raw), manifest.input.exp).iter().map(|&v| v as u8).collect())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let (chip, manifest) = load(&a.image, timing_model(a.timing_model.as_deref(), a.overlap)?)?;
    let out = chip.run(&graph_input(&a.input, &chip, &manifest)?)?;
    fs::write(&a.output, &out.output).with_context(|| format!("writing {}", a.output.display()))?;
    if let Some(t) = &a.timing {
        fs::write(t, to_csv(&out.timelog)).with_context(|| format!("writing {}", t.display()))?;
    }
    println!("{} output bytes, {:.3} us", out.output.len(), out.timelog.total_ns() as f64 / 1e3);
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let (chip, _) = load(&a.image, TimingModel::default())?;
    let model = read_model(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    if !model.is_quantized() {
        bail!("{} is a float model; pass the quantized model written by compile", a.model.display());
    }
    let inputs = random_int8_inputs(a.n, chip.input_len(), a.seed);
    let results = parallel::map(&inputs, |x| -> Result<Option<usize>> {
        let sim = chip.run_i8(x)?.output_i8();
        let want = quant_forward(&model, x)?;
        Ok(sim.iter().zip(&want).position(|(s, w)| s != w).or((sim.len() != want.len()).then_some(sim.len().min(want.len()))))
    });
    let mut first = None;
    let mut mismatches = 0;
    for (i, r) in results.into_iter().enumerate() {
        if let Some(elem) = r? {
            mismatches += 1;
            first.get_or_insert((i, elem));
        }
    }
    println!("{mismatches}/{} mismatches", a.n);
    if let Some((i, elem)) = first {
        eprintln!("first divergence: input {i}, output element {elem}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let (chip, manifest) = load(&a.image, timing_model(a.timing_model.as_deref(), a.overlap)?)?;
    let out = chip.run(&graph_input(&a.input, &chip, &manifest)?)?;
    print!("{}", report(&out.timelog, a.format));
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let targets: CalibrationTargets = read_json(&a.targets)?;
    let cal = calibrate_timing(&targets)?;
    write_json(&a.out, &cal.model)?;
    for r in &cal.residuals {
        println!("{:<12} target {:>10.3} us  model {:>10.3} us  ({:+.1}%)", r.name, r.target_ns / 1e3, r.predicted_ns / 1e3, 100.0 * r.relative());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let model = a.out_dir.join("mlp.json");
    write_model(&mnist_mlp(a.seed), &model, serde_json::json!({ "seed": a.seed }))?;
    let samples = random_inputs(a.calib_samples, MNIST_DIMS[0], a.seed.wrapping_add(1));
    let mut bundle = TensorBundle::default();
    bundle.insert(
        TensorSpec::f32("samples", vec![samples.len(), MNIST_DIMS[0]]),
        neuroflow::graph_ir::f32_to_bytes(&samples.concat()),
    );
    let calib = a.out_dir.join("calib.json");
    write_bundle(&bundle, &calib)?;
    println!("wrote {} and {}", model.display(), calib.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("NEUROFLOW_LOG", "warn")).init();
    let res = match Cli::parse().cmd {
        Cmd::Compile(a) => cmd_compile(a).map(|_| ExitCode::SUCCESS),
        Cmd::Run(a) => cmd_run(a).map(|_| ExitCode::SUCCESS),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Profile(a) => cmd_profile(a).map(|_| ExitCode::SUCCESS),
        Cmd::Calibrate(a) => cmd_calibrate(a).map(|_| ExitCode::SUCCESS),
        Cmd::Synth(a) => cmd_synth(a).map(|_| ExitCode::SUCCESS),
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
