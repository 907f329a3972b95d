//! Timing parameters, per-worker phase costs and calibration against a
//! measured per-layer runtime table.
//!
//! The same phase arithmetic drives the event engine and the closed-form
//! predictions used by [`calibrate_timing`], so a calibrated model replays
//! its targets exactly up to the least-squares residuals.

use serde::{Deserialize, Serialize};

use crate::dram_image::{align_up, GlobalConfig, LayerType, WorkerConfigBlock, HEADER_BYTES, TIMING_RECORD_BYTES};
use crate::graph_ir::{Node, NodeKind};
use crate::partitioner::{plan_layer, ChipDescriptor, LayerShape, PlanOptions, TilePlan};

#[derive(Debug, thiserror::Error)]
pub enum TimingError {
    #[error("timing parameter `{0}` must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("calibration targets are infeasible: {0}")]
    Infeasible(String),
    #[error("calibration targets are incomplete: {0}")]
    Incomplete(String),
}

pub type Result<T, E = TimingError> = std::result::Result<T, E>;

/// Simulated-time cost model, all durations in nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub dram_dma_setup_ns: f64,
    /// Bandwidth of one DMA stream; concurrent streams do not contend.
    pub dram_bytes_per_ns: f64,
    pub noc_msg_ns: f64,
    pub irq_dispatch_ns: f64,
    pub mla_macs_per_ns: f64,
    pub scalar_op_ns: f64,
    pub exp_eval_ns: f64,
    pub scheduler_header_fetch_ns: f64,
    pub scheduler_per_worker_trigger_ns: f64,
    pub timing_store_ns: f64,
    /// Per-activation fixed cost on a worker (wake-up, config decode, MLA setup).
    pub worker_fixed_ns: f64,
    pub setup_base_ns: f64,
    pub setup_per_worker_ns: f64,
    pub cleanup_base_ns: f64,
    pub cleanup_per_worker_ns: f64,
    /// Overlap the DMA of weight chunk k+1 with the MLA pass over chunk k.
    #[serde(default)]
    pub overlap: bool,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            dram_dma_setup_ns: 1000.0,
            dram_bytes_per_ns: 0.25,
            noc_msg_ns: 200.0,
            irq_dispatch_ns: 300.0,
            mla_macs_per_ns: 1.5,
            scalar_op_ns: 50.0,
            exp_eval_ns: 400.0,
            scheduler_header_fetch_ns: 9000.0,
            scheduler_per_worker_trigger_ns: 500.0,
            timing_store_ns: 1000.0,
            worker_fixed_ns: 20_000.0,
            setup_base_ns: 6000.0,
            setup_per_worker_ns: 200.0,
            cleanup_base_ns: 2000.0,
            cleanup_per_worker_ns: 300.0,
            overlap: false,
        }
    }
}

fn ns(x: f64) -> u64 {
    x.round().max(0.0) as u64
}

impl TimingModel {
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("dram_dma_setup_ns", self.dram_dma_setup_ns),
            ("dram_bytes_per_ns", self.dram_bytes_per_ns),
            ("noc_msg_ns", self.noc_msg_ns),
            ("irq_dispatch_ns", self.irq_dispatch_ns),
            ("mla_macs_per_ns", self.mla_macs_per_ns),
            ("scalar_op_ns", self.scalar_op_ns),
            ("exp_eval_ns", self.exp_eval_ns),
            ("scheduler_header_fetch_ns", self.scheduler_header_fetch_ns),
            ("scheduler_per_worker_trigger_ns", self.scheduler_per_worker_trigger_ns),
            ("timing_store_ns", self.timing_store_ns),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TimingError::NonPositive(name, v));
            }
        }
        let non_negative = [
            ("worker_fixed_ns", self.worker_fixed_ns),
            ("setup_base_ns", self.setup_base_ns),
            ("setup_per_worker_ns", self.setup_per_worker_ns),
            ("cleanup_base_ns", self.cleanup_base_ns),
            ("cleanup_per_worker_ns", self.cleanup_per_worker_ns),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TimingError::NonPositive(name, v));
            }
        }
        Ok(())
    }

    pub fn dma_ns(&self, bytes: usize) -> u64 {
        ns(self.dram_dma_setup_ns + bytes as f64 / self.dram_bytes_per_ns)
    }

    pub fn mla_ns(&self, macs: usize) -> u64 {
        ns(macs as f64 / self.mla_macs_per_ns)
    }

    pub fn scalar_ns(&self, ops: usize) -> u64 {
        ns(ops as f64 * self.scalar_op_ns)
    }

    pub fn prepare_ns(&self, staged: usize) -> u64 {
        ns(self.worker_fixed_ns + staged as f64 * self.scalar_op_ns)
    }

    pub fn softmax_ns(&self, n: usize) -> u64 {
        ns(n as f64 * (self.exp_eval_ns + 3.0 * self.scalar_op_ns))
    }

    pub fn phase_ns(&self, phase: &Phase) -> u64 {
        match *phase {
            Phase::Config { bytes } | Phase::Input { bytes } | Phase::Bias { bytes } | Phase::Output { bytes } => {
                self.dma_ns(bytes)
            }
            Phase::Chunk { bytes, .. } => self.dma_ns(bytes),
            Phase::Prepare { staged } => self.prepare_ns(staged),
            Phase::Mla { macs, .. } => self.mla_ns(macs),
            Phase::Requant { ops } | Phase::Elementwise { ops } => self.scalar_ns(ops),
            Phase::Softmax { n } => self.softmax_ns(n),
        }
    }

    pub fn header_ns(&self) -> u64 {
        ns(self.scheduler_header_fetch_ns)
    }

    pub fn trigger_ns(&self) -> u64 {
        ns(self.scheduler_per_worker_trigger_ns)
    }

    pub fn noc_ns(&self) -> u64 {
        ns(self.noc_msg_ns)
    }

    pub fn irq_ns(&self) -> u64 {
        ns(self.irq_dispatch_ns)
    }

    pub fn store_ns(&self) -> u64 {
        ns(self.timing_store_ns)
    }

    pub fn setup_work_ns(&self, enabled: usize) -> u64 {
        ns(self.setup_base_ns + enabled as f64 * self.setup_per_worker_ns)
    }

    pub fn cleanup_work_ns(&self, enabled: usize) -> u64 {
        ns(self.cleanup_base_ns + enabled as f64 * self.cleanup_per_worker_ns)
    }

    /// Setup as seen by the scheduler: start IRQ, global config fetch, then
    /// per-worker address configuration.
    pub fn setup_ns(&self, num_pes: usize, enabled: usize) -> u64 {
        self.irq_ns() + self.dma_ns(GlobalConfig::byte_len(num_pes)) + self.setup_work_ns(enabled)
    }

    /// Finish header fetch, worker shutdown and the timing-region flush.
    pub fn cleanup_ns(&self, enabled: usize, timing_bytes: usize) -> u64 {
        self.dma_ns(HEADER_BYTES) + self.cleanup_work_ns(enabled) + self.dma_ns(timing_bytes)
    }

    /// Wall time a layer spends outside the slowest worker, assuming the
    /// last-triggered worker is the slowest.
    pub fn layer_overhead_ns(&self, workers: usize) -> u64 {
        self.header_ns() + workers as u64 * self.trigger_ns() + 2 * (self.noc_ns() + self.irq_ns()) + self.store_ns()
    }

    /// Busy time of one worker: (total, dma, compute).
    pub fn worker_busy_ns(&self, work: &WorkerWork) -> (u64, u64, u64) {
        let phases = work.phases();
        let mut dma = 0;
        let mut compute = 0;
        for p in &phases {
            let t = self.phase_ns(p);
            if p.is_dma() {
                dma += t;
            }
            if p.is_compute() {
                compute += t;
            }
        }
        let serial: u64 = phases.iter().map(|p| self.phase_ns(p)).sum();
        if !self.overlap || work.chunks.len() < 2 {
            return (serial, dma, compute);
        }
        // Pipelined weight stream: dma0, then max(compute k, dma k+1), then the last compute.
        let d: Vec<u64> = work.chunks.iter().map(|c| self.dma_ns(c.0)).collect();
        let m: Vec<u64> = work.chunks.iter().map(|c| self.mla_ns(c.1)).collect();
        let serial_stream: u64 = d.iter().sum::<u64>() + m.iter().sum::<u64>();
        let mut piped = d[0];
        for k in 0..d.len() - 1 {
            piped += m[k].max(d[k + 1]);
        }
        piped += m[d.len() - 1];
        (serial - serial_stream + piped, dma, compute)
    }

    /// Closed-form wall time of a layer whose workers run `works` in tile order.
    pub fn predict_layer_ns(&self, works: &[WorkerWork]) -> u64 {
        let tail = 2 * (self.noc_ns() + self.irq_ns());
        let last = works
            .iter()
            .enumerate()
            .map(|(k, w)| (k as u64 + 1) * self.trigger_ns() + tail + self.worker_busy_ns(w).0)
            .max()
            .unwrap_or(0);
        let triggers = works.len() as u64 * self.trigger_ns();
        self.header_ns() + last.max(triggers) + self.store_ns()
    }
}

/// One step of a worker's activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Config { bytes: usize },
    Input { bytes: usize },
    Prepare { staged: usize },
    Bias { bytes: usize },
    Chunk { index: usize, bytes: usize },
    Mla { index: usize, macs: usize },
    Requant { ops: usize },
    Elementwise { ops: usize },
    Softmax { n: usize },
    Output { bytes: usize },
}

impl Phase {
    pub fn is_dma(&self) -> bool {
        matches!(self, Phase::Config { .. } | Phase::Input { .. } | Phase::Bias { .. } | Phase::Chunk { .. } | Phase::Output { .. })
    }

    /// Accelerator or arithmetic work counted as compute time.
    pub fn is_compute(&self) -> bool {
        matches!(self, Phase::Mla { .. } | Phase::Elementwise { .. } | Phase::Softmax { .. })
    }
}

/// Shape of the work one worker performs for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerWork {
    pub kind: LayerType,
    pub cfg_bytes: usize,
    pub in_len: usize,
    pub tile_out: usize,
    pub valid_out: usize,
    pub bias: bool,
    /// (bytes, MACs) per weight chunk.
    pub chunks: Vec<(usize, usize)>,
}

impl WorkerWork {
    pub fn from_block(kind: LayerType, block: &WorkerConfigBlock) -> Self {
        let in_len = block.in_len as usize;
        Self {
            kind,
            cfg_bytes: WorkerConfigBlock::byte_len(block.chunks.len()),
            in_len,
            tile_out: block.tile_out as usize,
            valid_out: block.valid_out as usize,
            bias: block.bias_addr != 0,
            chunks: block.chunks.iter().map(|c| (c.len as usize, c.len as usize)).collect(),
        }
    }

    /// Work of tile `k` of a planned layer.
    pub fn from_plan(plan: &TilePlan, bias: bool, k: usize) -> Self {
        let kind = match plan.kind {
            NodeKind::LinearRelu => LayerType::LinearRelu,
            NodeKind::Add => LayerType::Add,
            NodeKind::Softmax => LayerType::Softmax,
            _ => LayerType::Linear,
        };
        Self {
            kind,
            cfg_bytes: WorkerConfigBlock::byte_len(plan.weight_chunks.len()),
            in_len: plan.in_len,
            tile_out: plan.tile_out,
            valid_out: plan.real_out.saturating_sub(k * plan.tile_out).min(plan.tile_out),
            bias: bias && kind.is_linear(),
            chunks: plan.weight_chunks.iter().map(|c| (c.len, c.len)).collect(),
        }
    }

    /// Serial phase list; the engine walks it in order (overlap reorders only
    /// the chunk/MLA pairs).
    pub fn phases(&self) -> Vec<Phase> {
        let mut p = vec![Phase::Config { bytes: self.cfg_bytes }, Phase::Input { bytes: self.in_len }];
        match self.kind {
            LayerType::Linear | LayerType::LinearRelu => {
                p.push(Phase::Prepare { staged: self.in_len });
                if self.bias {
                    p.push(Phase::Bias { bytes: 4 * self.tile_out });
                }
                for (index, &(bytes, macs)) in self.chunks.iter().enumerate() {
                    p.push(Phase::Chunk { index, bytes });
                    p.push(Phase::Mla { index, macs });
                }
                p.push(Phase::Requant { ops: self.tile_out });
            }
            LayerType::Add => {
                p.push(Phase::Input { bytes: self.in_len });
                p.push(Phase::Prepare { staged: 0 });
                p.push(Phase::Elementwise { ops: self.valid_out });
            }
            LayerType::Softmax => {
                p.push(Phase::Prepare { staged: 0 });
                p.push(Phase::Softmax { n: self.valid_out });
            }
            LayerType::Finish => return Vec::new(),
        }
        p.push(Phase::Output { bytes: self.tile_out });
        p
    }
}

/// One row of a measured runtime table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTarget {
    pub name: String,
    pub kind: NodeKind,
    pub runtime_us: f64,
    pub input: usize,
    pub output: usize,
    pub workers: usize,
    /// Mean per-worker weight fetch time, if measured.
    #[serde(default)]
    pub weight_fetch_us: Option<f64>,
    /// Mean per-worker MLA time, if measured.
    #[serde(default)]
    pub mla_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadPoint {
    pub workers: usize,
    pub setup_us: f64,
    pub cleanup_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub layers: Vec<LayerTarget>,
    pub setup_us: f64,
    pub cleanup_us: f64,
    /// Mean scheduler overhead per layer.
    pub scheduler_overhead_us: f64,
    /// Setup/cleanup measured with every worker enabled.
    #[serde(default)]
    pub all_workers: Option<OverheadPoint>,
    #[serde(default = "default_true")]
    pub linear_bias: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub name: String,
    pub target_ns: f64,
    pub predicted_ns: f64,
}

impl Residual {
    pub fn relative(&self) -> f64 {
        (self.predicted_ns - self.target_ns) / self.target_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub model: TimingModel,
    pub residuals: Vec<Residual>,
}

struct Row<'a> {
    target: &'a LayerTarget,
    plan: TilePlan,
}

impl Row<'_> {
    fn works(&self, bias: bool) -> Vec<WorkerWork> {
        (0..self.plan.num_workers).map(|k| WorkerWork::from_plan(&self.plan, bias, k)).collect()
    }
}

fn timing_bytes(layers: usize, enabled: usize) -> usize {
    align_up((layers * (1 + enabled) + 1) * TIMING_RECORD_BYTES)
}

/// Fits a [`TimingModel`] to a runtime table.
///
/// Bandwidth and MLA rate come from the per-worker weight-fetch and MLA
/// identities of the row that reports them; the scheduler header cost from
/// the mean per-layer overhead; worker fixed cost and scalar rate from a
/// least-squares fit over the Linear rows; the EXP cost from the Softmax row;
/// setup and cleanup from the one or two enabled-worker points. NoC, IRQ,
/// trigger, timing-store and DMA-setup costs keep their defaults.
pub fn calibrate_timing(targets: &CalibrationTargets) -> Result<Calibration> {
    let chip = ChipDescriptor::default();
    let opts = PlanOptions::default();
    if targets.layers.is_empty() {
        return Err(TimingError::Incomplete("no layer rows".into()));
    }
    let all_times = targets
        .layers
        .iter()
        .map(|l| l.runtime_us)
        .chain([targets.setup_us, targets.cleanup_us, targets.scheduler_overhead_us]);
    for t in all_times {
        if !(t.is_finite() && t > 0.0) {
            return Err(TimingError::Infeasible(format!("every target time must be positive, got {t}")));
        }
    }

    let mut rows = Vec::new();
    for (i, t) in targets.layers.iter().enumerate() {
        let node = match t.kind {
            NodeKind::Linear => Node::linear(i as u32, "x", "y", "w", targets.linear_bias.then_some("b")),
            NodeKind::LinearRelu => {
                let mut n = Node::linear(i as u32, "x", "y", "w", targets.linear_bias.then_some("b"));
                n.kind = NodeKind::LinearRelu;
                n
            }
            NodeKind::Softmax => Node::softmax(i as u32, "x", "y"),
            NodeKind::Add => Node::add(i as u32, "x", "x2", "y"),
            k => return Err(TimingError::Incomplete(format!("row `{}` has unsupported kind {k}", t.name))),
        };
        let plan = plan_layer(&node, LayerShape { in_len: t.input, out_len: t.output }, &chip, &opts)
            .map_err(|e| TimingError::Infeasible(format!("row `{}`: {e}", t.name)))?;
        if plan.num_workers != t.workers {
            return Err(TimingError::Infeasible(format!(
                "row `{}` lists {} workers, the planner assigns {}",
                t.name, t.workers, plan.num_workers
            )));
        }
        rows.push(Row { target: t, plan });
    }

    let mut m = TimingModel::default();
    let fetch_row = rows
        .iter()
        .find(|r| r.target.weight_fetch_us.is_some() && r.target.mla_us.is_some())
        .ok_or_else(|| TimingError::Incomplete("no row reports weight-fetch and MLA times".into()))?;
    let (fetch, mla) = (fetch_row.target.weight_fetch_us.unwrap(), fetch_row.target.mla_us.unwrap());
    if !(fetch > 0.0 && mla > 0.0) {
        return Err(TimingError::Infeasible("weight-fetch and MLA times must be positive".into()));
    }
    let slice = fetch_row.plan.weight_slice_bytes() as f64;
    m.dram_bytes_per_ns = slice / (fetch * 1e3);
    m.mla_macs_per_ns = slice / (mla * 1e3);

    let mean_workers = rows.iter().map(|r| r.plan.num_workers as f64).sum::<f64>() / rows.len() as f64;
    let fixed_overhead = mean_workers * m.scheduler_per_worker_trigger_ns
        + 2.0 * (m.noc_msg_ns + m.irq_dispatch_ns)
        + m.timing_store_ns;
    m.scheduler_header_fetch_ns = targets.scheduler_overhead_us * 1e3 - fixed_overhead;
    if m.scheduler_header_fetch_ns <= 0.0 {
        return Err(TimingError::Infeasible(format!(
            "mean overhead {} µs is below the fixed messaging cost {:.3} µs",
            targets.scheduler_overhead_us,
            fixed_overhead / 1e3
        )));
    }

    // Linear rows: runtime = known(F=0, s=0) + F + s * (staged + requantized).
    let probe = TimingModel { worker_fixed_ns: 0.0, scalar_op_ns: 0.0, exp_eval_ns: 0.0, ..m.clone() };
    let lin: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.plan.kind.is_linear())
        .map(|r| {
            let known = probe.predict_layer_ns(&r.works(targets.linear_bias)) as f64;
            ((r.plan.in_len + r.plan.tile_out) as f64, r.target.runtime_us * 1e3 - known)
        })
        .collect();
    if lin.is_empty() {
        return Err(TimingError::Incomplete("no Linear rows".into()));
    }
    let n = lin.len() as f64;
    let (mx, my) = (lin.iter().map(|p| p.0).sum::<f64>() / n, lin.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = lin.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx > 0.0 {
        m.scalar_op_ns = lin.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    }
    m.worker_fixed_ns = my - m.scalar_op_ns * mx;
    if m.scalar_op_ns <= 0.0 || m.worker_fixed_ns < 0.0 {
        return Err(TimingError::Infeasible(format!(
            "Linear rows imply scalar_op_ns = {:.3}, worker_fixed_ns = {:.1}",
            m.scalar_op_ns, m.worker_fixed_ns
        )));
    }

    // Softmax rows: mean implied EXP cost.
    let exp: Vec<f64> = rows
        .iter()
        .filter(|r| r.plan.kind == NodeKind::Softmax)
        .map(|r| {
            let probe = TimingModel { exp_eval_ns: 0.0, ..m.clone() };
            let known = probe.predict_layer_ns(&r.works(false)) as f64;
            (r.target.runtime_us * 1e3 - known) / r.plan.real_out as f64
        })
        .collect();
    if !exp.is_empty() {
        m.exp_eval_ns = exp.iter().sum::<f64>() / exp.len() as f64;
        if m.exp_eval_ns <= 0.0 {
            return Err(TimingError::Infeasible(format!("Softmax rows imply exp_eval_ns = {:.1}", m.exp_eval_ns)));
        }
    }

    // Setup and cleanup, linear in the number of enabled workers.
    let layers = rows.len();
    let enabled = rows.iter().map(|r| r.plan.num_workers).max().unwrap_or(0);
    let setup_fixed = |_e: usize| (m.irq_ns() + m.dma_ns(GlobalConfig::byte_len(chip.num_pes))) as f64;
    let cleanup_fixed = |e: usize| (m.dma_ns(HEADER_BYTES) + m.dma_ns(timing_bytes(layers, e))) as f64;
    let mut points = vec![(enabled, targets.setup_us * 1e3, targets.cleanup_us * 1e3)];
    if let Some(p) = &targets.all_workers {
        if p.workers != enabled {
            points.push((p.workers, p.setup_us * 1e3, p.cleanup_us * 1e3));
        }
    }
    let fit = |vals: Vec<(f64, f64)>, default_slope: f64| -> (f64, f64) {
        match vals[..] {
            [(x0, y0), (x1, y1)] => {
                let slope = (y1 - y0) / (x1 - x0);
                (y0 - slope * x0, slope)
            }
            _ => (vals[0].1 - default_slope * vals[0].0, default_slope),
        }
    };
    let (sb, sp) = fit(
        points.iter().map(|&(e, s, _)| (e as f64, s - setup_fixed(e))).collect(),
        m.setup_per_worker_ns,
    );
    let (cb, cp) = fit(
        points.iter().map(|&(e, _, c)| (e as f64, c - cleanup_fixed(e))).collect(),
        m.cleanup_per_worker_ns,
    );
    for (name, v) in [("setup base", sb), ("setup per worker", sp), ("cleanup base", cb), ("cleanup per worker", cp)] {
        if v < 0.0 {
            return Err(TimingError::Infeasible(format!("{name} cost solves to {v:.1} ns")));
        }
    }
    (m.setup_base_ns, m.setup_per_worker_ns, m.cleanup_base_ns, m.cleanup_per_worker_ns) = (sb, sp, cb, cp);
    m.check()?;

    let mut residuals: Vec<Residual> = rows
        .iter()
        .map(|r| Residual {
            name: r.target.name.clone(),
            target_ns: r.target.runtime_us * 1e3,
            predicted_ns: m.predict_layer_ns(&r.works(targets.linear_bias)) as f64,
        })
        .collect();
    for &(e, s, c) in &points {
        residuals.push(Residual { name: format!("setup@{e}"), target_ns: s, predicted_ns: m.setup_ns(chip.num_pes, e) as f64 });
        residuals.push(Residual {
            name: format!("cleanup@{e}"),
            target_ns: c,
            predicted_ns: m.cleanup_ns(e, timing_bytes(layers, e)) as f64,
        });
    }
    Ok(Calibration { model: m, residuals })
}
