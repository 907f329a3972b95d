//! Discrete-event model of the chip executing a DRAM image.
//!
//! One scheduler PE walks the layer chain, triggers workers over the NoC and
//! waits for their completion flags. Workers wake on IRQ, pull their
//! configuration, inputs and weight chunks by DMA, run the integer kernels
//! from [`crate::oracle`] and write their output tile back to DRAM.
//!
//! Events are ordered by `(time, target PE, sequence number)`, so a run is a
//! pure function of the image, the input and the [`TimingModel`].

mod timing;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::dram_image::{
    DramImage, ImageError, LayerHeader, LayerType, SchedulerConfig, WorkerConfigBlock, HEADER_BYTES, TIMING_RECORD_BYTES,
    WORKER_ENABLED,
};
use crate::oracle::{add_i8, dot_i8, finish_acc, softmax_int8};
use crate::partitioner::PeCoord;
use crate::profiler::{self, TimeLog};

pub use timing::{
    calibrate_timing, Calibration, CalibrationTargets, LayerTarget, OverheadPoint, Phase, Residual, TimingError,
    TimingModel, WorkerWork,
};

/// SRAM of one PE.
pub const PE_SRAM_BYTES: usize = 128 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("input has {actual} bytes, the image expects {expected}")]
    InputLength { expected: usize, actual: usize },
    #[error("deadlock in layer {layer}: no completion flag from {}", fmt_pes(.missing))]
    Deadlock { layer: u32, missing: Vec<PeCoord> },
    #[error("protocol violation at {time} ns on PE {pe}: {msg}")]
    Protocol { time: u64, pe: PeCoord, msg: String },
    #[error("layer {layer}: worker {pe} needs {need} bytes of SRAM, has {PE_SRAM_BYTES}")]
    Sram { layer: u32, pe: PeCoord, need: usize },
    #[error("layer {layer}: {msg}")]
    Kernel { layer: u32, msg: String },
    #[error("simulated time {0} ns does not fit a 32-bit timing record")]
    TimeOverflow(u64),
    #[error(transparent)]
    Profile(#[from] profiler::ProfileError),
}

fn fmt_pes(pes: &[PeCoord]) -> String {
    pes.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", ")
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeMode {
    Sleep,
    Configuring,
    DmaWait,
    Computing,
    Reporting,
    Halted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Msg {
    Trigger { layer: u32, slot: u32, cfg_addr: u32 },
    /// Completion flag carrying the worker's (start, end, dma, compute) record.
    Done { layer: u32, slot: u32, record: [u32; 4] },
    Finish,
}

/// Scheduler-internal steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    StartIrq,
    GlobalFetch,
    SetupWork,
    Header,
    Trigger(u32),
    Store,
    Cleanup,
    Flush,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    HostStart,
    NocMsg(Msg),
    Irq(Msg),
    DmaComplete(u32),
    ComputeDone(u32),
    Scheduler(Step),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time_ns: u64,
    pub pe: u32,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    time: u64,
    pe: u32,
    seq: u64,
}

/// A loaded chip: DRAM contents plus per-PE static configuration. Runs never
/// mutate it, so one state can serve any number of concurrent runs.
#[derive(Debug, Clone)]
pub struct ChipState {
    image: DramImage,
    timing: TimingModel,
    pes: Vec<PeCoord>,
    enabled: Vec<bool>,
    scheduler: usize,
}

/// Parses `bytes` and prepares every PE in sleep mode.
pub fn load_image(bytes: &[u8], timing: TimingModel) -> Result<ChipState> {
    timing.check()?;
    let image = DramImage::parse(bytes)?;
    let g = &image.global;
    let pes: Vec<PeCoord> = g.worker_table.iter().map(|&w| PeCoord::decode(w & !WORKER_ENABLED)).collect();
    let enabled: Vec<bool> = g.worker_table.iter().map(|&w| w & WORKER_ENABLED != 0).collect();
    let sched = PeCoord::decode(g.scheduler_pe);
    let scheduler = pes
        .iter()
        .position(|&p| p == sched)
        .ok_or_else(|| ImageError::Chain(format!("scheduler {sched} is not in the worker table")))?;
    Ok(ChipState { image, timing, pes, enabled, scheduler })
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub output: Vec<u8>,
    pub timelog: TimeLog,
    pub dram: Vec<u8>,
    pub trace: Vec<TraceEntry>,
}

impl RunOutput {
    pub fn output_i8(&self) -> Vec<i8> {
        self.output.iter().map(|&b| b as i8).collect()
    }
}

impl ChipState {
    pub fn image(&self) -> &DramImage {
        &self.image
    }

    pub fn timing(&self) -> &TimingModel {
        &self.timing
    }

    pub fn with_timing(mut self, timing: TimingModel) -> Result<Self> {
        timing.check()?;
        self.timing = timing;
        Ok(self)
    }

    pub fn num_pes(&self) -> usize {
        self.pes.len()
    }

    pub fn scheduler_pe(&self) -> PeCoord {
        self.pes[self.scheduler]
    }

    pub fn enabled_workers(&self) -> usize {
        self.enabled.iter().filter(|&&e| e).count()
    }

    /// Modes of all PEs before a run.
    pub fn pe_modes(&self) -> Vec<PeMode> {
        vec![PeMode::Sleep; self.pes.len()]
    }

    pub fn input_len(&self) -> usize {
        self.image.global.input_len as usize
    }

    pub fn output_len(&self) -> usize {
        self.image.global.output_len as usize
    }

    /// Writes `input` into the graph-input buffer, raises the start IRQ and
    /// simulates until the scheduler halts.
    pub fn run(&self, input: &[u8]) -> Result<RunOutput> {
        let g = &self.image.global;
        if input.len() != g.input_len as usize {
            return Err(SimError::InputLength { expected: g.input_len as usize, actual: input.len() });
        }
        let mut dram = self.image.serialize();
        let at = g.input_addr as usize;
        dram[at..at + input.len()].copy_from_slice(input);

        let mut engine = Engine::new(self, dram);
        engine.run()?;
        let Engine { dram, trace, .. } = engine;
        let timelog = profiler::collect_with(&self.image, &dram)?;
        let out = g.output_addr as usize;
        Ok(RunOutput { output: dram[out..out + g.output_len as usize].to_vec(), timelog, dram, trace })
    }

    pub fn run_i8(&self, input: &[i8]) -> Result<RunOutput> {
        self.run(&input.iter().map(|&v| v as u8).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone)]
struct Worker {
    mode: PeMode,
    layer: u32,
    slot: u32,
    cfg_addr: u32,
    block: Option<WorkerConfigBlock>,
    phases: Vec<Phase>,
    pc: usize,
    inflight: u8,
    start: u64,
    dma_ns: u64,
    compute_ns: u64,
    input: Vec<i8>,
    input2: Vec<i8>,
    chunk_buf: [Vec<i8>; 2],
    acc: Vec<i32>,
    out: Vec<i8>,
    rows_done: usize,
}

impl Worker {
    fn idle() -> Self {
        Self {
            mode: PeMode::Sleep,
            layer: 0,
            slot: 0,
            cfg_addr: 0,
            block: None,
            phases: Vec::new(),
            pc: 0,
            inflight: 0,
            start: 0,
            dma_ns: 0,
            compute_ns: 0,
            input: Vec::new(),
            input2: Vec::new(),
            chunk_buf: [Vec::new(), Vec::new()],
            acc: Vec::new(),
            out: Vec::new(),
            rows_done: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SchedMode {
    Idle,
    Busy,
    Waiting,
    Halted,
}

struct Scheduler {
    mode: SchedMode,
    layer: u32,
    header_addr: u32,
    header: LayerHeader,
    config: SchedulerConfig,
    cfg_addrs: Vec<u32>,
    triggers_sent: u32,
    flags: Vec<bool>,
    layer_start: u64,
    header_ns: u64,
    setup: (u64, u64),
    cleanup_start: u64,
    /// Timing records per layer, `1 + timing_slots` wide.
    records: Vec<[u32; 4]>,
}

struct Engine<'a> {
    chip: &'a ChipState,
    t: &'a TimingModel,
    dram: Vec<u8>,
    queue: BinaryHeap<Reverse<(Key, EventKind)>>,
    seq: u64,
    now: u64,
    workers: Vec<Worker>,
    sched: Scheduler,
    trace: Vec<TraceEntry>,
}

fn t32(t: u64) -> Result<u32> {
    u32::try_from(t).map_err(|_| SimError::TimeOverflow(t))
}

impl<'a> Engine<'a> {
    fn new(chip: &'a ChipState, dram: Vec<u8>) -> Self {
        let g = &chip.image.global;
        let slots = g.timing_slots as usize;
        Self {
            chip,
            t: &chip.timing,
            dram,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            workers: vec![Worker::idle(); chip.pes.len()],
            sched: Scheduler {
                mode: SchedMode::Idle,
                layer: 0,
                header_addr: g.first_layer_addr,
                header: LayerHeader::FINISH,
                config: SchedulerConfig { layer_index: 0, workers: Vec::new() },
                cfg_addrs: Vec::new(),
                triggers_sent: 0,
                flags: Vec::new(),
                layer_start: 0,
                header_ns: 0,
                setup: (0, 0),
                cleanup_start: 0,
                records: vec![[0; 4]; g.num_layers as usize * slots],
            },
            trace: Vec::new(),
        }
    }

    fn push(&mut self, delay: u64, pe: usize, kind: EventKind) {
        let key = Key { time: self.now + delay, pe: pe as u32, seq: self.seq };
        self.seq += 1;
        self.queue.push(Reverse((key, kind)));
    }

    fn violation(&self, pe: usize, msg: impl Into<String>) -> SimError {
        SimError::Protocol { time: self.now, pe: self.chip.pes[pe], msg: msg.into() }
    }

    fn pe_index(&self, coord: PeCoord) -> Result<usize> {
        self.chip
            .pes
            .iter()
            .position(|&p| p == coord)
            .ok_or_else(|| ImageError::Chain(format!("PE {coord} is not on the chip")).into())
    }

    fn run(&mut self) -> Result<()> {
        let s = self.chip.scheduler;
        self.push(0, s, EventKind::HostStart);
        while let Some(Reverse((key, kind))) = self.queue.pop() {
            self.now = key.time;
            let pe = key.pe as usize;
            self.trace.push(TraceEntry { time_ns: key.time, pe: key.pe, kind });
            if pe == s {
                self.scheduler_event(kind)?;
            } else {
                self.worker_event(pe, kind)?;
            }
        }
        if self.sched.mode != SchedMode::Halted {
            let missing = self
                .sched
                .flags
                .iter()
                .zip(&self.sched.config.workers)
                .filter(|(&f, _)| !f)
                .map(|(_, &w)| PeCoord::decode(w))
                .collect();
            return Err(SimError::Deadlock { layer: self.sched.layer, missing });
        }
        Ok(())
    }

    // Scheduler.

    fn scheduler_event(&mut self, kind: EventKind) -> Result<()> {
        let s = self.chip.scheduler;
        let t = self.t;
        match kind {
            EventKind::HostStart => {
                if self.sched.mode != SchedMode::Idle {
                    return Err(self.violation(s, "start IRQ while running"));
                }
                self.sched.mode = SchedMode::Busy;
                self.sched.setup.0 = self.now;
                self.push(t.irq_ns(), s, EventKind::Scheduler(Step::StartIrq));
            }
            EventKind::Scheduler(Step::StartIrq) => {
                let glen = self.chip.image.region(crate::dram_image::RegionKind::Global).len as usize;
                self.push(t.dma_ns(glen), s, EventKind::Scheduler(Step::GlobalFetch));
            }
            EventKind::Scheduler(Step::GlobalFetch) => {
                self.push(t.setup_work_ns(self.chip.enabled_workers()), s, EventKind::Scheduler(Step::SetupWork));
            }
            EventKind::Scheduler(Step::SetupWork) => {
                self.sched.setup.1 = self.now;
                self.fetch_header();
            }
            EventKind::Scheduler(Step::Header) => self.header_fetched()?,
            EventKind::Scheduler(Step::Trigger(k)) => {
                let worker = PeCoord::decode(self.sched.config.workers[k as usize]);
                let pe = self.pe_index(worker)?;
                let msg = Msg::Trigger { layer: self.sched.layer, slot: k, cfg_addr: self.sched.cfg_addrs[k as usize] };
                self.push(t.noc_ns(), pe, EventKind::NocMsg(msg));
                self.sched.triggers_sent += 1;
                if self.sched.triggers_sent < self.sched.header.num_workers {
                    self.push(t.trigger_ns(), s, EventKind::Scheduler(Step::Trigger(k + 1)));
                } else {
                    self.sched.mode = SchedMode::Waiting;
                    self.maybe_close_layer();
                }
            }
            EventKind::NocMsg(msg @ Msg::Done { .. }) => self.push(t.irq_ns(), s, EventKind::Irq(msg)),
            EventKind::Irq(Msg::Done { layer, slot, record }) => {
                if layer != self.sched.layer {
                    return Err(self.violation(s, format!("completion flag for layer {layer} during layer {}", self.sched.layer)));
                }
                match self.sched.flags.get_mut(slot as usize) {
                    Some(f) if !*f => *f = true,
                    _ => return Err(self.violation(s, format!("unexpected completion flag from slot {slot}"))),
                }
                let slots = self.chip.image.global.timing_slots as usize;
                self.sched.records[layer as usize * slots + 1 + slot as usize] = record;
                self.maybe_close_layer();
            }
            EventKind::Scheduler(Step::Store) => {
                let slots = self.chip.image.global.timing_slots as usize;
                let row = self.sched.layer as usize * slots;
                self.sched.records[row] = [t32(self.sched.layer_start)?, t32(self.now)?, t32(self.sched.header_ns)?, 0];
                self.sched.header_addr = self.sched.header.next_layer_addr;
                self.sched.layer += 1;
                self.fetch_header();
            }
            EventKind::Scheduler(Step::Cleanup) => {
                let len = self.chip.image.global.timing_area_len as usize;
                self.push(t.dma_ns(len), s, EventKind::Scheduler(Step::Flush));
            }
            EventKind::Scheduler(Step::Flush) => {
                self.flush_timing()?;
                self.sched.mode = SchedMode::Halted;
            }
            other => return Err(self.violation(s, format!("scheduler cannot handle {other:?}"))),
        }
        Ok(())
    }

    fn fetch_header(&mut self) {
        let s = self.chip.scheduler;
        self.sched.mode = SchedMode::Busy;
        self.sched.layer_start = self.now;
        // The Finish sentinel is a bare header; real layers also carry the
        // scheduler config and worker table.
        let is_finish = LayerHeader::decode(&self.dram, self.sched.header_addr as usize).map(|h| h.is_finish()).unwrap_or(true);
        self.sched.header_ns = if is_finish { self.t.dma_ns(HEADER_BYTES) } else { self.t.header_ns() };
        self.push(self.sched.header_ns, s, EventKind::Scheduler(Step::Header));
    }

    fn header_fetched(&mut self) -> Result<()> {
        let s = self.chip.scheduler;
        let addr = self.sched.header_addr as usize;
        let header = LayerHeader::decode(&self.dram, addr)?;
        if header.is_finish() {
            self.sched.cleanup_start = self.sched.layer_start;
            for pe in 0..self.chip.pes.len() {
                if pe != s && self.chip.enabled[pe] {
                    self.push(self.t.noc_ns(), pe, EventKind::NocMsg(Msg::Finish));
                }
            }
            self.push(self.t.cleanup_work_ns(self.chip.enabled_workers()), s, EventKind::Scheduler(Step::Cleanup));
            return Ok(());
        }
        if self.sched.layer >= self.chip.image.global.num_layers {
            return Err(self.violation(s, "layer chain runs past num_layers"));
        }
        header.kind()?;
        let config = SchedulerConfig::decode(&self.dram, header.scheduler_cfg_addr as usize)?;
        let n = header.num_workers as usize;
        if config.workers.len() != n {
            return Err(self.violation(s, "worker count mismatch between header and scheduler config"));
        }
        let mut cfg_addrs = Vec::with_capacity(n);
        for k in 0..n {
            cfg_addrs.push(crate::dram_image::read_u32(&self.dram, header.worker_cfg_table_addr as usize + 4 * k)?);
        }
        self.sched.header = header;
        self.sched.config = config;
        self.sched.cfg_addrs = cfg_addrs;
        self.sched.flags = vec![false; n];
        self.sched.triggers_sent = 0;
        if n == 0 {
            self.sched.mode = SchedMode::Waiting;
            self.maybe_close_layer();
        } else {
            self.push(self.t.trigger_ns(), s, EventKind::Scheduler(Step::Trigger(0)));
        }
        Ok(())
    }

    fn maybe_close_layer(&mut self) {
        if self.sched.mode == SchedMode::Waiting && self.sched.flags.iter().all(|&f| f) {
            self.sched.mode = SchedMode::Busy;
            self.push(self.t.store_ns(), self.chip.scheduler, EventKind::Scheduler(Step::Store));
        }
    }

    fn flush_timing(&mut self) -> Result<()> {
        let g = &self.chip.image.global;
        let base = g.timing_area_addr as usize;
        let head = [t32(self.sched.setup.0)?, t32(self.sched.setup.1)?, t32(self.sched.cleanup_start)?, t32(self.now)?];
        let records = std::iter::once(head).chain(self.sched.records.iter().copied());
        for (i, r) in records.enumerate() {
            let at = base + i * TIMING_RECORD_BYTES;
            for (j, w) in r.iter().enumerate() {
                self.dram[at + 4 * j..at + 4 * j + 4].copy_from_slice(&w.to_le_bytes());
            }
        }
        Ok(())
    }

    // Workers.

    fn worker_event(&mut self, pe: usize, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::NocMsg(msg) => {
                // A disabled PE never wakes; the scheduler will stall on it.
                if self.chip.enabled[pe] {
                    self.push(self.t.irq_ns(), pe, EventKind::Irq(msg));
                }
            }
            EventKind::Irq(Msg::Trigger { layer, slot, cfg_addr }) => {
                if self.workers[pe].mode != PeMode::Sleep {
                    return Err(self.violation(pe, format!("trigger for layer {layer} while {:?}", self.workers[pe].mode)));
                }
                self.start_tile(pe, layer, slot, cfg_addr)?;
            }
            EventKind::Irq(Msg::Finish) => {
                if self.workers[pe].mode != PeMode::Sleep {
                    return Err(self.violation(pe, "finish while busy"));
                }
                self.workers[pe].mode = PeMode::Halted;
            }
            EventKind::DmaComplete(tag) | EventKind::ComputeDone(tag) => self.phase_done(pe, tag as usize)?,
            other => return Err(self.violation(pe, format!("worker cannot handle {other:?}"))),
        }
        Ok(())
    }

    fn start_tile(&mut self, pe: usize, layer: u32, slot: u32, cfg_addr: u32) -> Result<()> {
        let header = self.sched.header;
        let kind = header.kind()?;
        // The block is immutable during a run, so its size is known up front.
        let block = WorkerConfigBlock::decode(&self.dram, cfg_addr as usize)?;
        let work = WorkerWork::from_block(kind, &block);
        let max_chunk = block.chunks.iter().map(|c| c.len as usize).max().unwrap_or(0);
        let inputs = if kind == LayerType::Add { 2 } else { 1 };
        let need = work.cfg_bytes + inputs * work.in_len + 4 * work.tile_out + 2 * max_chunk + work.tile_out;
        if need > PE_SRAM_BYTES {
            return Err(SimError::Sram { layer, pe: self.chip.pes[pe], need });
        }
        let w = &mut self.workers[pe];
        *w = Worker { mode: PeMode::Configuring, layer, slot, cfg_addr, start: self.now, phases: work.phases(), ..Worker::idle() };
        self.launch(pe)
    }

    /// Starts the phase at `pc`; with overlap, an MLA pass and the next chunk
    /// DMA run together.
    fn launch(&mut self, pe: usize) -> Result<()> {
        let (pc, phase) = {
            let w = &self.workers[pe];
            (w.pc, w.phases.get(w.pc).copied())
        };
        let Some(phase) = phase else {
            return self.finish_tile(pe);
        };
        let mut starts = vec![(pc, phase)];
        if self.t.overlap {
            if let (Phase::Mla { .. }, Some(next @ Phase::Chunk { .. })) = (phase, self.workers[pe].phases.get(pc + 1).copied()) {
                starts.push((pc + 1, next));
            }
        }
        let w = &mut self.workers[pe];
        w.inflight = starts.len() as u8;
        w.pc = starts.last().unwrap().0;
        for (i, p) in starts {
            let d = self.t.phase_ns(&p);
            let w = &mut self.workers[pe];
            if p.is_dma() {
                w.dma_ns += d;
            }
            if p.is_compute() {
                w.compute_ns += d;
            }
            w.mode = match p {
                Phase::Config { .. } => PeMode::Configuring,
                _ if p.is_dma() => PeMode::DmaWait,
                _ => PeMode::Computing,
            };
            let ev = if p.is_dma() { EventKind::DmaComplete(i as u32) } else { EventKind::ComputeDone(i as u32) };
            self.push(d, pe, ev);
        }
        Ok(())
    }

    fn phase_done(&mut self, pe: usize, index: usize) -> Result<()> {
        let phase = self.workers[pe].phases[index];
        self.apply(pe, phase)?;
        let w = &mut self.workers[pe];
        w.inflight -= 1;
        if w.inflight == 0 {
            w.pc += 1;
            self.launch(pe)?;
        }
        Ok(())
    }

    fn read_i8(&self, addr: u32, len: usize) -> Vec<i8> {
        self.dram[addr as usize..addr as usize + len].iter().map(|&b| b as i8).collect()
    }

    fn apply(&mut self, pe: usize, phase: Phase) -> Result<()> {
        let layer = self.workers[pe].layer;
        match phase {
            Phase::Config { .. } => {
                let block = WorkerConfigBlock::decode(&self.dram, self.workers[pe].cfg_addr as usize)?;
                let w = &mut self.workers[pe];
                w.acc = vec![0; block.tile_out as usize];
                w.block = Some(block);
            }
            Phase::Input { bytes } => {
                let b = self.workers[pe].block.as_ref().unwrap();
                let first = self.workers[pe].input.is_empty();
                let data = self.read_i8(if first { b.input_addr } else { b.input2_addr }, bytes);
                let w = &mut self.workers[pe];
                if first {
                    w.input = data;
                } else {
                    w.input2 = data;
                }
            }
            Phase::Prepare { .. } => {}
            Phase::Bias { .. } => {
                let b = self.workers[pe].block.as_ref().unwrap();
                let at = b.bias_addr as usize;
                let acc = self.dram[at..at + 4 * b.tile_out as usize]
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                self.workers[pe].acc = acc;
            }
            Phase::Chunk { index, bytes } => {
                let c = self.workers[pe].block.as_ref().unwrap().chunks[index];
                self.workers[pe].chunk_buf[index % 2] = self.read_i8(c.addr, bytes);
            }
            Phase::Mla { index, .. } => {
                let w = &mut self.workers[pe];
                let in_len = w.input.len();
                if in_len == 0 {
                    return Err(SimError::Kernel { layer, msg: "empty input vector".into() });
                }
                let buf = std::mem::take(&mut w.chunk_buf[index % 2]);
                for row in buf.chunks_exact(in_len) {
                    let r = w.rows_done;
                    w.acc[r] = dot_i8(row, &w.input, w.acc[r]);
                    w.rows_done += 1;
                }
            }
            Phase::Requant { .. } => {
                let w = &mut self.workers[pe];
                let b = w.block.as_ref().unwrap();
                if w.rows_done != b.tile_out as usize {
                    return Err(SimError::Kernel { layer, msg: format!("{} of {} rows computed", w.rows_done, b.tile_out) });
                }
                let (relu, shift) = (b.relu != 0, b.shift);
                w.out = w.acc.iter().map(|&a| finish_acc(a, relu, shift)).collect();
            }
            Phase::Elementwise { .. } => {
                let w = &mut self.workers[pe];
                let b = w.block.as_ref().unwrap();
                let (aa, ab, shift) = (b.align_a, b.align_b, b.shift);
                w.out = w.input.iter().zip(&w.input2).map(|(&x, &y)| add_i8(x, y, aa, ab, shift)).collect();
            }
            Phase::Softmax { n } => {
                let w = &mut self.workers[pe];
                let b = w.block.as_ref().unwrap();
                let mut out = softmax_int8(&w.input[..n], b.in_exp, b.out_exp)
                    .map_err(|e| SimError::Kernel { layer, msg: e.to_string() })?;
                out.resize(b.tile_out as usize, 0);
                w.out = out;
            }
            Phase::Output { bytes } => {
                let w = &self.workers[pe];
                let at = w.block.as_ref().unwrap().output_addr as usize;
                if w.out.len() != bytes {
                    return Err(SimError::Kernel { layer, msg: format!("tile produced {} bytes, expected {bytes}", w.out.len()) });
                }
                for (d, &v) in self.dram[at..at + bytes].iter_mut().zip(&w.out) {
                    *d = v as u8;
                }
            }
        }
        Ok(())
    }

    fn finish_tile(&mut self, pe: usize) -> Result<()> {
        let now = self.now;
        let w = &mut self.workers[pe];
        w.mode = PeMode::Reporting;
        let record = [t32(w.start)?, t32(now)?, t32(w.dma_ns)?, t32(w.compute_ns)?];
        let (layer, slot) = (w.layer, w.slot);
        w.mode = PeMode::Sleep;
        w.input.clear();
        w.input2.clear();
        self.push(self.t.noc_ns(), self.chip.scheduler, EventKind::NocMsg(Msg::Done { layer, slot, record }));
        Ok(())
    }
}
