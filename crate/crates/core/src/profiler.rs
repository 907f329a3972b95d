//! Decodes the time-measurement region of a DRAM image after a run and
//! renders per-layer runtime breakdowns.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dram_image::{layer_names, read_u32, DramImage, ImageError, LayerType, TIMING_RECORD_BYTES};
use crate::partitioner::PeCoord;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("run incomplete: timing region is not populated")]
    Incomplete,
    #[error("layer {layer}: {msg}")]
    Record { layer: usize, msg: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T, E = ProfileError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeRecord {
    pub pe: PeCoord,
    pub start_ns: u64,
    pub end_ns: u64,
    pub dma_ns: u64,
    pub compute_ns: u64,
}

impl PeRecord {
    pub fn busy_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub index: usize,
    pub name: String,
    pub kind: LayerType,
    pub input: usize,
    pub output: usize,
    pub workers: usize,
    pub runtime_ns: u64,
    pub scheduler: PeRecord,
    pub worker_records: Vec<PeRecord>,
    /// Layer wall time minus the longest worker busy time.
    pub scheduler_overhead_ns: u64,
}

impl LayerRecord {
    fn mean(&self, f: impl Fn(&PeRecord) -> u64) -> f64 {
        if self.worker_records.is_empty() {
            return 0.0;
        }
        self.worker_records.iter().map(f).sum::<u64>() as f64 / self.worker_records.len() as f64
    }

    pub fn mean_dma_ns(&self) -> f64 {
        self.mean(|r| r.dma_ns)
    }

    pub fn mean_compute_ns(&self) -> f64 {
        self.mean(|r| r.compute_ns)
    }

    /// Mean worker compute time as a fraction of the layer runtime.
    pub fn utilization(&self) -> f64 {
        if self.runtime_ns == 0 {
            return 0.0;
        }
        self.mean_compute_ns() / self.runtime_ns as f64
    }

    pub fn dma_share(&self) -> f64 {
        if self.runtime_ns == 0 {
            return 0.0;
        }
        self.mean_dma_ns() / self.runtime_ns as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeLog {
    pub setup_start_ns: u64,
    pub setup_ns: u64,
    pub cleanup_ns: u64,
    pub layers: Vec<LayerRecord>,
}

impl TimeLog {
    pub fn total_ns(&self) -> u64 {
        self.setup_ns + self.layers.iter().map(|l| l.runtime_ns).sum::<u64>() + self.cleanup_ns
    }

    pub fn mean_overhead_ns(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.scheduler_overhead_ns).sum::<u64>() as f64 / self.layers.len() as f64
    }
}

fn record(bytes: &[u8], at: usize) -> Result<[u64; 4]> {
    let mut r = [0u64; 4];
    for (j, v) in r.iter_mut().enumerate() {
        *v = read_u32(bytes, at + 4 * j)? as u64;
    }
    Ok(r)
}

/// Parses a post-run DRAM dump and decodes its timing region.
pub fn collect(bytes: &[u8]) -> Result<TimeLog> {
    let image = DramImage::parse(bytes)?;
    collect_with(&image, bytes)
}

/// Decodes the timing region of `dram` using the layout of `image`.
pub fn collect_with(image: &DramImage, dram: &[u8]) -> Result<TimeLog> {
    let g = &image.global;
    let base = g.timing_area_addr as usize;
    let slots = g.timing_slots as usize;
    let head = record(dram, base)?;
    if head[3] == 0 {
        return Err(ProfileError::Incomplete);
    }
    let kinds: Vec<LayerType> = image.layers.iter().map(|l| l.header.kind()).collect::<Result<_, _>>()?;
    let names = layer_names(&kinds);
    let mut layers = Vec::with_capacity(image.layers.len());
    for (i, l) in image.layers.iter().enumerate() {
        let at = |slot: usize| base + (1 + i * slots + slot) * TIMING_RECORD_BYTES;
        let s = record(dram, at(0))?;
        if s[1] == 0 {
            return Err(ProfileError::Incomplete);
        }
        let scheduler = PeRecord { pe: PeCoord::decode(g.scheduler_pe), start_ns: s[0], end_ns: s[1], dma_ns: s[2], compute_ns: s[3] };
        let mut worker_records = Vec::with_capacity(l.scheduler.workers.len());
        for (k, &w) in l.scheduler.workers.iter().enumerate() {
            let r = record(dram, at(1 + k))?;
            if r[1] < r[0] || r[0] < s[0] || r[1] > s[1] {
                return Err(ProfileError::Record { layer: i, msg: format!("worker {k} interval {}..{} outside layer", r[0], r[1]) });
            }
            worker_records.push(PeRecord { pe: PeCoord::decode(w), start_ns: r[0], end_ns: r[1], dma_ns: r[2], compute_ns: r[3] });
        }
        layers.push(finish_layer(i, names[i].clone(), kinds[i], l.io.input_len[0] as usize, l.io.output_len as usize, scheduler, worker_records));
    }
    Ok(TimeLog { setup_start_ns: head[0], setup_ns: head[1] - head[0], cleanup_ns: head[3] - head[2], layers })
}

fn finish_layer(
    index: usize,
    name: String,
    kind: LayerType,
    input: usize,
    output: usize,
    scheduler: PeRecord,
    worker_records: Vec<PeRecord>,
) -> LayerRecord {
    let runtime_ns = scheduler.busy_ns();
    let busiest = worker_records.iter().map(PeRecord::busy_ns).max().unwrap_or(0);
    LayerRecord {
        index,
        name,
        kind,
        input,
        output,
        workers: worker_records.len(),
        runtime_ns,
        scheduler,
        worker_records,
        scheduler_overhead_ns: runtime_ns - busiest,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

pub fn report(log: &TimeLog, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => table(log),
        ReportFormat::Csv => to_csv(log),
        ReportFormat::Json => serde_json::to_string_pretty(log).expect("time log serializes"),
    }
}

fn us(ns: u64) -> String {
    format!("{}.{:03}", ns / 1000, ns % 1000)
}

fn table(log: &TimeLog) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>12} {:>6} {:>6} {:>7} {:>12} {:>12} {:>6} {:>12}",
        "layer", "runtime_us", "input", "output", "workers", "dma_us", "compute_us", "util%", "overhead_us"
    );
    let _ = writeln!(s, "{:<12} {:>12}", "Setup", us(log.setup_ns));
    for l in &log.layers {
        let util = if matches!(l.kind, LayerType::Linear | LayerType::LinearRelu) {
            format!("{:.1}", 100.0 * l.utilization())
        } else {
            "-".into()
        };
        let _ = writeln!(
            s,
            "{:<12} {:>12} {:>6} {:>6} {:>7} {:>12.3} {:>12.3} {:>6} {:>12}",
            l.name,
            us(l.runtime_ns),
            l.input,
            l.output,
            l.workers,
            l.mean_dma_ns() / 1e3,
            l.mean_compute_ns() / 1e3,
            util,
            us(l.scheduler_overhead_ns)
        );
    }
    let _ = writeln!(s, "{:<12} {:>12}", "Cleanup", us(log.cleanup_ns));
    let _ = writeln!(s, "{:<12} {:>12}", "Total", us(log.total_ns()));
    if !log.layers.is_empty() {
        let _ = writeln!(s, "mean scheduler overhead per layer: {:.3} us", log.mean_overhead_ns() / 1e3);
    }
    s
}

const CSV_COLUMNS: [&str; 11] =
    ["layer", "name", "kind", "input", "output", "pe", "role", "start_ns", "end_ns", "dma_ns", "compute_ns"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    layer: Option<usize>,
    name: String,
    kind: String,
    input: Option<usize>,
    output: Option<usize>,
    pe: String,
    role: String,
    start_ns: u64,
    end_ns: u64,
    dma_ns: u64,
    compute_ns: u64,
}

fn kind_name(k: LayerType) -> &'static str {
    match k {
        LayerType::Linear => "Linear",
        LayerType::LinearRelu => "LinearReLU",
        LayerType::Add => "Add",
        LayerType::Softmax => "Softmax",
        LayerType::Finish => "Finish",
    }
}

fn parse_kind(s: &str) -> Result<LayerType> {
    Ok(match s {
        "Linear" => LayerType::Linear,
        "LinearReLU" => LayerType::LinearRelu,
        "Add" => LayerType::Add,
        "Softmax" => LayerType::Softmax,
        other => return Err(ProfileError::Csv(format!("unknown layer kind `{other}`"))),
    })
}

fn pe_str(p: PeCoord) -> String {
    format!("{}.{}.{}", p.x, p.y, p.core)
}

fn parse_pe(s: &str) -> Result<PeCoord> {
    let parts: Vec<u8> = s.split('.').map(|p| p.parse().map_err(|_| ProfileError::Csv(format!("bad PE `{s}`")))).collect::<Result<_>>()?;
    match parts[..] {
        [x, y, core] => Ok(PeCoord { x, y, core }),
        _ => Err(ProfileError::Csv(format!("bad PE `{s}`"))),
    }
}

/// One line per timing record: setup, then per layer the scheduler followed
/// by its workers, then cleanup.
pub fn to_csv(log: &TimeLog) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory csv write");
    let mut rows = Vec::new();
    if !(log.layers.is_empty() && log.setup_ns == 0 && log.cleanup_ns == 0) {
        let span = |role: &str, start: u64, end: u64| CsvRow {
            layer: None,
            name: role.to_string(),
            kind: String::new(),
            input: None,
            output: None,
            pe: String::new(),
            role: role.to_string(),
            start_ns: start,
            end_ns: end,
            dma_ns: 0,
            compute_ns: 0,
        };
        rows.push(span("setup", log.setup_start_ns, log.setup_start_ns + log.setup_ns));
        for l in &log.layers {
            let recs = std::iter::once(("scheduler", &l.scheduler)).chain(l.worker_records.iter().map(|r| ("worker", r)));
            for (role, r) in recs {
                rows.push(CsvRow {
                    layer: Some(l.index),
                    name: l.name.clone(),
                    kind: kind_name(l.kind).to_string(),
                    input: Some(l.input),
                    output: Some(l.output),
                    pe: pe_str(r.pe),
                    role: role.to_string(),
                    start_ns: r.start_ns,
                    end_ns: r.end_ns,
                    dma_ns: r.dma_ns,
                    compute_ns: r.compute_ns,
                });
            }
        }
        let cleanup_end = log.setup_start_ns + log.total_ns();
        rows.push(span("cleanup", cleanup_end - log.cleanup_ns, cleanup_end));
    }
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf8")
}

/// Rebuilds a [`TimeLog`] from [`to_csv`] output.
pub fn from_csv(text: &str) -> Result<TimeLog> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut log = TimeLog { setup_start_ns: 0, setup_ns: 0, cleanup_ns: 0, layers: Vec::new() };
    let mut pending: Option<(CsvRow, PeRecord, Vec<PeRecord>)> = None;
    let flush = |p: Option<(CsvRow, PeRecord, Vec<PeRecord>)>, log: &mut TimeLog| -> Result<()> {
        if let Some((row, sched, workers)) = p {
            let index = row.layer.unwrap_or_default();
            let kind = parse_kind(&row.kind)?;
            log.layers.push(finish_layer(index, row.name, kind, row.input.unwrap_or(0), row.output.unwrap_or(0), sched, workers));
        }
        Ok(())
    };
    for row in rd.deserialize::<CsvRow>() {
        let row = row.map_err(|e| ProfileError::Csv(e.to_string()))?;
        match row.role.as_str() {
            "setup" => {
                log.setup_start_ns = row.start_ns;
                log.setup_ns = row.end_ns - row.start_ns;
            }
            "cleanup" => {
                flush(pending.take(), &mut log)?;
                log.cleanup_ns = row.end_ns - row.start_ns;
            }
            "scheduler" => {
                flush(pending.take(), &mut log)?;
                let rec = PeRecord { pe: parse_pe(&row.pe)?, start_ns: row.start_ns, end_ns: row.end_ns, dma_ns: row.dma_ns, compute_ns: row.compute_ns };
                pending = Some((row, rec, Vec::new()));
            }
            "worker" => {
                let rec = PeRecord { pe: parse_pe(&row.pe)?, start_ns: row.start_ns, end_ns: row.end_ns, dma_ns: row.dma_ns, compute_ns: row.compute_ns };
                match pending.as_mut() {
                    Some((head, _, workers)) if head.layer == row.layer => workers.push(rec),
                    _ => return Err(ProfileError::Csv(format!("worker row for layer {:?} without its scheduler row", row.layer))),
                }
            }
            other => return Err(ProfileError::Csv(format!("unknown role `{other}`"))),
        }
    }
    flush(pending.take(), &mut log)?;
    Ok(log)
}
