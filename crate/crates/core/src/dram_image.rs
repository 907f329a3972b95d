//! Byte-exact DRAM image: global configuration, time-measurement area,
//! per-layer configuration blocks and activation data, in that order.
//!
//! All words are little-endian `u32`; every address the chip dereferences
//! is 16-byte aligned. Layer configuration blocks are contiguous per layer:
//!
//! ```text
//! header (8 words) | scheduler cfg | worker cfg table | io map | worker cfgs | weights | bias
//! ```
//!
//! A Finish sentinel header terminates the layer chain. Tensor names live in
//! a sidecar [`ImageManifest`]; the binary only carries addresses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph_ir::{ApplicationGraph, DType, GraphError, Node, NodeKind};
use crate::oracle::{add_params, QuantKernelSpec};
use crate::partitioner::{ChipDescriptor, Mapping, PeCoord, TilePlan};

pub const MAGIC: u32 = 0x5350_4E32;
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 16;
pub const GLOBAL_FIXED_WORDS: usize = 16;
pub const HEADER_BYTES: usize = 32;
pub const WORKER_CFG_FIXED_WORDS: usize = 16;
pub const IO_MAP_WORDS: usize = 8;
pub const TIMING_RECORD_BYTES: usize = 16;
/// Bit set in a worker-table word when that PE takes part in the model.
pub const WORKER_ENABLED: u32 = 1 << 31;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("truncated image: need {need} bytes at offset {offset:#x}, image is {len} bytes")]
    Truncated { offset: usize, need: usize, len: usize },
    #[error("misaligned {what} address {addr:#x}")]
    Misaligned { what: &'static str, addr: u32 },
    #[error("address {addr:#x} of {what} lies outside {region}")]
    OutOfRegion { what: &'static str, addr: u32, region: &'static str },
    #[error("unsupported image version {0}")]
    Version(u32),
    #[error("invalid layer type {0:#x}")]
    LayerType(u32),
    #[error("layer chain is malformed: {0}")]
    Chain(String),
    #[error("image of {size} bytes exceeds DRAM capacity {capacity}")]
    TooLarge { size: u64, capacity: u64 },
    #[error("node {0} has no tile plan")]
    Unplanned(u32),
    #[error("node {node}: {msg}")]
    Layer { node: u32, msg: String },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

pub fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum LayerType {
    Linear = 1,
    LinearRelu = 2,
    Add = 3,
    Softmax = 4,
    Finish = 0xFFFF_FFFF,
}

impl LayerType {
    pub fn from_word(w: u32) -> Result<Self> {
        Ok(match w {
            1 => Self::Linear,
            2 => Self::LinearRelu,
            3 => Self::Add,
            4 => Self::Softmax,
            0xFFFF_FFFF => Self::Finish,
            other => return Err(ImageError::LayerType(other)),
        })
    }

    pub fn of(kind: NodeKind) -> Option<Self> {
        Some(match kind {
            NodeKind::Linear => Self::Linear,
            NodeKind::LinearRelu => Self::LinearRelu,
            NodeKind::Add => Self::Add,
            NodeKind::Softmax => Self::Softmax,
            _ => return None,
        })
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Self::Linear | Self::LinearRelu)
    }
}

/// Little-endian word writer over a growing byte buffer.
#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn put(&mut self, addr: usize, words: &[u32]) {
        let end = addr + 4 * words.len();
        if self.buf.len() < end {
            self.buf.resize(end, 0);
        }
        for (i, w) in words.iter().enumerate() {
            self.buf[addr + 4 * i..addr + 4 * i + 4].copy_from_slice(&w.to_le_bytes());
        }
    }

    fn put_bytes(&mut self, addr: usize, bytes: &[u8]) {
        if self.buf.len() < addr + bytes.len() {
            self.buf.resize(addr + bytes.len(), 0);
        }
        self.buf[addr..addr + bytes.len()].copy_from_slice(bytes);
    }
}

/// Bounds-checked little-endian reads.
pub fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(ImageError::Truncated { offset, need: 4, len: bytes.len() })
}

fn read_words(bytes: &[u8], offset: usize, n: usize) -> Result<Vec<u32>> {
    if offset + 4 * n > bytes.len() {
        return Err(ImageError::Truncated { offset, need: 4 * n, len: bytes.len() });
    }
    (0..n).map(|i| read_u32(bytes, offset + 4 * i)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalConfig {
    pub magic: u32,
    pub version: u32,
    pub num_layers: u32,
    pub scheduler_pe: u32,
    pub first_layer_addr: u32,
    pub timing_area_addr: u32,
    pub timing_area_len: u32,
    pub data_area_addr: u32,
    pub data_area_len: u32,
    pub num_pes: u32,
    /// Record slots per layer in the timing area (scheduler + enabled workers).
    pub timing_slots: u32,
    pub input_addr: u32,
    pub input_len: u32,
    pub output_addr: u32,
    pub output_len: u32,
    /// Length of the layer-configuration region.
    pub layer_cfg_len: u32,
    /// One word per PE: [`WORKER_ENABLED`] | encoded coordinate.
    pub worker_table: Vec<u32>,
}

impl GlobalConfig {
    pub fn byte_len(num_pes: usize) -> usize {
        align_up(4 * (GLOBAL_FIXED_WORDS + num_pes))
    }

    fn words(&self) -> Vec<u32> {
        let mut w = vec![
            self.magic,
            self.version,
            self.num_layers,
            self.scheduler_pe,
            self.first_layer_addr,
            self.timing_area_addr,
            self.timing_area_len,
            self.data_area_addr,
            self.data_area_len,
            self.num_pes,
            self.timing_slots,
            self.input_addr,
            self.input_len,
            self.output_addr,
            self.output_len,
            self.layer_cfg_len,
        ];
        w.extend(&self.worker_table);
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let magic = read_u32(bytes, 0)?;
        if magic != MAGIC {
            return Err(ImageError::BadMagic(magic));
        }
        let w = read_words(bytes, 0, GLOBAL_FIXED_WORDS)?;
        if w[1] != VERSION {
            return Err(ImageError::Version(w[1]));
        }
        let num_pes = w[9] as usize;
        let worker_table = read_words(bytes, 4 * GLOBAL_FIXED_WORDS, num_pes)?;
        Ok(Self {
            magic,
            version: w[1],
            num_layers: w[2],
            scheduler_pe: w[3],
            first_layer_addr: w[4],
            timing_area_addr: w[5],
            timing_area_len: w[6],
            data_area_addr: w[7],
            data_area_len: w[8],
            num_pes: w[9],
            timing_slots: w[10],
            input_addr: w[11],
            input_len: w[12],
            output_addr: w[13],
            output_len: w[14],
            layer_cfg_len: w[15],
            worker_table,
        })
    }

    pub fn enabled_workers(&self) -> impl Iterator<Item = PeCoord> + '_ {
        self.worker_table.iter().filter(|&&w| w & WORKER_ENABLED != 0).map(|&w| PeCoord::decode(w & !WORKER_ENABLED))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub layer_type: u32,
    pub num_workers: u32,
    pub next_layer_addr: u32,
    pub scheduler_cfg_addr: u32,
    pub worker_cfg_table_addr: u32,
    pub io_map_addr: u32,
    pub const_addr: u32,
    pub flags: u32,
}

pub const FLAG_RELU: u32 = 1;
pub const FLAG_PADDED: u32 = 2;
pub const FLAG_BIAS: u32 = 4;

impl LayerHeader {
    pub const FINISH: Self = Self {
        layer_type: LayerType::Finish as u32,
        num_workers: 0,
        next_layer_addr: 0,
        scheduler_cfg_addr: 0,
        worker_cfg_table_addr: 0,
        io_map_addr: 0,
        const_addr: 0,
        flags: 0,
    };

    fn words(&self) -> [u32; 8] {
        [
            self.layer_type,
            self.num_workers,
            self.next_layer_addr,
            self.scheduler_cfg_addr,
            self.worker_cfg_table_addr,
            self.io_map_addr,
            self.const_addr,
            self.flags,
        ]
    }

    pub fn decode(bytes: &[u8], addr: usize) -> Result<Self> {
        let w = read_words(bytes, addr, 8)?;
        Ok(Self {
            layer_type: w[0],
            num_workers: w[1],
            next_layer_addr: w[2],
            scheduler_cfg_addr: w[3],
            worker_cfg_table_addr: w[4],
            io_map_addr: w[5],
            const_addr: w[6],
            flags: w[7],
        })
    }

    pub fn kind(&self) -> Result<LayerType> {
        LayerType::from_word(self.layer_type)
    }

    pub fn is_finish(&self) -> bool {
        self.layer_type == LayerType::Finish as u32
    }
}

/// Scheduler-side view of a layer: which PEs to trigger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub layer_index: u32,
    pub workers: Vec<u32>,
}

impl SchedulerConfig {
    fn byte_len(n: usize) -> usize {
        align_up(4 * (2 + n))
    }

    fn words(&self) -> Vec<u32> {
        let mut w = vec![self.layer_index, self.workers.len() as u32];
        w.extend(&self.workers);
        w
    }

    pub fn decode(bytes: &[u8], addr: usize) -> Result<Self> {
        let head = read_words(bytes, addr, 2)?;
        Ok(Self { layer_index: head[0], workers: read_words(bytes, addr + 8, head[1] as usize)? })
    }
}

/// Layer-level input/output locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoMap {
    pub num_inputs: u32,
    pub input_addr: [u32; 2],
    pub input_len: [u32; 2],
    pub output_addr: u32,
    pub output_len: u32,
    pub padded_out: u32,
}

impl IoMap {
    fn words(&self) -> [u32; IO_MAP_WORDS] {
        [
            self.num_inputs,
            self.input_addr[0],
            self.input_len[0],
            self.input_addr[1],
            self.input_len[1],
            self.output_addr,
            self.output_len,
            self.padded_out,
        ]
    }

    pub fn decode(bytes: &[u8], addr: usize) -> Result<Self> {
        let w = read_words(bytes, addr, IO_MAP_WORDS)?;
        Ok(Self {
            num_inputs: w[0],
            input_addr: [w[1], w[3]],
            input_len: [w[2], w[4]],
            output_addr: w[5],
            output_len: w[6],
            padded_out: w[7],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRef {
    pub addr: u32,
    pub len: u32,
}

/// Everything one worker needs to execute its tile of a layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerConfigBlock {
    pub tile_out: u32,
    pub in_len: u32,
    pub input_addr: u32,
    pub output_addr: u32,
    /// Requantization right-shift (negative shifts left).
    pub shift: i32,
    pub relu: u32,
    /// int32 bias for Linear tiles, 0 when absent.
    pub bias_addr: u32,
    pub input2_addr: u32,
    pub align_a: u32,
    pub align_b: u32,
    pub in_exp: i32,
    pub out_exp: i32,
    /// Elements of this tile that map onto real (unpadded) outputs.
    pub valid_out: u32,
    pub tile_index: u32,
    pub chunks: Vec<ChunkRef>,
}

impl WorkerConfigBlock {
    pub fn byte_len(chunks: usize) -> usize {
        align_up(4 * (WORKER_CFG_FIXED_WORDS + 2 * chunks))
    }

    fn words(&self) -> Vec<u32> {
        let mut w = vec![
            self.tile_out,
            self.in_len,
            self.input_addr,
            self.output_addr,
            self.shift as u32,
            self.relu,
            self.bias_addr,
            self.chunks.len() as u32,
            self.input2_addr,
            self.align_a,
            self.align_b,
            self.in_exp as u32,
            self.out_exp as u32,
            self.valid_out,
            self.tile_index,
            0,
        ];
        for c in &self.chunks {
            w.extend([c.addr, c.len]);
        }
        w
    }

    pub fn decode(bytes: &[u8], addr: usize) -> Result<Self> {
        let w = read_words(bytes, addr, WORKER_CFG_FIXED_WORDS)?;
        let chunk_words = read_words(bytes, addr + 4 * WORKER_CFG_FIXED_WORDS, 2 * w[7] as usize)?;
        Ok(Self {
            tile_out: w[0],
            in_len: w[1],
            input_addr: w[2],
            output_addr: w[3],
            shift: w[4] as i32,
            relu: w[5],
            bias_addr: w[6],
            input2_addr: w[8],
            align_a: w[9],
            align_b: w[10],
            in_exp: w[11] as i32,
            out_exp: w[12] as i32,
            valid_out: w[13],
            tile_index: w[14],
            chunks: chunk_words.chunks_exact(2).map(|c| ChunkRef { addr: c[0], len: c[1] }).collect(),
        })
    }
}

/// A decoded layer configuration block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub header_addr: u32,
    pub header: LayerHeader,
    pub scheduler: SchedulerConfig,
    pub worker_cfg_addrs: Vec<u32>,
    pub io: IoMap,
    pub workers: Vec<WorkerConfigBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionKind {
    Global,
    Timing,
    LayerConfig,
    Data,
}

impl RegionKind {
    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Global => "global",
            RegionKind::Timing => "timing",
            RegionKind::LayerConfig => "layer-config",
            RegionKind::Data => "data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub kind: RegionKind,
    pub offset: u32,
    pub len: u32,
}

impl Region {
    pub fn end(&self) -> u32 {
        self.offset + self.len
    }

    pub fn contains(&self, addr: u32, len: u32) -> bool {
        addr >= self.offset && addr as u64 + len as u64 <= self.end() as u64
    }
}

/// Parsed (or freshly built) DRAM image together with its raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DramImage {
    pub global: GlobalConfig,
    pub regions: [Region; 4],
    pub layers: Vec<LayerConfig>,
    pub finish_addr: u32,
    bytes: Vec<u8>,
}

impl DramImage {
    pub fn total_len(&self) -> usize {
        self.bytes.len()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn region(&self, kind: RegionKind) -> Region {
        self.regions[kind as usize]
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.bytes.clone()
    }

    /// Decodes and checks an image: magic, region order, alignment, the layer
    /// chain and every address a PE would dereference.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let global = GlobalConfig::decode(bytes)?;
        let glen = GlobalConfig::byte_len(global.num_pes as usize) as u32;
        let layer_start = global.timing_area_addr + global.timing_area_len;
        let regions = [
            Region { kind: RegionKind::Global, offset: 0, len: glen },
            Region { kind: RegionKind::Timing, offset: global.timing_area_addr, len: global.timing_area_len },
            Region { kind: RegionKind::LayerConfig, offset: layer_start, len: global.layer_cfg_len },
            Region { kind: RegionKind::Data, offset: global.data_area_addr, len: global.data_area_len },
        ];
        for (what, addr) in [
            ("timing area", global.timing_area_addr),
            ("first layer", global.first_layer_addr),
            ("data area", global.data_area_addr),
            ("graph input", global.input_addr),
            ("graph output", global.output_addr),
        ] {
            check_align(what, addr)?;
        }
        if global.timing_area_addr != glen
            || global.first_layer_addr != layer_start
            || global.data_area_addr != layer_start + global.layer_cfg_len
        {
            return Err(ImageError::Chain("regions are not contiguous in global → timing → layers → data order".into()));
        }
        let end = regions[3].end() as usize;
        if bytes.len() < end {
            return Err(ImageError::Truncated { offset: bytes.len(), need: end - bytes.len(), len: bytes.len() });
        }
        let data = regions[3];
        for (what, addr, len) in
            [("graph input", global.input_addr, global.input_len), ("graph output", global.output_addr, global.output_len)]
        {
            if !data.contains(addr, len) {
                return Err(ImageError::OutOfRegion { what, addr, region: "data" });
            }
        }

        let cfg = regions[2];
        let mut layers = Vec::new();
        let mut addr = global.first_layer_addr;
        let finish_addr = loop {
            check_align("layer header", addr)?;
            if !cfg.contains(addr, HEADER_BYTES as u32) {
                return Err(ImageError::OutOfRegion { what: "layer header", addr, region: "layer-config" });
            }
            let header = LayerHeader::decode(bytes, addr as usize)?;
            if header.is_finish() {
                break addr;
            }
            if layers.len() as u32 >= global.num_layers {
                return Err(ImageError::Chain(format!("more than {} layers before the Finish sentinel", global.num_layers)));
            }
            let layer = parse_layer(bytes, addr, header, &regions)?;
            if layer.header.next_layer_addr <= addr {
                return Err(ImageError::Chain(format!("layer at {addr:#x} points backwards")));
            }
            addr = layer.header.next_layer_addr;
            layers.push(layer);
        };
        if layers.len() as u32 != global.num_layers {
            return Err(ImageError::Chain(format!("found {} layers, global config says {}", layers.len(), global.num_layers)));
        }
        Ok(Self { global, regions, layers, finish_addr, bytes: bytes.to_vec() })
    }

    /// Addresses of every header in chain order, Finish sentinel last.
    pub fn header_chain(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.header_addr).chain([self.finish_addr]).collect()
    }
}

fn check_align(what: &'static str, addr: u32) -> Result<()> {
    if addr as usize % ALIGN != 0 {
        return Err(ImageError::Misaligned { what, addr });
    }
    Ok(())
}

fn parse_layer(bytes: &[u8], addr: u32, header: LayerHeader, regions: &[Region; 4]) -> Result<LayerConfig> {
    let kind = header.kind()?;
    let cfg = regions[2];
    let data = regions[3];
    for (what, a) in [
        ("scheduler config", header.scheduler_cfg_addr),
        ("worker config table", header.worker_cfg_table_addr),
        ("io map", header.io_map_addr),
        ("layer constants", header.const_addr),
    ] {
        check_align(what, a)?;
        if !cfg.contains(a, 0) {
            return Err(ImageError::OutOfRegion { what, addr: a, region: "layer-config" });
        }
    }
    let n = header.num_workers as usize;
    let scheduler = SchedulerConfig::decode(bytes, header.scheduler_cfg_addr as usize)?;
    if scheduler.workers.len() != n {
        return Err(ImageError::Chain(format!("layer at {addr:#x}: header lists {n} workers, scheduler config {}", scheduler.workers.len())));
    }
    let worker_cfg_addrs = read_words(bytes, header.worker_cfg_table_addr as usize, n)?;
    let io = IoMap::decode(bytes, header.io_map_addr as usize)?;
    let mut workers = Vec::with_capacity(n);
    for &wa in &worker_cfg_addrs {
        check_align("worker config", wa)?;
        if !cfg.contains(wa, (4 * WORKER_CFG_FIXED_WORDS) as u32) {
            return Err(ImageError::OutOfRegion { what: "worker config", addr: wa, region: "layer-config" });
        }
        let w = WorkerConfigBlock::decode(bytes, wa as usize)?;
        let in_bytes = w.in_len;
        check_align("tile input", w.input_addr)?;
        check_align("tile output", w.output_addr)?;
        if !data.contains(w.input_addr, in_bytes) {
            return Err(ImageError::OutOfRegion { what: "tile input", addr: w.input_addr, region: "data" });
        }
        if !data.contains(w.output_addr, w.tile_out) {
            return Err(ImageError::OutOfRegion { what: "tile output", addr: w.output_addr, region: "data" });
        }
        if kind == LayerType::Add && !data.contains(w.input2_addr, in_bytes) {
            return Err(ImageError::OutOfRegion { what: "second tile input", addr: w.input2_addr, region: "data" });
        }
        if w.bias_addr != 0 {
            check_align("bias", w.bias_addr)?;
            if !cfg.contains(w.bias_addr, 4 * w.tile_out) {
                return Err(ImageError::OutOfRegion { what: "bias", addr: w.bias_addr, region: "layer-config" });
            }
        }
        for c in &w.chunks {
            check_align("weight chunk", c.addr)?;
            if !cfg.contains(c.addr, c.len) {
                return Err(ImageError::OutOfRegion { what: "weight chunk", addr: c.addr, region: "layer-config" });
            }
        }
        if kind.is_linear() {
            let total: u64 = w.chunks.iter().map(|c| c.len as u64).sum();
            if total != w.tile_out as u64 * w.in_len as u64 {
                return Err(ImageError::Chain(format!("worker config at {wa:#x}: chunks cover {total} bytes, tile needs {}", w.tile_out as u64 * w.in_len as u64)));
            }
        }
        workers.push(w);
    }
    Ok(LayerConfig { header_addr: addr, header, scheduler, worker_cfg_addrs, io, workers })
}

/// Where a named object lives in the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub addr: u32,
    pub len: u32,
    pub region: RegionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub absolute: u32,
    pub region: RegionKind,
    pub region_offset: u32,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorPort {
    pub tensor: String,
    pub addr: u32,
    pub len: u32,
    pub exp: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: u32,
    pub node_id: u32,
    pub name: String,
    pub kind: NodeKind,
    pub header_addr: u32,
    pub workers: u32,
    pub input_len: u32,
    pub output_len: u32,
}

/// Human-readable sidecar: tensor and layer names mapped to addresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub format: String,
    pub version: u32,
    pub image_len: u64,
    pub regions: Vec<Region>,
    pub input: TensorPort,
    pub output: TensorPort,
    pub layers: Vec<LayerEntry>,
    pub symbols: BTreeMap<String, Symbol>,
}

impl ImageManifest {
    /// Resolves `graph_input`, `graph_output`, `layer:<i>`, `finish`, a
    /// region name or any tensor name.
    pub fn locate(&self, query: &str) -> Result<Location> {
        let sym = self.symbols.get(query).ok_or_else(|| ImageError::UnknownSymbol(query.to_string()))?;
        let region = self.regions.iter().find(|r| r.kind == sym.region).expect("region table complete");
        Ok(Location { absolute: sym.addr, region: sym.region, region_offset: sym.addr - region.offset, len: sym.len })
    }
}

/// Display names in the style `FC1+ReLU`, `FC3`, `Softmax`, `Add1`.
pub fn layer_names(kinds: &[LayerType]) -> Vec<String> {
    let (mut fc, mut add) = (0, 0);
    kinds
        .iter()
        .map(|k| match k {
            LayerType::Linear => {
                fc += 1;
                format!("FC{fc}")
            }
            LayerType::LinearRelu => {
                fc += 1;
                format!("FC{fc}+ReLU")
            }
            LayerType::Add => {
                add += 1;
                format!("Add{add}")
            }
            LayerType::Softmax => "Softmax".to_string(),
            LayerType::Finish => "Finish".to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledImage {
    pub image: DramImage,
    pub manifest: ImageManifest,
}

/// Bytes one worker's weight slice occupies: its chunks, each padded to the
/// DMA alignment.
fn slice_stride(p: &TilePlan) -> usize {
    p.weight_chunks.iter().map(|c| align_up(c.len)).sum()
}

fn chunk_addr(weights: usize, p: &TilePlan, worker: usize, chunk: usize) -> usize {
    weights + worker * slice_stride(p) + p.weight_chunks[..chunk].iter().map(|c| align_up(c.len)).sum::<usize>()
}

struct LayerLayout {
    header: usize,
    sched: usize,
    table: usize,
    io: usize,
    workers: Vec<usize>,
    weights: usize,
    bias: Option<usize>,
    end: usize,
}

/// Assembles the DRAM image for a quantized, fused and linearized graph.
///
/// `order` is the execution order (one entry per plan). Each activation
/// tensor gets its own buffer in the data region; buffers are zero-filled
/// and sized to the largest padded extent any layer touches.
pub fn build_image(
    qgraph: &ApplicationGraph,
    order: &[Node],
    plans: &[TilePlan],
    mapping: &Mapping,
    chip: &ChipDescriptor,
) -> Result<CompiledImage> {
    for n in order {
        if !plans.iter().any(|p| p.layer_id == n.id) {
            return Err(ImageError::Unplanned(n.id));
        }
    }
    if plans.len() != order.len() || mapping.worker_pes.len() != plans.len() {
        return Err(ImageError::Chain("plans, mapping and node order disagree in length".into()));
    }
    let (in_name, out_name) = match (qgraph.graph_inputs.as_slice(), qgraph.graph_outputs.as_slice()) {
        ([i], [o]) => (i.as_str(), o.as_str()),
        _ => return Err(ImageError::Chain("graph needs exactly one input and one output".into())),
    };
    let kinds: Vec<LayerType> = order
        .iter()
        .map(|n| LayerType::of(n.kind).ok_or(ImageError::Layer { node: n.id, msg: format!("unsupported layer {}", n.kind) }))
        .collect::<Result<_>>()?;

    // Activation buffer sizes.
    let mut buf_len: BTreeMap<String, usize> = BTreeMap::new();
    let mut buf_order: Vec<String> = Vec::new();
    let mut touch = |name: &str, len: usize| -> Result<()> {
        qgraph.tensor(name)?;
        if !buf_len.contains_key(name) {
            buf_order.push(name.to_string());
        }
        let e = buf_len.entry(name.to_string()).or_insert(0);
        *e = (*e).max(len);
        Ok(())
    };
    touch(in_name, qgraph.tensor(in_name)?.numel())?;
    for (n, p) in order.iter().zip(plans) {
        for i in &n.inputs {
            let need = if n.kind == NodeKind::Add { p.padded_out } else { qgraph.tensor(i)?.numel() };
            touch(i, need)?;
        }
        touch(n.output(), p.padded_out.max(qgraph.tensor(n.output())?.numel()))?;
    }
    touch(out_name, qgraph.tensor(out_name)?.numel())?;
    for t in &buf_order {
        let spec = qgraph.tensor(t)?;
        if spec.dtype != DType::I8 || spec.scale_exp.is_none() {
            return Err(ImageError::Layer { node: u32::MAX, msg: format!("activation `{t}` is not quantized int8") });
        }
    }

    // Region layout.
    let enabled = mapping.enabled_workers.len();
    let slots = 1 + enabled;
    let glen = GlobalConfig::byte_len(chip.num_pes);
    let timing_addr = glen;
    let timing_len = align_up((order.len() * slots + 1) * TIMING_RECORD_BYTES);
    let cfg_start = timing_addr + timing_len;

    let mut cursor = cfg_start;
    let mut layouts = Vec::with_capacity(plans.len());
    for (n, p) in order.iter().zip(plans) {
        let header = cursor;
        let sched = header + HEADER_BYTES;
        let table = sched + SchedulerConfig::byte_len(p.num_workers);
        let io = table + align_up(4 * p.num_workers);
        let mut c = io + align_up(4 * IO_MAP_WORDS);
        let workers: Vec<usize> = (0..p.num_workers)
            .map(|_| {
                let a = c;
                c += WorkerConfigBlock::byte_len(p.weight_chunks.len());
                a
            })
            .collect();
        let weights = c;
        if n.kind.is_linear() {
            c += p.num_workers * slice_stride(p);
        }
        let bias = (n.kind.is_linear() && n.bias.is_some()).then(|| {
            let b = c;
            c += align_up(4 * p.padded_out);
            b
        });
        layouts.push(LayerLayout { header, sched, table, io, workers, weights, bias, end: c });
        cursor = c;
    }
    let finish_addr = cursor;
    let cfg_len = finish_addr + HEADER_BYTES - cfg_start;
    let data_addr = cfg_start + cfg_len;
    let mut buf_addr: BTreeMap<&str, usize> = BTreeMap::new();
    let buf_len = buf_len;
    let mut d = data_addr;
    for t in &buf_order {
        buf_addr.insert(t.as_str(), d);
        d += align_up(buf_len[t]);
    }
    let data_len = d - data_addr;
    let total = d as u64;
    if total > chip.dram_bytes {
        return Err(ImageError::TooLarge { size: total, capacity: chip.dram_bytes });
    }
    if total > u32::MAX as u64 {
        return Err(ImageError::TooLarge { size: total, capacity: u32::MAX as u64 });
    }

    let mut w = Writer::default();
    w.buf.resize(total as usize, 0);

    let worker_table: Vec<u32> = chip
        .pe_grid
        .iter()
        .map(|&c| if mapping.enabled_workers.contains(&c) { WORKER_ENABLED | c.encode() } else { c.encode() })
        .collect();
    let in_len = qgraph.tensor(in_name)?.numel();
    let out_len = qgraph.tensor(out_name)?.numel();
    let global = GlobalConfig {
        magic: MAGIC,
        version: VERSION,
        num_layers: order.len() as u32,
        scheduler_pe: mapping.scheduler_pe.encode(),
        first_layer_addr: cfg_start as u32,
        timing_area_addr: timing_addr as u32,
        timing_area_len: timing_len as u32,
        data_area_addr: data_addr as u32,
        data_area_len: data_len as u32,
        num_pes: chip.num_pes as u32,
        timing_slots: slots as u32,
        input_addr: buf_addr[in_name] as u32,
        input_len: in_len as u32,
        output_addr: buf_addr[out_name] as u32,
        output_len: out_len as u32,
        layer_cfg_len: cfg_len as u32,
        worker_table,
    };
    w.put(0, &global.words());

    let mut layers = Vec::with_capacity(order.len());
    let mut symbols: BTreeMap<String, Symbol> = BTreeMap::new();
    let names = layer_names(&kinds);
    let mut entries = Vec::new();
    for (li, ((n, p), lay)) in order.iter().zip(plans).zip(&layouts).enumerate() {
        let kind = kinds[li];
        let next = layouts.get(li + 1).map(|l| l.header).unwrap_or(finish_addr);
        let out_spec = qgraph.tensor(n.output())?;
        let out_exp = out_spec.scale_exp.unwrap();
        let in_exps: Vec<i32> = n.inputs.iter().map(|i| qgraph.tensor(i).map(|t| t.scale_exp.unwrap())).collect::<Result<_, _>>()?;
        if n.in_exps != in_exps || n.out_exp != out_exp {
            return Err(ImageError::Layer { node: n.id, msg: "node exponents disagree with its tensors".into() });
        }

        let mut flags = 0;
        if kind == LayerType::LinearRelu {
            flags |= FLAG_RELU;
        }
        if p.padded_out != p.real_out {
            flags |= FLAG_PADDED;
        }
        if lay.bias.is_some() {
            flags |= FLAG_BIAS;
        }
        let header = LayerHeader {
            layer_type: kind as u32,
            num_workers: p.num_workers as u32,
            next_layer_addr: next as u32,
            scheduler_cfg_addr: lay.sched as u32,
            worker_cfg_table_addr: lay.table as u32,
            io_map_addr: lay.io as u32,
            const_addr: lay.weights as u32,
            flags,
        };
        w.put(lay.header, &header.words());

        let scheduler = SchedulerConfig {
            layer_index: li as u32,
            workers: mapping.worker_pes[li].iter().map(|c| c.encode()).collect(),
        };
        w.put(lay.sched, &scheduler.words());
        let worker_cfg_addrs: Vec<u32> = lay.workers.iter().map(|&a| a as u32).collect();
        w.put(lay.table, &worker_cfg_addrs);

        let in0 = buf_addr[n.inputs[0].as_str()];
        let in1 = n.inputs.get(1).map(|i| buf_addr[i.as_str()]).unwrap_or(0);
        let out = buf_addr[n.output()];
        let io = IoMap {
            num_inputs: n.inputs.len() as u32,
            input_addr: [in0 as u32, in1 as u32],
            input_len: [
                qgraph.tensor(&n.inputs[0])?.numel() as u32,
                n.inputs.get(1).map(|i| qgraph.tensor(i).map(|t| t.numel() as u32)).transpose()?.unwrap_or(0),
            ],
            output_addr: out as u32,
            output_len: p.real_out as u32,
            padded_out: p.padded_out as u32,
        };
        w.put(lay.io, &io.words());

        // Constants: zero-padded weight rows (row-major = tile-major) and bias.
        let (shift, relu) = match kind {
            LayerType::Linear | LayerType::LinearRelu => {
                let wname = n.weight.as_deref().unwrap();
                let wspec = qgraph.tensor(wname)?;
                let wq = qgraph.constant(wname)?;
                if wspec.dtype != DType::I8 || wspec.shape != [p.real_out, p.in_len] {
                    return Err(ImageError::Layer { node: n.id, msg: format!("weight `{wname}` must be int8 {}x{}", p.real_out, p.in_len) });
                }
                // Chunk by chunk, each at an aligned address; rows past real_out stay zero.
                for k in 0..p.num_workers {
                    for (ci, ch) in p.weight_chunks.iter().enumerate() {
                        let src = (k * p.tile_out * p.in_len + ch.offset).min(wq.len());
                        let end = (src + ch.len).min(wq.len());
                        w.put_bytes(chunk_addr(lay.weights, p, k, ci), &wq[src..end]);
                    }
                }
                let w_exp = wspec.scale_exp.unwrap();
                if let (Some(b_at), Some(bname)) = (lay.bias, n.bias.as_deref()) {
                    w.put_bytes(b_at, qgraph.constant(bname)?);
                    symbols.insert(bname.to_string(), Symbol { addr: b_at as u32, len: (4 * p.real_out) as u32, region: RegionKind::LayerConfig });
                }
                let wlen = p.num_workers * slice_stride(p);
                symbols.insert(wname.to_string(), Symbol { addr: lay.weights as u32, len: wlen as u32, region: RegionKind::LayerConfig });
                let spec = QuantKernelSpec { in_exp: in_exps[0], w_exp, out_exp, relu: kind == LayerType::LinearRelu };
                let shift = spec.shift().ok_or(ImageError::Layer { node: n.id, msg: "shift out of range".into() })?;
                (shift, spec.relu as u32)
            }
            LayerType::Add => (add_params(in_exps[0], in_exps[1], out_exp).2, 0),
            _ => (0, 0),
        };
        let (align_a, align_b) = match kind {
            LayerType::Add => {
                let (a, b, _) = add_params(in_exps[0], in_exps[1], out_exp);
                (a, b)
            }
            _ => (0, 0),
        };

        let mut workers = Vec::with_capacity(p.num_workers);
        for (k, &wa) in lay.workers.iter().enumerate() {
            let start = k * p.tile_out;
            let (input_addr, input2_addr, chunks, bias_addr) = match kind {
                LayerType::Linear | LayerType::LinearRelu => {
                    let chunks = p
                        .weight_chunks
                        .iter()
                        .enumerate()
                        .map(|(ci, c)| ChunkRef { addr: chunk_addr(lay.weights, p, k, ci) as u32, len: c.len as u32 })
                        .collect();
                    (in0, 0, chunks, lay.bias.map(|b| b + 4 * start).unwrap_or(0))
                }
                LayerType::Add => (in0 + start, in1 + start, Vec::new(), 0),
                _ => (in0, 0, Vec::new(), 0),
            };
            let block = WorkerConfigBlock {
                tile_out: p.tile_out as u32,
                in_len: p.in_len as u32,
                input_addr: input_addr as u32,
                output_addr: (out + start) as u32,
                shift,
                relu,
                bias_addr: bias_addr as u32,
                input2_addr: input2_addr as u32,
                align_a,
                align_b,
                in_exp: in_exps[0],
                out_exp,
                valid_out: p.real_out.saturating_sub(start).min(p.tile_out) as u32,
                tile_index: k as u32,
                chunks,
            };
            w.put(wa, &block.words());
            workers.push(block);
        }

        symbols.insert(format!("layer:{li}"), Symbol { addr: lay.header as u32, len: (lay.end - lay.header) as u32, region: RegionKind::LayerConfig });
        entries.push(LayerEntry {
            index: li as u32,
            node_id: n.id,
            name: names[li].clone(),
            kind: n.kind,
            header_addr: lay.header as u32,
            workers: p.num_workers as u32,
            input_len: io.input_len[0],
            output_len: p.real_out as u32,
        });
        layers.push(LayerConfig { header_addr: lay.header as u32, header, scheduler, worker_cfg_addrs, io, workers });
    }
    w.put(finish_addr, &LayerHeader::FINISH.words());

    let regions = [
        Region { kind: RegionKind::Global, offset: 0, len: glen as u32 },
        Region { kind: RegionKind::Timing, offset: timing_addr as u32, len: timing_len as u32 },
        Region { kind: RegionKind::LayerConfig, offset: cfg_start as u32, len: cfg_len as u32 },
        Region { kind: RegionKind::Data, offset: data_addr as u32, len: data_len as u32 },
    ];
    for t in &buf_order {
        let len = qgraph.tensor(t)?.numel() as u32;
        symbols.insert(t.clone(), Symbol { addr: buf_addr[t.as_str()] as u32, len, region: RegionKind::Data });
    }
    symbols.insert("graph_input".into(), Symbol { addr: global.input_addr, len: global.input_len, region: RegionKind::Data });
    symbols.insert("graph_output".into(), Symbol { addr: global.output_addr, len: global.output_len, region: RegionKind::Data });
    symbols.insert("finish".into(), Symbol { addr: finish_addr as u32, len: HEADER_BYTES as u32, region: RegionKind::LayerConfig });
    for r in &regions {
        symbols.insert(format!("region:{}", r.kind.name()), Symbol { addr: r.offset, len: r.len, region: r.kind });
    }

    let port = |name: &str, addr: u32, len: u32| -> Result<TensorPort> {
        Ok(TensorPort { tensor: name.to_string(), addr, len, exp: qgraph.tensor(name)?.scale_exp.unwrap() })
    };
    let manifest = ImageManifest {
        format: "neuroflow-image-manifest".into(),
        version: VERSION,
        image_len: total,
        regions: regions.to_vec(),
        input: port(in_name, global.input_addr, global.input_len)?,
        output: port(out_name, global.output_addr, global.output_len)?,
        layers: entries,
        symbols,
    };
    let image = DramImage { global, regions, layers, finish_addr: finish_addr as u32, bytes: w.buf };
    Ok(CompiledImage { image, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_type_words() {
        for t in [LayerType::Linear, LayerType::LinearRelu, LayerType::Add, LayerType::Softmax, LayerType::Finish] {
            assert_eq!(LayerType::from_word(t as u32).unwrap(), t);
        }
        assert!(LayerType::from_word(9).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = vec![0u8; 1024];
        assert!(matches!(DramImage::parse(&bytes), Err(ImageError::BadMagic(0))));
    }

    #[test]
    fn names_follow_table_style() {
        let names = layer_names(&[LayerType::LinearRelu, LayerType::LinearRelu, LayerType::Linear, LayerType::Softmax]);
        assert_eq!(names, ["FC1+ReLU", "FC2+ReLU", "FC3", "Softmax"]);
    }

    #[test]
    fn global_config_size_is_aligned() {
        assert_eq!(GlobalConfig::byte_len(152), 672);
        assert_eq!(GlobalConfig::byte_len(2) % ALIGN, 0);
    }
}
