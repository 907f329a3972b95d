//! Layer tiling under PE-local SRAM limits and PE assignment.
//!
//! Every layer is cut along its output dimension into equally sized tiles,
//! one per worker PE. Linear weight slices that do not fit next to the
//! input and accumulators are streamed in equal, double-buffered chunks.

use serde::{Deserialize, Serialize};

use crate::graph_ir::{ApplicationGraph, GraphError, Node, NodeKind};

/// Output tiles of linear layers are multiples of this many elements.
pub const TILE_QUANTUM: usize = 16;
pub const DEFAULT_TILE_TARGET: usize = 64;
/// Fixed SRAM reserved on a worker for its layer configuration.
pub const LAYER_CONFIG_BYTES: usize = 256;
/// Cores per quad-PE cluster.
pub const PES_PER_QPE: usize = 4;
const QPE_GRID_WIDTH: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("layer {layer}: insufficient PEs ({needed} workers needed, {available} available)")]
    InsufficientPes { layer: u32, needed: usize, available: usize },
    #[error("layer {layer}: does not fit in {budget} bytes of SRAM ({detail})")]
    SramExceeded { layer: u32, budget: usize, detail: String },
    #[error("layer {layer}: unsupported layer kind {kind}")]
    Unsupported { layer: u32, kind: NodeKind },
    #[error("invalid chip descriptor: {0}")]
    Chip(String),
    #[error("tile target {0} must be a positive multiple of {TILE_QUANTUM}")]
    TileTarget(usize),
    #[error("layer {layer}: {msg}")]
    Shape { layer: u32, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = PlanError> = std::result::Result<T, E>;

/// Position of a PE: quad-PE cluster column/row plus core index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PeCoord {
    pub x: u8,
    pub y: u8,
    pub core: u8,
}

impl PeCoord {
    pub fn encode(self) -> u32 {
        (self.x as u32) << 16 | (self.y as u32) << 8 | self.core as u32
    }

    pub fn decode(word: u32) -> Self {
        Self { x: (word >> 16) as u8, y: (word >> 8) as u8, core: word as u8 }
    }
}

impl std::fmt::Display for PeCoord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})/{}", self.x, self.y, self.core)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipDescriptor {
    pub num_pes: usize,
    pub sram_bytes_per_pe: usize,
    /// SRAM left for data once code and stack are resident.
    pub usable_sram_bytes: usize,
    pub dram_bytes: u64,
    pub pe_grid: Vec<PeCoord>,
}

impl Default for ChipDescriptor {
    fn default() -> Self {
        Self::with_pes(152)
    }
}

impl ChipDescriptor {
    /// 128 KiB SRAM per PE (96 KiB usable), 2 GiB DRAM, `num_pes` cores laid
    /// out four per cluster on an eight-cluster-wide grid.
    pub fn with_pes(num_pes: usize) -> Self {
        let pe_grid = (0..num_pes)
            .map(|i| {
                let qpe = i / PES_PER_QPE;
                PeCoord {
                    x: (qpe % QPE_GRID_WIDTH) as u8,
                    y: (qpe / QPE_GRID_WIDTH) as u8,
                    core: (i % PES_PER_QPE) as u8,
                }
            })
            .collect();
        Self {
            num_pes,
            sram_bytes_per_pe: 128 * 1024,
            usable_sram_bytes: 96 * 1024,
            dram_bytes: 2 << 30,
            pe_grid,
        }
    }

    pub fn with_sram_budget(mut self, usable: usize) -> Self {
        self.usable_sram_bytes = usable;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.num_pes < 2 {
            return Err(PlanError::Chip(format!("need at least 2 PEs, have {}", self.num_pes)));
        }
        if self.usable_sram_bytes >= self.sram_bytes_per_pe {
            return Err(PlanError::Chip(format!(
                "usable SRAM {} must stay below the {} byte total",
                self.usable_sram_bytes, self.sram_bytes_per_pe
            )));
        }
        if self.pe_grid.len() != self.num_pes {
            return Err(PlanError::Chip(format!("grid lists {} PEs, expected {}", self.pe_grid.len(), self.num_pes)));
        }
        Ok(())
    }

    pub fn available_workers(&self) -> usize {
        self.num_pes - 1
    }

    pub fn index_of(&self, coord: PeCoord) -> Option<usize> {
        self.pe_grid.iter().position(|&c| c == coord)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Preferred output elements per worker for linear layers.
    pub tile_target: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { tile_target: DEFAULT_TILE_TARGET }
    }
}

/// One DMA transfer of a worker's weight slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightChunk {
    /// Byte offset from the start of the worker's weight slice.
    pub offset: usize,
    pub len: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub layer_id: u32,
    pub kind: NodeKind,
    pub num_workers: usize,
    /// Output elements computed by each worker.
    pub tile_out: usize,
    pub padded_out: usize,
    /// Unpadded output length of the layer.
    pub real_out: usize,
    /// Input elements each worker reads (per operand for Add).
    pub in_len: usize,
    /// Output elements each worker writes.
    pub out_len: usize,
    pub weight_chunks: Vec<WeightChunk>,
    pub footprint: usize,
}

impl TilePlan {
    pub fn max_chunk_bytes(&self) -> usize {
        self.weight_chunks.iter().map(|c| c.len).max().unwrap_or(0)
    }

    pub fn weight_slice_bytes(&self) -> usize {
        self.weight_chunks.iter().map(|c| c.len).sum()
    }
}

/// Input/output element counts of a layer as seen by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_len: usize,
    pub out_len: usize,
}

impl LayerShape {
    pub fn of(graph: &ApplicationGraph, node: &Node) -> Result<Self> {
        let in_len = graph.tensor(node.input())?.numel();
        let out_len = graph.tensor(node.output())?.numel();
        if in_len == 0 || out_len == 0 {
            return Err(PlanError::Shape { layer: node.id, msg: "zero-sized tensor".into() });
        }
        Ok(Self { in_len, out_len })
    }
}

/// Peak SRAM use of one worker: input, int32 accumulators, two weight
/// buffers and the layer configuration.
pub fn sram_footprint(plan: &TilePlan) -> usize {
    plan.in_len * if plan.kind == NodeKind::Add { 2 } else { 1 }
        + plan.out_len * 4
        + 2 * plan.max_chunk_bytes()
        + LAYER_CONFIG_BYTES
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Equal row-aligned chunks of a `rows × in_len` weight slice, each at most
/// `limit` bytes. The image builder gives every chunk an aligned address.
fn chunk_slice(rows: usize, in_len: usize, limit: usize) -> Option<Vec<WeightChunk>> {
    (1..=rows).filter(|n| rows % n == 0).find_map(|n| {
        let per = rows / n;
        let len = per * in_len;
        (len <= limit).then(|| {
            (0..n).map(|i| WeightChunk { offset: i * len, len, rows: per }).collect()
        })
    })
}

/// Chooses worker count, tile size and weight-chunk schedule for one layer.
pub fn plan_layer(node: &Node, shape: LayerShape, chip: &ChipDescriptor, opts: &PlanOptions) -> Result<TilePlan> {
    if opts.tile_target == 0 || opts.tile_target % TILE_QUANTUM != 0 {
        return Err(PlanError::TileTarget(opts.tile_target));
    }
    let budget = chip.usable_sram_bytes;
    let available = chip.available_workers();
    let plan = match node.kind {
        NodeKind::Linear | NodeKind::LinearRelu => plan_linear(node, shape, budget, opts)?,
        NodeKind::Add => plan_elementwise(node, shape, budget, 2 + 4)?,
        NodeKind::Softmax => {
            let n = shape.out_len;
            let mut plan = single_worker(node, shape);
            plan.footprint = sram_footprint(&plan);
            if plan.footprint > budget {
                return Err(PlanError::SramExceeded {
                    layer: node.id,
                    budget,
                    detail: format!("softmax over {n} elements needs {} bytes", plan.footprint),
                });
            }
            plan
        }
        kind => return Err(PlanError::Unsupported { layer: node.id, kind }),
    };
    if plan.num_workers > available {
        return Err(PlanError::InsufficientPes { layer: node.id, needed: plan.num_workers, available });
    }
    debug_assert!(plan.footprint <= budget);
    Ok(plan)
}

fn single_worker(node: &Node, shape: LayerShape) -> TilePlan {
    TilePlan {
        layer_id: node.id,
        kind: node.kind,
        num_workers: 1,
        tile_out: shape.out_len,
        padded_out: shape.out_len,
        real_out: shape.out_len,
        in_len: shape.in_len,
        out_len: shape.out_len,
        weight_chunks: Vec::new(),
        footprint: 0,
    }
}

fn plan_linear(node: &Node, shape: LayerShape, budget: usize, opts: &PlanOptions) -> Result<TilePlan> {
    let units = div_ceil(shape.out_len, TILE_QUANTUM);
    let target_units = (opts.tile_target / TILE_QUANTUM).min(units);
    for tile_units in (1..=target_units).rev() {
        let workers = div_ceil(units, tile_units);
        let tile_out = div_ceil(units, workers) * TILE_QUANTUM;
        let fixed = shape.in_len + tile_out * 4 + LAYER_CONFIG_BYTES;
        let Some(remaining) = budget.checked_sub(fixed) else { continue };
        let Some(weight_chunks) = chunk_slice(tile_out, shape.in_len, remaining / 2) else { continue };
        let mut plan = TilePlan {
            layer_id: node.id,
            kind: node.kind,
            num_workers: workers,
            tile_out,
            padded_out: workers * tile_out,
            real_out: shape.out_len,
            in_len: shape.in_len,
            out_len: tile_out,
            weight_chunks,
            footprint: 0,
        };
        plan.footprint = sram_footprint(&plan);
        return Ok(plan);
    }
    Err(PlanError::SramExceeded {
        layer: node.id,
        budget,
        detail: format!("a single {}-byte weight row cannot be double buffered even at {TILE_QUANTUM}-output tiles", shape.in_len),
    })
}

/// Elementwise layers stay on one worker unless their buffers exceed the
/// budget; then they split into equal 16-aligned tiles.
fn plan_elementwise(node: &Node, shape: LayerShape, budget: usize, bytes_per_elem: usize) -> Result<TilePlan> {
    let n = shape.out_len;
    let avail = budget.saturating_sub(LAYER_CONFIG_BYTES);
    let mut plan = single_worker(node, shape);
    if n * bytes_per_elem > avail {
        let max_units = avail / (bytes_per_elem * TILE_QUANTUM);
        if max_units == 0 {
            return Err(PlanError::SramExceeded { layer: node.id, budget, detail: "no room for a 16-element tile".into() });
        }
        let units = div_ceil(n, TILE_QUANTUM);
        let workers = div_ceil(units, max_units);
        let tile = div_ceil(units, workers) * TILE_QUANTUM;
        plan.num_workers = workers;
        plan.tile_out = tile;
        plan.out_len = tile;
        plan.in_len = tile;
        plan.padded_out = workers * tile;
    }
    plan.footprint = sram_footprint(&plan);
    Ok(plan)
}

/// Plans every node of a topologically ordered chain.
pub fn plan_model(
    graph: &ApplicationGraph,
    order: &[Node],
    chip: &ChipDescriptor,
    opts: &PlanOptions,
) -> Result<Vec<TilePlan>> {
    chip.check()?;
    order.iter().map(|n| plan_layer(n, LayerShape::of(graph, n)?, chip, opts)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mapping {
    pub scheduler_pe: PeCoord,
    /// Worker coordinates per layer, in tile order.
    pub worker_pes: Vec<Vec<PeCoord>>,
    /// PEs switched on in the global worker table.
    pub enabled_workers: Vec<PeCoord>,
}

/// Scheduler on grid position 0; worker `k` of every layer on position `k+1`.
pub fn map_model(plans: &[TilePlan], chip: &ChipDescriptor) -> Result<Mapping> {
    map_model_with(plans, chip, false)
}

/// Like [`map_model`], optionally enabling every PE of the chip as a worker
/// even when no layer uses it.
pub fn map_model_with(plans: &[TilePlan], chip: &ChipDescriptor, enable_all: bool) -> Result<Mapping> {
    chip.check()?;
    let available = chip.available_workers();
    if let Some(p) = plans.iter().find(|p| p.num_workers > available) {
        return Err(PlanError::InsufficientPes { layer: p.layer_id, needed: p.num_workers, available });
    }
    let grid = &chip.pe_grid;
    let max_workers = plans.iter().map(|p| p.num_workers).max().unwrap_or(0);
    let enabled = if enable_all { available } else { max_workers };
    Ok(Mapping {
        scheduler_pe: grid[0],
        worker_pes: plans.iter().map(|p| grid[1..=p.num_workers].to_vec()).collect(),
        enabled_workers: grid[1..=enabled].to_vec(),
    })
}

/// Per-layer summary written next to a compiled image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub tile_target: usize,
    pub usable_sram_bytes: usize,
    pub layers: Vec<PlanReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReportRow {
    pub layer_id: u32,
    pub kind: NodeKind,
    pub workers: usize,
    pub tile_out: usize,
    pub padded_out: usize,
    pub real_out: usize,
    pub in_len: usize,
    pub chunks: usize,
    pub max_chunk_bytes: usize,
    pub footprint: usize,
    pub pes: Vec<PeCoord>,
}

impl PlanReport {
    pub fn new(plans: &[TilePlan], mapping: &Mapping, chip: &ChipDescriptor, opts: &PlanOptions) -> Self {
        Self {
            tile_target: opts.tile_target,
            usable_sram_bytes: chip.usable_sram_bytes,
            layers: plans
                .iter()
                .zip(&mapping.worker_pes)
                .map(|(p, pes)| PlanReportRow {
                    layer_id: p.layer_id,
                    kind: p.kind,
                    workers: p.num_workers,
                    tile_out: p.tile_out,
                    padded_out: p.padded_out,
                    real_out: p.real_out,
                    in_len: p.in_len,
                    chunks: p.weight_chunks.len(),
                    max_chunk_bytes: p.max_chunk_bytes(),
                    footprint: p.footprint,
                    pes: pes.clone(),
                })
                .collect(),
        }
    }
}
