//! Model preparation flow: validate, quantize, fold QDQ pairs, fuse
//! Linear+ReLU, linearize, tile, map and assemble the DRAM image.

use crate::dram_image::{build_image, DramImage, ImageError, ImageManifest};
use crate::graph_ir::{fuse_linear_relu, strip_qdq, topo_sort, validate, ApplicationGraph, GraphError, Node};
use crate::partitioner::{map_model_with, plan_model, ChipDescriptor, Mapping, PlanError, PlanOptions, PlanReport, TilePlan};
use crate::quantizer::{quantize_model, CalibrationSet, QuantError};

#[derive(Debug, thiserror::Error)]
pub enum CompileError {
    #[error("validate: {0}")]
    Validate(String),
    #[error("quantize_model: float model given without a calibration set")]
    MissingCalibration,
    #[error("quantize_model: {0}")]
    Quantize(#[from] QuantError),
    #[error("{pass}: {source}")]
    Lower { pass: &'static str, source: GraphError },
    #[error("plan: {0}")]
    Plan(PlanError),
    #[error("map: {0}")]
    Map(PlanError),
    #[error("build_image: {0}")]
    Image(#[from] ImageError),
}

pub type Result<T, E = CompileError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct CompileOptions {
    pub use_cle: bool,
    pub plan: PlanOptions,
    pub chip: ChipDescriptor,
    /// Switch on every PE in the worker table, not only those a layer uses.
    pub enable_all_workers: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self { use_cle: true, plan: PlanOptions::default(), chip: ChipDescriptor::default(), enable_all_workers: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compiled {
    /// Quantized graph as produced by `quantize_model` (QDQ nodes intact).
    pub quantized: ApplicationGraph,
    /// Folded and fused graph the image was built from.
    pub lowered: ApplicationGraph,
    pub order: Vec<Node>,
    pub plans: Vec<TilePlan>,
    pub mapping: Mapping,
    pub report: PlanReport,
    pub image: DramImage,
    pub manifest: ImageManifest,
}

/// Runs the full flow. Already-quantized graphs skip `quantize_model` and
/// need no calibration set.
pub fn compile(graph: &ApplicationGraph, calib: Option<&CalibrationSet>, opts: &CompileOptions) -> Result<Compiled> {
    let diags = validate(graph);
    if !diags.is_empty() {
        return Err(CompileError::Validate(diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")));
    }
    let quantized = if graph.is_quantized() {
        graph.clone()
    } else {
        quantize_model(graph, calib.ok_or(CompileError::MissingCalibration)?, opts.use_cle)?
    };
    lower(quantized, opts)
}

/// Lowers an already-quantized graph to an image.
pub fn lower(quantized: ApplicationGraph, opts: &CompileOptions) -> Result<Compiled> {
    let stripped = strip_qdq(&quantized).map_err(|source| CompileError::Lower { pass: "strip_qdq", source })?;
    let lowered = fuse_linear_relu(&stripped);
    let order = topo_sort(&lowered).map_err(|source| CompileError::Lower { pass: "topo_sort", source })?;
    let plans = plan_model(&lowered, &order, &opts.chip, &opts.plan).map_err(CompileError::Plan)?;
    let mapping = map_model_with(&plans, &opts.chip, opts.enable_all_workers).map_err(CompileError::Map)?;
    let report = PlanReport::new(&plans, &mapping, &opts.chip, &opts.plan);
    let built = build_image(&lowered, &order, &plans, &mapping, &opts.chip)?;
    log::info!("compiled {} layers into a {} byte image", order.len(), built.image.total_len());
    Ok(Compiled { quantized, lowered, order, plans, mapping, report, image: built.image, manifest: built.manifest })
}
