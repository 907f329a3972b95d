//! Compile and simulate INT8 DNN inference on a many-core neuromorphic chip.
//!
//! The pipeline runs a float model through power-of-two quantization,
//! lowering (QDQ folding, Linear+ReLU fusion, linearization), tiling across
//! worker PEs and DRAM image assembly. The resulting image executes on a
//! deterministic discrete-event model of the chip whose outputs match the
//! integer reference in [`oracle`] bit for bit.

pub mod chipsim;
pub mod dram_image;
pub mod graph_ir;
pub mod oracle;
pub mod parallel;
pub mod partitioner;
pub mod pipeline;
pub mod profiler;
pub mod quantizer;
pub mod synth;
