//! Disk-backed data layer: the series panel, the dynamic graph with
//! importance-based neighbor selection, dataset adapters and the synthetic
//! generator.

pub mod graph;
pub mod ingest;
pub mod panel;
pub mod synth;

pub use graph::{DynamicGraph, EdgeInterval};
pub use panel::{FilledPanel, NodeMeta, SeriesPanel};
pub use synth::{SynthConfig, SynthData};
