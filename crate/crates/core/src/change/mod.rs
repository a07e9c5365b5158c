//! Semantic masks, change events and change masks.

mod events;
mod instances;
mod mask;
mod toy;

use thiserror::Error;

pub use events::{
    boundary_histogram, simulate_appearance, simulate_disappearance, simulate_event, ChangeEvent,
    EventKind, EventParams,
};
pub use instances::{extract_instances, BoundingBox, Instance};
pub use mask::{
    derive_change_mask, downsample_change_mask, ChangeMask, Palette, PaletteEntry, SemanticMask,
};
pub use toy::{generate_toy_semantic_mask, ToyMaskParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChangeError {
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{width}x{height} mask not divisible by factor {factor}")]
    Indivisible {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("no eligible instance for {0}")]
    NoEligibleInstance(EventKind),
    #[error("no admissible placement after {attempts} attempts")]
    NoAdmissiblePlacement { attempts: usize },
}
