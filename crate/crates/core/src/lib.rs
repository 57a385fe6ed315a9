//! Data-driven probabilistic atlases.
//!
//! A training population of co-registered label and intensity volumes is
//! turned into a per-region dictionary: subjects are clustered by the shape
//! of each region (affinity propagation over corresponding boundary
//! vertices), and every cluster contributes a regional probability map and a
//! masked intensity template. A new subject is matched against the templates
//! by Pearson correlation, and the selected regional maps are normalised into
//! a whole-volume probabilistic atlas.
//!
//! Modules:
//!
//! * [`volio`]: volume types and file formats
//! * [`fusion`]: majority-vote label fusion
//! * [`shape`]: corresponding boundary vertices
//! * [`apclust`]: affinity propagation
//! * [`dict`]: dictionary construction and storage
//! * [`applier`]: personalised atlas instantiation
//! * [`metrics`]: JS divergence, Dice, Wilcoxon signed-rank
//! * [`phantom`]: synthetic populations with planted phenotypes
//! * [`pipeline`]: end-to-end dictionary training

pub mod apclust;
pub mod applier;
pub mod dict;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod shape;
pub mod volio;

pub use error::{Error, Result};
