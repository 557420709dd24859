//! The MFFCN graph: layer schedule, parameters, blocks and topology.

pub mod blocks;
pub mod graph;
pub mod params;
pub mod schedule;

pub use blocks::{FusionProbe, LstmVars};
pub use graph::Forward;
pub use params::{BnStore, BoundParams, MffcnParams, ParamSpec, ParamStore};
pub use schedule::{Architecture, Branch, Chw, FusionStrategy};
