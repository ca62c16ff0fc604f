//! Text-based visual place recognition, end to end: synthetic signage
//! scenes, a small transformer text spotter with tape-based autodiff, set
//! matching for training, and the place-map retrieval layer on top.

pub mod evalkit;
pub mod geometry;
pub mod io;
pub mod spotter;
pub mod synthgen;
pub mod tensor;
pub mod training;
pub mod types;
pub mod vpr;

pub use evalkit::{DetectionReport, PRCurve};
pub use geometry::Polygon;
pub use spotter::{SpotterConfig, SpotterModel};
pub use synthgen::{SceneSpec, TraversalConfig, TraversalPair};
pub use tensor::{Tape, Tensor, Var};
pub use types::{Frame, GrayImage, TextInstance};
pub use vpr::{FilterPolicy, MatchResult, PlaceMap};
