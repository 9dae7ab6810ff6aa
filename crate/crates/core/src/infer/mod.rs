//! Minimal deterministic inference engine for feed-forward conv nets.

mod confusion;
pub mod dataset;
mod eval;
mod forward;
pub mod graph;

pub use confusion::ConfusionMatrix;
pub use dataset::{load_dataset, save_dataset, Dataset};
pub use eval::{argmax, bit_sweep, evaluate, evaluate_mapped, EvalResult, SweepRow};
pub use forward::{conv_out, Network};
pub use graph::{GraphSpec, Layer, Padding, TensorRole};
