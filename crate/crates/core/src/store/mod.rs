//! On-disk formats: the f32 model container and the bit-packed quantized model.

pub mod bitpack;
mod container;
pub mod packed;
pub(crate) mod reader;

pub use container::{load_model, save_model, ModelFile, MODEL_MAGIC, MODEL_VERSION};
pub use packed::{load_packed, pack_quantized, save_packed, PackedQuantModel, PackedTensor};
