//! Layer orchestration: Gram accumulation, damped inverse Hessian, and the
//! blockwise quantize-then-compensate loop.
//!
//! Each step picks a block of columns (by residual similarity, or in index
//! order), ternarizes it as one tile, and pushes the block's quantization
//! error into the still-unquantized columns through the inverse Hessian of
//! the remaining set. That inverse is kept current with a Schur-complement
//! downdate after every block, so arbitrary block orders never need a fresh
//! factorization.

mod gram;
mod hessian;
mod layer;
mod model;

pub use gram::{accumulate_gram, CalibGram};
pub use hessian::{hessian_prepare, InverseHessian};
pub use layer::{output_error, quantize_layer, BlockReport, LayerOutcome, LayerQuantizer, LayerReport, QuantConfig};
pub use model::{
    artifact_file, artifact_stem, blocks_file, quantize_entry, quantize_model, write_blocks_csv, LayerFailure, ModelReport,
    REPORT_FILE,
};
