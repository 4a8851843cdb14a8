//! Training-free ternarization of dense weight matrices.
//!
//! Weights are mapped to `alpha * T + mu` per (row, column group) with
//! `T` in `{-1, 0, +1}`, quantized block by block with inverse-Hessian error
//! compensation, and stored as base-3 packed PT2T files at 1.6 bits per
//! trit.

pub mod atq;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod ssr;
pub mod synth;
pub mod tensor;
pub mod tensorio;
pub mod ternary;

pub use error::{Error, Result};
pub use pipeline::{quantize_layer, quantize_model, CalibGram, LayerReport, ModelReport, QuantConfig};
pub use tensor::DenseTensor;
pub use tensorio::{load_manifest, load_tensor, read_packed, write_packed, CalibBatch, LayerManifest};
pub use ternary::{dequantize, pack_trits, unpack_trits, weight_error, GridParams, PackedTernaryTensor, ScaleDtype, TernaryMatrix};
