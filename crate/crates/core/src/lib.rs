//! Progressive distance refinement for approximate nearest-neighbor search.
//!
//! A product-quantization layer produces coarse reconstructions `x_c` held in
//! fast memory. The residual `δ = x − x_c` of every record is encoded as an
//! optimal ternary direction plus two scalars (`⟨x_c, δ⟩`, `‖δ‖`) and stored
//! in a slower "far" tier. At query time coarse ADC scores are refined with
//! those residual records, calibrated with a small linear model, and only the
//! best survivors are re-ranked against full-precision vectors.
//!
//! Module map:
//!
//! * [`vecstore`]: datasets, `.fvecs`/`.ivecs`/`.bvecs` I/O, synthetic data, exact kNN.
//! * [`coarse`]: product quantizer (training, encoding, ADC tables).
//! * [`trq`]: ternary residual encoder, base-3 packing, residual record store.
//! * [`estimator`]: distance decomposition, inner-product estimate, OLS calibration.
//! * [`index`]: IVF candidate generation.
//! * [`pipeline`]: two-queue refinement, tier cost model, recall sweeps.

mod codec;
pub mod coarse;
pub mod distance;
mod error;
pub mod estimator;
pub mod index;
pub mod kmeans;
pub mod pipeline;
pub mod trq;
pub mod vecstore;

pub use error::{Error, Result};
