//! Discretization and execution engines for the diagonal selective SSM.
//!
//! The recurrence `h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t`, `y_t = C_t · h_t (+ D x_t)`
//! runs independently per (channel, state) lane. Three engines evaluate it:
//! a literal left-to-right loop, a work-efficient up-sweep/down-sweep scan,
//! and, for time-invariant coefficients, a causal convolution with the
//! unrolled kernel.

mod discretize;
pub(crate) mod kernel;
mod lti;
mod params;
mod scan;

pub use discretize::{discretize_zoh, zoh_input_coef, SsmCoeffs, ZOH_SERIES_THRESHOLD};
pub use kernel::ScanEngine;
pub use lti::{build_lti_kernel, lti_conv};
pub use params::{SelectiveProjections, SsmInit, SsmParams};
pub use scan::{
    combine, linear_scan_parallel, linear_scan_parallel_with, linear_scan_sequential, scan_parallel,
    scan_parallel_with, scan_sequential, Pair,
};
