//! Selective state-space mixing: a small reverse-mode tensor engine, the
//! selective SSM with three execution engines, token and channel mixers,
//! weighted-averaging layer connections, and vision and time-series model
//! assemblies built from them.

pub mod autodiff;
pub mod block;
pub mod error;
pub mod gradcheck;
pub mod mixers;
pub mod ntf;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scan_path;
pub mod ssm;
pub mod tensor;
pub mod tsm2;
pub mod vim2;
pub mod wiring;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, LayerNorm, Linear, ParamId, ParamStore};
pub use rng::SplitMix64;
pub use scan_path::ScanPath;
pub use tensor::Tensor;
