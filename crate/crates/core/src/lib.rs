pub mod autodiff;
pub mod config;
pub mod error;
pub mod tensor;

pub use autodiff::{finite_diff_check, finite_diff_report, FiniteDiffReport, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod params;
pub mod rng;
pub mod nn;
pub mod vocab;
pub mod models;
pub mod objectives;
pub mod gradcheck;
pub mod io;
pub mod optim;
pub mod runtime;
pub mod decode;
pub mod metrics;
pub mod synth;
pub mod trainer;
