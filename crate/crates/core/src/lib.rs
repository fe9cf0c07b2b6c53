pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod objective;
pub mod optim;
pub mod reloc;
pub mod scene_graph;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
