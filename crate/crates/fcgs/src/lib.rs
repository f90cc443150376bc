pub mod coder;
pub mod container;
pub mod context;
pub mod entropy;
pub mod error;
pub mod geom;
pub mod model_io;
pub mod neural;
pub mod pipeline;
pub mod synth;
