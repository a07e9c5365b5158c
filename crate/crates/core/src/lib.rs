pub mod cd_eval;
pub mod change;
pub mod codec;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod generator;
pub mod grid;
pub mod nn;
