pub mod hashing;
pub(crate) mod nn;
pub mod numerics;
pub mod rng;
pub mod toylm;
pub mod taskgen;
pub mod features;
pub mod eval;
pub mod uhead;
pub mod baselines;
pub mod tts;
pub mod pipeline;
pub mod cli;
