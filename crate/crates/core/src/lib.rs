//! Discrete-event simulation of a switch-side feature extractor feeding an
//! INT8 inference engine over a rate-limited mirror channel.

pub mod buffer;
pub mod flow;
pub mod infer;
pub mod quant;
pub mod rate;
pub mod reference;
pub mod sim;
pub mod trace;
pub mod vio;
