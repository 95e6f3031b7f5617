//! Constant and piecewise-constant input synthesis for continuous-time
//! Hopfield-type recurrent networks `ẋ = −Dx + W f(x) + Bu`.

pub mod flow;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod synthesis;
