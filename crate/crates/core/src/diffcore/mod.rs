//! Dense matrix autodiff: the handful of primitives the detector needs, a
//! GRU cell built from them, seeded random streams, and a finite-difference
//! gradient checker.

mod gradcheck;
mod gru;
mod params;
pub mod rng;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_FLOOR};
pub use gru::{BoundGru, GruCell};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::RngStream;
pub use tape::{Mode, Tape, Var, LAYER_NORM_EPS, PROB_CLAMP};
