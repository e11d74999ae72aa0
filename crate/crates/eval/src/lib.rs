//! Blind pairwise preference evaluation: pair assignment with random side
//! order, vote capture into an append-only log, and Good/Same/Bad tallies.

pub mod error;
pub mod gsb;
pub mod http;
pub mod state;

pub use error::{EvalError, Result};
pub use gsb::{gsb_ratio, round2, Choice, GsbTally, Outcome};
pub use state::{load_pool, replay_log, EvalState, PairSpec, Presentation, Side};
