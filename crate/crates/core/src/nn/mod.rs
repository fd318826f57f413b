//! Small fully connected networks, their differentiation, and Adam.

pub mod adam;
pub mod encoding;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use encoding::positional_encoding;
pub use mlp::{Activation, BatchOutput, Mlp, MlpSpec, RecordedBatch};
pub use params::{ParamStore, Segment};
pub use tape::{DiffContext, Tape, Var};
