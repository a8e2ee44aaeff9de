//! Dense tensors, a reverse-mode gradient tape, Adam, Xavier initialization
//! and parameter checkpoints.

mod checkpoint;
mod matrix;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{read_str, read_u32, read_u64, write_str, write_u32, write_u64};
pub use matrix::{Matrix, SparseMatrix};
pub use optim::{adam_step, xavier_bound, xavier_init, xavier_with, AdamConfig, AdamState};
pub use params::{BoundParams, ParamStore};
pub use tape::{log_sigmoid, sigmoid, softmax_in_place, SparseOperator, Tape, Var};
