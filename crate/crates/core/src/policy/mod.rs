//! Stage two: the Decision Transformer with memory retrieval fused into its
//! action path.

mod io;
mod model;

pub use io::PolicyCheckpoint;
pub use model::{
    policy_loss, LossParts, PolicyConfig, PolicyMode, PolicyModel, PolicyOutput, Positions, RetrievalTrace,
    TraceEntry,
};
