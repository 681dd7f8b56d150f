//! Dense tensors, a reverse-mode tape with the primitives the network
//! needs, parameter storage, Adam and the `IMLN` checkpoint format.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{BatchStats, Gradients, Graph, LstmVars, Var};
pub use params::{glorot_uniform, Param, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub(crate) use checkpoint::ByteReader;
#[cfg(test)]
pub(crate) use graph::softmax_in_place;
pub(crate) use scalar::sigmoid;
