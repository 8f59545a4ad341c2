//! Sequential networks built from decoupled and standard layers.

mod arch;
pub mod checkpoint;
mod layers;
mod loss;
mod network;
mod regularizer;

pub use arch::{ArchItem, ArchPreset, ArchSpec, ConvOperator};
pub use checkpoint::{Checkpoint, LoadMode, LoadReport, NamedTensor};
pub use layers::{
    avg_pool_global, avg_pool_global_backward, relu, relu_backward, BatchNorm, FullyConnected,
    MaxPool, StandardConv, BN_EPSILON, BN_MOMENTUM,
};
pub use loss::{argmax_rows, softmax_xent};
pub use network::{
    ForwardCache, LayerNode, LayerStats, NetGrads, Network, Param, ParamMut, ParamRole, StateSlot,
};
pub use regularizer::{orthogonality_penalty, RegularizerSpec};
