//! Reverse-mode tensor engine, the non-local network, Adam and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tape;

pub use checkpoint::{NetCheckpoint, TensorRecord};
pub use model::{dcl_forward, fixed_hop_weights, mixing_csv, Head, MixingMode, NetConfig, NlTsc};
pub use optim::{clip_grad_norm, linear_decay, Adam};
pub use tape::{softmax_rows, NodeId, ParamSet, Tape};
