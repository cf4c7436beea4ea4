//! Architecture descriptions, parameter stores and the generator and
//! discriminator networks built from them.

pub mod catalog;
mod checkpoint;
mod kernels;
mod network;
mod params;
mod spec;

pub(crate) use checkpoint::hex;
pub use checkpoint::{load_teacher, Checkpoint};
pub use network::{sigmoid, ForwardOptions, InitConfig, Network, QuantMode, Trace, NORM_EPS};
pub use params::{Param, ParamRole, ParamSet};
pub use spec::{
    Activation, ArchSpec, ConvSpec, ConvTSpec, InputKind, Layer, NormKind, PadMode, Placed, PlacedOp, Shape3,
    ARCHSPEC_VERSION,
};
