//! Encoder, decoder and discriminator networks, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod net;
mod spec;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, NetCheckpoint};
pub use net::{Forward, Mode, NamedTensor, Net, BATCHNORM_MOMENTUM};
pub use spec::{Activation, ConcatMode, InputKind, Layer, NetSpec, Role};
