//! Minimal CPU neural-network machinery: tensors, layer kernels with
//! hand-written backward passes, the encoder-decoder used by both networks,
//! Adam, and checkpoint I/O.

pub mod checkpoint;
pub mod encdec;
pub mod ftz;
pub mod ops;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, StoredNetwork};
pub use encdec::{EncDec, EncDecSpec, ForwardCache};
pub use ftz::FlushDenormals;
pub use params::{Adam, Grads, Param, ParamSet};
pub use tensor::{Real, Tensor};
