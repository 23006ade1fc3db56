//! Bit-exact ingestion and serialization: CIFAR-10 binaries, RGBA watermark
//! images, raw tensor files and network checkpoints.
//!
//! All operations are pure or file-scoped; concurrent calls on distinct
//! paths are safe.

mod checkpoint;
mod cifar;
mod tensorfile;
mod types;
mod watermark_io;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use cifar::{decode_cifar, encode_cifar, load_cifar_batch, save_cifar_batch, RECORD_BYTES};
pub use tensorfile::{
    decode_tensor, encode_tensor, read_tensor, write_tensor, DTYPE_F32, TENSOR_MAGIC,
    TENSOR_VERSION,
};
pub use types::{
    ImageBatch, NetworkParams, ParamEntry, ParamsMeta, Watermark, CIFAR_HW, NUM_CLASSES,
};
pub use watermark_io::{
    load_watermark, load_watermark_sized, save_watermark_png, save_watermark_tensor,
};
