//! WAV audio, the SVOC checkpoint container and spike-raster export.

mod checkpoint;
mod raster;
mod wav;

pub use checkpoint::{
    canonical_json, decode_tensors, encode_tensors, load_checkpoint, load_tensor, read_container, save_checkpoint, save_tensor,
    write_container, Container, StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use raster::{export_raster, parse_raster_csv, raster_csv, raster_svg, RasterFormat, RASTER_HEADER};
pub use wav::{read_wav, require_sample_rate, write_wav, PIPELINE_SAMPLE_RATE};
