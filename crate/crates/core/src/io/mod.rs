//! File formats, checkpoints, datasets and the synthetic generator.

pub mod checkpoint;
pub mod dataset;
pub mod keys;
pub mod synth;
pub mod tensor_file;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use dataset::{
    read_motion, read_music, write_motion, write_music, DatasetManifest, LoadedSample, SampleEntry,
    Split,
};
pub use keys::{read_key_file, write_gt_key_file, KeyEntry};
pub use synth::{synth_clips, synth_dataset, SynthClip, SynthSpec};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor};
