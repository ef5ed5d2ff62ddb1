//! Hyperspectral frame I/O, false-color rendering, cropping and the
//! synthetic sequence generator.

pub mod cmf;
pub mod crop;
pub mod frame;
pub mod sequence;
pub mod synth;

pub use cmf::{to_false_color, CmfMatrix};
pub use crop::{crop_resize, CropGeometry, Crop};
pub use frame::{decode_frame, encode_frame, load_frame, save_frame, BBox, HSFrame, RGBImage};
pub use sequence::{list_sequences, Attribute, Sequence, SequenceMeta};
pub use synth::{synth_sequence, write_benchmark, write_synth_sequence, DistractorMode, MotionModel, SynthSpec};
