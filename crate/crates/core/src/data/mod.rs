//! Synthetic images and clips, color conversion, frame pyramids and
//! augmentation.

pub mod augment;
pub mod export;
pub mod lab;
pub mod pyramid;
pub mod synth;

pub use augment::{augment, AugDraw, AugmentationPolicy};
pub use export::{label_entry, label_from_entry, read_clip_dir, write_clip_dir, ClipManifest};
pub use lab::{lab_to_rgb, rgb_to_lab, LabNorm};
pub use pyramid::{center_sample, frame_pyramid, FramePyramid};
pub use synth::{sprite_image, synth_clip, texture, ClipConfig, FlowField, LabelMap, SynthClip};
