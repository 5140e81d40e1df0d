//! Synthetic data, KITTI codecs, region maps and sequence batching.

pub mod kitti;
pub mod layout;
pub mod regions;
pub mod sequences;
pub mod synth;

pub use kitti::{read_disparity_png, read_flow_png, write_disparity_png, write_flow_png, KittiField};
pub use layout::{read_calib, write_calib, write_scene, SceneData};
pub use regions::{load_region_masks, regions_from_ids, write_region_png};
pub use sequences::{build_sequences, Augment, EvalTriplet, SequenceBatch, Sequences};
pub use synth::{synth_scene, MotionSpec, RigidMotion, SceneConfig, SyntheticScene};
