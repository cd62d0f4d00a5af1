//! Procedural solids, a pinhole depth raycaster, and generators for the
//! five view protocols (camera pan, two-object pan, hiding, reveal, slide
//! behind) with ground-truth occupancy targets.
//!
//! Targets are expressed in the camera frame of the matching input view.

mod camera;
mod dataset;
mod objects;
mod protocols;

pub use camera::{render_depth_hits, render_depth_view, Camera, Intrinsics};
pub use dataset::{
    build_manifest, derive_seed, generate, generate_sequence, read_manifest, read_sequence_grids, split_objects,
    write_dataset, Dataset, DatasetConfig, DatasetManifest, ObjectEntry, SequenceEntry, Split, GENERATOR_VERSION,
};
pub use objects::{gen_object, ObjectKind, Primitive, Shape, SolidObject, MAX_OBJECT_RADIUS};
pub use protocols::{make_sequence, Protocol, SceneConfig, ViewSequence};
