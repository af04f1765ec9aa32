//! Procedural scenes, camera model, pose library and the synthetic dataset.

mod camera;
mod dataset;
mod poses;
#[allow(clippy::module_inception)]
mod scene;

pub use camera::{bbox_feature, visibility_from_truncation, BBoxFeature, CameraModel, Visibility, MIN_BOX_PX};
pub use dataset::{
    append_records, decode_records, encode_records, generate_dataset, generate_sample, prepare_output_dir,
    read_manifest, read_records, read_split, sha256_hex, split_path, write_dataset, write_json, DataConfig,
    Dataset, Manifest, ManifestEntry, RecordTag, SampleRecord, SceneCache, Split,
};
pub use poses::{sample_body, Action, PlacedBody};
pub use scene::{
    crop_scene, generate_layout, generate_scene, resize_cloud, Cuboid, SceneCrop, SceneLayout, ScenePointCloud,
    SceneTemplate, SurfaceTag, CROP_HALF_SIDE, SCENE_POINTS,
};
