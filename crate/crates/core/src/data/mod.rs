//! Synthetic mirror-symmetric shapes, occlusion and point cloud files.

pub mod dataset;
pub mod io;
pub mod shapes;

pub use dataset::{
    build_dataset, occlude, shape_clouds, split_counts, DatasetConfig, Manifest, ManifestRecord, SampleRecord, Split,
    MANIFEST_FILE,
};
pub use io::{format_ply, format_xyz, parse_ply, parse_xyz, read_cloud, write_cloud, CloudFormat};
pub use shapes::{generate_shape, mirror_x, sample_surface, Family, Normalization, ShapeSpec, Solid};
