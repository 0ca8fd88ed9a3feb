//! Shared inputs for the benchmarks.

use pccforge::data::{generate_shape, occlude, Family, ShapeSpec};
use pccforge::{PointCloud, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect(),
    )
    .expect("non-empty")
}

/// A winged-body shape and a half-occluded scan of it.
pub fn shape_pair(complete: usize, partial: usize) -> (PointCloud, PointCloud) {
    let spec = ShapeSpec::random(Family::WingedBody, 7);
    let truth = generate_shape(&spec, complete).expect("valid shape");
    let scan = occlude(&truth, &Vec3::x(), 0.5, partial, 7).expect("enough points");
    (truth, scan)
}
