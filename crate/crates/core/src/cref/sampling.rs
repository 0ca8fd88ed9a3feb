use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Origin, PointCloud, Vec3};

/// The sampled cloud the refiner works on, with its freezing state.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledCloud {
    pub points: Vec<Vec3>,
    pub frozen: Vec<bool>,
    /// For frozen points, the index of the identical point in the partial input.
    pub source_index: Vec<Option<usize>>,
}

impl SampledCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn adjustable(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.frozen[i]).collect()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    pub fn to_cloud(&self) -> PointCloud {
        PointCloud::from_trusted(self.points.clone())
    }

    /// Marks every point adjustable.
    pub fn unfrozen(mut self) -> Self {
        self.frozen.iter_mut().for_each(|f| *f = false);
        self.source_index.iter_mut().for_each(|s| *s = None);
        self
    }
}

/// Farthest point sampling over the union of the partial input and the
/// coarse cloud. Sampled points that came from the partial input are frozen
/// and keep a pointer to their source.
pub fn mixed_sample(partial: &PointCloud, coarse: &PointCloud, n: usize, start: usize) -> Result<SampledCloud> {
    let total = partial.len() + coarse.len();
    if n == 0 || n > total {
        return Err(Error::Size(format!(
            "cannot sample {n} points from {} partial + {} coarse",
            partial.len(),
            coarse.len()
        )));
    }
    let merged = PointCloud::concat_tagged(partial, coarse);
    let picked = farthest_point_sample(&merged, n, start)?;
    let tags = merged.tags().expect("concat_tagged sets tags");
    let mut out = SampledCloud {
        points: Vec::with_capacity(n),
        frozen: Vec::with_capacity(n),
        source_index: Vec::with_capacity(n),
    };
    for i in picked {
        out.points.push(merged[i]);
        let from_partial = tags[i] == Origin::Partial;
        out.frozen.push(from_partial);
        out.source_index.push(from_partial.then_some(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut impl Rng) -> PointCloud {
        PointCloud::new((0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()).unwrap()
    }

    #[test]
    fn empty_coarse_freezes_a_permutation_of_partial() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_cloud(30, &mut rng);
        let s = mixed_sample(&p, &PointCloud::default(), 30, 0).unwrap();
        assert!(s.frozen.iter().all(|&f| f));
        let mut idx: Vec<usize> = s.source_index.iter().map(|i| i.unwrap()).collect();
        idx.sort_unstable();
        assert_eq!(idx, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn empty_partial_freezes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(20, &mut rng);
        let s = mixed_sample(&PointCloud::default(), &c, 10, 0).unwrap();
        assert_eq!(s.frozen_count(), 0);
        assert_eq!(s.adjustable().len(), 10);
    }

    #[test]
    fn frozen_points_are_verbatim_partial_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_cloud(1024, &mut rng);
        let c = random_cloud(2048, &mut rng);
        let s = mixed_sample(&p, &c, 2048, 0).unwrap();
        assert_eq!(s.len(), 2048);
        assert!(s.frozen_count() > 0);
        for i in 0..s.len() {
            if s.frozen[i] {
                let src = s.source_index[i].unwrap();
                assert_eq!(s.points[i], p[src]);
                // Membership oracle independent of the recorded index.
                assert!(p.iter().any(|q| q.x.to_bits() == s.points[i].x.to_bits()
                    && q.y.to_bits() == s.points[i].y.to_bits()
                    && q.z.to_bits() == s.points[i].z.to_bits()));
            } else {
                assert!(s.source_index[i].is_none());
            }
        }
    }

    #[test]
    fn too_many_points_is_a_size_error() {
        let p = PointCloud::from_rows(&[[0.0; 3]]).unwrap();
        assert!(matches!(mixed_sample(&p, &p, 3, 0), Err(Error::Size(_))));
    }
}
