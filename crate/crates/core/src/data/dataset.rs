//! Synthetic partial/complete pairs, half-space occlusion and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_cloud, write_cloud};
use super::shapes::{sample_surface, Family, Normalization, ShapeSpec};
use crate::config::derive_seed;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Drops the `fraction` of points that project farthest along `view`, then
/// draws `n_out` of the survivors (without replacement when enough remain).
pub fn occlude(cloud: &PointCloud, view: &Vec3, fraction: f64, n_out: usize, seed: u64) -> Result<PointCloud> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("occlusion fraction must lie in (0, 1), got {fraction}")));
    }
    if cloud.len() < 2 {
        return Err(Error::Size("occlusion needs at least two points".into()));
    }
    if n_out == 0 {
        return Err(Error::Size("occluded cloud must keep at least one point".into()));
    }
    let norm = view.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("view direction must be a nonzero vector".into()));
    }
    let view = view / norm;
    let n = cloud.len();
    let removed = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| view.dot(&cloud[b]).total_cmp(&view.dot(&cloud[a])).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[removed..].to_vec();
    kept.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if kept.len() >= n_out {
        let mut pick: Vec<usize> = kept.choose_multiple(&mut rng, n_out).copied().collect();
        pick.sort_unstable();
        pick
    } else {
        let mut pick = kept.clone();
        while pick.len() < n_out {
            pick.push(kept[rng.gen_range(0..kept.len())]);
        }
        pick
    };
    Ok(cloud.select(&chosen))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub families: Vec<Family>,
    pub instances_per_family: usize,
    pub views_per_instance: usize,
    pub partial_points: usize,
    pub complete_points: usize,
    /// Size of the surface sampling the partial scan is cut from.
    pub dense_points: usize,
    pub occlusion_fraction: f64,
    /// Cameras look roughly along `±x`; each other component is drawn from
    /// `[-view_jitter, view_jitter]` before normalizing.
    pub view_jitter: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            instances_per_family: 16,
            views_per_instance: 4,
            partial_points: 1024,
            complete_points: 2048,
            dense_points: 4096,
            occlusion_fraction: 0.5,
            view_jitter: 0.4,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("instances_per_family", self.instances_per_family),
            ("views_per_instance", self.views_per_instance),
            ("partial_points", self.partial_points),
            ("complete_points", self.complete_points),
            ("dense_points", self.dense_points),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("dataset.{name} must be positive")));
            }
        }
        if self.families.is_empty() {
            return Err(Error::Config("dataset.families must name at least one family".into()));
        }
        if !(self.occlusion_fraction > 0.0 && self.occlusion_fraction < 1.0) {
            return Err(Error::Config("dataset.occlusion_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("dataset.test_fraction must lie in [0, 1)".into()));
        }
        if !(self.view_jitter >= 0.0) {
            return Err(Error::Config("dataset.view_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub family: Family,
    pub shape: String,
    pub partial: PathBuf,
    pub complete: PathBuf,
    pub camera: [f64; 3],
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// A loaded record.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub id: String,
    pub family: Family,
    pub partial: PointCloud,
    pub complete: PointCloud,
    pub camera: Vec3,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("manifest records serialize") + "\n")
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_record(&self, record: &ManifestRecord) -> Result<SampleRecord> {
        Ok(SampleRecord {
            id: record.id.clone(),
            family: record.family,
            partial: read_cloud(&self.resolve(&record.partial))?,
            complete: read_cloud(&self.resolve(&record.complete))?,
            camera: Vec3::from(record.camera),
        })
    }

    /// Paths named by the manifest that are missing on disk.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        let mut seen = std::collections::BTreeSet::new();
        self.records
            .iter()
            .flat_map(|r| [&r.partial, &r.complete])
            .map(|p| self.resolve(p))
            .filter(|p| seen.insert(p.clone()) && !p.exists())
            .collect()
    }
}

/// Shapes ranked by a seeded hash of their id; the lowest-ranked fraction
/// forms the test split. All views of a shape share its split so test
/// shapes are never seen during training.
fn test_shapes(shape_ids: &[String], fraction: f64, seed: u64) -> std::collections::BTreeSet<String> {
    let mut ranked: Vec<(u64, &String)> = shape_ids.iter().map(|s| (derive_seed(seed, s), s)).collect();
    ranked.sort();
    let n_test = (fraction * shape_ids.len() as f64).round() as usize;
    ranked.into_iter().take(n_test).map(|(_, s)| s.clone()).collect()
}

/// Complete cloud and dense sampling for one shape, in a shared normalized frame.
pub fn shape_clouds(spec: &ShapeSpec, complete_points: usize, dense_points: usize) -> Result<(PointCloud, PointCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let raw = sample_surface(spec, complete_points, &mut rng)?;
    let norm = Normalization::fit(&raw)?;
    let complete = PointCloud::new(raw.iter().map(|p| norm.apply(p)).collect())?;
    // The dense sampling is independent of the ground truth; rare samples
    // beyond the truth's farthest point are dropped to stay in the unit ball.
    let dense: Vec<Vec3> = sample_surface(spec, dense_points, &mut rng)?
        .iter()
        .map(|p| norm.apply(p))
        .filter(|p| p.norm() <= 1.0)
        .collect();
    Ok((complete, PointCloud::new(dense)?))
}

fn camera(rng: &mut impl Rng, view: usize, jitter: f64) -> Vec3 {
    let sign = if view.is_multiple_of(2) { 1.0 } else { -1.0 };
    let mut j = || if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
    let v = Vec3::new(sign, j(), j());
    v / v.norm()
}

/// Generates every record, writes clouds under `out_dir/clouds` and the
/// manifest to `out_dir/manifest.jsonl`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let clouds_dir = out_dir.join("clouds");
    fs::create_dir_all(&clouds_dir).map_err(|e| Error::io(&clouds_dir, e))?;

    let mut shapes = Vec::new();
    for &family in &config.families {
        for inst in 0..config.instances_per_family {
            shapes.push((family, format!("{}-{inst:03}", family.name())));
        }
    }
    let shape_ids: Vec<String> = shapes.iter().map(|(_, s)| s.clone()).collect();
    let test = test_shapes(&shape_ids, config.test_fraction, config.seed);

    let mut records = Vec::new();
    for (family, shape_id) in &shapes {
        let spec = ShapeSpec::random(*family, derive_seed(config.seed, shape_id));
        let (complete, dense) = shape_clouds(&spec, config.complete_points, config.dense_points)?;
        let complete_rel = PathBuf::from("clouds").join(format!("{shape_id}.complete.xyz"));
        write_cloud(&out_dir.join(&complete_rel), &complete)?;
        let split = if test.contains(shape_id) { Split::Test } else { Split::Train };
        let mut cam_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("{shape_id}/cameras")));
        for view in 0..config.views_per_instance {
            let id = format!("{shape_id}-v{view}");
            let cam = camera(&mut cam_rng, view, config.view_jitter);
            let partial = occlude(
                &dense,
                &cam,
                config.occlusion_fraction,
                config.partial_points,
                derive_seed(config.seed, &id),
            )?;
            let partial_rel = PathBuf::from("clouds").join(format!("{id}.partial.xyz"));
            write_cloud(&out_dir.join(&partial_rel), &partial)?;
            records.push(ManifestRecord {
                id,
                family: *family,
                shape: shape_id.clone(),
                partial: partial_rel,
                complete: complete_rel.clone(),
                camera: [cam.x, cam.y, cam.z],
                split,
            });
        }
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), records };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Record counts per family and split.
pub fn split_counts(manifest: &Manifest) -> BTreeMap<(Family, Split), usize> {
    let mut out = BTreeMap::new();
    for r in &manifest.records {
        *out.entry((r.family, r.split)).or_insert(0) += 1;
    }
    out
}

impl PartialOrd for Split {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Split {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}
