//! Learned rigid canonicalization of local patches.
//!
//! A patch is first rotated so its normal points along `e_z`. Two small
//! networks then read the aligned patch and predict the in-plane rotation
//! angle `phi` and the reflection-plane angle `psi`. Each angle is produced
//! as a `(cos, sin)` pair obtained by normalizing `(1 + a, b)` from a
//! two-channel head, so an all-zero head output means angle 0 and there is
//! no wrap-around discontinuity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{rotation_about_z_cs, rotation_to_z, Mat3, Patch, RigidFrame, Vec3};
use crate::nn::mlp::{Mlp, MlpArch, MlpCache};
use crate::nn::{FeatureMatrix, ParamStore};

/// Floor on the norm of the raw angle vector before normalization.
const ANGLE_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AngleNets {
    pub patch_size: usize,
    pub shared: Mlp,
    pub phi_head: Mlp,
    pub psi_head: Mlp,
}

#[derive(Clone, Debug)]
pub struct AngleCache {
    shared: MlpCache,
    phi: MlpCache,
    psi: MlpCache,
    phi_raw: FeatureMatrix,
    psi_raw: FeatureMatrix,
}

/// `(cos, sin)` of an angle.
pub type CosSin = [f64; 2];

fn normalize_angle(a: f64, b: f64) -> (CosSin, f64) {
    let (u, v) = (1.0 + a, b);
    let r = (u * u + v * v).sqrt().max(ANGLE_NORM_FLOOR);
    ([u / r, v / r], r)
}

/// Gradient with respect to the raw head output `(a, b)` given the gradient
/// with respect to the normalized pair.
fn normalize_angle_backward(raw: (f64, f64), d: CosSin) -> [f64; 2] {
    let ([c, s], r) = normalize_angle(raw.0, raw.1);
    let dot = c * d[0] + s * d[1];
    [(d[0] - c * dot) / r, (d[1] - s * dot) / r]
}

impl AngleNets {
    /// `shared_widths` are the layers common to both heads; each head adds
    /// `head_widths` and a final two-channel layer.
    pub fn new(prefix: &str, patch_size: usize, shared_widths: &[usize], head_widths: &[usize]) -> Self {
        assert!(!shared_widths.is_empty(), "angle networks need a shared layer");
        let mut sdims = vec![3 * patch_size];
        sdims.extend_from_slice(shared_widths);
        let mut hdims = vec![*sdims.last().unwrap()];
        hdims.extend_from_slice(head_widths);
        hdims.push(2);
        Self {
            patch_size,
            shared: Mlp::new(&format!("{prefix}.shared"), &MlpArch::new(&sdims, true)),
            phi_head: Mlp::new(&format!("{prefix}.phi"), &MlpArch::new(&hdims, false)),
            psi_head: Mlp::new(&format!("{prefix}.psi"), &MlpArch::new(&hdims, false)),
        }
    }

    /// Heads start at zero output, so both angles start at 0.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.shared.init(store, rng);
        self.phi_head.init_zero_last(store, rng);
        self.psi_head.init_zero_last(store, rng);
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        self.shared.check(store)?;
        self.phi_head.check(store)?;
        self.psi_head.check(store)
    }

    /// `aligned` holds one flattened normal-aligned patch per row.
    pub fn forward(&self, store: &ParamStore, aligned: &FeatureMatrix) -> (Vec<CosSin>, Vec<CosSin>, AngleCache) {
        let (h, shared) = self.shared.forward_cached(store, aligned);
        let (phi_raw, phi) = self.phi_head.forward_cached(store, &h);
        let (psi_raw, psi) = self.psi_head.forward_cached(store, &h);
        let phis = (0..phi_raw.rows()).map(|r| normalize_angle(phi_raw.get(r, 0), phi_raw.get(r, 1)).0).collect();
        let psis = (0..psi_raw.rows()).map(|r| normalize_angle(psi_raw.get(r, 0), psi_raw.get(r, 1)).0).collect();
        (
            phis,
            psis,
            AngleCache {
                shared,
                phi,
                psi,
                phi_raw,
                psi_raw,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &AngleCache,
        d_phi: &[CosSin],
        d_psi: &[CosSin],
        grads: &mut ParamStore,
    ) -> FeatureMatrix {
        let raw_grad = |raw: &FeatureMatrix, d: &[CosSin]| {
            let mut out = FeatureMatrix::zeros(raw.rows(), 2);
            for (r, g) in d.iter().enumerate() {
                out.row_mut(r).copy_from_slice(&normalize_angle_backward((raw.get(r, 0), raw.get(r, 1)), *g));
            }
            out
        };
        let mut dh = self.phi_head.backward(store, &cache.phi, &raw_grad(&cache.phi_raw, d_phi), grads);
        dh.add_assign(&self.psi_head.backward(store, &cache.psi, &raw_grad(&cache.psi_raw, d_psi), grads));
        self.shared.backward(store, &cache.shared, &dh, grads)
    }
}

/// Canonical coordinates of a batch of equally sized patches.
#[derive(Clone, Debug)]
pub struct CanonicalBatch {
    pub patch_size: usize,
    /// `patch_size` consecutive rows per patch.
    pub coords: FeatureMatrix,
    pub frames: Vec<RigidFrame>,
    pub phi: Vec<CosSin>,
    pub psi: Vec<CosSin>,
    aligned: Vec<Vec3>,
    cache: Option<AngleCache>,
}

impl CanonicalBatch {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn patch(&self, i: usize) -> Vec<Vec3> {
        (i * self.patch_size..(i + 1) * self.patch_size)
            .map(|r| {
                let row = self.coords.row(r);
                Vec3::new(row[0], row[1], row[2])
            })
            .collect()
    }
}

fn reflect_cs(p: &Vec3, n: CosSin) -> Vec3 {
    let d = n[0] * p.x + n[1] * p.y;
    Vec3::new(p.x - 2.0 * d * n[0], p.y - 2.0 * d * n[1], p.z)
}

/// Canonicalizes every patch. With `nets = None` the patches are left in
/// their local frame (identity rotations, no reflection).
pub fn canonicalize_batch(patches: &[&Patch], store: &ParamStore, nets: Option<&AngleNets>) -> Result<CanonicalBatch> {
    let k = patches.first().map_or(0, |p| p.local_coords.len());
    if patches.iter().any(|p| p.local_coords.len() != k) {
        return Err(Error::Shape("patches in one batch must have equal size".into()));
    }
    let Some(nets) = nets else {
        let coords: Vec<Vec3> = patches.iter().flat_map(|p| p.local_coords.iter().copied()).collect();
        let frames = vec![
            RigidFrame {
                r1: Mat3::identity(),
                r2: Mat3::identity(),
                psi: 0.0,
            };
            patches.len()
        ];
        return Ok(CanonicalBatch {
            patch_size: k,
            coords: FeatureMatrix::from_points(&coords),
            frames,
            phi: vec![[1.0, 0.0]; patches.len()],
            psi: vec![[1.0, 0.0]; patches.len()],
            aligned: coords,
            cache: None,
        });
    };
    if k != nets.patch_size {
        return Err(Error::Shape(format!(
            "angle networks expect patches of {}, got {k}",
            nets.patch_size
        )));
    }
    let r1s: Vec<Mat3> = patches.iter().map(|p| rotation_to_z(&p.normal)).collect();
    let aligned: Vec<Vec3> = patches
        .iter()
        .zip(&r1s)
        .flat_map(|(p, r1)| p.local_coords.iter().map(move |v| r1 * v))
        .collect();
    let flat = FeatureMatrix::from_vec(patches.len(), 3 * k, aligned.iter().flat_map(|v| [v.x, v.y, v.z]).collect())?;
    let (phi, psi, cache) = nets.forward(store, &flat);
    let mut coords = Vec::with_capacity(aligned.len());
    let mut frames = Vec::with_capacity(patches.len());
    for (b, r1) in r1s.iter().enumerate() {
        let r2 = rotation_about_z_cs(phi[b][0], phi[b][1]);
        for v in &aligned[b * k..(b + 1) * k] {
            coords.push(reflect_cs(&(r2 * v), psi[b]));
        }
        frames.push(RigidFrame {
            r1: *r1,
            r2,
            psi: psi[b][1].atan2(psi[b][0]),
        });
    }
    Ok(CanonicalBatch {
        patch_size: k,
        coords: FeatureMatrix::from_points(&coords),
        frames,
        phi,
        psi,
        aligned,
        cache: Some(cache),
    })
}

/// Canonical coordinates and frame of one patch.
pub fn canonicalize_patch(patch: &Patch, store: &ParamStore, nets: &AngleNets) -> Result<(Vec<Vec3>, RigidFrame)> {
    let batch = canonicalize_batch(&[patch], store, Some(nets))?;
    Ok((batch.patch(0), batch.frames[0]))
}

/// Backpropagates `d_coords` (same layout as `batch.coords`) plus any direct
/// gradient on the in-plane rotation pair into the angle networks.
pub fn canonicalize_backward(
    batch: &CanonicalBatch,
    store: &ParamStore,
    nets: &AngleNets,
    d_coords: &FeatureMatrix,
    d_phi_extra: Option<&[CosSin]>,
    grads: &mut ParamStore,
) {
    let Some(cache) = &batch.cache else {
        return;
    };
    let k = batch.patch_size;
    let mut d_phi = vec![[0.0; 2]; batch.len()];
    let mut d_psi = vec![[0.0; 2]; batch.len()];
    for b in 0..batch.len() {
        let n = batch.psi[b];
        let r2 = batch.frames[b].r2;
        for r in b * k..(b + 1) * k {
            let g = Vec3::new(d_coords.get(r, 0), d_coords.get(r, 1), d_coords.get(r, 2));
            let a = batch.aligned[r];
            let hat = r2 * a;
            let nd = n[0] * hat.x + n[1] * hat.y;
            let gn = n[0] * g.x + n[1] * g.y;
            // Reflection: p' = p - 2 (n . p) n.
            d_psi[b][0] += -2.0 * (nd * g.x + gn * hat.x);
            d_psi[b][1] += -2.0 * (nd * g.y + gn * hat.y);
            let gh = Vec3::new(g.x - 2.0 * gn * n[0], g.y - 2.0 * gn * n[1], g.z);
            // In-plane rotation: hat = (c a_x - s a_y, s a_x + c a_y, a_z).
            d_phi[b][0] += gh.x * a.x + gh.y * a.y;
            d_phi[b][1] += -gh.x * a.y + gh.y * a.x;
        }
        if let Some(extra) = d_phi_extra {
            d_phi[b][0] += extra[b][0];
            d_phi[b][1] += extra[b][1];
        }
    }
    nets.backward(store, cache, &d_phi, &d_psi, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{estimate_normal, extract_patch, PointCloud};
    use crate::nn::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn surface_cloud(n: usize, rng: &mut impl Rng) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    let (x, y): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    Vec3::new(x, y, 0.3 * x * x - 0.2 * y + 0.1 * x * y)
                })
                .collect(),
        )
        .unwrap()
    }

    fn nets_with_random_heads(k: usize, seed: u64) -> (AngleNets, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = AngleNets::new("ang", k, &[16, 12], &[8]);
        let mut store = ParamStore::new();
        nets.init(&mut store, &mut rng);
        nets.phi_head.layers.last().unwrap().init(&mut store, &mut rng);
        nets.psi_head.layers.last().unwrap().init(&mut store, &mut rng);
        (nets, store)
    }

    #[test]
    fn z_aligned_patch_with_zero_heads_is_only_reflected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets = AngleNets::new("ang", 5, &[8, 8], &[]);
        let mut store = ParamStore::new();
        nets.init(&mut store, &mut rng);
        let local: Vec<Vec3> = [[0.1, 0.2, 0.0], [-0.3, 0.1, 0.0], [0.2, -0.2, 0.0], [0.0, 0.0, 0.001], [0.0, -0.1, -0.001]]
            .iter()
            .map(|r| Vec3::new(r[0], r[1], r[2]))
            .collect();
        let patch = Patch {
            center_index: 0,
            neighbor_indices: (0..5).collect(),
            local_coords: local.clone(),
            normal: Vec3::z(),
        };
        let (coords, frame) = canonicalize_patch(&patch, &store, &nets).unwrap();
        assert_eq!(frame.psi, 0.0);
        for (c, v) in coords.iter().zip(&local) {
            assert_eq!(*c, Vec3::new(-v.x, v.y, v.z));
        }
    }

    #[test]
    fn canonical_normal_is_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = surface_cloud(400, &mut rng);
        let (nets, store) = nets_with_random_heads(24, 2);
        for center in [0, 17, 111, 250] {
            let patch = extract_patch(&cloud, center, 24).unwrap();
            let (coords, _) = canonicalize_patch(&patch, &store, &nets).unwrap();
            let n = estimate_normal(&coords).unwrap();
            assert!((n.z.abs() - 1.0).abs() < 1e-5, "{n:?}");
        }
    }

    #[test]
    fn rotated_copy_has_identical_canonical_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = surface_cloud(300, &mut rng);
        let (nets, store) = nets_with_random_heads(16, 4);
        let patch = extract_patch(&cloud, 5, 16).unwrap();
        let (c0, f0) = canonicalize_patch(&patch, &store, &nets).unwrap();
        // G = M R1 with M = rotation_to_z(n')^T moves the normal to n' and
        // leaves the normal-aligned coordinates, hence the angle-net inputs,
        // unchanged.
        let target = Vec3::new(0.3, -0.8, 0.52).normalize();
        let g = rotation_to_z(&target).transpose() * f0.r1;
        let moved = Patch {
            local_coords: patch.local_coords.iter().map(|v| g * v).collect(),
            normal: g * patch.normal,
            ..patch.clone()
        };
        assert!((moved.normal - target).norm() < 1e-12);
        let (c1, _) = canonicalize_patch(&moved, &store, &nets).unwrap();
        for (a, b) in c0.iter().zip(&c1) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn matches_frame_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = surface_cloud(200, &mut rng);
        let (nets, store) = nets_with_random_heads(10, 6);
        let patch = extract_patch(&cloud, 3, 10).unwrap();
        let (coords, frame) = canonicalize_patch(&patch, &store, &nets).unwrap();
        for (c, v) in coords.iter().zip(&patch.local_coords) {
            assert!((c - frame.apply(v)).norm() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = surface_cloud(200, &mut rng);
        let (nets, store) = nets_with_random_heads(8, 8);
        let patches: Vec<Patch> = [1, 40, 90].iter().map(|&c| extract_patch(&cloud, c, 8).unwrap()).collect();
        let refs: Vec<&Patch> = patches.iter().collect();
        let proj: Vec<f64> = (0..24 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let extra: Vec<CosSin> = (0..3).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let loss = |p: &ParamStore| -> f64 {
            let b = canonicalize_batch(&refs, p, Some(&nets)).unwrap();
            let main: f64 = b.coords.data().iter().zip(&proj).map(|(a, c)| a * c).sum();
            main + b.phi.iter().zip(&extra).map(|(a, e)| a[0] * e[0] + a[1] * e[1]).sum::<f64>()
        };
        let batch = canonicalize_batch(&refs, &store, Some(&nets)).unwrap();
        let mut grads = store.zeros_like();
        let d = FeatureMatrix::from_vec(24, 3, proj.clone()).unwrap();
        canonicalize_backward(&batch, &store, &nets, &d, Some(&extra), &mut grads);
        let err = grad_check(&store, loss, &grads, 80, &mut rng);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn identity_mode_keeps_local_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = surface_cloud(50, &mut rng);
        let patch = extract_patch(&cloud, 0, 6).unwrap();
        let b = canonicalize_batch(&[&patch], &ParamStore::new(), None).unwrap();
        assert_eq!(b.patch(0), patch.local_coords);
    }
}
