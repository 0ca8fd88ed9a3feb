use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::canonical::{canonicalize_backward, canonicalize_batch, AngleNets, CanonicalBatch, CosSin};
use super::sampling::{mixed_sample, SampledCloud};
use super::similarity::{aggregate_topk, similarity_matrix, Aggregation, SimilarityMatrix, SimilarityMode};
use crate::error::{Error, Result};
use crate::geometry::{extract_patch, farthest_point_sample, Patch, PointCloud, RigidFrame, Vec3};
use crate::metrics::chamfer_l2_with_grad;
use crate::nn::descriptor::{DescriptorCache, DescriptorNet};
use crate::nn::mlp::{Mlp, MlpArch, MlpCache};
use crate::nn::{FeatureMatrix, Optimizer, OptimizerConfig, ParamStore, TrainOutcome};

const CONFIG_KEY: &str = "cref.config";
const STEPS_KEY: &str = "cref.trained_steps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrefConfig {
    /// Size of the refined cloud.
    pub num_points: usize,
    pub patch_size: usize,
    pub top_k: usize,
    /// Neighbors per point inside a patch for the descriptor graph.
    pub edge_k: usize,
    pub descriptor_widths: Vec<usize>,
    pub angle_shared_widths: Vec<usize>,
    pub angle_head_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub similarity: SimilarityMode,
    pub mixed_sampling: bool,
    pub freezing: bool,
    pub rigid_transform: bool,
    pub fps_start: usize,
    /// Upper bound on partial points used as similarity candidates; `None`
    /// uses all of them.
    pub partial_cap: Option<usize>,
}

impl Default for CrefConfig {
    fn default() -> Self {
        Self {
            num_points: 2048,
            patch_size: 64,
            top_k: 64,
            edge_k: 16,
            descriptor_widths: vec![64, 64, 128, 256],
            angle_shared_widths: vec![128, 64],
            angle_head_widths: vec![32],
            head_widths: vec![256, 128],
            similarity: SimilarityMode::Sum,
            mixed_sampling: true,
            freezing: true,
            rigid_transform: true,
            fps_start: 0,
            partial_cap: None,
        }
    }
}

impl CrefConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_points", self.num_points),
            ("patch_size", self.patch_size),
            ("top_k", self.top_k),
            ("edge_k", self.edge_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.patch_size < 3 {
            return Err(Error::Config("patch_size must be at least 3 for normals".into()));
        }
        if self.descriptor_widths.is_empty() || self.angle_shared_widths.is_empty() {
            return Err(Error::Config("descriptor and angle networks need at least one layer".into()));
        }
        let widths = self
            .descriptor_widths
            .iter()
            .chain(&self.angle_shared_widths)
            .chain(&self.angle_head_widths)
            .chain(&self.head_widths);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if let Some(cap) = self.partial_cap {
            if cap < self.top_k.max(self.patch_size) {
                return Err(Error::Config(format!(
                    "partial_cap {cap} is below top_k/patch_size {}",
                    self.top_k.max(self.patch_size)
                )));
            }
        }
        Ok(())
    }
}

/// Descriptor network, angle networks and displacement head of the refiner.
#[derive(Clone, Debug)]
pub struct CrefModel {
    pub config: CrefConfig,
    pub descriptor: DescriptorNet,
    pub angles: Option<AngleNets>,
    pub head: Mlp,
}

/// Everything about one input pair that does not depend on parameters:
/// the sampled cloud, and the patches around its adjustable points and
/// around the candidate partial points.
#[derive(Clone, Debug)]
pub struct PreparedShape {
    pub sampled: SampledCloud,
    /// Indices into `sampled` of the points that may move.
    pub active: Vec<usize>,
    pub query_patches: Vec<Patch>,
    /// Indices into the partial cloud of the similarity candidates.
    pub candidates: Vec<usize>,
    pub candidate_points: Vec<Vec3>,
    pub candidate_patches: Vec<Patch>,
    /// Per query patch, the row of the patch that holds the query point.
    center_rows: Vec<usize>,
}

/// Intermediate values of one refinement pass.
pub struct RefinePass {
    pub refined: Vec<Vec3>,
    pub similarity: SimilarityMatrix,
    pub offsets: Vec<Vec3>,
    pub frames: Vec<RigidFrame>,
    canon: CanonicalBatch,
    desc_cache: DescriptorCache,
    descriptors: FeatureMatrix,
    agg: Aggregation,
    head_cache: MlpCache,
    head_out: FeatureMatrix,
}

impl CrefModel {
    pub fn new(config: CrefConfig) -> Result<Self> {
        config.validate()?;
        let descriptor = DescriptorNet::new("cref.desc", &config.descriptor_widths, config.edge_k);
        let angles = config.rigid_transform.then(|| {
            AngleNets::new("cref.angle", config.patch_size, &config.angle_shared_widths, &config.angle_head_widths)
        });
        let d = descriptor.out_dim();
        let mut dims = vec![3 * d + 3];
        dims.extend_from_slice(&config.head_widths);
        dims.push(3);
        let head = Mlp::new("cref.head", &MlpArch::new(&dims, false));
        Ok(Self {
            config,
            descriptor,
            angles,
            head,
        })
    }

    /// Fresh seeded parameters; the displacement head starts at zero so the
    /// initial refinement is the identity.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.descriptor.init(&mut store, &mut rng);
        if let Some(a) = &self.angles {
            a.init(&mut store, &mut rng);
        }
        self.head.init_zero_last(&mut store, &mut rng);
        store.set_meta(CONFIG_KEY, serde_json::to_string(&self.config).expect("config serializes"));
        store.set_meta(STEPS_KEY, "0");
        store
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let raw = params
            .meta(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint("not a refiner checkpoint".into()))?;
        let config: CrefConfig =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad refiner config: {e}")))?;
        let model = Self::new(config)?;
        model.check(params)?;
        Ok(model)
    }

    pub fn check(&self, params: &ParamStore) -> Result<()> {
        self.descriptor.check(params)?;
        if let Some(a) = &self.angles {
            a.check(params)?;
        }
        self.head.check(params)
    }

    /// Samples the working cloud and extracts all patches.
    pub fn prepare(&self, partial: &PointCloud, coarse: &PointCloud) -> Result<PreparedShape> {
        let cfg = &self.config;
        let sampled = if cfg.mixed_sampling {
            let s = mixed_sample(partial, coarse, cfg.num_points, cfg.fps_start)?;
            if cfg.freezing {
                s
            } else {
                s.unfrozen()
            }
        } else {
            let idx = farthest_point_sample(coarse, cfg.num_points, cfg.fps_start.min(coarse.len().saturating_sub(1)))?;
            SampledCloud {
                points: idx.iter().map(|&i| coarse[i]).collect(),
                frozen: vec![false; idx.len()],
                source_index: vec![None; idx.len()],
            }
        };
        let k = cfg.patch_size;
        if sampled.len() < k || partial.len() < k {
            return Err(Error::Size(format!(
                "patch size {k} exceeds sampled ({}) or partial ({}) size",
                sampled.len(),
                partial.len()
            )));
        }
        if partial.len() < cfg.top_k {
            return Err(Error::Size(format!("top_k {} exceeds {} partial points", cfg.top_k, partial.len())));
        }
        let cloud = sampled.to_cloud();
        let active = sampled.adjustable();
        let query_patches = active.iter().map(|&i| extract_patch(&cloud, i, k)).collect::<Result<Vec<_>>>()?;
        let center_rows = query_patches
            .iter()
            .map(|p| p.neighbor_indices.iter().position(|&j| j == p.center_index).unwrap_or(0))
            .collect();
        let candidates = match cfg.partial_cap {
            Some(cap) if cap < partial.len() => farthest_point_sample(partial, cap, 0)?,
            _ => (0..partial.len()).collect(),
        };
        let candidate_points = candidates.iter().map(|&i| partial[i]).collect();
        let candidate_patches = candidates.iter().map(|&i| extract_patch(partial, i, k)).collect::<Result<Vec<_>>>()?;
        Ok(PreparedShape {
            sampled,
            active,
            query_patches,
            candidates,
            candidate_points,
            candidate_patches,
            center_rows,
        })
    }

    /// Runs the refiner on a prepared shape.
    pub fn forward(&self, params: &ParamStore, prep: &PreparedShape) -> Result<RefinePass> {
        let nq = prep.active.len();
        let patches: Vec<&Patch> = prep.query_patches.iter().chain(&prep.candidate_patches).collect();
        let canon = canonicalize_batch(&patches, params, self.angles.as_ref())?;
        let (descriptors, desc_cache) = self.descriptor.forward(params, &canon.coords, self.config.patch_size)?;
        let d = self.descriptor.out_dim();
        let fq = FeatureMatrix::from_vec(nq, d, descriptors.data()[..nq * d].to_vec())?;
        let fp = FeatureMatrix::from_vec(patches.len() - nq, d, descriptors.data()[nq * d..].to_vec())?;
        let q_points: Vec<Vec3> = prep.active.iter().map(|&i| prep.sampled.points[i]).collect();
        let w = similarity_matrix(&q_points, &prep.candidate_points, Some(&fq), Some(&fp), self.config.similarity)?;
        let agg = aggregate_topk(&w, &fp, &fq, self.config.top_k)?;

        let k = self.config.patch_size;
        let mut input = FeatureMatrix::zeros(nq, 3 * d + 3);
        for j in 0..nq {
            let row = input.row_mut(j);
            row[..3 * d].copy_from_slice(agg.fused.row(j));
            row[3 * d..].copy_from_slice(canon.coords.row(j * k + prep.center_rows[j]));
        }
        let (head_out, head_cache) = self.head.forward_cached(params, &input);

        let mut refined = prep.sampled.points.clone();
        let mut offsets = Vec::with_capacity(nq);
        for (j, &i) in prep.active.iter().enumerate() {
            let o = Vec3::new(head_out.get(j, 0), head_out.get(j, 1), head_out.get(j, 2));
            let world = crate::geometry::invert_frame(&o, &canon.frames[j]);
            refined[i] += world;
            offsets.push(world);
        }
        if !refined.iter().all(|p| p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("refined points".into()));
        }
        Ok(RefinePass {
            refined,
            similarity: w,
            offsets,
            frames: canon.frames[..nq].to_vec(),
            canon,
            desc_cache,
            descriptors,
            agg,
            head_cache,
            head_out,
        })
    }

    /// Accumulates parameter gradients given `d_refined`, the gradient with
    /// respect to every point of the refined cloud.
    pub fn backward(
        &self,
        params: &ParamStore,
        prep: &PreparedShape,
        pass: &RefinePass,
        d_refined: &[Vec3],
        grads: &mut ParamStore,
    ) {
        let nq = prep.active.len();
        let d = self.descriptor.out_dim();
        let k = self.config.patch_size;
        let mut d_head = FeatureMatrix::zeros(nq, 3);
        let mut d_phi: Vec<CosSin> = vec![[0.0; 2]; pass.canon.len()];
        for (j, &i) in prep.active.iter().enumerate() {
            let g = d_refined[i];
            let frame = &pass.canon.frames[j];
            // world = r1^T (r2^T o); h is the gradient on r2^T o.
            let h = frame.r1 * g;
            let o = Vec3::new(pass.head_out.get(j, 0), pass.head_out.get(j, 1), pass.head_out.get(j, 2));
            let d_o = frame.r2 * h;
            d_head.row_mut(j).copy_from_slice(&[d_o.x, d_o.y, d_o.z]);
            d_phi[j] = [h.x * o.x + h.y * o.y, h.x * o.y - h.y * o.x];
        }
        let d_input = self.head.backward(params, &pass.head_cache, &d_head, grads);
        let mut d_fused = FeatureMatrix::zeros(nq, 3 * d);
        let mut d_coords = FeatureMatrix::zeros(pass.canon.coords.rows(), 3);
        for j in 0..nq {
            let row = d_input.row(j);
            d_fused.row_mut(j).copy_from_slice(&row[..3 * d]);
            let r = j * k + prep.center_rows[j];
            for c in 0..3 {
                d_coords.data_mut()[r * 3 + c] += row[3 * d + c];
            }
        }
        let np = pass.descriptors.rows() - nq;
        let (d_fq, d_fp) = pass.agg.backward(&d_fused, d, np);
        let mut d_desc = FeatureMatrix::zeros(nq + np, d);
        d_desc.data_mut()[..nq * d].copy_from_slice(d_fq.data());
        d_desc.data_mut()[nq * d..].copy_from_slice(d_fp.data());
        let d_c = self.descriptor.backward(params, &pass.desc_cache, &d_desc, grads);
        d_coords.add_assign(&d_c);
        if let Some(angles) = &self.angles {
            canonicalize_backward(&pass.canon, params, angles, &d_coords, Some(&d_phi), grads);
        }
    }

    /// Refined cloud; frozen points are copied through untouched.
    pub fn refine(&self, params: &ParamStore, partial: &PointCloud, coarse: &PointCloud) -> Result<PointCloud> {
        Ok(self.refine_detailed(params, partial, coarse)?.0)
    }

    /// Refined cloud together with the prepared shape and the pass
    /// internals (similarity matrix, offsets).
    pub fn refine_detailed(
        &self,
        params: &ParamStore,
        partial: &PointCloud,
        coarse: &PointCloud,
    ) -> Result<(PointCloud, PreparedShape, RefinePass)> {
        let prep = self.prepare(partial, coarse)?;
        let pass = self.forward(params, &prep)?;
        let refined = pass.refined.clone();
        if refined.len() != self.config.num_points {
            return Err(Error::Size(format!(
                "refined cloud has {} points, expected {}",
                refined.len(),
                self.config.num_points
            )));
        }
        Ok((PointCloud::new(refined)?, prep, pass))
    }

    /// Chamfer loss of one prepared shape against its ground truth; with
    /// `grads` the gradient is accumulated there, scaled by `weight`.
    pub fn loss(
        &self,
        params: &ParamStore,
        prep: &PreparedShape,
        truth: &PointCloud,
        grads: Option<(&mut ParamStore, f64)>,
    ) -> Result<f64> {
        let pass = self.forward(params, prep)?;
        let (loss, d) = chamfer_l2_with_grad(&pass.refined, truth.points())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("refiner loss {loss}")));
        }
        if let Some((grads, weight)) = grads {
            let scaled: Vec<Vec3> = d.iter().map(|g| g * weight).collect();
            self.backward(params, prep, &pass, &scaled, grads);
        }
        Ok(loss)
    }
}

/// Refines `coarse` against `partial` with a trained refiner checkpoint.
pub fn refine(partial: &PointCloud, coarse: &PointCloud, params: &ParamStore) -> Result<PointCloud> {
    CrefModel::from_params(params)?.refine(params, partial, coarse)
}

pub fn trained_steps(params: &ParamStore) -> u64 {
    params.meta(STEPS_KEY).and_then(|s| s.parse().ok()).unwrap_or(0)
}

/// A training triple with a precomputed coarse cloud.
#[derive(Clone, Debug)]
pub struct CrefSample {
    pub partial: PointCloud,
    pub coarse: PointCloud,
    pub complete: PointCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrefTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for CrefTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            log_every: 10,
        }
    }
}

/// Minimizes the Chamfer distance between refined clouds and ground truth.
/// Shapes are visited in a seeded shuffled order each epoch.
pub fn train_cref(
    model: &CrefModel,
    samples: &[CrefSample],
    config: &CrefTrainConfig,
    resume: Option<ParamStore>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Size("no refiner training samples".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let prepared = samples
        .iter()
        .map(|s| model.prepare(&s.partial, &s.coarse))
        .collect::<Result<Vec<_>>>()?;
    train_prepared(model, &prepared, samples.iter().map(|s| &s.complete).collect(), config, resume)
}

/// [`train_cref`] over shapes that were already prepared.
pub fn train_prepared(
    model: &CrefModel,
    prepared: &[PreparedShape],
    truths: Vec<&PointCloud>,
    config: &CrefTrainConfig,
    resume: Option<ParamStore>,
) -> Result<TrainOutcome> {
    train_prepared_monitored(model, prepared, truths, config, resume, &mut |_, _| Ok(()))
}

/// [`train_prepared`] that hands the parameters to `monitor` after every
/// epoch along with the epoch number.
pub fn train_prepared_monitored(
    model: &CrefModel,
    prepared: &[PreparedShape],
    truths: Vec<&PointCloud>,
    config: &CrefTrainConfig,
    resume: Option<ParamStore>,
    monitor: &mut dyn FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    if prepared.len() != truths.len() || prepared.is_empty() {
        return Err(Error::Size("prepared shapes and ground truths must pair up".into()));
    }
    let mut params = match resume {
        Some(p) => {
            model.check(&p)?;
            p
        }
        None => model.init_params(config.seed),
    };
    let start = trained_steps(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ start.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut opt = Optimizer::new(config.optimizer, &params);
    let mut grads = params.zeros_like();
    let mut trace = Vec::new();
    let mut step = start;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            grads.fill_zero();
            let weight = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss += weight
                    * model
                        .loss(&params, &prepared[i], truths[i], Some((&mut grads, weight)))
                        .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
            }
            opt.step(&mut params, &grads)?;
            trace.push((step, loss));
            if config.log_every > 0 && step.is_multiple_of(config.log_every as u64) {
                log::info!("cref step {step} loss {loss:.6}");
            }
        }
        monitor(epoch, &params)?;
    }
    params.set_meta(STEPS_KEY, step.to_string());
    Ok(TrainOutcome { params, trace })
}
