//! Conditional denoising diffusion over fixed-size point sets.

mod denoiser;
mod schedule;

pub use denoiser::{time_embedding, Denoiser, DenoiserCache};
pub use schedule::{forward_sample, make_linear_schedule, DiffusionSchedule};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::nn::{FeatureMatrix, Optimizer, OptimizerConfig, ParamStore, PointNetEncoder, TrainOutcome};

const CONFIG_KEY: &str = "dcg.config";
const STEPS_KEY: &str = "dcg.trained_steps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcgConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Points generated per shape.
    pub num_points: usize,
    pub latent_dim: usize,
    pub time_dim: usize,
    pub encoder_point_widths: Vec<usize>,
    pub encoder_head_widths: Vec<usize>,
    pub denoiser_widths: Vec<usize>,
}

impl Default for DcgConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            num_points: 2048,
            latent_dim: 512,
            time_dim: 64,
            encoder_point_widths: vec![64, 128, 256],
            encoder_head_widths: vec![512],
            denoiser_widths: vec![128, 256, 256],
        }
    }
}

impl DcgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 || self.latent_dim == 0 {
            return Err(Error::Config("num_points and latent_dim must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim must be even and positive, got {}", self.time_dim)));
        }
        if self.denoiser_widths.is_empty() || self.encoder_point_widths.is_empty() {
            return Err(Error::Config("network widths must not be empty".into()));
        }
        if self.denoiser_widths.iter().chain(&self.encoder_point_widths).chain(&self.encoder_head_widths).any(|&w| w == 0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        make_linear_schedule(self.steps, self.beta_start, self.beta_end).map(|_| ())
    }
}

/// Encoder, denoiser and schedule of the coarse generator. Parameters live in
/// a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DcgModel {
    pub config: DcgConfig,
    pub encoder: PointNetEncoder,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
}

impl DcgModel {
    pub fn new(config: DcgConfig) -> Result<Self> {
        config.validate()?;
        let schedule = make_linear_schedule(config.steps, config.beta_start, config.beta_end)?;
        let encoder = PointNetEncoder::new(
            "dcg.enc",
            &config.encoder_point_widths,
            &config.encoder_head_widths,
            config.latent_dim,
        );
        let denoiser = Denoiser::new("dcg.den", config.time_dim + config.latent_dim, &config.denoiser_widths);
        Ok(Self {
            config,
            encoder,
            denoiser,
            schedule,
        })
    }

    /// Fresh seeded parameters tagged with this model's configuration.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        self.denoiser.init(&mut store, &mut rng);
        store.set_meta(CONFIG_KEY, serde_json::to_string(&self.config).expect("config serializes"));
        store.set_meta(STEPS_KEY, "0");
        store
    }

    /// Rebuilds the model recorded in a checkpoint and checks its arrays.
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let raw = params
            .meta(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint("not a coarse-generator checkpoint".into()))?;
        let config: DcgConfig = serde_json::from_str(raw)
            .map_err(|e| Error::Checkpoint(format!("bad generator config: {e}")))?;
        let model = Self::new(config)?;
        model.check(params)?;
        Ok(model)
    }

    pub fn check(&self, params: &ParamStore) -> Result<()> {
        self.encoder.check(params)?;
        self.denoiser.check(params)
    }

    pub fn encode(&self, params: &ParamStore, partial: &PointCloud) -> Result<Vec<f64>> {
        self.encoder.encode(params, partial)
    }

    fn context(&self, t: usize, z: &[f64]) -> Result<FeatureMatrix> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent of length {} where {} expected",
                z.len(),
                self.config.latent_dim
            )));
        }
        let mut row = time_embedding(t, self.config.time_dim);
        row.extend_from_slice(z);
        FeatureMatrix::from_vec(1, row.len(), row)
    }

    /// Predicted noise for every point of `xt`.
    pub fn predict_noise(&self, params: &ParamStore, xt: &[Vec3], t: usize, z: &[f64]) -> Result<Vec<Vec3>> {
        self.schedule.check_step(t)?;
        let ctx = self.context(t, z)?;
        let x = FeatureMatrix::from_points(xt);
        let (eps, _) = self.denoiser.forward(params, &x, &ctx, &[xt.len()])?;
        Ok(eps.to_points())
    }

    /// One ancestral step: `mu + sqrt(beta_t) * noise`, with the mean from
    /// the noise prediction and no noise added at `t = 1`.
    pub fn reverse_step(
        &self,
        params: &ParamStore,
        xt: &PointCloud,
        t: usize,
        z: &[f64],
        noise: &[Vec3],
    ) -> Result<PointCloud> {
        if noise.len() != xt.len() {
            return Err(Error::Shape(format!("{} noise vectors for {} points", noise.len(), xt.len())));
        }
        let eps = self.predict_noise(params, xt.points(), t, z)?;
        let s = &self.schedule;
        let (alpha, beta, ab) = (s.alpha(t), s.beta(t), s.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
        let out = xt
            .iter()
            .zip(&eps)
            .zip(noise)
            .map(|((x, e), n)| (x - e * coef) * inv + n * sigma)
            .collect();
        PointCloud::new(out).map_err(|_| Error::NonFinite(format!("reverse step {t} produced non-finite points")))
    }

    /// Full reverse chain from seeded unit Gaussian noise. Does not require
    /// the parameters to have been trained.
    pub fn sample(&self, params: &ParamStore, partial: &PointCloud, seed: u64) -> Result<PointCloud> {
        let z = self.encode(params, partial)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.num_points;
        let mut x = PointCloud::new(gaussian_points(n, &mut rng))?;
        for t in (1..=self.schedule.steps()).rev() {
            let noise = if t > 1 { gaussian_points(n, &mut rng) } else { vec![Vec3::zeros(); n] };
            x = self.reverse_step(params, &x, t, &z, &noise)?;
        }
        Ok(x)
    }
}

pub fn gaussian_points(n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect()
}

/// Optimizer steps recorded in a checkpoint, if any.
pub fn trained_steps(params: &ParamStore) -> u64 {
    params.meta(STEPS_KEY).and_then(|s| s.parse().ok()).unwrap_or(0)
}

/// Coarse completion of `partial` with a trained checkpoint.
pub fn generate_coarse(
    partial: &PointCloud,
    params: &ParamStore,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<PointCloud> {
    if partial.is_empty() {
        return Err(Error::Size("partial cloud is empty".into()));
    }
    let model = DcgModel::from_params(params)?;
    if trained_steps(params) == 0 {
        return Err(Error::Checkpoint("coarse generator checkpoint is untrained".into()));
    }
    if &model.schedule != sched {
        return Err(Error::Checkpoint(format!(
            "schedule mismatch: checkpoint uses {} steps, caller {}",
            model.schedule.steps(),
            sched.steps()
        )));
    }
    model.sample(params, partial, seed)
}

#[derive(Clone, Debug)]
pub struct TrainPair {
    pub partial: PointCloud,
    pub complete: PointCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcgTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Random subset of target points used per shape and step. The loss is
    /// per point, so subsampling keeps it unbiased.
    pub points_per_shape: Option<usize>,
    pub log_every: usize,
}

impl Default for DcgTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            points_per_shape: None,
            log_every: 50,
        }
    }
}

/// Epsilon-prediction MSE of one batch and its gradient.
pub struct DcgBatch<'a> {
    pub pairs: Vec<&'a TrainPair>,
    pub steps: Vec<usize>,
    /// Per shape: target point indices and matching noise.
    pub targets: Vec<(Vec<usize>, Vec<Vec3>)>,
}

impl DcgModel {
    /// Loss of a fixed batch; when `grads` is given the gradient is
    /// accumulated there.
    pub fn batch_loss(&self, params: &ParamStore, batch: &DcgBatch, grads: Option<&mut ParamStore>) -> Result<f64> {
        let mut latents = Vec::with_capacity(batch.pairs.len());
        let mut enc_caches = Vec::with_capacity(batch.pairs.len());
        for pair in &batch.pairs {
            let (z, cache) = self.encoder.forward_cached(params, &pair.partial)?;
            latents.push(z);
            enc_caches.push(cache);
        }
        let ctx_dim = self.denoiser.ctx_dim();
        let mut ctx = FeatureMatrix::zeros(batch.pairs.len(), ctx_dim);
        let mut xt = Vec::new();
        let mut eps = Vec::new();
        let mut groups = Vec::with_capacity(batch.pairs.len());
        for (s, ((pair, &t), (idx, noise))) in batch.pairs.iter().zip(&batch.steps).zip(&batch.targets).enumerate() {
            self.schedule.check_step(t)?;
            ctx.row_mut(s).copy_from_slice(&self.context(t, &latents[s])?.into_vec());
            let ab = self.schedule.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (&i, e) in idx.iter().zip(noise) {
                xt.push(pair.complete[i] * a + e * b);
                eps.push(*e);
            }
            groups.push(idx.len());
        }
        let x = FeatureMatrix::from_points(&xt);
        let (pred, cache) = self.denoiser.forward(params, &x, &ctx, &groups)?;
        let count = (3 * eps.len()) as f64;
        let mut d_out = FeatureMatrix::zeros(pred.rows(), 3);
        let mut loss = 0.0;
        for (r, e) in eps.iter().enumerate() {
            for c in 0..3 {
                let diff = pred.get(r, c) - e[c];
                loss += diff * diff;
                d_out.set(r, c, 2.0 * diff / count);
            }
        }
        loss /= count;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("diffusion loss {loss}")));
        }
        if let Some(grads) = grads {
            let dctx = self.denoiser.backward(params, &cache, &d_out, grads);
            let td = self.config.time_dim;
            for (s, ec) in enc_caches.iter().enumerate() {
                self.encoder.backward(params, ec, &dctx.row(s)[td..], grads);
            }
        }
        Ok(loss)
    }

    /// Draws a training batch: shapes, steps, target points and noise.
    pub fn draw_batch<'a>(
        &self,
        pairs: &'a [TrainPair],
        batch_size: usize,
        points_per_shape: Option<usize>,
        rng: &mut impl Rng,
    ) -> DcgBatch<'a> {
        let mut batch = DcgBatch {
            pairs: Vec::with_capacity(batch_size),
            steps: Vec::with_capacity(batch_size),
            targets: Vec::with_capacity(batch_size),
        };
        for _ in 0..batch_size {
            let pair = &pairs[rng.gen_range(0..pairs.len())];
            let n = pair.complete.len();
            let idx: Vec<usize> = match points_per_shape {
                Some(m) if m < n => rand::seq::index::sample(rng, n, m).into_vec(),
                _ => (0..n).collect(),
            };
            batch.steps.push(rng.gen_range(1..=self.schedule.steps()));
            let noise = gaussian_points(idx.len(), rng);
            batch.targets.push((idx, noise));
            batch.pairs.push(pair);
        }
        batch
    }
}

/// Trains encoder and denoiser jointly on epsilon-prediction MSE. Passing
/// `resume` continues from an earlier checkpoint and its step count.
pub fn train_dcg(
    model: &DcgModel,
    pairs: &[TrainPair],
    config: &DcgTrainConfig,
    resume: Option<ParamStore>,
) -> Result<TrainOutcome> {
    train_dcg_monitored(model, pairs, config, resume, &mut |_, _| Ok(()))
}

/// [`train_dcg`] that hands the parameters to `monitor` every `log_every`
/// steps, e.g. for validation.
pub fn train_dcg_monitored(
    model: &DcgModel,
    pairs: &[TrainPair],
    config: &DcgTrainConfig,
    resume: Option<ParamStore>,
    monitor: &mut dyn FnMut(u64, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Size("no training pairs".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.partial.is_empty() || p.complete.is_empty()) {
        return Err(Error::Size(format!(
            "training pair with {} partial and {} complete points",
            p.partial.len(),
            p.complete.len()
        )));
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
    let mut trace = Vec::with_capacity(config.iterations);
    for i in 0..config.iterations as u64 {
        let step = start + i + 1;
        let batch = model.draw_batch(pairs, config.batch_size, config.points_per_shape, &mut rng);
        grads.fill_zero();
        let loss = model
            .batch_loss(&params, &batch, Some(&mut grads))
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        opt.step(&mut params, &grads)?;
        trace.push((step, loss));
        if config.log_every > 0 && step.is_multiple_of(config.log_every as u64) {
            log::info!("dcg step {step} loss {loss:.5}");
            monitor(step, &params)?;
        }
    }
    params.set_meta(STEPS_KEY, (start + config.iterations as u64).to_string());
    Ok(TrainOutcome { params, trace })
}
