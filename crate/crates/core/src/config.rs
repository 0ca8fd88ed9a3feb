//! Run configuration: one flat key-value TOML file, with `key=value`
//! overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cref::{CrefConfig, CrefTrainConfig, SimilarityMode};
use crate::data::{DatasetConfig, Family};
use crate::diffusion::{DcgConfig, DcgTrainConfig};
use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, OptimizerKind};

/// Derives an independent stream seed from the run seed and a tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every random stream of a run is derived from this.
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub log_every: usize,

    pub families: Vec<Family>,
    pub instances_per_family: usize,
    pub views_per_instance: usize,
    pub partial_points: usize,
    pub complete_points: usize,
    pub dense_points: usize,
    pub occlusion_fraction: f64,
    pub view_jitter: f64,
    pub test_fraction: f64,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub coarse_points: usize,
    pub latent_dim: usize,
    pub time_dim: usize,
    pub encoder_point_widths: Vec<usize>,
    pub encoder_head_widths: Vec<usize>,
    pub denoiser_widths: Vec<usize>,
    pub dcg_iterations: usize,
    pub dcg_batch_size: usize,
    pub dcg_optimizer: OptimizerKind,
    pub dcg_lr: f64,
    pub dcg_momentum: f64,
    pub dcg_clip_norm: Option<f64>,
    pub dcg_points_per_shape: Option<usize>,

    pub num_points: usize,
    pub patch_size: usize,
    pub top_k: usize,
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
    pub partial_cap: Option<usize>,
    pub cref_epochs: usize,
    pub cref_batch_size: usize,
    pub cref_optimizer: OptimizerKind,
    pub cref_lr: f64,
    pub cref_momentum: f64,
    pub cref_clip_norm: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let dcg = DcgConfig::default();
        let dcg_train = DcgTrainConfig::default();
        let cref = CrefConfig::default();
        let cref_train = CrefTrainConfig::default();
        Self {
            seed: 0,
            dataset_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "run".into(),
            log_every: 50,
            families: data.families,
            instances_per_family: data.instances_per_family,
            views_per_instance: data.views_per_instance,
            partial_points: data.partial_points,
            complete_points: data.complete_points,
            dense_points: data.dense_points,
            occlusion_fraction: data.occlusion_fraction,
            view_jitter: data.view_jitter,
            test_fraction: data.test_fraction,
            diffusion_steps: dcg.steps,
            beta_start: dcg.beta_start,
            beta_end: dcg.beta_end,
            coarse_points: dcg.num_points,
            latent_dim: dcg.latent_dim,
            time_dim: dcg.time_dim,
            encoder_point_widths: dcg.encoder_point_widths,
            encoder_head_widths: dcg.encoder_head_widths,
            denoiser_widths: dcg.denoiser_widths,
            dcg_iterations: dcg_train.iterations,
            dcg_batch_size: dcg_train.batch_size,
            dcg_optimizer: dcg_train.optimizer.kind,
            dcg_lr: dcg_train.optimizer.lr,
            dcg_momentum: dcg_train.optimizer.momentum,
            dcg_clip_norm: dcg_train.optimizer.clip_norm,
            dcg_points_per_shape: dcg_train.points_per_shape,
            num_points: cref.num_points,
            patch_size: cref.patch_size,
            top_k: cref.top_k,
            edge_k: cref.edge_k,
            descriptor_widths: cref.descriptor_widths,
            angle_shared_widths: cref.angle_shared_widths,
            angle_head_widths: cref.angle_head_widths,
            head_widths: cref.head_widths,
            similarity: cref.similarity,
            mixed_sampling: cref.mixed_sampling,
            freezing: cref.freezing,
            rigid_transform: cref.rigid_transform,
            fps_start: cref.fps_start,
            partial_cap: cref.partial_cap,
            cref_epochs: cref_train.epochs,
            cref_batch_size: cref_train.batch_size,
            cref_optimizer: cref_train.optimizer.kind,
            cref_lr: cref_train.optimizer.lr,
            cref_momentum: cref_train.optimizer.momentum,
            cref_clip_norm: cref_train.optimizer.clip_norm,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `key=value` where `value` is TOML (`3`, `true`, `[8, 8]`,
    /// `"adam"`); a bare word is taken as a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        self.set_all([assignment])
    }

    /// Applies several assignments, validating only the final result so
    /// that interdependent keys can be changed in any order.
    pub fn set_all<'a>(&mut self, assignments: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).expect("run config serializes");
        let mut keys = Vec::new();
        for assignment in assignments {
            let (key, raw) = assignment
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed table has v"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            table.insert(key.to_string(), value);
            let _: Self = table
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("setting {key}: {}", e.message())))?;
            keys.push(key.to_string());
        }
        let updated: Self = table.try_into().expect("checked per key");
        updated
            .validate()
            .map_err(|e| Error::Config(format!("setting {}: {e}", keys.join(", "))))?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("log_every", self.log_every),
            ("dcg_iterations", self.dcg_iterations),
            ("dcg_batch_size", self.dcg_batch_size),
            ("cref_epochs", self.cref_epochs),
            ("cref_batch_size", self.cref_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, lr) in [("dcg_lr", self.dcg_lr), ("cref_lr", self.cref_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        if self.dcg_points_per_shape == Some(0) {
            return Err(Error::Config("dcg_points_per_shape must be positive".into()));
        }
        self.dataset().validate()?;
        self.dcg().validate()?;
        self.cref().validate()?;
        if self.partial_points < self.patch_size || self.partial_points < self.top_k {
            return Err(Error::Config(format!(
                "partial_points ({}) must be at least patch_size ({}) and top_k ({})",
                self.partial_points, self.patch_size, self.top_k
            )));
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            families: self.families.clone(),
            instances_per_family: self.instances_per_family,
            views_per_instance: self.views_per_instance,
            partial_points: self.partial_points,
            complete_points: self.complete_points,
            dense_points: self.dense_points,
            occlusion_fraction: self.occlusion_fraction,
            view_jitter: self.view_jitter,
            test_fraction: self.test_fraction,
            seed: derive_seed(self.seed, "dataset"),
        }
    }

    pub fn dcg(&self) -> DcgConfig {
        DcgConfig {
            steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            num_points: self.coarse_points,
            latent_dim: self.latent_dim,
            time_dim: self.time_dim,
            encoder_point_widths: self.encoder_point_widths.clone(),
            encoder_head_widths: self.encoder_head_widths.clone(),
            denoiser_widths: self.denoiser_widths.clone(),
        }
    }

    pub fn dcg_train(&self) -> DcgTrainConfig {
        DcgTrainConfig {
            iterations: self.dcg_iterations,
            batch_size: self.dcg_batch_size,
            optimizer: OptimizerConfig {
                kind: self.dcg_optimizer,
                lr: self.dcg_lr,
                momentum: self.dcg_momentum,
                clip_norm: self.dcg_clip_norm,
            },
            seed: derive_seed(self.seed, "dcg-train"),
            points_per_shape: self.dcg_points_per_shape,
            log_every: self.log_every,
        }
    }

    pub fn cref(&self) -> CrefConfig {
        CrefConfig {
            num_points: self.num_points,
            patch_size: self.patch_size,
            top_k: self.top_k,
            edge_k: self.edge_k,
            descriptor_widths: self.descriptor_widths.clone(),
            angle_shared_widths: self.angle_shared_widths.clone(),
            angle_head_widths: self.angle_head_widths.clone(),
            head_widths: self.head_widths.clone(),
            similarity: self.similarity,
            mixed_sampling: self.mixed_sampling,
            freezing: self.freezing,
            rigid_transform: self.rigid_transform,
            fps_start: self.fps_start,
            partial_cap: self.partial_cap,
        }
    }

    pub fn cref_train(&self) -> CrefTrainConfig {
        CrefTrainConfig {
            epochs: self.cref_epochs,
            batch_size: self.cref_batch_size,
            optimizer: OptimizerConfig {
                kind: self.cref_optimizer,
                lr: self.cref_lr,
                momentum: self.cref_momentum,
                clip_norm: self.cref_clip_norm,
            },
            seed: derive_seed(self.seed, "cref-train"),
            log_every: self.log_every,
        }
    }

    /// Seed of the reverse diffusion chain for one sample.
    pub fn coarse_seed(&self, sample_id: &str) -> u64 {
        derive_seed(self.seed, &format!("coarse/{sample_id}"))
    }
}
