//! Stage orchestration shared by the command-line tool and the end-to-end
//! checks: dataset, generator training, coarse caching, refiner training,
//! completion and evaluation. Every file a run produces goes under the
//! configured directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::cref::{self, similarity_heatmap, CrefModel, PreparedShape, SimilarityMatrix};
use crate::data::{build_dataset, read_cloud, write_cloud, Manifest, ManifestRecord, SampleRecord, Split, MANIFEST_FILE};
use crate::diffusion::{self, DcgModel, TrainPair};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{chamfer_l2, report_csv, report_jsonl, sig6, summarize, summary_csv, MetricReport, ReportRow};
use crate::nn::ParamStore;

pub const DCG_CHECKPOINT: &str = "dcg.ckpt";
pub const CREF_CHECKPOINT: &str = "cref.ckpt";
const COARSE_DIR: &str = "coarse";
const COARSE_SOURCE: &str = "SOURCE";

/// Where a run reads and writes its files.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            dataset_dir: cfg.dataset_dir.clone(),
            checkpoint_dir: cfg.checkpoint_dir.clone(),
            output_dir: cfg.output_dir.clone(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dataset_dir.join(MANIFEST_FILE)
    }

    pub fn dcg_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join(DCG_CHECKPOINT)
    }

    pub fn cref_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join(CREF_CHECKPOINT)
    }

    pub fn coarse_dir(&self) -> PathBuf {
        self.output_dir.join(COARSE_DIR)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Records the configuration a command actually ran with.
pub fn write_effective_config(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.output_dir.join("config.toml");
    write_text(&path, &cfg.to_toml())?;
    Ok(path)
}

pub fn run_dataset(cfg: &RunConfig) -> Result<Manifest> {
    build_dataset(&cfg.dataset(), &cfg.dataset_dir)
}

pub fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = RunLayout::new(cfg).manifest();
    if !path.exists() {
        return Err(Error::Config(format!(
            "no dataset manifest at {}; build one with the dataset command first",
            path.display()
        )));
    }
    Manifest::load(&path)
}

fn load_records(manifest: &Manifest, split: Split) -> Result<Vec<SampleRecord>> {
    manifest.split(split).map(|r| manifest.load_record(r)).collect()
}

fn load_checkpoint(path: &Path, what: &str, hint: &str) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no {what} checkpoint at {}; {hint}", path.display())));
    }
    ParamStore::load(path)
}

pub fn loss_trace_csv(trace: &[(u64, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in trace {
        let _ = writeln!(out, "{step},{}", sig6(*loss));
    }
    out
}

fn append_trace(path: &Path, trace: &[(u64, f64)], resumed: bool) -> Result<()> {
    let csv = loss_trace_csv(trace);
    if resumed && path.exists() {
        let mut existing = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        existing.push_str(csv.split_once('\n').map(|(_, rows)| rows).unwrap_or(""));
        write_text(path, &existing)
    } else {
        write_text(path, &csv)
    }
}

/// Outcome of a training stage.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub checkpoint: PathBuf,
    pub trace_file: PathBuf,
    pub first_step: u64,
    pub last_step: u64,
    pub final_loss: f64,
    /// `(step or epoch, mean validation Chamfer distance)`.
    pub validation: Vec<(u64, f64)>,
}

const DCG_VALIDATION_SHAPES: usize = 2;
const CREF_VALIDATION_SHAPES: usize = 8;

/// Trains the coarse generator on the train split and saves its checkpoint.
/// With `resume`, continues from the existing checkpoint and step count.
pub fn run_train_dcg(cfg: &RunConfig, resume: bool) -> Result<StageReport> {
    let layout = RunLayout::new(cfg);
    let manifest = load_manifest(cfg)?;
    let pairs: Vec<TrainPair> = load_records(&manifest, Split::Train)?
        .into_iter()
        .map(|s| TrainPair { partial: s.partial, complete: s.complete })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Size("the train split is empty".into()));
    }
    let val: Vec<SampleRecord> = load_records(&manifest, Split::Test)?.into_iter().take(DCG_VALIDATION_SHAPES).collect();
    let (model, start) = if resume {
        let p = load_checkpoint(&layout.dcg_checkpoint(), "generator", "train without resuming first")?;
        (DcgModel::from_params(&p)?, Some(p))
    } else {
        (DcgModel::new(cfg.dcg())?, None)
    };
    let first_step = start.as_ref().map(diffusion::trained_steps).unwrap_or(0);
    let train_cfg = cfg.dcg_train();
    let validate_every = (cfg.dcg_iterations / 4).max(1) as u64;
    let mut validation = Vec::new();
    let mut monitor = |step: u64, params: &ParamStore| -> Result<()> {
        if val.is_empty() || !(step - first_step).is_multiple_of(validate_every) {
            return Ok(());
        }
        let mut total = 0.0;
        for s in &val {
            let coarse = model.sample(params, &s.partial, cfg.coarse_seed(&s.id))?;
            total += chamfer_l2(&coarse, &s.complete)?;
        }
        let cd = total / val.len() as f64;
        log::info!("dcg step {step} validation cd {cd:.6}");
        validation.push((step, cd));
        Ok(())
    };
    let outcome = diffusion::train_dcg_monitored(&model, &pairs, &train_cfg, start, &mut monitor)?;
    create_dir(&layout.checkpoint_dir)?;
    outcome.params.save(&layout.dcg_checkpoint())?;
    let trace_file = cfg.output_dir.join("dcg_loss.csv");
    append_trace(&trace_file, &outcome.trace, resume)?;
    Ok(StageReport {
        checkpoint: layout.dcg_checkpoint(),
        trace_file,
        first_step,
        last_step: diffusion::trained_steps(&outcome.params),
        final_loss: outcome.trace.last().map(|t| t.1).unwrap_or(f64::NAN),
        validation,
    })
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Coarse clouds for `records`, generated with the saved generator and
/// cached under the output directory. The cache is dropped whenever the
/// generator checkpoint or the run seed changes.
pub fn coarse_clouds(cfg: &RunConfig, records: &[&ManifestRecord], manifest: &Manifest) -> Result<Vec<PointCloud>> {
    let layout = RunLayout::new(cfg);
    let dir = layout.coarse_dir();
    let ckpt = layout.dcg_checkpoint();
    let cached_ok = |source: &str| -> bool {
        fs::read_to_string(dir.join(COARSE_SOURCE)).map(|s| s == source).unwrap_or(false)
    };
    let mut model: Option<(DcgModel, ParamStore)> = None;
    let source = if ckpt.exists() {
        format!("{} seed={}\n", file_digest(&ckpt)?, cfg.seed)
    } else {
        String::new()
    };
    if !source.is_empty() && !cached_ok(&source) {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        create_dir(&dir)?;
        write_text(&dir.join(COARSE_SOURCE), &source)?;
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let path = dir.join(format!("{}.xyz", r.id));
        if path.exists() {
            out.push(read_cloud(&path)?);
            continue;
        }
        if model.is_none() {
            let params = load_checkpoint(&ckpt, "generator", "run train-dcg first or provide cached coarse clouds")?;
            if diffusion::trained_steps(&params) == 0 {
                return Err(Error::Checkpoint("generator checkpoint is untrained".into()));
            }
            model = Some((DcgModel::from_params(&params)?, params));
        }
        let (m, params) = model.as_ref().expect("model loaded above");
        let partial = read_cloud(&manifest.resolve(&r.partial))?;
        let coarse = m.sample(params, &partial, cfg.coarse_seed(&r.id))?;
        write_cloud(&path, &coarse)?;
        log::debug!("cached coarse cloud for {}", r.id);
        out.push(coarse);
    }
    Ok(out)
}

/// Mean refined Chamfer distance over prepared shapes.
pub fn mean_refined_cd(model: &CrefModel, params: &ParamStore, prepared: &[PreparedShape], truths: &[&PointCloud]) -> Result<f64> {
    let mut total = 0.0;
    for (p, t) in prepared.iter().zip(truths) {
        total += model.loss(params, p, t, None)?;
    }
    Ok(total / prepared.len().max(1) as f64)
}

/// Trains the refiner on the train split, generating or reusing coarse
/// clouds from the generator checkpoint.
pub fn run_train_cref(cfg: &RunConfig, resume: bool) -> Result<StageReport> {
    let layout = RunLayout::new(cfg);
    let manifest = load_manifest(cfg)?;
    let train: Vec<&ManifestRecord> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Size("the train split is empty".into()));
    }
    let val_records: Vec<&ManifestRecord> = manifest.split(Split::Test).take(CREF_VALIDATION_SHAPES).collect();
    let (model, start) = if resume {
        let p = load_checkpoint(&layout.cref_checkpoint(), "refiner", "train without resuming first")?;
        (CrefModel::from_params(&p)?, Some(p))
    } else {
        (CrefModel::new(cfg.cref())?, None)
    };
    let first_step = start.as_ref().map(cref::trained_steps).unwrap_or(0);

    let prepare = |records: &[&ManifestRecord]| -> Result<(Vec<PreparedShape>, Vec<PointCloud>)> {
        let coarse = coarse_clouds(cfg, records, &manifest)?;
        let mut prepared = Vec::with_capacity(records.len());
        let mut truths = Vec::with_capacity(records.len());
        for (r, c) in records.iter().zip(&coarse) {
            let s = manifest.load_record(r)?;
            prepared.push(model.prepare(&s.partial, c)?);
            truths.push(s.complete);
        }
        Ok((prepared, truths))
    };
    let (prepared, truths) = prepare(&train)?;
    let (val_prepared, val_truths) = prepare(&val_records)?;
    let val_refs: Vec<&PointCloud> = val_truths.iter().collect();

    let mut validation = Vec::new();
    let mut monitor = |epoch: usize, params: &ParamStore| -> Result<()> {
        if val_prepared.is_empty() {
            return Ok(());
        }
        let cd = mean_refined_cd(&model, params, &val_prepared, &val_refs)?;
        log::info!("cref epoch {epoch} validation cd {cd:.6}");
        validation.push((epoch as u64, cd));
        Ok(())
    };
    let outcome = cref::train_prepared_monitored(
        &model,
        &prepared,
        truths.iter().collect(),
        &cfg.cref_train(),
        start,
        &mut monitor,
    )?;
    create_dir(&layout.checkpoint_dir)?;
    outcome.params.save(&layout.cref_checkpoint())?;
    let trace_file = cfg.output_dir.join("cref_loss.csv");
    append_trace(&trace_file, &outcome.trace, resume)?;
    Ok(StageReport {
        checkpoint: layout.cref_checkpoint(),
        trace_file,
        first_step,
        last_step: cref::trained_steps(&outcome.params),
        final_loss: outcome.trace.last().map(|t| t.1).unwrap_or(f64::NAN),
        validation,
    })
}

/// A completed cloud with its intermediates.
#[derive(Clone, Debug)]
pub struct Completion {
    pub coarse: PointCloud,
    pub refined: PointCloud,
    pub similarity: SimilarityMatrix,
    /// Positions of the refiner's query points, one per similarity row.
    pub query_points: Vec<crate::Vec3>,
    pub candidate_points: Vec<crate::Vec3>,
}

/// Both stages with the saved checkpoints.
pub fn complete(cfg: &RunConfig, partial: &PointCloud, sample_id: &str) -> Result<Completion> {
    let layout = RunLayout::new(cfg);
    let dcg = load_checkpoint(&layout.dcg_checkpoint(), "generator", "run train-dcg first")?;
    let cref_params = load_checkpoint(&layout.cref_checkpoint(), "refiner", "run train-cref first")?;
    let dcg_model = DcgModel::from_params(&dcg)?;
    let coarse = diffusion::generate_coarse(partial, &dcg, &dcg_model.schedule, cfg.coarse_seed(sample_id))?;
    let model = CrefModel::from_params(&cref_params)?;
    if cref::trained_steps(&cref_params) == 0 {
        return Err(Error::Checkpoint("refiner checkpoint is untrained".into()));
    }
    let (refined, prep, pass) = model.refine_detailed(&cref_params, partial, &coarse)?;
    Ok(Completion {
        coarse,
        refined,
        similarity: pass.similarity,
        query_points: prep.active.iter().map(|&i| prep.sampled.points[i]).collect(),
        candidate_points: prep.candidate_points,
    })
}

/// One row per (query, candidate) pair: positions and min-max normalized
/// similarity of that query's row.
pub fn heatmap_csv(c: &Completion) -> Result<String> {
    let mut out = String::from("query,qx,qy,qz,candidate,px,py,pz,similarity\n");
    for (i, q) in c.query_points.iter().enumerate() {
        let heat = similarity_heatmap(i, &c.similarity)?;
        for (j, (p, h)) in c.candidate_points.iter().zip(heat).enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{j},{},{},{},{}",
                sig6(q.x),
                sig6(q.y),
                sig6(q.z),
                sig6(p.x),
                sig6(p.y),
                sig6(p.z),
                sig6(h)
            );
        }
    }
    Ok(out)
}

/// Evaluation rows plus any files that could not be read.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub rows: Vec<ReportRow>,
    pub missing: Vec<String>,
}

/// Scores the test split. Predictions come from `predictions` (files named
/// `<id>.xyz` or `<id>.ply`) when given, otherwise from the checkpoints.
/// Samples whose files are missing are skipped and listed. Reports are
/// written to the output directory.
pub fn run_evaluate(cfg: &RunConfig, predictions: Option<&Path>) -> Result<Evaluation> {
    let layout = RunLayout::new(cfg);
    let manifest = load_manifest(cfg)?;
    let test: Vec<&ManifestRecord> = manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Size("the test split is empty".into()));
    }
    let mut eval = Evaluation::default();
    let mut present = Vec::new();
    for r in &test {
        let mut missing = false;
        for p in [&r.partial, &r.complete] {
            let full = manifest.resolve(p);
            if !full.exists() {
                eval.missing.push(full.display().to_string());
                missing = true;
            }
        }
        if let Some(dir) = predictions {
            let found = ["xyz", "ply"].iter().any(|ext| dir.join(format!("{}.{ext}", r.id)).exists());
            if !found {
                eval.missing.push(dir.join(format!("{}.xyz", r.id)).display().to_string());
                missing = true;
            }
        }
        if !missing {
            present.push(*r);
        }
    }

    let predicted: Vec<PointCloud> = match predictions {
        Some(dir) => present
            .iter()
            .map(|r| {
                let xyz = dir.join(format!("{}.xyz", r.id));
                read_cloud(&if xyz.exists() { xyz } else { dir.join(format!("{}.ply", r.id)) })
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            let cref_params = load_checkpoint(&layout.cref_checkpoint(), "refiner", "run train-cref first")?;
            let model = CrefModel::from_params(&cref_params)?;
            let coarse = coarse_clouds(cfg, &present, &manifest)?;
            present
                .iter()
                .zip(&coarse)
                .map(|(r, c)| {
                    let partial = read_cloud(&manifest.resolve(&r.partial))?;
                    model.refine(&cref_params, &partial, c)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    for (r, pred) in present.iter().zip(&predicted) {
        let s = manifest.load_record(r)?;
        let metrics = MetricReport::evaluate(pred, &s.complete, &s.partial)?;
        eval.rows.push(ReportRow {
            sample_id: r.id.clone(),
            category: r.family.name().to_string(),
            metrics,
        });
    }
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("report.csv"), &report_csv(&eval.rows))?;
    write_text(&cfg.output_dir.join("report.jsonl"), &report_jsonl(&eval.rows))?;
    write_text(&cfg.output_dir.join("summary.csv"), &summary_csv(&summarize(&eval.rows)))?;
    Ok(eval)
}
