//! The five pipeline commands. Each one reads a resolved [`RunConfig`],
//! writes its artifacts under `config.out` and finishes with a
//! `manifest.json` that echoes the config and digests every artifact.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{check_compatible, load_checkpoint, save_checkpoint};
use crate::config::{DataSource, GradcheckConfig, RunConfig};
use crate::data_io::{write_dataset, BenchmarkConfig, Dataset, Video};
use crate::error::{Error, Result};
use crate::experiment::{ablate, ablation_csv, cross_validate_model, evaluate_checkpoint, model_for, train, AblationRow, EvalOutcome, TrainLog};
use crate::model::{HoiModel, ModelConfig};
use crate::numerics::{finite_difference_check, rng_for, BackwardFault, GradCheckReport, ParamStore};
use crate::segeval::{timeline_diff_csv, Task};

pub const MANIFEST: &str = "manifest.json";

/// One artifact listed in a manifest, path relative to the output dir.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub files: Vec<FileDigest>,
    /// Digest over the sorted `path sha256` lines of `files`.
    pub digest: String,
    pub notes: Vec<String>,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(root: &Path, rel: &str, contents: &[u8]) -> Result<PathBuf> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(PathBuf::from(rel))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hashes the listed files (relative to `root`) into a manifest and writes
/// it next to them.
pub fn write_manifest(root: &Path, command: &str, config: &RunConfig, files: &[PathBuf], notes: Vec<String>) -> Result<Manifest> {
    let mut digests = Vec::with_capacity(files.len());
    for rel in files {
        let path = root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        digests.push(FileDigest {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    digests.sort_by(|a, b| a.path.cmp(&b.path));
    let listing: String = digests.iter().map(|d| format!("{} {}\n", d.path, d.sha256)).collect();
    let manifest = Manifest {
        command: command.to_string(),
        config: config.clone(),
        files: digests,
        digest: sha256_hex(listing.as_bytes()),
        notes,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(root, MANIFEST, json.as_bytes())?;
    Ok(manifest)
}

/// Generates the configured synthetic benchmark into `config.out`.
pub fn cmd_synth_gen(config: &RunConfig) -> Result<Manifest> {
    config.validate()?;
    let bench = match &config.data {
        DataSource::Synth(b) => b,
        DataSource::Path(p) => {
            return Err(Error::Config(format!(
                "synth-gen needs a `synth` data section, config points at {}",
                p.display()
            )))
        }
    };
    let dataset = Dataset::synthetic(&BenchmarkConfig {
        seed: config.seed,
        ..bench.clone()
    })?;
    create_dir(&config.out)?;
    let files = write_dataset(&config.out, &dataset)?;
    write_manifest(&config.out, "synth-gen", config, &files, Vec::new())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub params: ParamStore,
    pub checkpoint: PathBuf,
    pub manifest: Manifest,
}

/// Trains one model on every video of the dataset.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = config.data.load(config.seed)?;
    let model = model_for(&dataset, &config.model)?;
    let mut params = model.init_params(config.seed)?;
    let videos: Vec<&Video> = dataset.videos.iter().collect();
    let log = train(&model, &mut params, &videos, &config.train, config.seed)?;
    create_dir(&config.out)?;
    let checkpoint = PathBuf::from("checkpoint.bin");
    save_checkpoint(&config.out.join(&checkpoint), &params)?;
    let log_file = write_file(&config.out, "train_log.csv", log.to_csv().as_bytes())?;
    let mut notes = Vec::new();
    if let Some(l) = log.final_loss() {
        notes.push(format!("final loss {l:.12}"));
    }
    let manifest = write_manifest(&config.out, "train", config, &[checkpoint.clone(), log_file], notes)?;
    Ok(TrainOutcome {
        log,
        params,
        checkpoint: config.out.join(checkpoint),
        manifest,
    })
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub outcome: EvalOutcome,
    pub manifest: Manifest,
}

fn write_eval_reports(root: &Path, dataset: &Dataset, outcome: &EvalOutcome, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        write_file(root, &format!("{prefix}f1_joined.csv"), outcome.joined.to_csv()?.as_bytes())?,
        write_file(root, &format!("{prefix}f1_given.csv"), outcome.given.to_csv()?.as_bytes())?,
    ];
    let diffs = outcome.timeline_diffs(dataset);
    let humans: Vec<_> = diffs.iter().filter(|d| d.entity.starts_with("human")).cloned().collect();
    let sub = &dataset.vocab.sub_activity;
    let name = |c: usize| sub.name(c).unwrap_or("?").to_string();
    files.push(write_file(root, &format!("{prefix}timeline_diff.csv"), timeline_diff_csv(&humans, &name)?.as_bytes())?);
    if let Some(aff) = &dataset.vocab.affordance {
        let objects: Vec<_> = diffs.iter().filter(|d| d.entity.starts_with("object")).cloned().collect();
        let name = |c: usize| aff.name(c).unwrap_or("?").to_string();
        files.push(write_file(
            root,
            &format!("{prefix}timeline_diff_affordance.csv"),
            timeline_diff_csv(&objects, &name)?.as_bytes(),
        )?);
    }
    Ok(files)
}

/// Scores a checkpoint on every video, or without one runs the configured
/// cross-validation protocol from scratch.
pub fn cmd_eval(config: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalResult> {
    config.validate()?;
    let dataset = config.data.load(config.seed)?;
    let model = model_for(&dataset, &config.model)?;
    let outcome = match checkpoint {
        Some(path) => {
            let params = load_checkpoint(path)?;
            check_compatible(&model.init_params(config.seed)?, &params)?;
            evaluate_checkpoint(&model, &params, &dataset, &config.eval)?
        }
        None => cross_validate_model(&dataset, &config.model, &config.train, &config.eval, config.seed)?,
    };
    create_dir(&config.out)?;
    let mut files = write_eval_reports(&config.out, &dataset, &outcome, "")?;
    if !outcome.train_logs.is_empty() {
        let mut csv = String::from("fold,epoch,loss\n");
        for (f, log) in outcome.train_logs.iter().enumerate() {
            for (e, l) in log.epoch_loss.iter().enumerate() {
                csv.push_str(&format!("{f},{},{l:.12}\n", e + 1));
            }
        }
        files.push(write_file(&config.out, "train_log.csv", csv.as_bytes())?);
    }
    let notes = outcome.joined.warnings.clone();
    let manifest = write_manifest(&config.out, "eval", config, &files, notes)?;
    Ok(EvalResult { outcome, manifest })
}

#[derive(Clone, Debug)]
pub struct AblateResult {
    pub rows: Vec<AblationRow>,
    pub manifest: Manifest,
}

/// Cross-validates every model variant and writes one table per task.
pub fn cmd_ablate(config: &RunConfig) -> Result<AblateResult> {
    config.validate()?;
    let dataset = config.data.load(config.seed)?;
    let rows = ablate(&dataset, &config.model, &config.train, &config.eval, config.seed)?;
    create_dir(&config.out)?;
    let ks = &config.eval.k_thresholds;
    let mut files = vec![write_file(&config.out, "ablation.csv", ablation_csv(&rows, Task::SubActivity, ks).as_bytes())?];
    if dataset.vocab.affordance.is_some() {
        files.push(write_file(
            &config.out,
            "ablation_affordance.csv",
            ablation_csv(&rows, Task::Affordance, ks).as_bytes(),
        )?);
    }
    for r in &rows {
        if let Some(o) = &r.outcome {
            files.extend(write_eval_reports(&config.out, &dataset, o, &format!("{}/", r.variant.name()))?);
        }
    }
    let notes = rows
        .iter()
        .filter_map(|r| r.note.as_ref().map(|n| format!("skipped {}: {n}", r.variant.name())))
        .collect();
    let manifest = write_manifest(&config.out, "ablate", config, &files, notes)?;
    Ok(AblateResult { rows, manifest })
}

/// Test hooks for [`cmd_gradcheck`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradcheckHooks {
    /// Corrupts the backward pass.
    pub fault: Option<BackwardFault>,
    /// Checks a model without parameters.
    pub empty_model: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckResult {
    pub report: GradCheckReport,
    pub warnings: Vec<String>,
    pub manifest: Manifest,
}

/// A small generated video at the gradcheck sizes.
pub fn gradcheck_video(g: &GradcheckConfig, seed: u64) -> Result<(Dataset, Video)> {
    let bench = BenchmarkConfig {
        seed,
        subjects: 2,
        videos_per_subject: 1,
        humans: g.humans,
        objects: g.objects,
        joints: g.joints,
        frames: g.frames,
        min_step: 1,
        max_step: 3,
        feature_dim: g.feature_dim,
        ..BenchmarkConfig::default()
    };
    let dataset = Dataset::synthetic(&bench)?;
    let video = dataset.videos[0].clone();
    Ok((dataset, video))
}

/// Model of the configured variant at the gradcheck width.
pub fn gradcheck_model(config: &RunConfig, dataset: &Dataset) -> Result<HoiModel> {
    let w = config.gradcheck.width;
    let cfg = ModelConfig {
        c1: w,
        c2: w,
        hidden: w,
        state: w,
        ..config.model.clone()
    };
    model_for(dataset, &cfg)
}

/// Adds uniform noise to every parameter. Zero-initialized biases put
/// ReLU inputs exactly on the kink, where central differences disagree
/// with any one-sided derivative.
fn jittered(mut params: ParamStore, seed: u64) -> Result<ParamStore> {
    let mut rng = rng_for(seed, "gradcheck:jitter");
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        for v in params.value_mut(&name)?.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    Ok(params)
}

/// Compares tape gradients of the training loss with central differences
/// on a tiny generated video.
pub fn cmd_gradcheck(config: &RunConfig, hooks: GradcheckHooks) -> Result<GradcheckResult> {
    config.validate()?;
    let g = &config.gradcheck;
    let (dataset, video) = gradcheck_video(g, config.seed)?;
    let model = gradcheck_model(config, &dataset)?;
    let params = if hooks.empty_model {
        ParamStore::new()
    } else {
        jittered(model.init_params(config.seed)?, config.seed)?
    };
    let report = finite_difference_check(
        |tape, store| {
            tape.set_fault(hooks.fault);
            model.loss(tape, store, &video)
        },
        &params,
        g.step,
        g.tolerance,
    )?;
    let mut warnings = Vec::new();
    if report.vacuous {
        warnings.push("model has no parameters; gradient check passed vacuously".to_string());
    }
    create_dir(&config.out)?;
    let mut csv = String::from("group,max_rel_error,passed\n");
    for (group, err) in report.by_group() {
        csv.push_str(&format!("{group},{err:.3e},{}\n", err <= report.tolerance));
    }
    let file = write_file(&config.out, "gradcheck.csv", csv.as_bytes())?;
    let manifest = write_manifest(&config.out, "gradcheck", config, &[file], warnings.clone())?;
    Ok(GradcheckResult {
        report,
        warnings,
        manifest,
    })
}
