//! Training loops, cross-validated evaluation and ablation sweeps.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, Video};
use crate::error::{Error, Result};
use crate::model::{decode_video, HoiModel, ModeCounts, ModelConfig, Variant};
use crate::numerics::{rng_for, Adam, AdamConfig, ParamStore};
use crate::segeval::{make_folds, F1Report, Fold, MatchRule, Protocol, Task, TimelineDiff, DEFAULT_KS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub k_thresholds: Vec<f64>,
    pub match_rule: MatchRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::LeaveOneSubject,
            k_thresholds: DEFAULT_KS.to_vec(),
            match_rule: MatchRule::Optimal,
        }
    }
}

/// Mean per-video loss of each epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (e, l) in self.epoch_loss.iter().enumerate() {
            out.push_str(&format!("{},{l:.12}\n", e + 1));
        }
        out
    }
}

/// Builds a model sized for `dataset`.
pub fn model_for(dataset: &Dataset, config: &ModelConfig) -> Result<HoiModel> {
    HoiModel::new(
        config.clone(),
        dataset.feature_dim()?,
        dataset.vocab.sub_activity.len(),
        dataset.vocab.affordance.as_ref().map(|v| v.len()),
    )
}

/// Trains `store` in place on `videos`, one video per update, visiting the
/// videos in a fresh shuffled order each epoch.
pub fn train(model: &HoiModel, store: &mut ParamStore, videos: &[&Video], config: &TrainConfig, seed: u64) -> Result<TrainLog> {
    if videos.is_empty() {
        return Err(Error::Contract("no training videos".into()));
    }
    let mut adam = Adam::new(config.adam.clone());
    let mut rng = rng_for(seed, "train:order");
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            total += model.train_step(store, &mut adam, videos[i]).map_err(|e| match e {
                Error::Evaluation(msg) => Error::Evaluation(format!("epoch {}: {msg}", epoch + 1)),
                other => other,
            })?;
        }
        log.epoch_loss.push(total / videos.len() as f64);
    }
    Ok(log)
}

/// Per-video predictions of one model under both evaluation modes.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDecoding {
    pub video: usize,
    pub entities: Vec<crate::model::EntityDecoding>,
}

pub fn decode_videos(model: &HoiModel, store: &ParamStore, dataset: &Dataset, videos: &[usize]) -> Result<Vec<VideoDecoding>> {
    videos
        .par_iter()
        .map(|&v| {
            let p = model.predict(store, &dataset.videos[v])?;
            Ok(VideoDecoding {
                video: v,
                entities: decode_video(&dataset.videos[v], &p)?,
            })
        })
        .collect()
}

pub fn count_modes(decodings: &[VideoDecoding], eval: &EvalConfig) -> Result<ModeCounts> {
    let mut counts = ModeCounts::new(&eval.k_thresholds, eval.match_rule)?;
    for d in decodings {
        counts.add(&d.entities);
    }
    Ok(counts)
}

/// Reports for both modes plus every test-set decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub joined: F1Report,
    pub given: F1Report,
    pub decodings: Vec<VideoDecoding>,
    pub train_logs: Vec<TrainLog>,
}

impl EvalOutcome {
    pub fn joined_f1(&self, task: Task, k: f64) -> Option<f64> {
        self.joined.mean_f1(task, k)
    }

    pub fn timeline_diffs<'a>(&'a self, dataset: &'a Dataset) -> Vec<TimelineDiff<'a>> {
        let mut out = Vec::new();
        for d in &self.decodings {
            for e in &d.entities {
                out.push(TimelineDiff {
                    video: dataset.videos[d.video].id(),
                    entity: format!("{}{}", if e.task == Task::SubActivity { "human" } else { "object" }, e.entity),
                    truth: &e.truth,
                    pred: &e.joined,
                });
            }
        }
        out
    }
}

/// Scores a fixed parameter set on every video as a single fold.
pub fn evaluate_checkpoint(model: &HoiModel, store: &ParamStore, dataset: &Dataset, eval: &EvalConfig) -> Result<EvalOutcome> {
    let all: Vec<usize> = (0..dataset.videos.len()).collect();
    let decodings = decode_videos(model, store, dataset, &all)?;
    let counts = count_modes(&decodings, eval)?;
    let fold = Fold {
        index: 0,
        held_out: Vec::new(),
        train: Vec::new(),
        test: all,
    };
    Ok(EvalOutcome {
        joined: F1Report::from_folds(&eval.k_thresholds, vec![fold.clone()], &[counts.joined], Vec::new()),
        given: F1Report::from_folds(&eval.k_thresholds, vec![fold], &[counts.given], Vec::new()),
        decodings,
        train_logs: Vec::new(),
    })
}

/// Trains a fresh model per fold and scores its held-out videos. Every fold
/// starts from the same initialization so folds differ only in data.
pub fn cross_validate_model(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    let model = model_for(dataset, model_config)?;
    let (folds, warnings) = make_folds(&dataset.subjects(), &dataset.video_subjects(), eval.protocol)?;
    let init = model.init_params(seed)?;
    let per_fold: Vec<(TrainLog, Vec<VideoDecoding>, ModeCounts)> = folds
        .par_iter()
        .map(|fold| {
            let mut store = init.clone();
            let videos: Vec<&Video> = fold.train.iter().map(|&v| &dataset.videos[v]).collect();
            let log = train(&model, &mut store, &videos, train_config, seed)?;
            let dec = decode_videos(&model, &store, dataset, &fold.test)?;
            let counts = count_modes(&dec, eval)?;
            Ok((log, dec, counts))
        })
        .collect::<Result<_>>()?;
    let mut joined = Vec::new();
    let mut given = Vec::new();
    let mut decodings = Vec::new();
    let mut train_logs = Vec::new();
    for (log, dec, counts) in per_fold {
        joined.push(counts.joined);
        given.push(counts.given);
        decodings.extend(dec);
        train_logs.push(log);
    }
    Ok(EvalOutcome {
        joined: F1Report::from_folds(&eval.k_thresholds, folds.clone(), &joined, warnings.clone()),
        given: F1Report::from_folds(&eval.k_thresholds, folds, &given, warnings),
        decodings,
        train_logs,
    })
}

/// One row of an ablation sweep; `outcome` is `None` when skipped.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub note: Option<String>,
    pub outcome: Option<EvalOutcome>,
}

/// Why `variant` cannot run on `dataset`, if it cannot.
pub fn incompatibility(variant: Variant, dataset: &Dataset) -> Option<String> {
    let objects = dataset.has_objects();
    let humans = dataset.videos.iter().any(|v| v.humans() > 0);
    match variant {
        Variant::NoSkeletons if !objects => Some("dataset has no objects, so removing skeletons leaves no keypoints".into()),
        Variant::NoObjects if !humans => Some("dataset has no humans, so removing objects leaves no keypoints".into()),
        Variant::NoObjects | Variant::NoHumanObject | Variant::NoObjectObject if !objects => {
            Some("dataset has no objects; variant equals the full model".into())
        }
        _ => None,
    }
}

/// Cross-validates every variant with the same seed and settings.
pub fn ablate(dataset: &Dataset, base: &ModelConfig, train_config: &TrainConfig, eval: &EvalConfig, seed: u64) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        if let Some(note) = incompatibility(variant, dataset) {
            rows.push(AblationRow {
                variant,
                note: Some(note),
                outcome: None,
            });
            continue;
        }
        let cfg = ModelConfig {
            variant,
            topology: None,
            ..base.clone()
        };
        rows.push(AblationRow {
            variant,
            note: None,
            outcome: Some(cross_validate_model(dataset, &cfg, train_config, eval, seed)?),
        });
    }
    Ok(rows)
}

/// Ablation table: one row per variant with mean and std F1 per threshold.
pub fn ablation_csv(rows: &[AblationRow], task: Task, ks: &[f64]) -> String {
    let mut out = String::from("variant,description");
    for k in ks {
        out.push_str(&format!(",f1@{k:.2},std@{k:.2}"));
    }
    out.push_str(",note\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.variant.name(), r.variant.description()));
        let rep = r.outcome.as_ref().and_then(|o| o.joined.tasks.get(&task));
        for i in 0..ks.len() {
            match rep {
                Some(t) => out.push_str(&format!(",{:.6},{:.6}", t.mean_f1[i], t.std_f1[i])),
                None => out.push_str(",,"),
            }
        }
        out.push_str(&format!(",{}\n", r.note.as_deref().unwrap_or("")));
    }
    out
}
