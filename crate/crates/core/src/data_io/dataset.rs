//! Dataset directories.
//!
//! ```text
//! root/
//!   vocab/sub_activity.txt
//!   vocab/affordance.txt          (only when objects are labelled)
//!   videos/<video_id>.json
//!   features/<video_id>_human<h>.bin
//!   features/<video_id>_object<o>.bin
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::annotation::{load_annotation, VideoAnnotation};
use super::features::{load_features, save_features};
use super::synth::{benchmark_configs, generate_synthetic, synth_visual_features, synthetic_vocabularies, BenchmarkConfig};
use super::vocab::{Vocabularies, Vocabulary};
use crate::backbone::LabelTimeline;
use crate::error::{Error, Result};
use crate::fusion_graph::EntityFeatureSequence;
use crate::geometry::{EntityKind, GeometricContext};
use crate::numerics::derive_seed;

/// A validated video with everything the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub annotation: VideoAnnotation,
    pub context: GeometricContext,
    /// Humans in index order, then objects in index order.
    pub features: Vec<EntityFeatureSequence>,
    pub labels: Vec<LabelTimeline>,
}

impl Video {
    pub fn new(annotation: VideoAnnotation, mut features: Vec<EntityFeatureSequence>, vocab: &Vocabularies) -> Result<Self> {
        annotation.validate(vocab)?;
        let (context, _) = annotation.geometric_context()?;
        features.sort_by_key(|f| (f.kind, f.entity));
        let expected: Vec<(EntityKind, usize)> = (0..annotation.humans.len())
            .map(|h| (EntityKind::Human, h))
            .chain((0..annotation.objects.len()).map(|o| (EntityKind::Object, o)))
            .collect();
        let found: Vec<(EntityKind, usize)> = features.iter().map(|f| (f.kind, f.entity)).collect();
        if found != expected {
            return Err(Error::schema(
                format!("{}.features", annotation.video_id),
                format!("expected features for {expected:?}, found {found:?}"),
            ));
        }
        let dim = features[0].features.cols();
        for f in &features {
            let path = format!("{}.{:?}[{}].features", annotation.video_id, f.kind, f.entity);
            if f.features.rows() != annotation.frames {
                return Err(Error::Length {
                    path,
                    expected: annotation.frames,
                    found: f.features.rows(),
                });
            }
            if f.features.cols() != dim {
                return Err(Error::Length {
                    path,
                    expected: dim,
                    found: f.features.cols(),
                });
            }
        }
        let labels = annotation.label_timelines(vocab)?;
        Ok(Self {
            annotation,
            context,
            features,
            labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.annotation.video_id
    }

    pub fn frames(&self) -> usize {
        self.annotation.frames
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].features.cols()
    }

    pub fn humans(&self) -> usize {
        self.annotation.humans.len()
    }

    pub fn objects(&self) -> usize {
        self.annotation.objects.len()
    }

    pub fn features_of(&self, kind: EntityKind) -> impl Iterator<Item = &EntityFeatureSequence> {
        self.features.iter().filter(move |f| f.kind == kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabularies,
    pub videos: Vec<Video>,
}

impl Dataset {
    /// Generates a benchmark in memory. Features are rounded through `f32`
    /// so the result equals what [`load_dataset`] reads back from disk.
    pub fn synthetic(bench: &BenchmarkConfig) -> Result<Self> {
        let vocab = synthetic_vocabularies(bench.object_labels);
        let feature_seed = derive_seed(bench.seed, "visual");
        let mut videos = Vec::new();
        for cfg in benchmark_configs(bench)? {
            let mut ann = generate_synthetic(&cfg)?;
            let mut feats = synth_visual_features(&ann, bench.feature_dim, feature_seed)?;
            for f in &mut feats {
                for v in f.features.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
            for (h, human) in ann.humans.iter_mut().enumerate() {
                human.features = Some(feature_path(&cfg.video_id, EntityKind::Human, h));
            }
            for (o, object) in ann.objects.iter_mut().enumerate() {
                object.features = Some(feature_path(&cfg.video_id, EntityKind::Object, o));
            }
            videos.push(Video::new(ann, feats, &vocab)?);
        }
        Ok(Self { vocab, videos })
    }

    /// Distinct subject ids, sorted.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.videos.iter().flat_map(|v| &v.annotation.subjects).collect();
        set.into_iter().cloned().collect()
    }

    pub fn video_subjects(&self) -> Vec<Vec<String>> {
        self.videos.iter().map(|v| v.annotation.subjects.clone()).collect()
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let first = self
            .videos
            .first()
            .ok_or_else(|| Error::Contract("dataset has no videos".into()))?
            .feature_dim();
        if let Some(v) = self.videos.iter().find(|v| v.feature_dim() != first) {
            return Err(Error::Length {
                path: format!("{}.features", v.id()),
                expected: first,
                found: v.feature_dim(),
            });
        }
        Ok(first)
    }

    pub fn joints(&self) -> Option<usize> {
        self.videos.first().map(|v| v.annotation.joints)
    }

    pub fn has_objects(&self) -> bool {
        self.videos.iter().any(|v| v.objects() > 0)
    }
}

fn feature_path(video: &str, kind: EntityKind, entity: usize) -> String {
    let k = match kind {
        EntityKind::Human => "human",
        EntityKind::Object => "object",
    };
    format!("features/{video}_{k}{entity}.bin")
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a dataset directory and returns the written files relative to
/// `root`, sorted.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    for d in ["vocab", "videos", "features"] {
        create_dir(&root.join(d))?;
    }
    let mut written = Vec::new();
    let mut put = |rel: PathBuf| {
        written.push(rel.clone());
        root.join(rel)
    };
    dataset.vocab.sub_activity.save(&put("vocab/sub_activity.txt".into()))?;
    if let Some(a) = &dataset.vocab.affordance {
        a.save(&put("vocab/affordance.txt".into()))?;
    }
    for v in &dataset.videos {
        let mut ann = v.annotation.clone();
        for f in &v.features {
            let rel = feature_path(v.id(), f.kind, f.entity);
            save_features(&put(PathBuf::from(&rel)), &f.features)?;
            match f.kind {
                EntityKind::Human => ann.humans[f.entity].features = Some(rel),
                EntityKind::Object => ann.objects[f.entity].features = Some(rel),
            }
        }
        super::annotation::save_annotation(&put(format!("videos/{}.json", v.id()).into()), &ann)?;
    }
    written.sort();
    Ok(written)
}

/// Reads every `videos/*.json` under `root` (sorted by file name) with its
/// feature files.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let sub_activity = Vocabulary::load(&root.join("vocab/sub_activity.txt"))?;
    let aff_path = root.join("vocab/affordance.txt");
    let affordance = if aff_path.exists() {
        Some(Vocabulary::load(&aff_path)?)
    } else {
        None
    };
    let vocab = Vocabularies {
        sub_activity,
        affordance,
    };
    let dir = root.join("videos");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut videos = Vec::with_capacity(files.len());
    for path in files {
        let ann = load_annotation(&path, &vocab)?;
        let mut features = Vec::new();
        let refs = ann
            .humans
            .iter()
            .enumerate()
            .map(|(h, x)| (EntityKind::Human, h, x.features.clone()))
            .chain(ann.objects.iter().enumerate().map(|(o, x)| (EntityKind::Object, o, x.features.clone())));
        for (kind, entity, rel) in refs {
            let rel = rel.ok_or_else(|| {
                Error::schema(
                    format!("{}.{kind:?}[{entity}].features", ann.video_id),
                    "no visual feature file referenced",
                )
            })?;
            features.push(EntityFeatureSequence {
                entity,
                kind,
                features: load_features(&root.join(rel))?,
            });
        }
        videos.push(Video::new(ann, features, &vocab)?);
    }
    if videos.is_empty() {
        return Err(Error::Contract(format!("no annotation files under {}", dir.display())));
    }
    Ok(Dataset { vocab, videos })
}
