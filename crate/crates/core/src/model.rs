//! The full recognition pipeline: keypoint graph, fusion graph and
//! recurrent classifier, with the ablation switches.

use serde::{Deserialize, Serialize};

use crate::backbone::{decode_frames, label_given_segmentation, mean_cross_entropy, Backbone, BackboneParams, DEFAULT_STATE};
use crate::data_io::Video;
use crate::error::{Error, Result};
use crate::fusion_graph::{FusionGraph, FusionParams, FusionTopology, DEFAULT_HIDDEN};
use crate::geo_graph::{GeoGraph, GeoGraphParams, GeoVariant};
use crate::geometry::EntityKind;
use crate::numerics::{rng_for, Adam, ParamStore, Tape, Tensor2, Var};
use crate::segeval::{timeline_to_segments, CountTable, Task};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Keypoint embedding width.
    pub c1: usize,
    /// Keypoint graph output width.
    pub c2: usize,
    /// Fused node width.
    pub hidden: usize,
    /// Recurrent state width.
    pub state: usize,
    /// Attention rounds in the fusion graph.
    pub fusion_rounds: usize,
    pub variant: Variant,
    /// Overrides the variant's fusion topology when set.
    pub topology: Option<FusionTopology>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c1: 64,
            c2: 128,
            hidden: DEFAULT_HIDDEN,
            state: DEFAULT_STATE,
            fusion_rounds: 2,
            variant: Variant::Full,
            topology: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("hidden", self.hidden), ("state", self.state)] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.fusion_rounds == 0 {
            return Err(Error::Config("model.fusion_rounds must be positive".into()));
        }
        self.fusion_topology().validate()
    }

    pub fn geo_variant(&self) -> GeoVariant {
        self.variant.geo_variant()
    }

    pub fn fusion_topology(&self) -> FusionTopology {
        self.topology.unwrap_or_else(|| self.variant.topology())
    }
}

/// The full model and its seven single-switch ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoSkeletons,
    NoObjects,
    NoEmbedding,
    NoSimilarity,
    NoHumanObject,
    NoObjectObject,
    WithHumanGeometry,
}

impl Variant {
    /// Ablation rows in table order, full model last.
    pub const ALL: [Variant; 8] = [
        Variant::NoSkeletons,
        Variant::NoObjects,
        Variant::NoEmbedding,
        Variant::NoSimilarity,
        Variant::NoHumanObject,
        Variant::NoObjectObject,
        Variant::WithHumanGeometry,
        Variant::Full,
    ];

    pub fn geo_variant(self) -> GeoVariant {
        match self {
            Variant::NoSkeletons => GeoVariant::NoSkeletons,
            Variant::NoObjects => GeoVariant::NoObjects,
            Variant::NoEmbedding => GeoVariant::NoEmbedding,
            Variant::NoSimilarity => GeoVariant::NoSimilarity,
            _ => GeoVariant::Full,
        }
    }

    pub fn topology(self) -> FusionTopology {
        let mut t = FusionTopology::default();
        match self {
            Variant::NoHumanObject => t.human_object = false,
            Variant::NoObjectObject => t.object_object = false,
            Variant::WithHumanGeometry => t.geometry_human = true,
            _ => {}
        }
        t
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSkeletons => "no-skeletons",
            Variant::NoObjects => "no-objects",
            Variant::NoEmbedding => "no-embedding",
            Variant::NoSimilarity => "no-similarity",
            Variant::NoHumanObject => "no-human-object",
            Variant::NoObjectObject => "no-object-object",
            Variant::WithHumanGeometry => "with-human-geometry",
        }
    }

    /// Human-readable row label.
    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "keypoint graph + fusion graph",
            Variant::NoSkeletons => "keypoint graph without skeletons",
            Variant::NoObjects => "keypoint graph without objects",
            Variant::NoEmbedding => "keypoint graph without embedding",
            Variant::NoSimilarity => "keypoint graph without similarity",
            Variant::NoHumanObject => "fusion graph without human-object edges",
            Variant::NoObjectObject => "fusion graph without object-object edges",
            Variant::WithHumanGeometry => "fusion graph with human-geometry edges",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Per-entity logits of one video.
#[derive(Clone, Debug)]
pub struct VideoLogits {
    pub humans: Vec<Var>,
    /// Empty when the model has no object head.
    pub objects: Vec<Var>,
}

/// Evaluated logits of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub humans: Vec<Tensor2>,
    pub objects: Vec<Tensor2>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoiModel {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub human_classes: usize,
    pub object_classes: Option<usize>,
    geo: GeoGraph,
    fusion: FusionGraph,
    backbone: Backbone,
}

impl HoiModel {
    pub fn new(config: ModelConfig, feature_dim: usize, human_classes: usize, object_classes: Option<usize>) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::Config("visual feature dimension must be positive".into()));
        }
        let geo = GeoGraph::new("geo", config.geo_variant());
        let fusion = FusionGraph::new("fusion", config.fusion_topology(), config.fusion_rounds);
        Ok(Self {
            config,
            feature_dim,
            human_classes,
            object_classes,
            geo,
            fusion,
            backbone: Backbone::new("backbone"),
        })
    }

    /// Freshly initialized parameters; every block draws from its own
    /// stream derived from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let mut store = ParamStore::new();
        GeoGraphParams::init(c.c1, c.c2, &mut rng_for(seed, "init:geo")).insert_into(&mut store, "geo", c.geo_variant())?;
        FusionParams::init(self.feature_dim, c.c2, c.hidden, c.fusion_rounds, &mut rng_for(seed, "init:fusion"))
            .insert_into(&mut store, "fusion")?;
        BackboneParams::init(
            c.hidden,
            c.state,
            self.human_classes,
            self.object_classes,
            &mut rng_for(seed, "init:backbone"),
        )?
        .insert_into(&mut store, "backbone")?;
        Ok(store)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, video: &Video) -> Result<VideoLogits> {
        if video.feature_dim() != self.feature_dim {
            return Err(Error::Length {
                path: format!("{}.features", video.id()),
                expected: self.feature_dim,
                found: video.feature_dim(),
            });
        }
        let geo = self.geo.forward(tape, store, &video.context)?;
        let pooled = tape.block_mean_rows(geo.output, geo.joints)?;
        let humans: Vec<Var> = video
            .features_of(EntityKind::Human)
            .map(|f| tape.constant(f.features.clone()))
            .collect();
        let objects: Vec<Var> = video
            .features_of(EntityKind::Object)
            .map(|f| tape.constant(f.features.clone()))
            .collect();
        let nodes = self.fusion.embed(tape, store, &humans, &objects, pooled)?;
        let fused = self.fusion.fuse(tape, store, &nodes)?;
        let humans = fused
            .humans
            .iter()
            .map(|&x| self.backbone.logits(tape, store, x, EntityKind::Human))
            .collect::<Result<Vec<_>>>()?;
        let objects = if self.backbone.has_head(store, EntityKind::Object) {
            fused
                .objects
                .iter()
                .map(|&x| self.backbone.logits(tape, store, x, EntityKind::Object))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(VideoLogits { humans, objects })
    }

    /// Mean cross-entropy over every labelled frame of every entity.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, video: &Video) -> Result<Var> {
        let logits = self.forward(tape, store, video)?;
        let mut items = Vec::new();
        for timeline in &video.labels {
            let var = match timeline.kind {
                EntityKind::Human => logits.humans.get(timeline.entity),
                EntityKind::Object => logits.objects.get(timeline.entity),
            };
            if let Some(&v) = var {
                items.push((v, timeline.labels.as_slice()));
            }
        }
        mean_cross_entropy(tape, &items)
    }

    pub fn predict(&self, store: &ParamStore, video: &Video) -> Result<Predictions> {
        let mut tape = Tape::new();
        let l = self.forward(&mut tape, store, video)?;
        Ok(Predictions {
            humans: l.humans.iter().map(|&v| tape.value(v).clone()).collect(),
            objects: l.objects.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// One optimizer update on one video; returns the loss before it.
    pub fn train_step(&self, store: &mut ParamStore, adam: &mut Adam, video: &Video) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, store, video)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Evaluation(format!(
                "loss is {value} on video {} after {} updates",
                video.id(),
                adam.steps()
            )));
        }
        let grads = tape.backward(loss)?;
        store.zero_grad();
        store.accumulate(&grads)?;
        adam.step(store);
        Ok(value)
    }
}

/// Decoded timelines of one entity under both evaluation modes.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityDecoding {
    pub task: Task,
    pub entity: usize,
    /// Ground truth restricted to labelled frames.
    pub truth: Vec<usize>,
    /// Frame-wise argmax, run-length merged by the scorer.
    pub joined: Vec<usize>,
    /// Ground-truth segments named by mean-logit argmax.
    pub given: Vec<usize>,
}

/// Decodes every labelled entity of `video`. Unlabelled frames are dropped
/// from both truth and prediction before segmenting.
pub fn decode_video(video: &Video, predictions: &Predictions) -> Result<Vec<EntityDecoding>> {
    let mut out = Vec::new();
    for timeline in &video.labels {
        let (task, logits) = match timeline.kind {
            EntityKind::Human => (Task::SubActivity, predictions.humans.get(timeline.entity)),
            EntityKind::Object => (Task::Affordance, predictions.objects.get(timeline.entity)),
        };
        let Some(logits) = logits else { continue };
        let keep: Vec<usize> = (0..timeline.labels.len()).filter(|&t| timeline.labels[t].is_some()).collect();
        if keep.is_empty() {
            continue;
        }
        let truth: Vec<usize> = keep.iter().map(|&t| timeline.labels[t].expect("kept")).collect();
        let rows = Tensor2::from_fn(keep.len(), logits.cols(), |r, c| logits.get(keep[r], c));
        let joined = decode_frames(&rows);
        let given = label_given_segmentation(&rows, &timeline_to_segments(&truth))?;
        out.push(EntityDecoding {
            task,
            entity: timeline.entity,
            truth,
            joined,
            given,
        });
    }
    Ok(out)
}

/// Count tables for the two evaluation modes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeCounts {
    pub joined: CountTable,
    pub given: CountTable,
}

impl ModeCounts {
    pub fn new(ks: &[f64], rule: crate::segeval::MatchRule) -> Result<Self> {
        Ok(Self {
            joined: CountTable::new(ks, rule)?,
            given: CountTable::new(ks, rule)?,
        })
    }

    pub fn add(&mut self, decodings: &[EntityDecoding]) {
        for d in decodings {
            self.joined.add_timelines(d.task, &d.joined, &d.truth);
            self.given.add_timelines(d.task, &d.given, &d.truth);
        }
    }
}
