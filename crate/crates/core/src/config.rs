//! Run configuration: one TOML file per run, overridable from the command
//! line. Precedence is flag, then file, then built-in default.
//!
//! ```toml
//! seed = 7
//! out = "runs/example"
//!
//! [data.synth]            # or: [data] path = "datasets/mine"
//! subjects = 4
//!
//! [model]
//! c1 = 64
//! c2 = 128
//! variant = "full"
//!
//! [train]
//! epochs = 30
//!
//! [eval]
//! protocol = "leave-one-subject"
//! k_thresholds = [0.1, 0.25, 0.5]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::{load_dataset, BenchmarkConfig, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{EvalConfig, TrainConfig};
use crate::fusion_graph::FusionTopology;
use crate::model::{ModelConfig, Variant};
use crate::segeval::Protocol;

/// Where the videos come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A dataset directory on disk.
    Path(PathBuf),
    /// A benchmark generated in memory.
    Synth(BenchmarkConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(BenchmarkConfig::default())
    }
}

impl DataSource {
    /// Reads the dataset; a generated one is seeded with `seed`.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Path(p) => load_dataset(p),
            DataSource::Synth(b) => Dataset::synthetic(&BenchmarkConfig { seed, ..b.clone() }),
        }
    }
}

/// Settings of the end-to-end gradient check. The model is rebuilt at
/// these sizes whatever the `model` section says.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub frames: usize,
    pub humans: usize,
    pub objects: usize,
    pub joints: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            frames: 6,
            humans: 2,
            objects: 2,
            joints: 3,
            width: 4,
            feature_dim: 8,
            step: 1e-5,
            tolerance: 1e-3,
        }
    }
}

impl GradcheckConfig {
    /// Keypoint rows per frame.
    pub fn keypoints(&self) -> usize {
        self.humans * self.joints + 2 * self.objects
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames > 6 || self.keypoints() == 0 || self.keypoints() > 10 {
            return Err(Error::Config(format!(
                "gradcheck is limited to 1..=6 frames and 1..=10 keypoints, got {} frames and {} keypoints",
                self.frames,
                self.keypoints()
            )));
        }
        if self.humans == 0 || self.width == 0 || self.feature_dim < 8 {
            return Err(Error::Config("gradcheck needs a human, a positive width and feature_dim >= 8".into()));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0) {
            return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("runs/default"),
            data: DataSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub topology: Option<FusionTopology>,
    pub protocol: Option<Protocol>,
    pub k_thresholds: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// File (when given) over defaults, then `overrides` over both.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(v) = o.variant {
            self.model.variant = v;
        }
        if let Some(t) = o.topology {
            self.model.topology = Some(t);
        }
        if let Some(p) = o.protocol {
            self.eval.protocol = p;
        }
        if let Some(ks) = &o.k_thresholds {
            self.eval.k_thresholds = ks.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config(format!("seed {} does not fit a signed 64-bit integer", self.seed)));
        }
        self.model.validate()?;
        self.gradcheck.validate()?;
        if let DataSource::Path(p) = &self.data {
            if !p.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", p.display())));
            }
        }
        if let DataSource::Synth(b) = &self.data {
            if b.subjects == 0 || b.videos_per_subject == 0 || b.frames == 0 || b.joints == 0 || b.feature_dim == 0 {
                return Err(Error::Config("synthetic benchmark sizes must be positive".into()));
            }
        }
        if self.eval.k_thresholds.is_empty() || self.eval.k_thresholds.iter().any(|k| !(*k > 0.0 && *k < 1.0)) {
            return Err(Error::Config(format!(
                "k thresholds must be a nonempty list in (0, 1), got {:?}",
                self.eval.k_thresholds
            )));
        }
        let a = &self.train.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite() && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        Ok(())
    }
}

/// Parses a comma-separated list of edge classes, e.g.
/// `human-human,human-object,geometry-object`. Unlisted classes are off.
pub fn parse_topology(text: &str) -> Result<FusionTopology> {
    let mut t = FusionTopology {
        human_human: false,
        human_object: false,
        object_object: false,
        geometry_object: false,
        geometry_human: false,
    };
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let slot = match part {
            "human-human" => &mut t.human_human,
            "human-object" => &mut t.human_object,
            "object-object" => &mut t.object_object,
            "geometry-object" => &mut t.geometry_object,
            "geometry-human" => &mut t.geometry_human,
            other => return Err(Error::Config(format!("unknown edge class `{other}`"))),
        };
        *slot = true;
    }
    t.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(t)
}

pub fn parse_protocol(text: &str) -> Result<Protocol> {
    match text {
        "leave-one-subject" => Ok(Protocol::LeaveOneSubject),
        "leave-pair" => Ok(Protocol::LeavePair),
        other => Err(Error::Config(format!("unknown protocol `{other}`"))),
    }
}

/// Parses `0.1,0.25,0.5`.
pub fn parse_thresholds(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad threshold `{}`", s.trim())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segeval::MatchRule;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_match_architecture() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.model.c1, c.model.c2), (64, 128));
        assert_eq!(c.gradcheck.keypoints(), 10);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 11\n[model]\nvariant = \"no-objects\"\nc1 = 8\n").unwrap();
        let file_only = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(file_only.seed, 11);
        assert_eq!(file_only.model.variant, Variant::NoObjects);
        assert_eq!(file_only.model.c2, 128);
        let o = Overrides {
            seed: Some(3),
            variant: Some(Variant::Full),
            k_thresholds: Some(vec![0.5]),
            ..Overrides::default()
        };
        let both = RunConfig::resolve(Some(&path), &o).unwrap();
        assert_eq!(both.seed, 3);
        assert_eq!(both.model.variant, Variant::Full);
        assert_eq!(both.model.c1, 8);
        assert_eq!(both.eval.k_thresholds, vec![0.5]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[model]\nc1 = 0").unwrap().validate().is_err());
        assert!(RunConfig::from_toml("[data]\npath = \"/no/such/dir\"").unwrap().validate().is_err());
        assert!(RunConfig::from_toml("[eval]\nk_thresholds = [1.5]").unwrap().validate().is_err());
        assert!(RunConfig::from_toml("[gradcheck]\nframes = 7").unwrap().validate().is_err());
    }

    #[test]
    fn topology_lists() {
        let t = parse_topology("human-object, geometry-human").unwrap();
        assert!(t.human_object && t.geometry_human && !t.human_human);
        assert!(parse_topology("").is_err());
        assert!(parse_topology("human-robot").is_err());
        assert_eq!(parse_thresholds("0.1,0.5").unwrap(), vec![0.1, 0.5]);
        assert!(parse_thresholds("x").is_err());
        assert_eq!(parse_protocol("leave-pair").unwrap(), Protocol::LeavePair);
    }

    fn arb_topology() -> impl Strategy<Value = FusionTopology> {
        (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(a, b, c, d, e)| FusionTopology {
            human_human: a,
            human_object: b,
            object_object: c,
            geometry_object: d,
            geometry_human: e,
        })
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            0..=i64::MAX as u64,
            "[a-z]{1,8}(/[a-z0-9_]{1,8}){0,2}",
            prop::bool::ANY,
            (1usize..200, 1usize..200, 1usize..5),
            prop::sample::select(Variant::ALL.to_vec()),
            prop::option::of(arb_topology()),
            (0usize..100, 1e-6f64..1.0),
            prop::collection::vec(0.01f64..0.99, 1..5),
            any::<bool>(),
        )
            .prop_map(|(seed, out, synth, (c1, c2, rounds), variant, topology, (epochs, lr), ks, greedy)| {
                let mut c = RunConfig {
                    seed,
                    out: PathBuf::from(&out),
                    ..RunConfig::default()
                };
                if !synth {
                    c.data = DataSource::Path(PathBuf::from(out).join("data"));
                } else if let DataSource::Synth(b) = &mut c.data {
                    b.noise = lr * 3.0;
                }
                c.model.c1 = c1;
                c.model.c2 = c2;
                c.model.fusion_rounds = rounds;
                c.model.variant = variant;
                c.model.topology = topology;
                c.train.epochs = epochs;
                c.train.adam.lr = lr;
                c.eval.k_thresholds = ks;
                c.eval.protocol = if greedy { Protocol::LeavePair } else { Protocol::LeaveOneSubject };
                c.eval.match_rule = if greedy { MatchRule::Greedy } else { MatchRule::Optimal };
                c
            })
    }

    proptest! {
        #[test]
        fn toml_round_trip(c in arb_config()) {
            let text = c.to_toml().unwrap();
            prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        }
    }
}
