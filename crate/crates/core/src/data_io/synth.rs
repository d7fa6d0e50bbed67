//! Deterministic synthetic interaction videos.
//!
//! Each human stands at a fixed anchor with one active hand; objects rest
//! on a table to either side. A script of `(label, duration, motion)` steps
//! drives the hand:
//!
//! * `approach` moves the hand in a straight line toward the object center,
//!   stopping at a grasp radius, and attaches it;
//! * `retreat` moves it straight away from the object and detaches it;
//! * `lift` / `place` translate the hand vertically, carrying the attached
//!   object;
//! * `idle` holds still.
//!
//! Observed keypoints get bounded uniform noise, and each keypoint is
//! independently hidden on a fraction of frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{HumanAnnotation, JointTrack, ObjectAnnotation, VideoAnnotation, ANNOTATION_FORMAT, ANNOTATION_VERSION};
use super::vocab::{Vocabularies, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion_graph::EntityFeatureSequence;
use crate::geometry::{EntityKind, DEFAULT_JOINTS};
use crate::numerics::{rng_for, Tensor2};

/// Sub-activity labels used by generated data.
pub const SUB_ACTIVITIES: [&str; 5] = ["approach", "retreat", "lift", "place", "idle"];
/// Object labels used by generated data.
pub const AFFORDANCES: [&str; 3] = ["stationary", "lifted", "placed"];
/// Object categories cycled through by generated scenes.
pub const CATEGORIES: [&str; 4] = ["cup", "bowl", "box", "bottle"];

/// Largest skeleton the generator can draw.
pub const MAX_JOINTS: usize = DEFAULT_JOINTS;

/// Joint offsets from the pelvis for a unit-scale person, in pixels.
/// Index 8 is the active hand and 7 its elbow, 6 its shoulder.
const TEMPLATE: [[f64; 2]; MAX_JOINTS] = [
    [0.0, -170.0],  // head
    [0.0, -145.0],  // neck
    [0.0, -100.0],  // torso
    [-20.0, -140.0], // left shoulder
    [-28.0, -110.0], // left elbow
    [-30.0, -80.0], // left hand
    [20.0, -140.0], // right shoulder
    [28.0, -110.0], // right elbow
    [30.0, -80.0],  // right hand
    [-12.0, 0.0],   // left hip
    [-14.0, 70.0],  // left knee
    [-15.0, 140.0], // left foot
    [12.0, 0.0],    // right hip
    [14.0, 70.0],   // right knee
    [15.0, 140.0],  // right foot
];

const GRASP_RADIUS: f64 = 12.0;
const BOX_SIZE: [f64; 2] = [28.0, 36.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Approach,
    Retreat,
    Lift,
    Place,
    Idle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub label: String,
    pub duration: usize,
    pub motion: Motion,
    /// Object the step acts on; ignored by `idle`.
    pub object: usize,
}

impl ScriptStep {
    /// A step whose label is the motion's own name.
    pub fn new(motion: Motion, duration: usize, object: usize) -> Self {
        let label = match motion {
            Motion::Approach => "approach",
            Motion::Retreat => "retreat",
            Motion::Lift => "lift",
            Motion::Place => "place",
            Motion::Idle => "idle",
        };
        Self {
            label: label.into(),
            duration,
            motion,
            object,
        }
    }
}

/// Per-subject body style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectStyle {
    pub scale: f64,
    /// Offset of the resting hand from its default spot, pixels.
    pub rest_offset: [f64; 2],
    /// Vertical travel of lift and place, pixels.
    pub lift_height: f64,
}

impl Default for SubjectStyle {
    fn default() -> Self {
        Self {
            scale: 1.0,
            rest_offset: [0.0, 0.0],
            lift_height: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub video_id: String,
    pub subject: String,
    pub humans: usize,
    pub objects: usize,
    pub joints: usize,
    pub frames: usize,
    /// One script per human.
    pub scripts: Vec<Vec<ScriptStep>>,
    /// Half-width of the uniform position noise, pixels.
    pub noise: f64,
    pub occlusion_rate: f64,
    pub width: f64,
    pub height: f64,
    pub style: SubjectStyle,
    pub object_labels: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.humans == 0 {
            return Err(Error::Contract("synthetic video needs at least one human".into()));
        }
        if self.joints == 0 || self.joints > MAX_JOINTS {
            return Err(Error::Contract(format!("joint count must be in 1..={MAX_JOINTS}, got {}", self.joints)));
        }
        if self.frames == 0 {
            return Err(Error::Contract("synthetic video needs at least one frame".into()));
        }
        if self.scripts.len() != self.humans {
            return Err(Error::Contract(format!(
                "{} scripts given for {} humans",
                self.scripts.len(),
                self.humans
            )));
        }
        for (h, script) in self.scripts.iter().enumerate() {
            let total: usize = script.iter().map(|s| s.duration).sum();
            if total != self.frames {
                return Err(Error::Contract(format!(
                    "script of human {h} lasts {total} frames, video has {}",
                    self.frames
                )));
            }
            for s in script {
                if s.duration == 0 {
                    return Err(Error::Contract(format!("zero-length `{}` step for human {h}", s.label)));
                }
                if s.motion != Motion::Idle && s.object >= self.objects {
                    return Err(Error::Contract(format!(
                        "human {h} step `{}` targets object {} of {}",
                        s.label, s.object, self.objects
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(Error::Contract(format!("occlusion rate {} outside [0, 1)", self.occlusion_rate)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Contract("noise amplitude must be finite and nonnegative".into()));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Contract("frame size must be positive".into()));
        }
        Ok(())
    }
}

/// The active hand: the right hand when the skeleton has one, otherwise
/// the last joint.
pub fn hand_joint(joints: usize) -> usize {
    if joints > 8 {
        8
    } else {
        joints - 1
    }
}

/// Vocabularies matching generated data.
pub fn synthetic_vocabularies(object_labels: bool) -> Vocabularies {
    Vocabularies {
        sub_activity: Vocabulary::new(SUB_ACTIVITIES).expect("static vocabulary"),
        affordance: object_labels.then(|| Vocabulary::new(AFFORDANCES).expect("static vocabulary")),
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn lerp(a: [f64; 2], b: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
}

/// Scene layout drawn from the seed.
struct Scene {
    anchors: Vec<[f64; 2]>,
    rest: Vec<[f64; 2]>,
    centers: Vec<[f64; 2]>,
}

fn layout(cfg: &SynthConfig) -> Scene {
    let mut rng = rng_for(cfg.seed, "synth-layout");
    let s = cfg.style.scale;
    let pelvis_y = cfg.height * 0.62;
    let table_y = pelvis_y - 10.0 * s;
    let anchors: Vec<[f64; 2]> = (0..cfg.humans)
        .map(|h| {
            let x = cfg.width * (h as f64 + 1.0) / (cfg.humans as f64 + 1.0) + rng.gen_range(-15.0..15.0);
            [x, pelvis_y]
        })
        .collect();
    let rest = anchors
        .iter()
        .map(|a| {
            [
                a[0] + TEMPLATE[8][0] * s + cfg.style.rest_offset[0],
                a[1] + TEMPLATE[8][1] * s + cfg.style.rest_offset[1],
            ]
        })
        .collect();
    let centers = (0..cfg.objects)
        .map(|o| {
            let owner = anchors[o % cfg.humans];
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let dx = rng.gen_range(70.0..110.0) * s;
            [owner[0] + side * dx, table_y - BOX_SIZE[1] / 2.0]
        })
        .collect();
    Scene { anchors, rest, centers }
}

/// Noise-free trajectories: hand per human and center per object, plus the
/// affordance state of each object per frame.
struct Trajectories {
    hands: Vec<Vec<[f64; 2]>>,
    centers: Vec<Vec<[f64; 2]>>,
    object_state: Vec<Vec<usize>>,
}

fn simulate(cfg: &SynthConfig, scene: &Scene) -> Trajectories {
    let t_total = cfg.frames;
    let mut hands = vec![Vec::with_capacity(t_total); cfg.humans];
    let mut centers: Vec<Vec<[f64; 2]>> = scene.centers.iter().map(|&c| vec![c; t_total]).collect();
    let mut object_state = vec![vec![0usize; t_total]; cfg.objects];

    // Humans are simulated one after another over the full timeline; an
    // object follows whichever hand holds it.
    let mut cur_centers = scene.centers.clone();
    let mut holder: Vec<Option<usize>> = vec![None; cfg.objects];
    let mut hand_pos = scene.rest.clone();
    let mut held: Vec<Option<usize>> = vec![None; cfg.humans];
    let mut cursor = vec![(0usize, 0usize); cfg.humans]; // (step, frame within step)
    let mut starts: Vec<([f64; 2], [f64; 2])> = vec![([0.0; 2], [0.0; 2]); cfg.humans];

    for t in 0..t_total {
        for h in 0..cfg.humans {
            let (si, fi) = cursor[h];
            let step = &cfg.scripts[h][si];
            let o = step.object;
            if fi == 0 {
                // Fix the step's end point from the state at its start.
                let p0 = hand_pos[h];
                let target = match step.motion {
                    Motion::Approach => {
                        let c = cur_centers[o];
                        let d = norm(sub(p0, c));
                        if d > GRASP_RADIUS {
                            lerp(c, p0, GRASP_RADIUS / d)
                        } else {
                            p0
                        }
                    }
                    Motion::Retreat => {
                        let c = cur_centers[o];
                        let away = sub(p0, c);
                        let d = norm(away).max(1e-9);
                        let rest_d = norm(sub(scene.rest[h], c)).max(d + 20.0);
                        [c[0] + away[0] / d * rest_d, c[1] + away[1] / d * rest_d]
                    }
                    Motion::Lift => [p0[0], p0[1] - cfg.style.lift_height],
                    Motion::Place => [p0[0], p0[1] + cfg.style.lift_height],
                    Motion::Idle => p0,
                };
                starts[h] = (p0, target);
                if step.motion == Motion::Retreat {
                    if let Some(obj) = held[h].take() {
                        holder[obj] = None;
                    }
                }
            }
            let (p0, target) = starts[h];
            let s = (fi + 1) as f64 / step.duration as f64;
            let prev = hand_pos[h];
            let p = lerp(p0, target, s);
            hand_pos[h] = p;
            hands[h].push(p);
            if let Some(obj) = held[h] {
                let delta = sub(p, prev);
                cur_centers[obj] = [cur_centers[obj][0] + delta[0], cur_centers[obj][1] + delta[1]];
                object_state[obj][t] = match step.motion {
                    Motion::Lift => 1,
                    Motion::Place => 2,
                    _ => 0,
                };
            }
            if step.motion == Motion::Approach && fi + 1 == step.duration && holder[o].is_none() && held[h].is_none() {
                held[h] = Some(o);
                holder[o] = Some(h);
            }
            cursor[h] = if fi + 1 == step.duration { (si + 1, 0) } else { (si, fi + 1) };
        }
        for (o, c) in cur_centers.iter().enumerate() {
            centers[o][t] = *c;
        }
    }
    Trajectories {
        hands,
        centers,
        object_state,
    }
}

fn skeleton(anchor: [f64; 2], hand: [f64; 2], joints: usize, scale: f64) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = TEMPLATE[..joints]
        .iter()
        .map(|o| [anchor[0] + o[0] * scale, anchor[1] + o[1] * scale])
        .collect();
    let hj = hand_joint(joints);
    out[hj] = hand;
    if hj == 8 {
        let shoulder = out[6];
        let mid = lerp(shoulder, hand, 0.5);
        out[7] = [mid[0], mid[1] + 10.0 * scale];
    }
    out
}

/// Generates one annotated video. Bitwise deterministic in the config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<VideoAnnotation> {
    cfg.validate()?;
    let scene = layout(cfg);
    let traj = simulate(cfg, &scene);
    let mut noise_rng = rng_for(cfg.seed, "synth-noise");
    let mut occl_rng = rng_for(cfg.seed, "synth-occlusion");
    let mut jitter = |p: [f64; 2]| -> [f64; 2] {
        if cfg.noise == 0.0 {
            return p;
        }
        [
            p[0] + noise_rng.gen_range(-cfg.noise..=cfg.noise),
            p[1] + noise_rng.gen_range(-cfg.noise..=cfg.noise),
        ]
    };
    let mut visible = || cfg.occlusion_rate == 0.0 || !occl_rng.gen_bool(cfg.occlusion_rate);

    let mut humans = Vec::with_capacity(cfg.humans);
    for h in 0..cfg.humans {
        let mut tracks = vec![
            JointTrack {
                positions: Vec::with_capacity(cfg.frames),
                valid: Vec::with_capacity(cfg.frames),
            };
            cfg.joints
        ];
        for t in 0..cfg.frames {
            let pose = skeleton(scene.anchors[h], traj.hands[h][t], cfg.joints, cfg.style.scale);
            for (k, p) in pose.into_iter().enumerate() {
                let p = jitter(p);
                let ok = visible();
                tracks[k].positions.push(if ok { p } else { [0.0, 0.0] });
                tracks[k].valid.push(ok);
            }
        }
        let labels = cfg.scripts[h]
            .iter()
            .flat_map(|s| std::iter::repeat(Some(s.label.clone())).take(s.duration))
            .collect();
        humans.push(HumanAnnotation {
            skeleton: tracks,
            labels,
            features: None,
        });
    }

    let mut objects = Vec::with_capacity(cfg.objects);
    for o in 0..cfg.objects {
        let mut boxes = Vec::with_capacity(cfg.frames);
        let mut valid = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            let c = traj.centers[o][t];
            let tl = jitter([c[0] - BOX_SIZE[0] / 2.0, c[1] - BOX_SIZE[1] / 2.0]);
            let br = jitter([c[0] + BOX_SIZE[0] / 2.0, c[1] + BOX_SIZE[1] / 2.0]);
            // Corner visibility is drawn per box so a box is whole or hidden.
            let ok = visible();
            boxes.push(if ok { [tl[0], tl[1], br[0], br[1]] } else { [0.0; 4] });
            valid.push(ok);
        }
        let labels = cfg.object_labels.then(|| {
            traj.object_state[o]
                .iter()
                .map(|&s| Some(AFFORDANCES[s].to_string()))
                .collect()
        });
        objects.push(ObjectAnnotation {
            category: CATEGORIES[o % CATEGORIES.len()].into(),
            boxes,
            valid,
            labels,
            features: None,
        });
    }

    Ok(VideoAnnotation {
        format: ANNOTATION_FORMAT.into(),
        version: ANNOTATION_VERSION,
        video_id: cfg.video_id.clone(),
        subjects: vec![cfg.subject.clone()],
        frames: cfg.frames,
        width: cfg.width,
        height: cfg.height,
        joints: cfg.joints,
        humans,
        objects,
    })
}

/// Normalized region box `[x1, y1, x2, y2]` of an entity per frame: the
/// object box, or the extent of a human's visible joints. Hidden frames
/// repeat the last visible value (or a degenerate box at the frame center
/// before any is seen).
fn regions(ann: &VideoAnnotation, kind: EntityKind, entity: usize) -> Vec<[f64; 4]> {
    let mut last = [0.5; 4];
    (0..ann.frames)
        .map(|t| {
            let b = match kind {
                EntityKind::Human => ann.humans[entity]
                    .skeleton
                    .iter()
                    .filter(|j| j.valid[t])
                    .map(|j| j.positions[t])
                    .fold(None, |acc: Option<[f64; 4]>, p| {
                        Some(match acc {
                            None => [p[0], p[1], p[0], p[1]],
                            Some(b) => [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])],
                        })
                    }),
                EntityKind::Object => {
                    let o = &ann.objects[entity];
                    o.valid[t].then(|| o.boxes[t])
                }
            };
            if let Some(b) = b {
                last = [b[0] / ann.width, b[1] / ann.height, b[2] / ann.width, b[3] / ann.height];
            }
            last
        })
        .collect()
}

/// Scale of the position-dependent feature component.
const POSITION_GAIN: f64 = 1.0;
/// Half-width of the uniform feature noise.
const FEATURE_NOISE: f64 = 0.05;

/// Stand-in appearance features: a fixed random embedding of the entity's
/// category, plus a fixed random projection of its normalized region box,
/// plus noise. Humans share the category `human`.
pub fn synth_visual_features(ann: &VideoAnnotation, dim: usize, seed: u64) -> Result<Vec<EntityFeatureSequence>> {
    if dim < 8 {
        return Err(Error::Contract(format!("feature dimension must be at least 8, got {dim}")));
    }
    let embed = |category: &str| -> Vec<f64> {
        let mut rng = rng_for(seed, &format!("visual-class:{category}"));
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let mut proj_rng = rng_for(seed, "visual-position");
    let proj: Vec<[f64; 4]> = (0..dim).map(|_| std::array::from_fn(|_| proj_rng.gen_range(-1.0..1.0))).collect();

    let mut entities: Vec<(EntityKind, usize, String)> =
        (0..ann.humans.len()).map(|h| (EntityKind::Human, h, "human".to_string())).collect();
    entities.extend(ann.objects.iter().enumerate().map(|(o, obj)| (EntityKind::Object, o, obj.category.clone())));

    let mut out = Vec::with_capacity(entities.len());
    for (kind, entity, category) in entities {
        let base = embed(&category);
        let boxes = regions(ann, kind, entity);
        let mut rng = rng_for(seed, &format!("visual-noise:{}:{kind:?}:{entity}", ann.video_id));
        let features = Tensor2::from_fn(ann.frames, dim, |t, d| {
            let position: f64 = proj[d].iter().zip(&boxes[t]).map(|(w, x)| w * (x - 0.5)).sum();
            base[d] + POSITION_GAIN * position + rng.gen_range(-FEATURE_NOISE..FEATURE_NOISE)
        });
        out.push(EntityFeatureSequence { entity, kind, features });
    }
    Ok(out)
}

/// Parameters of a generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Set from the run seed when loaded through a run config.
    #[serde(skip)]
    pub seed: u64,
    pub subjects: usize,
    pub videos_per_subject: usize,
    pub humans: usize,
    pub objects: usize,
    pub joints: usize,
    pub frames: usize,
    pub min_step: usize,
    pub max_step: usize,
    pub noise: f64,
    pub occlusion_rate: f64,
    pub object_labels: bool,
    pub feature_dim: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            subjects: 4,
            videos_per_subject: 6,
            humans: 2,
            objects: 2,
            joints: DEFAULT_JOINTS,
            frames: 72,
            min_step: 4,
            max_step: 8,
            noise: 1.5,
            occlusion_rate: 0.1,
            object_labels: true,
            feature_dim: 64,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 2 {
            return Err(Error::Config("a benchmark needs at least 2 subjects".into()));
        }
        if self.videos_per_subject == 0 {
            return Err(Error::Config("videos_per_subject must be positive".into()));
        }
        if self.objects == 0 {
            return Err(Error::Config("a benchmark needs at least one object".into()));
        }
        if self.min_step == 0 || self.min_step > self.max_step {
            return Err(Error::Config("step durations need 0 < min_step <= max_step".into()));
        }
        if self.feature_dim < 8 {
            return Err(Error::Config("feature_dim must be at least 8".into()));
        }
        Ok(())
    }
}

/// Random legal script: a walk over rest / holding / raised states.
pub fn random_script(rng: &mut impl Rng, frames: usize, object: usize, min_step: usize, max_step: usize) -> Vec<ScriptStep> {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Rest,
        Holding,
        Raised,
    }
    let mut state = State::Rest;
    let mut steps = Vec::new();
    let mut left = frames;
    while left > 0 {
        let roll: f64 = rng.gen();
        let (motion, next) = match state {
            State::Rest if roll < 0.75 => (Motion::Approach, State::Holding),
            State::Rest => (Motion::Idle, State::Rest),
            State::Holding if roll < 0.6 => (Motion::Lift, State::Raised),
            State::Holding if roll < 0.9 => (Motion::Retreat, State::Rest),
            State::Holding => (Motion::Idle, State::Holding),
            State::Raised if roll < 0.85 => (Motion::Place, State::Holding),
            State::Raised => (Motion::Idle, State::Raised),
        };
        let mut d = rng.gen_range(min_step..=max_step).min(left);
        if left - d < min_step {
            d = left;
        }
        // Merge back-to-back idles into one step.
        match steps.last_mut() {
            Some(ScriptStep {
                motion: Motion::Idle,
                duration,
                ..
            }) if motion == Motion::Idle => *duration += d,
            _ => steps.push(ScriptStep::new(motion, d, object)),
        }
        left -= d;
        state = next;
    }
    steps
}

/// Synthesis configs of every benchmark video, subject-major.
pub fn benchmark_configs(b: &BenchmarkConfig) -> Result<Vec<SynthConfig>> {
    b.validate()?;
    let mut out = Vec::new();
    for s in 0..b.subjects {
        let subject = format!("s{}", s + 1);
        let mut srng = rng_for(b.seed, &format!("subject:{subject}"));
        let style = SubjectStyle {
            scale: srng.gen_range(0.85..1.15),
            rest_offset: [srng.gen_range(-8.0..8.0), srng.gen_range(-8.0..8.0)],
            lift_height: srng.gen_range(45.0..75.0),
        };
        for v in 0..b.videos_per_subject {
            let video_id = format!("{subject}_v{v}");
            let mut vrng = rng_for(b.seed, &format!("script:{video_id}"));
            let scripts = (0..b.humans)
                .map(|h| random_script(&mut vrng, b.frames, h % b.objects, b.min_step, b.max_step))
                .collect();
            out.push(SynthConfig {
                seed: crate::numerics::derive_seed(b.seed, &format!("video:{video_id}")),
                video_id,
                subject: subject.clone(),
                humans: b.humans,
                objects: b.objects,
                joints: b.joints,
                frames: b.frames,
                scripts,
                noise: b.noise,
                occlusion_rate: b.occlusion_rate,
                width: 640.0,
                height: 480.0,
                style,
                object_labels: b.object_labels,
            });
        }
    }
    Ok(out)
}
