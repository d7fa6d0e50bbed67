//! Per-video annotation files.
//!
//! Each video is one pretty-printed JSON document:
//!
//! ```text
//! {
//!   "format": "hoigraph-annotation",
//!   "version": 1,
//!   "video_id": "s1_v0",
//!   "subjects": ["s1"],
//!   "frames": T,
//!   "width": 640.0,            // frame size in pixels
//!   "height": 480.0,
//!   "joints": K,
//!   "humans": [{
//!     "skeleton": [{ "positions": [[x, y], ...], "valid": [true, ...] }, ...],   // K tracks
//!     "labels": ["approach", null, ...],                                          // null = unlabelled frame
//!     "features": "features/s1_v0_human0.bin"                                     // optional
//!   }],
//!   "objects": [{
//!     "category": "cup",
//!     "boxes": [[x1, y1, x2, y2], ...],   // top-left then bottom-right corner
//!     "valid": [true, ...],
//!     "labels": ["stationary", ...],      // optional
//!     "features": "..."                   // optional
//!   }]
//! }
//! ```
//!
//! Positions are in pixels. Entity ids are array indices. Feature paths are
//! relative to the dataset root.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabularies, Vocabulary};
use crate::backbone::LabelTimeline;
use crate::error::{Error, Result};
use crate::geometry::{build_context, normalize_positions, EntityKind, GeometricContext, KeypointId, KeypointTrack};

pub const ANNOTATION_FORMAT: &str = "hoigraph-annotation";
pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoAnnotation {
    pub format: String,
    pub version: u32,
    pub video_id: String,
    pub subjects: Vec<String>,
    pub frames: usize,
    pub width: f64,
    pub height: f64,
    pub joints: usize,
    pub humans: Vec<HumanAnnotation>,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanAnnotation {
    pub skeleton: Vec<JointTrack>,
    pub labels: Vec<Option<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTrack {
    pub positions: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAnnotation {
    pub category: String,
    pub boxes: Vec<[f64; 4]>,
    pub valid: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<Option<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

fn check_len(path: String, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Length { path, expected, found });
    }
    Ok(())
}

fn check_labels(labels: &[Option<String>], path: &str, frames: usize, vocab: &Vocabulary) -> Result<()> {
    check_len(path.to_string(), frames, labels.len())?;
    for (t, l) in labels.iter().enumerate() {
        if let Some(name) = l {
            if vocab.id(name).is_none() {
                return Err(Error::Vocabulary {
                    path: format!("{path}[{t}]"),
                    label: name.clone(),
                });
            }
        }
    }
    Ok(())
}

impl VideoAnnotation {
    /// Checks every invariant against the dataset vocabularies.
    pub fn validate(&self, vocab: &Vocabularies) -> Result<()> {
        if self.format != ANNOTATION_FORMAT {
            return Err(Error::schema("format", format!("expected `{ANNOTATION_FORMAT}`, found `{}`", self.format)));
        }
        if self.version != ANNOTATION_VERSION {
            return Err(Error::schema("version", format!("unsupported version {}", self.version)));
        }
        if self.video_id.is_empty() {
            return Err(Error::schema("video_id", "empty video id"));
        }
        if self.subjects.is_empty() {
            return Err(Error::schema("subjects", "at least one subject id is required"));
        }
        if self.frames == 0 {
            return Err(Error::schema("frames", "a video needs at least one frame"));
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::schema("width", "must be positive"));
        }
        if !(self.height.is_finite() && self.height > 0.0) {
            return Err(Error::schema("height", "must be positive"));
        }
        if self.joints == 0 {
            return Err(Error::schema("joints", "must be positive"));
        }
        if self.humans.is_empty() {
            return Err(Error::schema("humans", "at least one human is required"));
        }
        let t = self.frames;
        for (h, human) in self.humans.iter().enumerate() {
            let base = format!("humans[{h}]");
            check_len(format!("{base}.skeleton"), self.joints, human.skeleton.len())?;
            for (k, joint) in human.skeleton.iter().enumerate() {
                let jp = format!("{base}.skeleton[{k}]");
                check_len(format!("{jp}.positions"), t, joint.positions.len())?;
                check_len(format!("{jp}.valid"), t, joint.valid.len())?;
                for (f, (p, &ok)) in joint.positions.iter().zip(&joint.valid).enumerate() {
                    if ok && !(p[0].is_finite() && p[1].is_finite()) {
                        return Err(Error::schema(format!("{jp}.positions[{f}]"), "non-finite position"));
                    }
                }
            }
            check_labels(&human.labels, &format!("{base}.labels"), t, &vocab.sub_activity)?;
        }
        for (o, object) in self.objects.iter().enumerate() {
            let base = format!("objects[{o}]");
            if object.category.is_empty() {
                return Err(Error::schema(format!("{base}.category"), "empty category"));
            }
            check_len(format!("{base}.boxes"), t, object.boxes.len())?;
            check_len(format!("{base}.valid"), t, object.valid.len())?;
            for (f, (b, &ok)) in object.boxes.iter().zip(&object.valid).enumerate() {
                if !ok {
                    continue;
                }
                let path = format!("{base}.boxes[{f}]");
                if !b.iter().all(|v| v.is_finite()) {
                    return Err(Error::schema(path, format!("non-finite box for object {o} at frame {f}")));
                }
                if b[0] > b[2] || b[1] > b[3] {
                    return Err(Error::schema(
                        path,
                        format!("object {o} at frame {f}: corners are not top-left then bottom-right ({b:?})"),
                    ));
                }
            }
            if let Some(labels) = &object.labels {
                let path = format!("{base}.labels");
                let Some(affordance) = &vocab.affordance else {
                    return Err(Error::schema(path, "object labels given but the dataset has no affordance vocabulary"));
                };
                check_labels(labels, &path, t, affordance)?;
            }
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline. Saving what was loaded from a
    /// canonical file reproduces it byte for byte.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("annotation serializes");
        s.push('\n');
        s
    }

    /// Keypoint context in normalized coordinates. Also returns the
    /// `(track, frame)` positions that were clamped into the frame.
    pub fn geometric_context(&self) -> Result<(GeometricContext, Vec<(usize, usize)>)> {
        let mut human_tracks = Vec::new();
        for (h, human) in self.humans.iter().enumerate() {
            for (k, joint) in human.skeleton.iter().enumerate() {
                let id = KeypointId {
                    kind: EntityKind::Human,
                    entity: h,
                    keypoint: k,
                };
                human_tracks.push(KeypointTrack::new(id, joint.positions.clone(), joint.valid.clone())?);
            }
        }
        let mut object_tracks = Vec::new();
        for (o, object) in self.objects.iter().enumerate() {
            for corner in 0..2 {
                let id = KeypointId {
                    kind: EntityKind::Object,
                    entity: o,
                    keypoint: corner,
                };
                let positions = object.boxes.iter().map(|b| [b[2 * corner], b[2 * corner + 1]]).collect();
                object_tracks.push(KeypointTrack::new(id, positions, object.valid.clone())?);
            }
        }
        let h = normalize_positions(&human_tracks, self.width, self.height)?;
        let o = normalize_positions(&object_tracks, self.width, self.height)?;
        let mut clamped = h.clamped;
        clamped.extend(o.clamped.into_iter().map(|(i, f)| (i + human_tracks.len(), f)));
        let ctx = build_context(&h.tracks, &o.tracks, self.humans.len(), self.joints, self.objects.len())?;
        Ok((ctx, clamped))
    }

    /// Label timelines of every labelled entity, humans first.
    pub fn label_timelines(&self, vocab: &Vocabularies) -> Result<Vec<LabelTimeline>> {
        let ids = |labels: &[Option<String>], v: &Vocabulary, path: String| -> Result<Vec<Option<usize>>> {
            labels
                .iter()
                .enumerate()
                .map(|(t, l)| match l {
                    None => Ok(None),
                    Some(name) => v.id(name).map(Some).ok_or_else(|| Error::Vocabulary {
                        path: format!("{path}[{t}]"),
                        label: name.clone(),
                    }),
                })
                .collect()
        };
        let mut out = Vec::new();
        for (h, human) in self.humans.iter().enumerate() {
            out.push(LabelTimeline {
                entity: h,
                kind: EntityKind::Human,
                labels: ids(&human.labels, &vocab.sub_activity, format!("humans[{h}].labels"))?,
            });
        }
        if let Some(aff) = &vocab.affordance {
            for (o, object) in self.objects.iter().enumerate() {
                if let Some(labels) = &object.labels {
                    out.push(LabelTimeline {
                        entity: o,
                        kind: EntityKind::Object,
                        labels: ids(labels, aff, format!("objects[{o}].labels"))?,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Parses and validates an annotation document. `source` names the input
/// in error messages.
pub fn parse_annotation(text: &str, source: &str, vocab: &Vocabularies) -> Result<VideoAnnotation> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::schema(source, format!("not valid JSON: {e}")))?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(ANNOTATION_FORMAT) => {}
        _ => return Err(Error::schema("format", format!("{source} is not a `{ANNOTATION_FORMAT}` document"))),
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == ANNOTATION_VERSION as u64 => {}
        other => return Err(Error::schema("version", format!("unsupported version {other:?} in {source}"))),
    }
    let ann: VideoAnnotation = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(path, e.into_inner().to_string())
    })?;
    ann.validate(vocab)?;
    Ok(ann)
}

pub fn load_annotation(path: &Path, vocab: &Vocabularies) -> Result<VideoAnnotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotation(&text, &path.display().to_string(), vocab)
}

pub fn save_annotation(path: &Path, annotation: &VideoAnnotation) -> Result<()> {
    std::fs::write(path, annotation.to_canonical_json()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabularies {
        Vocabularies {
            sub_activity: Vocabulary::new(["reach", "lift"]).unwrap(),
            affordance: Some(Vocabulary::new(["stationary", "lifted"]).unwrap()),
        }
    }

    const MINIMAL: &str = r#"{
  "format": "hoigraph-annotation",
  "version": 1,
  "video_id": "v",
  "subjects": ["s"],
  "frames": 2,
  "width": 10.0,
  "height": 10.0,
  "joints": 1,
  "humans": [
    {
      "skeleton": [{"positions": [[1.0, 2.0], [2.0, 2.0]], "valid": [true, true]}],
      "labels": ["reach", "lift"]
    }
  ],
  "objects": []
}"#;

    fn sample() -> VideoAnnotation {
        VideoAnnotation {
            format: ANNOTATION_FORMAT.into(),
            version: ANNOTATION_VERSION,
            video_id: "v1".into(),
            subjects: vec!["s1".into()],
            frames: 3,
            width: 100.0,
            height: 50.0,
            joints: 2,
            humans: vec![HumanAnnotation {
                skeleton: vec![
                    JointTrack {
                        positions: vec![[10.0, 5.0], [11.5, 5.25], [12.0, 6.0]],
                        valid: vec![true, true, false],
                    },
                    JointTrack {
                        positions: vec![[20.0, 25.0], [20.0, 25.0], [20.125, 24.0]],
                        valid: vec![true; 3],
                    },
                ],
                labels: vec![Some("reach".into()), None, Some("lift".into())],
                features: Some("features/v1_human0.bin".into()),
            }],
            objects: vec![ObjectAnnotation {
                category: "cup".into(),
                boxes: vec![[40.0, 30.0, 50.0, 45.0]; 3],
                valid: vec![true; 3],
                labels: Some(vec![Some("stationary".into()); 3]),
                features: None,
            }],
        }
    }

    #[test]
    fn minimal_file_loads() {
        let a = parse_annotation(MINIMAL, "min", &vocab()).unwrap();
        let (ctx, clamped) = a.geometric_context().unwrap();
        assert_eq!(ctx.joints(), 1);
        assert_eq!(ctx.frames(), 2);
        assert!(clamped.is_empty());
        assert_eq!(ctx.row(0, 0), [0.1, 0.2, 0.1, 0.0]);
        let labels = a.label_timelines(&vocab()).unwrap();
        assert_eq!(labels[0].labels, vec![Some(0), Some(1)]);
    }

    #[test]
    fn canonical_round_trip_is_byte_exact() {
        let text = sample().to_canonical_json();
        let back = parse_annotation(&text, "s", &vocab()).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_canonical_json(), text);
    }

    #[test]
    fn flipped_box_names_frame_and_object() {
        let mut a = sample();
        a.objects[0].boxes[1] = [40.0, 45.0, 50.0, 30.0];
        let err = parse_annotation(&a.to_canonical_json(), "s", &vocab()).unwrap_err();
        match err {
            Error::Schema { path, message } => {
                assert_eq!(path, "objects[0].boxes[1]");
                assert!(message.contains("object 0") && message.contains("frame 1"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invalid_box_is_not_checked() {
        let mut a = sample();
        a.objects[0].boxes[1] = [0.0; 4];
        a.objects[0].valid[1] = false;
        a.validate(&vocab()).unwrap();
    }

    #[test]
    fn field_errors_carry_paths() {
        let text = MINIMAL.replace("\"frames\": 2", "\"frames\": \"two\"");
        match parse_annotation(&text, "m", &vocab()).unwrap_err() {
            Error::Schema { path, .. } => assert_eq!(path, "frames"),
            other => panic!("{other}"),
        }
        let text = MINIMAL.replace("[true, true]", "[true, 1]");
        match parse_annotation(&text, "m", &vocab()).unwrap_err() {
            Error::Schema { path, .. } => assert_eq!(path, "humans[0].skeleton[0].valid[1]"),
            other => panic!("{other}"),
        }
        let text = MINIMAL.replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(parse_annotation(&text, "m", &vocab()), Err(Error::Schema { .. })));
        let text = MINIMAL.replace("\"objects\": []", "\"objects\": [], \"extra\": 1");
        assert!(matches!(parse_annotation(&text, "m", &vocab()), Err(Error::Schema { .. })));
    }

    #[test]
    fn length_and_vocabulary_errors() {
        let text = MINIMAL.replace("\"labels\": [\"reach\", \"lift\"]", "\"labels\": [\"reach\"]");
        assert!(matches!(parse_annotation(&text, "m", &vocab()), Err(Error::Length { .. })));
        let text = MINIMAL.replace("\"lift\"]", "\"jump\"]");
        match parse_annotation(&text, "m", &vocab()).unwrap_err() {
            Error::Vocabulary { path, label } => {
                assert_eq!(path, "humans[0].labels[1]");
                assert_eq!(label, "jump");
            }
            other => panic!("{other}"),
        }
        let no_aff = Vocabularies {
            sub_activity: vocab().sub_activity,
            affordance: None,
        };
        assert!(sample().validate(&no_aff).is_err());
    }

    #[derive(Debug, Clone)]
    enum Mutation {
        DropFrame(usize),
        FlipBox(usize),
        UnknownLabel(usize),
        MissingJoint,
        NanPosition(usize),
        ZeroWidth,
    }

    fn mutation() -> impl Strategy<Value = Mutation> {
        prop_oneof![
            (0usize..4).prop_map(Mutation::DropFrame),
            (0usize..3).prop_map(Mutation::FlipBox),
            (0usize..3).prop_map(Mutation::UnknownLabel),
            Just(Mutation::MissingJoint),
            (0usize..2).prop_map(Mutation::NanPosition),
            Just(Mutation::ZeroWidth),
        ]
    }

    proptest! {
        #[test]
        fn mutated_files_are_rejected_precisely(m in mutation()) {
            let mut a = sample();
            match m {
                Mutation::DropFrame(which) => {
                    match which {
                        0 => { a.humans[0].skeleton[1].positions.pop(); }
                        1 => { a.humans[0].labels.pop(); }
                        2 => { a.objects[0].boxes.pop(); }
                        _ => { a.objects[0].valid.pop(); }
                    }
                    let ok = matches!(a.validate(&vocab()), Err(Error::Length { .. }));
                    prop_assert!(ok);
                }
                Mutation::FlipBox(f) => {
                    a.objects[0].boxes[f] = [50.0, 30.0, 40.0, 45.0];
                    let err = a.validate(&vocab()).unwrap_err();
                    let is_schema_at_frame = matches!(&err, Error::Schema { path, .. } if *path == format!("objects[0].boxes[{f}]"));
                    prop_assert!(is_schema_at_frame, "{}", err);
                }
                Mutation::UnknownLabel(f) => {
                    a.objects[0].labels.as_mut().unwrap()[f] = Some("flying".into());
                    let ok = matches!(a.validate(&vocab()), Err(Error::Vocabulary { .. }));
                    prop_assert!(ok);
                }
                Mutation::MissingJoint => {
                    a.humans[0].skeleton.pop();
                    let ok = matches!(a.validate(&vocab()), Err(Error::Length { .. }));
                    prop_assert!(ok);
                }
                Mutation::NanPosition(f) => {
                    a.humans[0].skeleton[1].positions[f][0] = f64::NAN;
                    let ok = matches!(a.validate(&vocab()), Err(Error::Schema { .. }));
                    prop_assert!(ok);
                }
                Mutation::ZeroWidth => {
                    a.width = 0.0;
                    let ok = matches!(a.validate(&vocab()), Err(Error::Schema { .. }));
                    prop_assert!(ok);
                }
            }
        }
    }
}
