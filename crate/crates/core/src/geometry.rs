//! Geometric contexts from skeleton and bounding-box tracks.
//!
//! Each keypoint contributes one 4-channel row per frame: its 2D position
//! followed by its forward-difference velocity. Human joints come first
//! (human-major, joint-minor), then object box corners (object-major,
//! corner-minor; corner 0 is top-left, corner 1 bottom-right).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Number of channels per keypoint row: `[p_x, p_y, v_x, v_y]`.
pub const CHANNELS: usize = 4;

/// Default number of skeleton joints per human.
pub const DEFAULT_JOINTS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Human,
    Object,
}

/// Identifies one keypoint: a joint of a human or a corner of an object box.
/// All indices are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeypointId {
    pub kind: EntityKind,
    pub entity: usize,
    pub keypoint: usize,
}

/// Per-frame 2D positions of one keypoint with a validity flag per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTrack {
    pub id: KeypointId,
    pub positions: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl KeypointTrack {
    pub fn new(id: KeypointId, positions: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if positions.len() != valid.len() {
            return Err(Error::Length {
                path: format!("{:?}.valid", id),
                expected: positions.len(),
                found: valid.len(),
            });
        }
        Ok(Self { id, positions, valid })
    }

    /// A track with every frame valid.
    pub fn fully_valid(id: KeypointId, positions: Vec<[f64; 2]>) -> Self {
        let valid = vec![true; positions.len()];
        Self { id, positions, valid }
    }

    pub fn frames(&self) -> usize {
        self.positions.len()
    }
}

/// Forward-difference velocity `v_t = p_{t+1} - p_t`.
///
/// The final frame gets zero velocity, as does any frame where either
/// endpoint of the difference is invalid.
pub fn compute_velocity(track: &KeypointTrack) -> Result<Vec<[f64; 2]>> {
    let t = track.frames();
    if t == 0 {
        return Err(Error::Contract(format!("track {:?} has no frames", track.id)));
    }
    let mut v = vec![[0.0, 0.0]; t];
    for i in 0..t - 1 {
        if track.valid[i] && track.valid[i + 1] {
            let (a, b) = (track.positions[i], track.positions[i + 1]);
            v[i] = [b[0] - a[0], b[1] - a[1]];
        }
    }
    Ok(v)
}

/// Normalized tracks plus the `(track, frame)` pairs that were clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedTracks {
    pub tracks: Vec<KeypointTrack>,
    pub clamped: Vec<(usize, usize)>,
}

/// Divides pixel coordinates by the frame size, clamping into `[0, 1]`.
pub fn normalize_positions(raw: &[KeypointTrack], width: f64, height: f64) -> Result<NormalizedTracks> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Contract(format!(
            "frame dimensions must be positive, got {width}x{height}"
        )));
    }
    let mut clamped = Vec::new();
    let tracks = raw
        .iter()
        .enumerate()
        .map(|(ti, track)| {
            let positions = track
                .positions
                .iter()
                .enumerate()
                .map(|(f, p)| {
                    let x = p[0] / width;
                    let y = p[1] / height;
                    let cx = x.clamp(0.0, 1.0);
                    let cy = y.clamp(0.0, 1.0);
                    if cx != x || cy != y {
                        clamped.push((ti, f));
                    }
                    [cx, cy]
                })
                .collect();
            KeypointTrack {
                id: track.id,
                positions,
                valid: track.valid.clone(),
            }
        })
        .collect();
    Ok(NormalizedTracks { tracks, clamped })
}

/// Per-frame `J x 4` keypoint features for a whole video, stored as a
/// single `(T*J) x 4` matrix with frame `t` occupying rows `t*J..(t+1)*J`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricContext {
    frames: usize,
    layout: Vec<KeypointId>,
    data: Tensor2,
    mask: Vec<bool>,
}

impl GeometricContext {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of keypoint rows per frame.
    pub fn joints(&self) -> usize {
        self.layout.len()
    }

    pub fn layout(&self) -> &[KeypointId] {
        &self.layout
    }

    /// The stacked `(T*J) x 4` feature matrix.
    pub fn stacked(&self) -> &Tensor2 {
        &self.data
    }

    /// Validity of each stacked row; `false` rows are all-zero.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn frame(&self, t: usize) -> Tensor2 {
        self.data.rows_range(t * self.joints(), self.joints())
    }

    pub fn row(&self, t: usize, j: usize) -> [f64; 4] {
        let r = self.data.row(t * self.joints() + j);
        [r[0], r[1], r[2], r[3]]
    }

    pub fn count(&self, kind: EntityKind) -> usize {
        self.layout.iter().filter(|id| id.kind == kind).count()
    }

    /// Keeps only the keypoint rows of `kind`, in their original order.
    pub fn retain_kind(&self, kind: EntityKind) -> GeometricContext {
        let keep: Vec<usize> = (0..self.joints()).filter(|&j| self.layout[j].kind == kind).collect();
        let j_new = keep.len();
        let mut data = Vec::with_capacity(self.frames * j_new * CHANNELS);
        let mut mask = Vec::with_capacity(self.frames * j_new);
        for t in 0..self.frames {
            for &j in &keep {
                let r = t * self.joints() + j;
                data.extend_from_slice(self.data.row(r));
                mask.push(self.mask[r]);
            }
        }
        GeometricContext {
            frames: self.frames,
            layout: keep.iter().map(|&j| self.layout[j]).collect(),
            data: Tensor2::new(self.frames * j_new, CHANNELS, data).expect("row count"),
            mask,
        }
    }

    /// Builds a context directly from stacked rows; used by tests and
    /// synthetic inputs that bypass tracks.
    pub fn from_stacked(frames: usize, layout: Vec<KeypointId>, data: Tensor2) -> Result<Self> {
        if data.cols() != CHANNELS || data.rows() != frames * layout.len() {
            return Err(Error::Dimension {
                op: "GeometricContext::from_stacked",
                left: data.shape(),
                right: (frames * layout.len(), CHANNELS),
            });
        }
        let mask = vec![true; data.rows()];
        Ok(Self {
            frames,
            layout,
            data,
            mask,
        })
    }
}

/// Assembles the per-frame context for `humans` humans with `joints` joints
/// each and `objects` objects with two box corners each.
///
/// Track order in the inputs does not matter; rows are placed by id.
pub fn build_context(
    human_tracks: &[KeypointTrack],
    object_tracks: &[KeypointTrack],
    humans: usize,
    joints: usize,
    objects: usize,
) -> Result<GeometricContext> {
    let mut layout = Vec::with_capacity(humans * joints + objects * 2);
    for h in 0..humans {
        for k in 0..joints {
            layout.push(KeypointId {
                kind: EntityKind::Human,
                entity: h,
                keypoint: k,
            });
        }
    }
    for f in 0..objects {
        for u in 0..2 {
            layout.push(KeypointId {
                kind: EntityKind::Object,
                entity: f,
                keypoint: u,
            });
        }
    }
    let j_total = layout.len();

    let mut slots: Vec<Option<&KeypointTrack>> = vec![None; j_total];
    let slot_of = |id: &KeypointId| -> Option<usize> {
        match id.kind {
            EntityKind::Human if id.entity < humans && id.keypoint < joints => Some(id.entity * joints + id.keypoint),
            EntityKind::Object if id.entity < objects && id.keypoint < 2 => {
                Some(humans * joints + id.entity * 2 + id.keypoint)
            }
            _ => None,
        }
    };
    let mut frames: Option<usize> = None;
    for (expected_kind, tracks) in [(EntityKind::Human, human_tracks), (EntityKind::Object, object_tracks)] {
        for track in tracks {
            let path = format!("{:?}[{}].{}", track.id.kind, track.id.entity, track.id.keypoint);
            if track.id.kind != expected_kind {
                return Err(Error::schema(path, "track listed under the wrong entity kind"));
            }
            let slot = slot_of(&track.id).ok_or_else(|| Error::schema(&path, "keypoint index out of range"))?;
            if slots[slot].is_some() {
                return Err(Error::schema(&path, "duplicate keypoint track"));
            }
            if track.valid.len() != track.positions.len() {
                return Err(Error::Length {
                    path: format!("{path}.valid"),
                    expected: track.positions.len(),
                    found: track.valid.len(),
                });
            }
            match frames {
                None => frames = Some(track.frames()),
                Some(t) if t != track.frames() => {
                    return Err(Error::Length {
                        path,
                        expected: t,
                        found: track.frames(),
                    })
                }
                _ => {}
            }
            for (f, (p, &ok)) in track.positions.iter().zip(&track.valid).enumerate() {
                if ok && !(p.iter().all(|c| (0.0..=1.0).contains(c))) {
                    return Err(Error::schema(
                        format!("{path}.frame[{f}]"),
                        "valid positions must be normalized into [0, 1]",
                    ));
                }
            }
            slots[slot] = Some(track);
        }
    }
    for (j, slot) in slots.iter().enumerate() {
        if slot.is_none() {
            let id = layout[j];
            return Err(Error::schema(
                format!("{:?}[{}].{}", id.kind, id.entity, id.keypoint),
                "missing keypoint track",
            ));
        }
    }
    let t = frames.unwrap_or(0);
    if t == 0 {
        return Err(Error::Contract("geometric context needs at least one frame".into()));
    }

    let velocities = slots
        .iter()
        .map(|s| compute_velocity(s.expect("checked")))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Tensor2::zeros(t * j_total, CHANNELS);
    let mut mask = vec![false; t * j_total];
    for frame in 0..t {
        for j in 0..j_total {
            let track = slots[j].expect("checked");
            if !track.valid[frame] {
                continue;
            }
            let r = frame * j_total + j;
            let p = track.positions[frame];
            let v = velocities[j][frame];
            data.row_mut(r).copy_from_slice(&[p[0], p[1], v[0], v[1]]);
            mask[r] = true;
        }
    }
    Ok(GeometricContext {
        frames: t,
        layout,
        data,
        mask,
    })
}
