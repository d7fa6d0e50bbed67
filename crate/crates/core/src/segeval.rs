//! Segment-level evaluation.
//!
//! Frame labels are collapsed into maximal constant runs and scored with
//! F1@k: a predicted segment is a true positive when it is matched
//! one-to-one with a ground-truth segment of the same class whose IoU is at
//! least `k`. Frame indices are 0-based and segment ends are inclusive.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds reported by default.
pub const DEFAULT_KS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub class: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize, class: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end, class }
    }

    /// Number of frames covered.
    pub fn frames(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        let inter = if hi >= lo { hi - lo + 1 } else { 0 };
        let union = self.frames() + other.frames() - inter;
        inter as f64 / union as f64
    }
}

/// Maximal constant-label runs in temporal order.
pub fn timeline_to_segments(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.class == c => s.end = t,
            _ => out.push(Segment::new(t, t, c)),
        }
    }
    out
}

pub fn segments_to_timeline(segments: &[Segment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat(s.class).take(s.frames()))
        .collect()
}

/// Checks that `segments` are ordered and tile `0..frames` exactly.
pub fn validate_partition(segments: &[Segment], frames: usize) -> Result<()> {
    let mut next = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.start > s.end {
            return Err(Error::Segmentation(format!("segment {i} has start {} after end {}", s.start, s.end)));
        }
        if s.start < next {
            return Err(Error::Segmentation(format!("segment {i} overlaps its predecessor at frame {}", s.start)));
        }
        if s.start > next {
            return Err(Error::Segmentation(format!("frames {next}..{} are not covered", s.start)));
        }
        next = s.end + 1;
    }
    if next != frames {
        return Err(Error::Segmentation(format!("segments cover {next} frames, timeline has {frames}")));
    }
    Ok(())
}

/// How predicted segments are paired with ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchRule {
    /// Maximum one-to-one matching over same-class pairs with IoU >= k.
    #[default]
    Optimal,
    /// Each predicted segment, in temporal order, takes the unmatched
    /// same-class truth with highest IoU (earliest on ties) and scores if
    /// that IoU reaches k.
    Greedy,
}

/// Number of true positives under `rule`.
pub fn true_positives(pred: &[Segment], truth: &[Segment], k: f64, rule: MatchRule) -> usize {
    match rule {
        MatchRule::Optimal => optimal_matching(pred, truth, k),
        MatchRule::Greedy => greedy_matching(pred, truth, k),
    }
}

fn optimal_matching(pred: &[Segment], truth: &[Segment], k: f64) -> usize {
    let edges: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| {
            truth
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class == p.class && p.iou(g) >= k)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; truth.len()];
    let mut count = 0;
    for i in 0..pred.len() {
        let mut seen = vec![false; truth.len()];
        if augment(i, &edges, &mut owner, &mut seen) {
            count += 1;
        }
    }
    count
}

fn augment(i: usize, edges: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &edges[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        let free = match owner[j] {
            None => true,
            Some(other) => augment(other, edges, owner, seen),
        };
        if free {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

fn greedy_matching(pred: &[Segment], truth: &[Segment], k: f64) -> usize {
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for p in pred {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in truth.iter().enumerate() {
            if used[j] || g.class != p.class {
                continue;
            }
            let iou = p.iou(g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= k {
                used[j] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// Raw counts, pooled by adding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl MatchCounts {
    pub fn count(pred: &[Segment], truth: &[Segment], k: f64, rule: MatchRule) -> Self {
        Self {
            true_positives: true_positives(pred, truth, k, rule),
            predicted: pred.len(),
            truth: truth.len(),
        }
    }

    pub fn add(&mut self, other: MatchCounts) {
        self.true_positives += other.true_positives;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }

    pub fn score(&self) -> F1Score {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.true_positives, self.predicted);
        let recall = ratio(self.true_positives, self.truth);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Score {
            precision,
            recall,
            f1,
            empty: self.predicted == 0 || self.truth == 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Either side had no segments; all three values are zero.
    pub empty: bool,
}

fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::Contract(format!("overlap threshold {k} is outside (0, 1)")));
    }
    Ok(())
}

/// F1@k with optimal matching.
pub fn f1_at_k(pred: &[Segment], truth: &[Segment], k: f64) -> Result<F1Score> {
    f1_at_k_with(pred, truth, k, MatchRule::Optimal)
}

pub fn f1_at_k_with(pred: &[Segment], truth: &[Segment], k: f64, rule: MatchRule) -> Result<F1Score> {
    check_k(k)?;
    Ok(MatchCounts::count(pred, truth, k, rule).score())
}

/// Which label set a timeline belongs to. Scored separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SubActivity,
    Affordance,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::SubActivity => "sub-activity",
            Task::Affordance => "affordance",
        }
    }
}

/// Accumulates pooled counts for every task and threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct CountTable {
    ks: Vec<f64>,
    rule: MatchRule,
    counts: BTreeMap<Task, Vec<MatchCounts>>,
}

impl CountTable {
    pub fn new(ks: &[f64], rule: MatchRule) -> Result<Self> {
        if ks.is_empty() {
            return Err(Error::Contract("no overlap thresholds given".into()));
        }
        for &k in ks {
            check_k(k)?;
        }
        Ok(Self {
            ks: ks.to_vec(),
            rule,
            counts: BTreeMap::new(),
        })
    }

    pub fn ks(&self) -> &[f64] {
        &self.ks
    }

    /// Adds one entity timeline pair.
    pub fn add_timelines(&mut self, task: Task, pred: &[usize], truth: &[usize]) {
        let p = timeline_to_segments(pred);
        let g = timeline_to_segments(truth);
        self.add_segments(task, &p, &g);
    }

    pub fn add_segments(&mut self, task: Task, pred: &[Segment], truth: &[Segment]) {
        let entry = self
            .counts
            .entry(task)
            .or_insert_with(|| vec![MatchCounts::default(); self.ks.len()]);
        for (slot, &k) in entry.iter_mut().zip(&self.ks) {
            slot.add(MatchCounts::count(pred, truth, k, self.rule));
        }
    }

    pub fn merge(&mut self, other: &CountTable) {
        for (task, counts) in &other.counts {
            let entry = self
                .counts
                .entry(*task)
                .or_insert_with(|| vec![MatchCounts::default(); self.ks.len()]);
            for (a, b) in entry.iter_mut().zip(counts) {
                a.add(*b);
            }
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.counts.keys().copied()
    }

    pub fn counts(&self, task: Task) -> Option<&[MatchCounts]> {
        self.counts.get(&task).map(Vec::as_slice)
    }

    pub fn scores(&self, task: Task) -> Option<Vec<F1Score>> {
        self.counts.get(&task).map(|c| c.iter().map(MatchCounts::score).collect())
    }
}

/// Cross-validation protocol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// One fold per subject.
    #[default]
    LeaveOneSubject,
    /// One fold per unordered pair of subjects.
    LeavePair,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub held_out: Vec<String>,
    /// Indices into the video list.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Builds folds from each video's subject set.
///
/// A video is held out when any of its subjects is held out, and used for
/// training only when none is. `declared` may name subjects with no
/// videos; those are skipped with a warning.
pub fn make_folds(declared: &[String], video_subjects: &[Vec<String>], protocol: Protocol) -> Result<(Vec<Fold>, Vec<String>)> {
    let present: BTreeSet<&str> = video_subjects.iter().flatten().map(String::as_str).collect();
    let mut warnings = Vec::new();
    for s in declared {
        if !present.contains(s.as_str()) {
            warnings.push(format!("subject {s} has no videos; fold skipped"));
        }
    }
    let subjects: Vec<&str> = present.into_iter().collect();
    if subjects.len() < 2 {
        return Err(Error::Contract(format!(
            "cross-validation needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    let groups: Vec<Vec<&str>> = match protocol {
        Protocol::LeaveOneSubject => subjects.iter().map(|s| vec![*s]).collect(),
        Protocol::LeavePair => {
            if subjects.len() < 3 {
                return Err(Error::Contract("leave-pair needs at least 3 subjects so every fold has training data".into()));
            }
            let mut g = Vec::new();
            for i in 0..subjects.len() {
                for j in i + 1..subjects.len() {
                    g.push(vec![subjects[i], subjects[j]]);
                }
            }
            g
        }
    };
    let mut folds = Vec::new();
    for held in groups {
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..video_subjects.len()).partition(|&v| video_subjects[v].iter().any(|s| held.contains(&s.as_str())));
        if train.is_empty() {
            warnings.push(format!("holding out {} leaves no training videos; fold skipped", held.join("+")));
            continue;
        }
        folds.push(Fold {
            index: folds.len(),
            held_out: held.iter().map(|s| s.to_string()).collect(),
            train,
            test,
        });
    }
    Ok((folds, warnings))
}

/// Per-task summary across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    /// `per_fold[f][i]` is the score of fold `f` at `ks[i]`.
    pub per_fold: Vec<Vec<F1Score>>,
    pub mean_f1: Vec<f64>,
    pub std_f1: Vec<f64>,
    pub mean_precision: Vec<f64>,
    pub mean_recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub ks: Vec<f64>,
    pub folds: Vec<Fold>,
    pub tasks: BTreeMap<Task, TaskReport>,
    pub warnings: Vec<String>,
}

impl F1Report {
    /// Aggregates per-fold tables with mean and population std.
    pub fn from_folds(ks: &[f64], folds: Vec<Fold>, tables: &[CountTable], warnings: Vec<String>) -> Self {
        let tasks: BTreeSet<Task> = tables.iter().flat_map(|t| t.tasks()).collect();
        let mut out = BTreeMap::new();
        for task in tasks {
            let per_fold: Vec<Vec<F1Score>> = tables
                .iter()
                .map(|t| {
                    t.scores(task).unwrap_or_else(|| {
                        vec![
                            F1Score {
                                precision: 0.0,
                                recall: 0.0,
                                f1: 0.0,
                                empty: true
                            };
                            ks.len()
                        ]
                    })
                })
                .collect();
            let column = |i: usize, f: fn(&F1Score) -> f64| -> Vec<f64> { per_fold.iter().map(|s| f(&s[i])).collect() };
            let n = ks.len();
            out.insert(
                task,
                TaskReport {
                    mean_f1: (0..n).map(|i| mean(&column(i, |s| s.f1))).collect(),
                    std_f1: (0..n).map(|i| population_std(&column(i, |s| s.f1))).collect(),
                    mean_precision: (0..n).map(|i| mean(&column(i, |s| s.precision))).collect(),
                    mean_recall: (0..n).map(|i| mean(&column(i, |s| s.recall))).collect(),
                    per_fold,
                },
            );
        }
        Self {
            ks: ks.to_vec(),
            folds,
            tasks: out,
            warnings,
        }
    }

    /// Mean F1 at threshold `k` for `task`.
    pub fn mean_f1(&self, task: Task, k: f64) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        self.tasks.get(&task).map(|r| r.mean_f1[i])
    }

    /// One row per task, fold and threshold, followed by mean and std rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "fold", "held_out", "k", "precision", "recall", "f1"])?;
        for (task, rep) in &self.tasks {
            for (f, scores) in rep.per_fold.iter().enumerate() {
                let held = self.folds.get(f).map(|x| x.held_out.join("+")).unwrap_or_default();
                for (k, s) in self.ks.iter().zip(scores) {
                    w.write_record([
                        task.as_str().to_string(),
                        f.to_string(),
                        held.clone(),
                        fmt_k(*k),
                        fmt(s.precision),
                        fmt(s.recall),
                        fmt(s.f1),
                    ])?;
                }
            }
            for (i, k) in self.ks.iter().enumerate() {
                w.write_record([
                    task.as_str().to_string(),
                    "mean".into(),
                    String::new(),
                    fmt_k(*k),
                    fmt(rep.mean_precision[i]),
                    fmt(rep.mean_recall[i]),
                    fmt(rep.mean_f1[i]),
                ])?;
                w.write_record([
                    task.as_str().to_string(),
                    "std".into(),
                    String::new(),
                    fmt_k(*k),
                    String::new(),
                    String::new(),
                    fmt(rep.std_f1[i]),
                ])?;
            }
        }
        finish_csv(w)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_k(k: f64) -> String {
    format!("{k:.2}")
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Evaluation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Evaluation(e.to_string()))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation with divisor `n`.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Runs `evaluate` on every fold (in parallel) and aggregates the results.
///
/// Results are collected in fold order, so the report does not depend on
/// scheduling.
pub fn cross_validate<F>(
    declared: &[String],
    video_subjects: &[Vec<String>],
    protocol: Protocol,
    ks: &[f64],
    evaluate: F,
) -> Result<F1Report>
where
    F: Fn(&Fold) -> Result<CountTable> + Sync,
{
    let (folds, warnings) = make_folds(declared, video_subjects, protocol)?;
    let tables: Vec<CountTable> = folds.par_iter().map(&evaluate).collect::<Result<_>>()?;
    Ok(F1Report::from_folds(ks, folds, &tables, warnings))
}

/// Frame-level disagreement listing for one entity timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct TimelineDiff<'a> {
    pub video: &'a str,
    pub entity: String,
    pub truth: &'a [usize],
    pub pred: &'a [usize],
}

/// CSV with one row per frame: video, entity, frame, truth, prediction and
/// whether they agree.
pub fn timeline_diff_csv(diffs: &[TimelineDiff<'_>], class_names: &dyn Fn(usize) -> String) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["video", "entity", "frame", "truth", "predicted", "correct"])?;
    for d in diffs {
        for (t, (g, p)) in d.truth.iter().zip(d.pred).enumerate() {
            w.write_record([
                d.video.to_string(),
                d.entity.to_string(),
                t.to_string(),
                class_names(*g),
                class_names(*p),
                (g == p).to_string(),
            ])?;
        }
    }
    finish_csv(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Largest matching by trying every assignment.
    pub(crate) fn exhaustive_tp(pred: &[Segment], truth: &[Segment], k: f64) -> usize {
        fn go(i: usize, pred: &[Segment], truth: &[Segment], k: f64, used: &mut Vec<bool>) -> usize {
            if i == pred.len() {
                return 0;
            }
            let mut best = go(i + 1, pred, truth, k, used);
            for j in 0..truth.len() {
                if !used[j] && truth[j].class == pred[i].class && pred[i].iou(&truth[j]) >= k {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, pred, truth, k, used));
                    used[j] = false;
                }
            }
            best
        }
        go(0, pred, truth, k, &mut vec![false; truth.len()])
    }

    fn random_timeline(rng: &mut ChaCha8Rng, frames: usize, max_segments: usize, classes: usize) -> Vec<Segment> {
        let n = rng.gen_range(1..=max_segments.min(frames));
        let mut cuts: Vec<usize> = (1..frames).collect();
        for i in 0..cuts.len() {
            let j = rng.gen_range(i..cuts.len());
            cuts.swap(i, j);
        }
        let mut cuts: Vec<usize> = cuts.into_iter().take(n - 1).collect();
        cuts.sort();
        let mut segs = Vec::new();
        let mut start = 0;
        for &c in cuts.iter().chain(std::iter::once(&frames)) {
            segs.push(Segment::new(start, c - 1, rng.gen_range(0..classes)));
            start = c;
        }
        segs
    }

    #[test]
    fn run_length_cases() {
        assert_eq!(
            timeline_to_segments(&[0, 0, 1]),
            vec![Segment::new(0, 1, 0), Segment::new(2, 2, 1)]
        );
        assert_eq!(timeline_to_segments(&[3]), vec![Segment::new(0, 0, 3)]);
        assert!(timeline_to_segments(&[]).is_empty());
    }

    #[test]
    fn hand_computed_f1_cases() {
        let truth = [Segment::new(0, 9, 0), Segment::new(10, 19, 1)];
        let s = f1_at_k(&truth, &truth, 0.5).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        // One long segment against two equal halves of the same class.
        let truth = [Segment::new(0, 9, 0), Segment::new(10, 19, 0)];
        let pred = [Segment::new(0, 19, 0)];
        assert_eq!(pred[0].iou(&truth[0]), 0.5);
        let s = f1_at_k(&pred, &truth, 0.5).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(exhaustive_tp(&pred, &truth, 0.5), 1);

        let pred = [Segment::new(0, 19, 5)];
        assert_eq!(f1_at_k(&pred, &truth, 0.1).unwrap().f1, 0.0);

        let s = f1_at_k(&[], &truth, 0.1).unwrap();
        assert!(s.empty);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(f1_at_k(&pred, &truth, 0.0).is_err());
        assert!(f1_at_k(&pred, &truth, 1.0).is_err());
    }

    #[test]
    fn greedy_can_fall_short_of_optimal() {
        // The first prediction grabs the truth segment the third one needs.
        let truth = [Segment::new(0, 4, 0), Segment::new(5, 5, 1), Segment::new(6, 25, 0)];
        let pred = [Segment::new(0, 15, 0), Segment::new(16, 16, 2), Segment::new(17, 25, 0)];
        let k = 0.1;
        assert_eq!(true_positives(&pred, &truth, k, MatchRule::Greedy), 1);
        assert_eq!(true_positives(&pred, &truth, k, MatchRule::Optimal), 2);
        assert_eq!(exhaustive_tp(&pred, &truth, k), 2);
    }

    #[test]
    fn partition_validation() {
        let ok = [Segment::new(0, 2, 0), Segment::new(3, 4, 1)];
        assert!(validate_partition(&ok, 5).is_ok());
        assert!(validate_partition(&ok, 6).is_err());
        let gap = [Segment::new(0, 1, 0), Segment::new(3, 4, 1)];
        assert!(matches!(validate_partition(&gap, 5), Err(Error::Segmentation(_))));
        let overlap = [Segment::new(0, 2, 0), Segment::new(2, 4, 1)];
        assert!(matches!(validate_partition(&overlap, 5), Err(Error::Segmentation(_))));
    }

    #[test]
    fn fold_construction() {
        let subjects: Vec<Vec<String>> = ["a", "b", "c", "a"].iter().map(|s| vec![s.to_string()]).collect();
        let (folds, warnings) = make_folds(&[], &subjects, Protocol::LeaveOneSubject).unwrap();
        assert_eq!(folds.len(), 3);
        assert!(warnings.is_empty());
        assert_eq!(folds[0].test, vec![0, 3]);
        assert_eq!(folds[0].train, vec![1, 2]);

        let declared = vec!["a".to_string(), "z".to_string()];
        let (_, warnings) = make_folds(&declared, &subjects, Protocol::LeaveOneSubject).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains('z'));

        let (folds, _) = make_folds(&[], &subjects, Protocol::LeavePair).unwrap();
        assert_eq!(folds.len(), 3);
        assert_eq!(folds[0].held_out, vec!["a", "b"]);

        let one: Vec<Vec<String>> = vec![vec!["a".into()]];
        assert!(make_folds(&[], &one, Protocol::LeaveOneSubject).is_err());
    }

    #[test]
    fn oracle_predictor_scores_one_everywhere() {
        let timeline = vec![0, 0, 1, 1, 1, 2];
        let subjects: Vec<Vec<String>> = vec![vec!["a".into()], vec!["b".into()]];
        let report = cross_validate(&[], &subjects, Protocol::LeaveOneSubject, &DEFAULT_KS, |fold| {
            let mut t = CountTable::new(&DEFAULT_KS, MatchRule::Optimal)?;
            for _ in &fold.test {
                t.add_timelines(Task::SubActivity, &timeline, &timeline);
            }
            Ok(t)
        })
        .unwrap();
        let rep = &report.tasks[&Task::SubActivity];
        assert_eq!(rep.per_fold.len(), 2);
        assert_eq!(rep.mean_f1, vec![1.0; 3]);
        assert_eq!(rep.std_f1, vec![0.0; 3]);
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with("task,fold,held_out,k,precision,recall,f1\n"));
        assert!(csv.contains("sub-activity,mean,,0.10,1.000000,1.000000,1.000000"));
    }

    #[test]
    fn population_std_divides_by_n() {
        assert_eq!(population_std(&[1.0, 3.0]), 1.0);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn diff_csv_lists_frames() {
        let d = [TimelineDiff {
            video: "v",
            entity: "human0".into(),
            truth: &[0, 1],
            pred: &[0, 0],
        }];
        let csv = timeline_diff_csv(&d, &|c| format!("c{c}")).unwrap();
        assert_eq!(
            csv,
            "video,entity,frame,truth,predicted,correct\nv,human0,0,c0,c0,true\nv,human0,1,c1,c0,false\n"
        );
    }

    #[test]
    fn pooled_counts_differ_from_averaged_scores() {
        let mut t = CountTable::new(&[0.5], MatchRule::Optimal).unwrap();
        t.add_timelines(Task::SubActivity, &[0, 0, 0, 0], &[0, 0, 0, 0]);
        t.add_timelines(Task::SubActivity, &[1, 1, 1, 1], &[0, 0, 2, 2]);
        let c = t.counts(Task::SubActivity).unwrap()[0];
        assert_eq!(c, MatchCounts { true_positives: 1, predicted: 2, truth: 3 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn segments_round_trip(labels in prop::collection::vec(0usize..4, 1..60)) {
            let segs = timeline_to_segments(&labels);
            prop_assert_eq!(segments_to_timeline(&segs), labels.clone());
            prop_assert!(validate_partition(&segs, labels.len()).is_ok());
            for w in segs.windows(2) {
                prop_assert!(w[0].class != w[1].class);
            }
        }

        #[test]
        fn matching_properties(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = rng.gen_range(6..40);
            let pred = random_timeline(&mut rng, frames, 6, 3);
            let truth = random_timeline(&mut rng, frames, 6, 3);
            let mut prev = f64::INFINITY;
            for &k in &[0.05, 0.1, 0.25, 0.5, 0.75, 0.9] {
                let tp = true_positives(&pred, &truth, k, MatchRule::Optimal);
                prop_assert_eq!(tp, exhaustive_tp(&pred, &truth, k));
                let a = f1_at_k(&pred, &truth, k).unwrap();
                let b = f1_at_k(&truth, &pred, k).unwrap();
                prop_assert_eq!(a.precision, b.recall);
                prop_assert_eq!(a.recall, b.precision);
                prop_assert!(a.f1 <= prev);
                prev = a.f1;
                prop_assert!(true_positives(&pred, &truth, k, MatchRule::Greedy) <= tp);
                prop_assert_eq!(f1_at_k(&pred, &pred, k).unwrap().f1, 1.0);
            }
        }
    }
}
