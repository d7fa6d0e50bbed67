//! Exit-gate checks. Each test prints one `PASS`/`FAIL` line with the
//! measured quantity next to its threshold.
//!
//! The learnability checks train four cross-validated models and take
//! several minutes; run with `--release` or the default test profile of
//! this workspace (which is optimized).

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hoigraph::commands::{cmd_eval, cmd_gradcheck, cmd_train, GradcheckHooks};
use hoigraph::config::{DataSource, RunConfig};
use hoigraph::data_io::{BenchmarkConfig, Dataset};
use hoigraph::experiment::{cross_validate_model, EvalConfig, EvalOutcome, TrainConfig};
use hoigraph::fusion_graph::attend;
use hoigraph::geo_graph::{frame_adjacencies, gcn_forward, GeoGraphParams, GeoVariant};
use hoigraph::geometry::{EntityKind, GeometricContext, KeypointId, CHANNELS};
use hoigraph::model::{ModelConfig, Variant};
use hoigraph::numerics::{rng_for, Tensor2};
use hoigraph::segeval::{f1_at_k, Segment, Task};
use rand::Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn layout(humans: usize, joints: usize, objects: usize) -> Vec<KeypointId> {
    let mut out = Vec::new();
    for h in 0..humans {
        for k in 0..joints {
            out.push(KeypointId {
                kind: EntityKind::Human,
                entity: h,
                keypoint: k,
            });
        }
    }
    for f in 0..objects {
        for u in 0..2 {
            out.push(KeypointId {
                kind: EntityKind::Object,
                entity: f,
                keypoint: u,
            });
        }
    }
    out
}

fn random_context(rng: &mut impl Rng, frames: usize, humans: usize, joints: usize, objects: usize) -> GeometricContext {
    let l = layout(humans, joints, objects);
    let data = Tensor2::from_fn(frames * l.len(), CHANNELS, |_, c| {
        if c < 2 {
            rng.gen_range(0.0..1.0)
        } else {
            rng.gen_range(-0.1..0.1)
        }
    });
    GeometricContext::from_stacked(frames, l, data).unwrap()
}

#[test]
fn c1_gradient_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    cfg.gradcheck.frames = 6;
    let start = Instant::now();
    let res = cmd_gradcheck(&cfg, GradcheckHooks::default()).unwrap();
    let took = start.elapsed();
    let keypoints = cfg.gradcheck.keypoints();
    let groups = res.report.by_group();
    let pass = res.report.passed && !res.report.vacuous && keypoints == 10 && took < Duration::from_secs(60);
    report(
        1,
        "gradient check",
        pass,
        &format!(
            "{} groups, worst rel err {:.2e} (tol 1e-3), T=6, J={keypoints}, {:.1}s (limit 60s)",
            groups.len(),
            res.report.worst(),
            took.as_secs_f64()
        ),
    );
    assert!(pass, "{groups:?}");
}

#[test]
fn c2_adjacency_rows_are_stochastic() {
    let mut rng = rng_for(2, "acceptance:adjacency");
    let mut frames = 0;
    let mut worst_sum: f64 = 0.0;
    let mut uniform = true;
    while frames < 1000 {
        let t = rng.gen_range(1..=4);
        let humans = rng.gen_range(1..=2);
        let joints = rng.gen_range(1..=8);
        let objects = rng.gen_range(0..=3);
        let ctx = random_context(&mut rng, t, humans, joints, objects);
        let params = GeoGraphParams::init(rng.gen_range(2..=8), rng.gen_range(2..=8), &mut rng);
        for a in frame_adjacencies(&ctx, &params, GeoVariant::Full).unwrap() {
            for r in 0..a.rows() {
                worst_sum = worst_sum.max((a.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let j = ctx.joints();
        for a in frame_adjacencies(&ctx, &params, GeoVariant::NoSimilarity).unwrap() {
            uniform &= a.data().iter().all(|&x| x == 1.0 / j as f64);
        }
        frames += t;
    }
    let pass = worst_sum <= 1e-9 && uniform;
    report(
        2,
        "adjacency stochasticity",
        pass,
        &format!("{frames} frames, max |row sum - 1| = {worst_sum:.1e} (tol 1e-9), no-similarity uniform: {uniform}"),
    );
    assert!(pass);
}

#[test]
fn c3_geometric_output_shape() {
    let mut rng = rng_for(3, "acceptance:shape");
    let frames = 5;
    let ctx = random_context(&mut rng, frames, 2, 15, 4);
    let params = GeoGraphParams::init(64, 128, &mut rng);
    let y = gcn_forward(&ctx, &params, GeoVariant::Full).unwrap();
    let pass = y.shape() == (frames, 38, 128);
    report(3, "shape contract", pass, &format!("output {:?}, expected ({frames}, 38, 128)", y.shape()));
    assert!(pass);
}

/// Softmax-weighted sum written out directly.
fn direct_attention(q: &[f64], zs: &[Vec<f64>], d: usize) -> Vec<f64> {
    let s: Vec<f64> = zs.iter().map(|z| q.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    (0..q.len()).map(|c| zs.iter().zip(&e).map(|(z, w)| w / total * z[c]).sum()).collect()
}

#[test]
fn c4_attention_contract() {
    let mut rng = rng_for(4, "acceptance:attention");
    let mut worst_direct: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..1000 {
        let d = rng.gen_range(1..=16);
        let n = rng.gen_range(1..=6);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let out = attend(&q, &refs, d).unwrap().output;

        let single = attend(&q, &refs[..1], d).unwrap().output;
        if single.iter().zip(&zs[0]).any(|(a, b)| (a - b).abs() > 1e-12) {
            failures.push(format!("case {case}: singleton"));
        }
        for c in 0..d {
            let lo = zs.iter().map(|z| z[c]).fold(f64::INFINITY, f64::min);
            let hi = zs.iter().map(|z| z[c]).fold(f64::NEG_INFINITY, f64::max);
            if out[c] < lo - 1e-12 || out[c] > hi + 1e-12 {
                failures.push(format!("case {case}: outside hull"));
            }
        }
        let mut shuffled = refs.clone();
        shuffled.reverse();
        shuffled.rotate_left(rng.gen_range(0..n));
        if attend(&q, &shuffled, d).unwrap().output != out {
            failures.push(format!("case {case}: order dependent"));
        }
        let direct = direct_attention(&q, &zs, d);
        worst_direct = out.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(worst_direct, f64::max);
    }
    let pass = failures.is_empty() && worst_direct <= 1e-12;
    report(
        4,
        "attention contract",
        pass,
        &format!("1000 instances, {} property failures, max |attend - direct| = {worst_direct:.1e} (tol 1e-12)", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

fn random_partition(rng: &mut impl Rng, frames: usize, max_segments: usize, classes: usize) -> Vec<Segment> {
    let n = rng.gen_range(1..=max_segments.min(frames));
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < n - 1 {
        let c = rng.gen_range(1..frames);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut out = Vec::new();
    let mut start = 0;
    for end in cuts.into_iter().chain(std::iter::once(frames)) {
        out.push(Segment::new(start, end - 1, rng.gen_range(0..classes)));
        start = end;
    }
    out
}

fn overlap(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end.min(b.end) + 1).saturating_sub(a.start.max(b.start));
    let union = (a.end - a.start + 1) + (b.end - b.start + 1) - inter;
    inter as f64 / union as f64
}

/// Largest one-to-one matching of same-class pairs with overlap >= k, by
/// trying every assignment.
fn brute_force_matches(pred: &[Segment], truth: &[Segment], k: f64, i: usize, used: &mut [bool]) -> usize {
    if i == pred.len() {
        return 0;
    }
    let mut best = brute_force_matches(pred, truth, k, i + 1, used);
    for j in 0..truth.len() {
        if !used[j] && pred[i].class == truth[j].class && overlap(&pred[i], &truth[j]) >= k {
            used[j] = true;
            best = best.max(1 + brute_force_matches(pred, truth, k, i + 1, used));
            used[j] = false;
        }
    }
    best
}

#[test]
fn c5_metric_matches_exhaustive_matching() {
    let mut rng = rng_for(5, "acceptance:metric");
    let ks = [0.1, 0.25, 0.5, 0.75];
    let mut cases = 0;
    let mut mismatches = 0;
    let mut identity_failures = 0;
    let mut monotone_failures = 0;
    while cases < 10_000 {
        let frames = rng.gen_range(1..=40);
        let classes = rng.gen_range(1..=3);
        let truth = random_partition(&mut rng, frames, 6, classes);
        let pred = random_partition(&mut rng, frames, 6, classes);
        let mut prev = f64::INFINITY;
        for &k in &ks {
            let got = f1_at_k(&pred, &truth, k).unwrap().f1;
            let tp = brute_force_matches(&pred, &truth, k, 0, &mut vec![false; truth.len()]);
            let want = 2.0 * tp as f64 / (pred.len() + truth.len()) as f64;
            if (got - want).abs() > 1e-12 {
                mismatches += 1;
            }
            if got > prev + 1e-15 {
                monotone_failures += 1;
            }
            prev = got;
            if f1_at_k(&truth, &truth, k).unwrap().f1 != 1.0 {
                identity_failures += 1;
            }
        }
        cases += 1;
    }
    let pass = mismatches == 0 && identity_failures == 0 && monotone_failures == 0;
    report(
        5,
        "metric oracle equivalence",
        pass,
        &format!("{cases} cases x {} thresholds: {mismatches} mismatches, {identity_failures} f1(x,x)!=1, {monotone_failures} increases in k", ks.len()),
    );
    assert!(pass);
}

/// Settings of the reference synthetic benchmark run.
fn benchmark_settings() -> (Dataset, TrainConfig, EvalConfig, ModelConfig, u64) {
    let seed = 7;
    let dataset = Dataset::synthetic(&BenchmarkConfig {
        seed,
        ..BenchmarkConfig::default()
    })
    .unwrap();
    let mut train = TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    };
    train.adam.lr = 3e-3;
    let model = ModelConfig {
        c1: 16,
        c2: 32,
        hidden: 32,
        state: 32,
        ..ModelConfig::default()
    };
    (dataset, train, EvalConfig::default(), model, seed)
}

struct Benchmark {
    full: EvalOutcome,
    full_time: Duration,
    ablations: Vec<(Variant, f64)>,
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let (dataset, train, eval, model, seed) = benchmark_settings();
        let start = Instant::now();
        let full = cross_validate_model(&dataset, &model, &train, &eval, seed).unwrap();
        let full_time = start.elapsed();
        let ablations = [Variant::NoSkeletons, Variant::NoObjects, Variant::NoSimilarity]
            .into_iter()
            .map(|variant| {
                let cfg = ModelConfig { variant, ..model.clone() };
                let o = cross_validate_model(&dataset, &cfg, &train, &eval, seed).unwrap();
                (variant, o.joined_f1(Task::SubActivity, 0.10).unwrap())
            })
            .collect();
        Benchmark {
            full,
            full_time,
            ablations,
        }
    })
}

#[test]
fn c6_synthetic_learnability_and_ordering() {
    let (dataset, ..) = benchmark_settings();
    let b = benchmark();
    let f1 = b.full.joined_f1(Task::SubActivity, 0.10).unwrap();
    let folds: Vec<String> = b.full.joined.tasks[&Task::SubActivity]
        .per_fold
        .iter()
        .map(|f| format!("{:.3}", f[0].f1))
        .collect();
    let shape_ok = dataset.subjects().len() == 4
        && dataset.videos.len() == 24
        && dataset.videos.iter().all(|v| v.humans() == 2 && v.objects() == 2)
        && dataset.vocab.sub_activity.len() == 5;
    let learnable = f1 >= 0.85 && b.full_time <= Duration::from_secs(30 * 60);
    let ordering: Vec<String> = b
        .ablations
        .iter()
        .map(|(v, a)| format!("{} {a:.3}{}", v.name(), if f1 >= *a { "" } else { " (beats full)" }))
        .collect();
    let ordered = b.ablations.iter().all(|(_, a)| f1 >= *a);
    let pass = shape_ok && learnable && ordered;
    report(
        6,
        "synthetic learnability",
        pass,
        &format!(
            "full F1@10 {f1:.3} (>= 0.85) folds [{}] in {:.0}s (limit 1800s); {}",
            folds.join(", "),
            b.full_time.as_secs_f64(),
            ordering.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn c7_known_segmentation_helps() {
    let b = benchmark();
    let joined = b.full.joined.mean_f1(Task::SubActivity, 0.5).unwrap();
    let given = b.full.given.mean_f1(Task::SubActivity, 0.5).unwrap();
    let pass = given > joined;
    report(7, "label-given mode", pass, &format!("given F1@50 {given:.3} vs joined F1@50 {joined:.3}"));
    assert!(pass);
}

#[test]
fn c8_train_and_eval_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut cfg = RunConfig {
            seed: 21,
            out: dir.path().join(name).join("train"),
            data: DataSource::Synth(BenchmarkConfig {
                subjects: 2,
                videos_per_subject: 2,
                frames: 30,
                feature_dim: 16,
                ..BenchmarkConfig::default()
            }),
            model: ModelConfig {
                c1: 8,
                c2: 8,
                hidden: 8,
                state: 8,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        cfg.train.epochs = 3;
        let t = cmd_train(&cfg).unwrap();
        cfg.out = dir.path().join(name).join("eval");
        let e = cmd_eval(&cfg, Some(&t.checkpoint)).unwrap();
        (t.manifest.digest, e.manifest.digest)
    };
    let a = run("a");
    let b = run("b");
    let pass = a == b;
    report(8, "determinism", pass, &format!("train {} / eval {} vs {} / {}", &a.0[..12], &a.1[..12], &b.0[..12], &b.1[..12]));
    assert!(pass);
}
