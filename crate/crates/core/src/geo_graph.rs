//! Keypoint-level graph convolution with a similarity adjacency.
//!
//! Per frame, each keypoint row `g` is embedded by two affine+ReLU layers,
//! `g~ = relu(W2 relu(W1 g + b1) + b2)`. Pairwise scores
//! `S[i, j] = <theta g~_i, phi g~_j>` are row-normalized with softmax into
//! the adjacency `A`, and the output is `Y = A G~ Wg`, one `J x C2` matrix
//! per frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EntityKind, GeometricContext, CHANNELS};
use crate::numerics::{xavier_uniform, ParamStore, Tape, Tensor2, Var};

/// Topology and feature switches for the keypoint graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeoVariant {
    #[default]
    Full,
    /// Drop all human joint rows.
    NoSkeletons,
    /// Drop all object corner rows.
    NoObjects,
    /// Replace the two-layer embedding with one affine `4 -> C1` map.
    NoEmbedding,
    /// Use the uniform adjacency `1/J` instead of learned similarity.
    NoSimilarity,
}

impl GeoVariant {
    pub fn param_names(self, prefix: &str) -> Vec<String> {
        let mut names = vec!["w1", "b1"];
        if self != GeoVariant::NoEmbedding {
            names.extend(["w2", "b2"]);
        }
        if self != GeoVariant::NoSimilarity {
            names.extend(["theta", "phi"]);
        }
        names.push("wg");
        names.into_iter().map(|n| format!("{prefix}.{n}")).collect()
    }

    /// Applies the row-removal part of the variant.
    pub fn select_rows(self, ctx: &GeometricContext) -> Result<GeometricContext> {
        let out = match self {
            GeoVariant::NoSkeletons => ctx.retain_kind(EntityKind::Object),
            GeoVariant::NoObjects => ctx.retain_kind(EntityKind::Human),
            _ => ctx.clone(),
        };
        if out.joints() == 0 {
            return Err(Error::EmptyGraph(format!("{self:?}")));
        }
        Ok(out)
    }
}

/// Weights of the keypoint graph, with `out x in` weight matrices.
///
/// Under [`GeoVariant::NoEmbedding`] `w1`/`b1` form the single projection
/// and `w2`/`b2` are unused.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGraphParams {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
    pub theta: Tensor2,
    pub phi: Tensor2,
    pub wg: Tensor2,
}

impl GeoGraphParams {
    pub fn zeros(c1: usize, c2: usize) -> Self {
        Self {
            w1: Tensor2::zeros(c1, CHANNELS),
            b1: Tensor2::zeros(1, c1),
            w2: Tensor2::zeros(c1, c1),
            b2: Tensor2::zeros(1, c1),
            theta: Tensor2::zeros(c2, c1),
            phi: Tensor2::zeros(c2, c1),
            wg: Tensor2::zeros(c1, c2),
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(c1: usize, c2: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: xavier_uniform(c1, CHANNELS, rng),
            b1: Tensor2::zeros(1, c1),
            w2: xavier_uniform(c1, c1, rng),
            b2: Tensor2::zeros(1, c1),
            theta: xavier_uniform(c2, c1, rng),
            phi: xavier_uniform(c2, c1, rng),
            wg: xavier_uniform(c1, c2, rng),
        }
    }

    pub fn c1(&self) -> usize {
        self.w1.rows()
    }

    pub fn c2(&self) -> usize {
        self.wg.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (c1, c2) = (self.c1(), self.c2());
        let expect = [
            ("w1", &self.w1, (c1, CHANNELS)),
            ("b1", &self.b1, (1, c1)),
            ("w2", &self.w2, (c1, c1)),
            ("b2", &self.b2, (1, c1)),
            ("theta", &self.theta, (c2, c1)),
            ("phi", &self.phi, (c2, c1)),
            ("wg", &self.wg, (c1, c2)),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::Dimension {
                    op: name_static(name),
                    left: t.shape(),
                    right: shape,
                });
            }
        }
        Ok(())
    }

    /// Registers the tensors needed by `variant` under `prefix.*`.
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str, variant: GeoVariant) -> Result<()> {
        for name in variant.param_names(prefix) {
            let short = name.rsplit('.').next().expect("dotted");
            store.insert(name.clone(), self.field(short).clone())?;
        }
        Ok(())
    }

    fn field(&self, short: &str) -> &Tensor2 {
        match short {
            "w1" => &self.w1,
            "b1" => &self.b1,
            "w2" => &self.w2,
            "b2" => &self.b2,
            "theta" => &self.theta,
            "phi" => &self.phi,
            "wg" => &self.wg,
            _ => unreachable!("unknown geo parameter {short}"),
        }
    }

    fn to_store(&self, variant: GeoVariant) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        self.insert_into(&mut store, "geo", variant)?;
        Ok(store)
    }
}

fn name_static(name: &str) -> &'static str {
    match name {
        "w1" => "geo.w1",
        "b1" => "geo.b1",
        "w2" => "geo.w2",
        "b2" => "geo.b2",
        "theta" => "geo.theta",
        "phi" => "geo.phi",
        _ => "geo.wg",
    }
}

/// `T x J x C2` output of the keypoint graph, stored as `(T*J) x C2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGraphOutput {
    frames: usize,
    joints: usize,
    data: Tensor2,
}

impl GeoGraphOutput {
    pub fn new(frames: usize, joints: usize, data: Tensor2) -> Result<Self> {
        if data.rows() != frames * joints || frames == 0 || joints == 0 {
            return Err(Error::Dimension {
                op: "GeoGraphOutput::new",
                left: data.shape(),
                right: (frames * joints, data.cols()),
            });
        }
        Ok(Self { frames, joints, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    /// `(T, J, C2)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.joints, self.channels())
    }

    pub fn frame(&self, t: usize) -> Tensor2 {
        self.data.rows_range(t * self.joints, self.joints)
    }

    pub fn stacked(&self) -> &Tensor2 {
        &self.data
    }
}

/// Nodes recorded by [`GeoGraph::forward`].
#[derive(Clone, Copy, Debug)]
pub struct GeoForward {
    pub embedded: Var,
    pub adjacency: Var,
    pub output: Var,
    pub frames: usize,
    pub joints: usize,
}

/// The keypoint graph as a taped layer reading weights from a
/// [`ParamStore`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGraph {
    pub prefix: String,
    pub variant: GeoVariant,
}

impl GeoGraph {
    pub fn new(prefix: impl Into<String>, variant: GeoVariant) -> Self {
        Self {
            prefix: prefix.into(),
            variant,
        }
    }

    fn p(&self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        tape.param(store, &format!("{}.{name}", self.prefix))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ctx: &GeometricContext) -> Result<GeoForward> {
        let ctx = self.variant.select_rows(ctx)?;
        let frames = ctx.frames();
        let joints = ctx.joints();
        let x = tape.constant(ctx.stacked().clone());
        let w1 = self.p(tape, store, "w1")?;
        let b1 = self.p(tape, store, "b1")?;
        let embedded = if self.variant == GeoVariant::NoEmbedding {
            tape.affine(x, w1, b1)?
        } else {
            let w2 = self.p(tape, store, "w2")?;
            let b2 = self.p(tape, store, "b2")?;
            let h = tape.affine(x, w1, b1)?;
            let h = tape.relu(h);
            let h = tape.affine(h, w2, b2)?;
            tape.relu(h)
        };
        let adjacency = if self.variant == GeoVariant::NoSimilarity {
            tape.constant(Tensor2::filled(frames * joints, joints, 1.0 / joints as f64))
        } else {
            let theta = self.p(tape, store, "theta")?;
            let phi = self.p(tape, store, "phi")?;
            let q = tape.matmul_t(embedded, theta)?;
            let k = tape.matmul_t(embedded, phi)?;
            let scores = tape.batched_matmul_t(q, k, frames)?;
            tape.row_softmax(scores)
        };
        let wg = self.p(tape, store, "wg")?;
        let mixed = tape.batched_matmul(adjacency, embedded, frames)?;
        let output = tape.matmul(mixed, wg)?;
        Ok(GeoForward {
            embedded,
            adjacency,
            output,
            frames,
            joints,
        })
    }
}

/// Applies the two-layer embedding to every keypoint row of `ctx`,
/// returning the stacked `(T*J) x C1` matrix.
pub fn embed_keypoints(ctx: &GeometricContext, params: &GeoGraphParams) -> Result<Tensor2> {
    params.validate()?;
    let mut tape = Tape::new();
    let store = params.to_store(GeoVariant::Full)?;
    let x = tape.constant(ctx.stacked().clone());
    let w1 = tape.param(&store, "geo.w1")?;
    let b1 = tape.param(&store, "geo.b1")?;
    let w2 = tape.param(&store, "geo.w2")?;
    let b2 = tape.param(&store, "geo.b2")?;
    let h = tape.affine(x, w1, b1)?;
    let h = tape.relu(h);
    let h = tape.affine(h, w2, b2)?;
    let out = tape.relu(h);
    Ok(tape.value(out).clone())
}

/// Row-stochastic adjacency for one frame of embeddings (`J x C1`).
pub fn adjacency(embedded: &Tensor2, params: &GeoGraphParams) -> Result<Tensor2> {
    params.validate()?;
    if embedded.cols() != params.c1() {
        return Err(Error::Dimension {
            op: "adjacency",
            left: embedded.shape(),
            right: params.theta.shape(),
        });
    }
    let q = embedded.matmul_t(&params.theta)?;
    let k = embedded.matmul_t(&params.phi)?;
    Ok(q.matmul_t(&k)?.row_softmax())
}

/// `A G~ Wg` for one frame.
pub fn propagate(adjacency: &Tensor2, embedded: &Tensor2, wg: &Tensor2) -> Result<Tensor2> {
    adjacency.matmul(embedded)?.matmul(wg)
}

/// Full keypoint-graph forward pass for every frame of `ctx`.
pub fn gcn_forward(ctx: &GeometricContext, params: &GeoGraphParams, variant: GeoVariant) -> Result<GeoGraphOutput> {
    let store = params.to_store(variant)?;
    let mut tape = Tape::new();
    let fwd = GeoGraph::new("geo", variant).forward(&mut tape, &store, ctx)?;
    GeoGraphOutput::new(fwd.frames, fwd.joints, tape.value(fwd.output).clone())
}

/// Per-frame adjacency matrices as computed inside [`gcn_forward`].
pub fn frame_adjacencies(ctx: &GeometricContext, params: &GeoGraphParams, variant: GeoVariant) -> Result<Vec<Tensor2>> {
    let store = params.to_store(variant)?;
    let mut tape = Tape::new();
    let fwd = GeoGraph::new("geo", variant).forward(&mut tape, &store, ctx)?;
    let a = tape.value(fwd.adjacency);
    Ok((0..fwd.frames).map(|t| a.rows_range(t * fwd.joints, fwd.joints)).collect())
}
