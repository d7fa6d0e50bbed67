//! Entity-level fusion graph.
//!
//! Every human and object contributes a node built from its visual
//! features; the pooled keypoint-graph output adds one geometry node. Each
//! node then attends over its neighbours with single-head scaled
//! dot-product attention whose keys and values are the neighbour vectors
//! themselves:
//!
//! ```text
//! att(q, {z_i}) = sum_i softmax_i(q . z_i / sqrt(d)) z_i
//! ```
//!
//! and is replaced by `relu(P [self, att] + b)`. A node without neighbours
//! passes through unchanged.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_graph::GeoGraphOutput;
use crate::geometry::EntityKind;
use crate::numerics::{xavier_uniform, ParamStore, Tape, Tensor2, Var};

/// Default hidden size of fused nodes.
pub const DEFAULT_HIDDEN: usize = 128;

/// Default visual feature size.
pub const DEFAULT_VISUAL_DIM: usize = 2048;

/// Per-frame visual features of one entity (`T x D_vis`).
#[derive(Clone, Debug, PartialEq)]
pub struct EntityFeatureSequence {
    pub entity: usize,
    pub kind: EntityKind,
    pub features: Tensor2,
}

/// Which classes of edges exist in the fusion graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionTopology {
    pub human_human: bool,
    pub human_object: bool,
    pub object_object: bool,
    pub geometry_object: bool,
    pub geometry_human: bool,
}

impl Default for FusionTopology {
    fn default() -> Self {
        Self {
            human_human: true,
            human_object: true,
            object_object: true,
            geometry_object: true,
            geometry_human: false,
        }
    }
}

impl FusionTopology {
    pub fn validate(&self) -> Result<()> {
        if !(self.human_human || self.human_object || self.object_object || self.geometry_object || self.geometry_human) {
            return Err(Error::Contract("fusion topology has no edge class enabled".into()));
        }
        Ok(())
    }

    pub fn connects(&self, a: NodeId, b: NodeId) -> bool {
        use NodeId::*;
        match (a, b) {
            _ if a == b => false,
            (Human(_), Human(_)) => self.human_human,
            (Object(_), Object(_)) => self.object_object,
            (Human(_), Object(_)) | (Object(_), Human(_)) => self.human_object,
            (Geometry, Object(_)) | (Object(_), Geometry) => self.geometry_object,
            (Geometry, Human(_)) | (Human(_), Geometry) => self.geometry_human,
            (Geometry, Geometry) => false,
        }
    }

    /// Nodes in canonical order (humans, objects, geometry) with their
    /// neighbour lists in the same order.
    pub fn neighbor_sets(&self, humans: usize, objects: usize) -> Vec<(NodeId, Vec<NodeId>)> {
        let nodes = node_order(humans, objects);
        nodes
            .iter()
            .map(|&n| (n, nodes.iter().copied().filter(|&m| self.connects(n, m)).collect()))
            .collect()
    }
}

/// A node of the fusion graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Human(usize),
    Object(usize),
    Geometry,
}

fn node_order(humans: usize, objects: usize) -> Vec<NodeId> {
    (0..humans)
        .map(NodeId::Human)
        .chain((0..objects).map(NodeId::Object))
        .chain(std::iter::once(NodeId::Geometry))
        .collect()
}

/// Per-frame hidden vectors for every node (`T x D_hid` each).
#[derive(Clone, Debug, PartialEq)]
pub struct FusedNodeSet {
    pub humans: Vec<Tensor2>,
    pub objects: Vec<Tensor2>,
    pub geometry: Tensor2,
}

impl FusedNodeSet {
    pub fn node(&self, id: NodeId) -> &Tensor2 {
        match id {
            NodeId::Human(i) => &self.humans[i],
            NodeId::Object(i) => &self.objects[i],
            NodeId::Geometry => &self.geometry,
        }
    }

    pub fn node_count(&self) -> usize {
        self.humans.len() + self.objects.len() + 1
    }
}

/// Mean over the keypoint rows of each frame: `T x C2`.
pub fn pool_geometry(y: &GeoGraphOutput) -> Tensor2 {
    let (t, j, c) = y.shape();
    let mut out = Tensor2::zeros(t, c);
    let data = y.stacked();
    for f in 0..t {
        for r in 0..j {
            for (o, v) in out.row_mut(f).iter_mut().zip(data.row(f * j + r)) {
                *o += v;
            }
        }
        for o in out.row_mut(f) {
            *o /= j as f64;
        }
    }
    out
}

/// Result of [`attend`].
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub output: Vec<f64>,
    /// Weight per neighbour, in the caller's order.
    pub weights: Vec<f64>,
    /// True when the neighbour set was empty and the output is zero.
    pub no_neighbors: bool,
}

/// Single-head attention of `query` over `neighbors` with keys equal to
/// values.
///
/// Neighbours are reduced in a canonical (lexicographic) order so the
/// result is bitwise independent of the order they are passed in.
pub fn attend(query: &[f64], neighbors: &[&[f64]], d: usize) -> Result<Attention> {
    if neighbors.is_empty() {
        return Ok(Attention {
            output: vec![0.0; query.len()],
            weights: Vec::new(),
            no_neighbors: true,
        });
    }
    if d == 0 || neighbors.iter().any(|z| z.len() != query.len()) {
        return Err(Error::Dimension {
            op: "attend",
            left: (1, query.len()),
            right: (neighbors.len(), neighbors.iter().map(|z| z.len()).max().unwrap_or(0)),
        });
    }
    let mut order: Vec<usize> = (0..neighbors.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(neighbors[a], neighbors[b]));

    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = order
        .iter()
        .map(|&i| query.iter().zip(neighbors[i]).map(|(q, z)| q * z).sum::<f64>() * scale)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();

    let mut output = vec![0.0; query.len()];
    let mut weights = vec![0.0; neighbors.len()];
    for (k, &i) in order.iter().enumerate() {
        let w = exps[k] / total;
        weights[i] = w;
        for (o, z) in output.iter_mut().zip(neighbors[i]) {
            *o += w * z;
        }
    }
    Ok(Attention {
        output,
        weights,
        no_neighbors: false,
    })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Two-layer MLP weights, `out x in` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: xavier_uniform(hidden, input, rng),
            b1: Tensor2::zeros(1, hidden),
            w2: xavier_uniform(hidden, hidden, rng),
            b2: Tensor2::zeros(1, hidden),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor2::zeros(hidden, input),
            b1: Tensor2::zeros(1, hidden),
            w2: Tensor2::zeros(hidden, hidden),
            b2: Tensor2::zeros(1, hidden),
        }
    }

    fn insert_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.w1"), self.w1.clone())?;
        store.insert(format!("{prefix}.b1"), self.b1.clone())?;
        store.insert(format!("{prefix}.w2"), self.w2.clone())?;
        store.insert(format!("{prefix}.b2"), self.b2.clone())
    }
}

/// Weights of the fusion graph: one embedding MLP per node kind and one
/// `D_hid x 2 D_hid` merge projection per attention round.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub human: Mlp,
    pub object: Mlp,
    pub geometry: Mlp,
    pub rounds: Vec<(Tensor2, Tensor2)>,
}

impl FusionParams {
    pub fn init(visual_dim: usize, geo_dim: usize, hidden: usize, rounds: usize, rng: &mut impl Rng) -> Self {
        Self {
            human: Mlp::init(visual_dim, hidden, rng),
            object: Mlp::init(visual_dim, hidden, rng),
            geometry: Mlp::init(geo_dim, hidden, rng),
            rounds: (0..rounds)
                .map(|_| (xavier_uniform(hidden, 2 * hidden, rng), Tensor2::zeros(1, hidden)))
                .collect(),
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        self.human.insert_into(store, &format!("{prefix}.human"))?;
        self.object.insert_into(store, &format!("{prefix}.object"))?;
        self.geometry.insert_into(store, &format!("{prefix}.geometry"))?;
        for (r, (w, b)) in self.rounds.iter().enumerate() {
            store.insert(format!("{prefix}.round{r}.w"), w.clone())?;
            store.insert(format!("{prefix}.round{r}.b"), b.clone())?;
        }
        Ok(())
    }

    fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.insert_into(&mut store, "fusion")?;
        Ok(store)
    }

    pub fn hidden(&self) -> usize {
        self.human.w1.rows()
    }
}

/// Taped node vectors after embedding or fusion.
#[derive(Clone, Debug)]
pub struct FusedVars {
    pub humans: Vec<Var>,
    pub objects: Vec<Var>,
    pub geometry: Var,
    /// Set when no node had any neighbour in some round.
    pub isolated: bool,
}

impl FusedVars {
    pub fn node(&self, id: NodeId) -> Var {
        match id {
            NodeId::Human(i) => self.humans[i],
            NodeId::Object(i) => self.objects[i],
            NodeId::Geometry => self.geometry,
        }
    }

    fn set(&mut self, id: NodeId, v: Var) {
        match id {
            NodeId::Human(i) => self.humans[i] = v,
            NodeId::Object(i) => self.objects[i] = v,
            NodeId::Geometry => self.geometry = v,
        }
    }

    pub fn values(&self, tape: &Tape) -> FusedNodeSet {
        FusedNodeSet {
            humans: self.humans.iter().map(|&v| tape.value(v).clone()).collect(),
            objects: self.objects.iter().map(|&v| tape.value(v).clone()).collect(),
            geometry: tape.value(self.geometry).clone(),
        }
    }
}

/// The fusion graph as a taped layer reading weights under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionGraph {
    pub prefix: String,
    pub topology: FusionTopology,
    pub rounds: usize,
}

impl FusionGraph {
    pub fn new(prefix: impl Into<String>, topology: FusionTopology, rounds: usize) -> Self {
        Self {
            prefix: prefix.into(),
            topology,
            rounds,
        }
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, kind: &str, x: Var) -> Result<Var> {
        let p = |n: &str| format!("{}.{kind}.{n}", self.prefix);
        let w1 = tape.param(store, &p("w1"))?;
        let b1 = tape.param(store, &p("b1"))?;
        let w2 = tape.param(store, &p("w2"))?;
        let b2 = tape.param(store, &p("b2"))?;
        let h = tape.affine(x, w1, b1)?;
        let h = tape.relu(h);
        let h = tape.affine(h, w2, b2)?;
        Ok(tape.relu(h))
    }

    /// Embeds visual features (humans then objects, each `T x D_vis`) and
    /// the pooled geometry (`T x C2`) into `T x D_hid` nodes.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, humans: &[Var], objects: &[Var], geometry: Var) -> Result<FusedVars> {
        let frames = tape.value(geometry).rows();
        for &v in humans.iter().chain(objects) {
            if tape.value(v).rows() != frames {
                return Err(Error::Length {
                    path: "fusion.embed".into(),
                    expected: frames,
                    found: tape.value(v).rows(),
                });
            }
        }
        let humans = humans
            .iter()
            .map(|&x| self.mlp(tape, store, "human", x))
            .collect::<Result<Vec<_>>>()?;
        let objects = objects
            .iter()
            .map(|&x| self.mlp(tape, store, "object", x))
            .collect::<Result<Vec<_>>>()?;
        let geometry = self.mlp(tape, store, "geometry", geometry)?;
        Ok(FusedVars {
            humans,
            objects,
            geometry,
            isolated: false,
        })
    }

    /// Attention of every row of `q` over the matching rows of `neighbors`.
    pub fn attend_rows(tape: &mut Tape, q: Var, neighbors: &[Var]) -> Result<Var> {
        let d = tape.value(q).cols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut scores = Vec::with_capacity(neighbors.len());
        for &z in neighbors {
            let s = tape.row_dot(q, z)?;
            scores.push(tape.scale(s, scale));
        }
        let scores = tape.concat_cols(&scores)?;
        let weights = tape.row_softmax(scores);
        let mut out: Option<Var> = None;
        for (i, &z) in neighbors.iter().enumerate() {
            let w = tape.slice_cols(weights, i, 1)?;
            let term = tape.mul_col(z, w)?;
            out = Some(match out {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        out.ok_or_else(|| Error::Contract("attention over an empty neighbour set".into()))
    }

    /// One attention round using the merge projection of `round`.
    pub fn fuse_round(&self, tape: &mut Tape, store: &ParamStore, nodes: &FusedVars, round: usize) -> Result<FusedVars> {
        self.topology.validate()?;
        let w = tape.param(store, &format!("{}.round{round}.w", self.prefix))?;
        let b = tape.param(store, &format!("{}.round{round}.b", self.prefix))?;
        let mut out = nodes.clone();
        let mut any_edge = false;
        for (id, neigh) in self.topology.neighbor_sets(nodes.humans.len(), nodes.objects.len()) {
            if neigh.is_empty() {
                continue;
            }
            any_edge = true;
            let q = nodes.node(id);
            let zs: Vec<Var> = neigh.iter().map(|&n| nodes.node(n)).collect();
            let att = Self::attend_rows(tape, q, &zs)?;
            let cat = tape.concat_cols(&[q, att])?;
            let merged = tape.affine(cat, w, b)?;
            out.set(id, tape.relu(merged));
        }
        out.isolated = nodes.isolated || !any_edge;
        Ok(out)
    }

    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, nodes: &FusedVars) -> Result<FusedVars> {
        let mut cur = nodes.clone();
        for r in 0..self.rounds {
            cur = self.fuse_round(tape, store, &cur, r)?;
        }
        Ok(cur)
    }
}

/// Embeds every entity and the pooled geometry into hidden nodes.
pub fn embed_entities(visual: &[EntityFeatureSequence], geometry: &Tensor2, params: &FusionParams) -> Result<FusedNodeSet> {
    let store = params.to_store()?;
    let mut tape = Tape::new();
    let g = tape.constant(geometry.clone());
    let mut humans = Vec::new();
    let mut objects = Vec::new();
    let mut sorted: Vec<&EntityFeatureSequence> = visual.iter().collect();
    sorted.sort_by_key(|e| (e.kind, e.entity));
    for e in sorted {
        let v = tape.constant(e.features.clone());
        match e.kind {
            EntityKind::Human => humans.push(v),
            EntityKind::Object => objects.push(v),
        }
    }
    let layer = FusionGraph::new("fusion", FusionTopology::default(), params.rounds.len());
    Ok(layer.embed(&mut tape, &store, &humans, &objects, g)?.values(&tape))
}

/// Outcome of [`fuse`].
#[derive(Clone, Debug, PartialEq)]
pub struct FuseOutcome {
    pub nodes: FusedNodeSet,
    /// No node had a neighbour; everything passed through unchanged.
    pub isolated: bool,
}

/// One round of attention fusion with the round-0 merge projection.
pub fn fuse(nodes: &FusedNodeSet, topology: FusionTopology, params: &FusionParams) -> Result<FuseOutcome> {
    topology.validate()?;
    let store = params.to_store()?;
    let mut tape = Tape::new();
    let vars = FusedVars {
        humans: nodes.humans.iter().map(|t| tape.constant(t.clone())).collect(),
        objects: nodes.objects.iter().map(|t| tape.constant(t.clone())).collect(),
        geometry: tape.constant(nodes.geometry.clone()),
        isolated: false,
    };
    let layer = FusionGraph::new("fusion", topology, 1);
    let out = layer.fuse_round(&mut tape, &store, &vars, 0)?;
    Ok(FuseOutcome {
        isolated: out.isolated,
        nodes: out.values(&tape),
    })
}
