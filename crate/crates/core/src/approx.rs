//! Feature approximation for missing frames and words.
//!
//! Three pieces work together here:
//!
//! * [`PrototypeBank`] re-embeds every present element with a shared set of
//!   learnable prototypes acting as cross-attention queries:
//!   `x + FFN(x + MCA(P, x))`.
//! * Completion planning picks, for each missing slot, a semantically
//!   relevant anchor from the other modality and its Jaccard-ranked K0
//!   reciprocal neighbours (see [`crate::similarity`]).
//! * [`AffinityGraph`] mixes `[anchor, neighbours…]` with the row-normalised
//!   `exp(cos)` affinity matrix; row 0 is the approximated feature, rows
//!   `1..=K0` are the per-neighbour variants kept in the completion memory.
//!
//! Forward and backward passes are written by hand so the model can train the
//! bank and the towers through completed slots.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::dataset::{FeatureSequence, Modality, PairedSample};
use crate::ops;
use crate::similarity::{self, NodeId, Pool, SimilarityError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApproxError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("affinity graph needs non-zero node vectors")]
    ZeroVector,
    #[error("affinity graph needs at least one neighbour")]
    NoNeighbors,
    #[error("no anchor available: every {0:?} element is missing")]
    NoAnchor(Modality),
    #[error("refiner changed memory shape: {0}")]
    RefinerShape(String),
    #[error("invalid prototype bank: {0}")]
    InvalidBank(String),
    #[error("invalid completion parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

// ---------------------------------------------------------------------------
// Prototype cross-attention
// ---------------------------------------------------------------------------

pub const BANK_PARAM_NAMES: [&str; 9] = ["prototypes", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"];

/// Shared prototypes `P` (N_p × d) with multi-head cross-attention and a
/// two-layer tanh feed-forward block. Row-vector convention: `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub heads: usize,
    pub prototypes: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl PrototypeBank {
    /// Uniform `±1/√fan_in` initialisation.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        num_prototypes: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        let bank = Self {
            heads,
            prototypes: ops::uniform_init(num_prototypes, dim, dim, rng),
            wq: ops::uniform_init(dim, dim, dim, rng),
            wk: ops::uniform_init(dim, dim, dim, rng),
            wv: ops::uniform_init(dim, dim, dim, rng),
            wo: ops::uniform_init(dim, dim, dim, rng),
            w1: ops::uniform_init(dim, hidden, dim, rng),
            b1: ops::uniform_init(1, hidden, dim, rng),
            w2: ops::uniform_init(hidden, dim, hidden, rng),
            b2: ops::uniform_init(1, dim, hidden, rng),
        };
        bank.validate()?;
        Ok(bank)
    }

    /// A bank whose attention and FFN outputs are zero, so reconstruction is
    /// the identity. The remaining weights are random.
    pub fn identity<R: Rng + ?Sized>(
        dim: usize,
        num_prototypes: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        let mut bank = Self::random(dim, num_prototypes, heads, hidden, rng)?;
        bank.wo.fill(0.0);
        bank.w2.fill(0.0);
        bank.b2.fill(0.0);
        Ok(bank)
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn validate(&self) -> Result<(), ApproxError> {
        let d = self.wq.nrows();
        let f = self.w1.ncols();
        let bad = |m: String| Err(ApproxError::InvalidBank(m));
        if d == 0 || f == 0 || self.prototypes.nrows() == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return bad(format!("dimension {d} is not divisible by {} heads", self.heads));
        }
        let expect = [
            (self.prototypes.ncols(), d, "prototypes columns"),
            (self.wq.ncols(), d, "wq columns"),
        ];
        for (got, want, what) in expect {
            if got != want {
                return bad(format!("{what}: expected {want}, got {got}"));
            }
        }
        let shapes = [
            (&self.wk, (d, d), "wk"),
            (&self.wv, (d, d), "wv"),
            (&self.wo, (d, d), "wo"),
            (&self.w1, (d, f), "w1"),
            (&self.b1, (1, f), "b1"),
            (&self.w2, (f, d), "w2"),
            (&self.b2, (1, d), "b2"),
        ];
        for (m, want, what) in shapes {
            if m.dim() != want {
                return bad(format!("{what}: expected {want:?}, got {:?}", m.dim()));
            }
        }
        if self.params().iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(ApproxError::NonFinite("prototype bank parameters"));
        }
        Ok(())
    }

    pub fn params(&self) -> [&Array2<f64>; 9] {
        [
            &self.prototypes, &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2,
            &self.b2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Array2<f64>; 9] {
        [
            &mut self.prototypes,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Array2<f64>| Array2::zeros(m.raw_dim());
        Self {
            heads: self.heads,
            prototypes: z(&self.prototypes),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
        }
    }

    /// Forward pass over the rows of `x` (one row per present element).
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, BankCache), ApproxError> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(ApproxError::DimMismatch { expected: d, got: x.ncols() });
        }
        let n = x.nrows();
        let np = self.num_prototypes();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.prototypes.dot(&self.wq);
        let k = x.dot(&self.wk);
        let v = x.dot(&self.wv);
        let mut attn = Vec::with_capacity(self.heads);
        let mut o = Array2::zeros((np, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in a.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|z| (z - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|z| z / sum);
            }
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let z = o.dot(&self.wo);

        // Per-element pooling weights over prototypes.
        let mut r = Array2::<f64>::zeros((np, n));
        for a in &attn {
            r += a;
        }
        r /= self.heads as f64;
        let col_sums = r.sum_axis(Axis(0));
        let beta = &r / &col_sums.view().insert_axis(Axis(0));
        let m = beta.t().dot(&z);

        let u = x + &m;
        let pre = u.dot(&self.w1) + &self.b1;
        let hidden = pre.mapv(f64::tanh);
        let y = x + &(hidden.dot(&self.w2) + &self.b2);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ApproxError::NonFinite("prototype reconstruction"));
        }
        let cache = BankCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            o,
            z,
            col_sums: col_sums.to_vec(),
            beta,
            u,
            hidden,
        };
        Ok((y, cache))
    }

    /// Backward pass: accumulates parameter gradients into `grad` and returns
    /// the gradient with respect to the inputs.
    pub fn backward(&self, cache: &BankCache, dy: &Array2<f64>, grad: &mut PrototypeBank) -> Array2<f64> {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let hcount = self.heads as f64;

        let mut dx = dy.clone();
        // FFN
        grad.w2 += &cache.hidden.t().dot(dy);
        grad.b2 += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dhidden = dy.dot(&self.w2.t());
        let dpre = &dhidden * &cache.hidden.mapv(|h| 1.0 - h * h);
        grad.w1 += &cache.u.t().dot(&dpre);
        grad.b1 += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        let du = dpre.dot(&self.w1.t());
        dx += &du;

        // Broadcast back: m = βᵀ z
        let dm = &du;
        let dz = cache.beta.dot(dm);
        let dbeta = cache.z.dot(&dm.t());
        let weighted = (&cache.beta * &dbeta).sum_axis(Axis(0));
        let mut dr = dbeta;
        for ((_, i), v) in dr.indexed_iter_mut() {
            *v = (*v - weighted[i]) / cache.col_sums[i];
        }

        // Output projection
        grad.wo += &cache.o.t().dot(&dz);
        let do_ = dz.dot(&self.wo.t());

        let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(cache.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
        for (h, a) in cache.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let do_h = do_.slice(cols);
            let mut da = do_h.dot(&cache.v.slice(cols).t());
            da.scaled_add(1.0 / hcount, &dr);
            dv.slice_mut(cols).assign(&a.t().dot(&do_h));
            let row_dot = (a * &da).sum_axis(Axis(1));
            let mut ds = da;
            for ((p, i), v) in ds.indexed_iter_mut() {
                *v = a[[p, i]] * (*v - row_dot[p]) * scale;
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        grad.wq += &self.prototypes.t().dot(&dq);
        grad.prototypes += &dq.dot(&self.wq.t());
        grad.wk += &cache.x.t().dot(&dk);
        grad.wv += &cache.x.t().dot(&dv);
        dx += &dk.dot(&self.wk.t());
        dx += &dv.dot(&self.wv.t());
        dx
    }
}

/// Intermediate values of one [`PrototypeBank::forward`] call.
#[derive(Debug, Clone)]
pub struct BankCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    z: Array2<f64>,
    col_sums: Vec<f64>,
    beta: Array2<f64>,
    u: Array2<f64>,
    hidden: Array2<f64>,
}

pub(crate) fn rows_to_matrix(rows: &[&[f64]], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    m
}

/// Re-embed every present element of `seq` through the bank; missing slots
/// are left untouched.
pub fn reconstruct_with_prototypes(
    seq: &FeatureSequence,
    bank: &PrototypeBank,
) -> Result<FeatureSequence, ApproxError> {
    bank.validate()?;
    if seq.dim() != bank.dim() {
        return Err(ApproxError::DimMismatch { expected: bank.dim(), got: seq.dim() });
    }
    let (idx, rows): (Vec<usize>, Vec<&[f64]>) = seq.present().unzip();
    if rows.is_empty() {
        return Ok(seq.clone());
    }
    let (y, _) = bank.forward(&rows_to_matrix(&rows, seq.dim()))?;
    let mut out = seq.clone();
    for (r, &i) in idx.iter().enumerate() {
        out.replace(i, y.row(r).to_vec());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Affinity graph
// ---------------------------------------------------------------------------

/// Nodes `[anchor, n_1, …, n_K0]`, `M1[i][j] = exp(cos(h_i, h_j))` and its
/// random-walk normalisation `Mv = D⁻¹ M1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub nodes: Vec<Vec<f64>>,
    pub m1: Array2<f64>,
    pub mv: Array2<f64>,
}

pub fn build_affinity(anchor: &[f64], neighbors: &[&[f64]]) -> Result<AffinityGraph, ApproxError> {
    if neighbors.is_empty() {
        return Err(ApproxError::NoNeighbors);
    }
    let mut nodes = Vec::with_capacity(neighbors.len() + 1);
    nodes.push(anchor.to_vec());
    nodes.extend(neighbors.iter().map(|n| n.to_vec()));
    let size = nodes.len();
    let mut m1 = Array2::zeros((size, size));
    for i in 0..size {
        for j in i..size {
            let c = similarity::cosine(&nodes[i], &nodes[j]).map_err(|e| match e {
                SimilarityError::ZeroVector => ApproxError::ZeroVector,
                SimilarityError::DimMismatch(a, b) => ApproxError::DimMismatch { expected: a, got: b },
                other => ApproxError::Similarity(other),
            })?;
            let e = c.exp();
            m1[[i, j]] = e;
            m1[[j, i]] = e;
        }
    }
    let mut mv = m1.clone();
    for mut row in mv.rows_mut() {
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    Ok(AffinityGraph { nodes, m1, mv })
}

impl AffinityGraph {
    /// Row `i` of `Mv · H`.
    pub fn propagated(&self, i: usize) -> Vec<f64> {
        let dim = self.nodes[0].len();
        let mut out = vec![0.0; dim];
        for (j, node) in self.nodes.iter().enumerate() {
            ops::axpy(&mut out, self.mv[[i, j]], node);
        }
        out
    }

    /// Per-neighbour variants: the propagated rows of the neighbours.
    pub fn variants(&self) -> Vec<Vec<f64>> {
        (1..self.nodes.len()).map(|i| self.propagated(i)).collect()
    }
}

/// The anchor's propagated feature: row 0 of `Mv · [h_1 … h_{K0+1}]`.
pub fn approximate_feature(graph: &AffinityGraph) -> Vec<f64> {
    graph.propagated(0)
}

/// Gradient of `approximate_feature` with respect to every node, given the
/// upstream gradient of the approximated vector. Row 0 of `Mv` is a softmax
/// of `cos(h_0, h_j)`, so the chain runs through that softmax and the
/// cosines; the constant self-similarity `cos(h_0, h_0)` contributes nothing.
pub fn approximate_backward(graph: &AffinityGraph, upstream: &[f64]) -> Vec<Vec<f64>> {
    let w: Vec<f64> = graph.mv.row(0).to_vec();
    let mut grads: Vec<Vec<f64>> = w.iter().map(|&wj| ops::scaled(upstream, wj)).collect();
    let dw: Vec<f64> = graph.nodes.iter().map(|h| ops::dot(h, upstream)).collect();
    let mean_dw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
    for j in 1..graph.nodes.len() {
        let dc = w[j] * (dw[j] - mean_dw);
        let (ga, gb) = ops::cosine_backward(&graph.nodes[0], &graph.nodes[j]);
        ops::axpy(&mut grads[0], dc, &ga);
        ops::axpy(&mut grads[j], dc, &gb);
    }
    grads
}

// ---------------------------------------------------------------------------
// Completion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionParams {
    pub k: usize,
    pub k0: usize,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self { k: 5, k0: 3 }
    }
}

impl CompletionParams {
    pub fn validate(&self) -> Result<(), ApproxError> {
        if self.k0 == 0 || self.k0 > self.k {
            return Err(ApproxError::InvalidParams(format!(
                "need 1 <= k0 <= k, got k={} k0={}",
                self.k, self.k0
            )));
        }
        Ok(())
    }
}

/// Discrete choices for one missing slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPlan {
    pub slot: NodeId,
    /// Semantically relevant element of the other modality.
    pub anchor: NodeId,
    /// Present elements of the slot's own modality, cosine-ordered.
    pub neighbors: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompletionPlan {
    pub video: Vec<SlotPlan>,
    pub text: Vec<SlotPlan>,
}

impl CompletionPlan {
    pub fn is_empty(&self) -> bool {
        self.video.is_empty() && self.text.is_empty()
    }

    pub fn slots(&self) -> impl Iterator<Item = &SlotPlan> {
        self.video.iter().chain(&self.text)
    }
}

/// Reference point for a missing slot: the midpoint of its immediate present
/// neighbours, the single present neighbour, or the sequence mean.
fn slot_reference(seq: &FeatureSequence, p: usize) -> Vec<f64> {
    let left = p.checked_sub(1).and_then(|i| seq.get(i));
    let right = seq.get(p + 1);
    match (left, right) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect(),
        (Some(a), None) | (None, Some(a)) => a.to_vec(),
        (None, None) => ops::mean(seq.present().map(|(_, v)| v), seq.dim()),
    }
}

fn plan_modality(
    own: &FeatureSequence,
    other: &FeatureSequence,
    params: CompletionParams,
) -> Result<Vec<SlotPlan>, ApproxError> {
    let missing = own.missing_indices();
    if missing.is_empty() {
        return Ok(Vec::new());
    }
    let own_pool = Pool::from_sequence(own);
    let other_pool = Pool::from_sequence(other);
    if other_pool.is_empty() {
        return Err(ApproxError::NoAnchor(other.modality()));
    }
    if own_pool.is_empty() {
        return Err(ApproxError::Similarity(SimilarityError::EmptyPool));
    }
    let mut plans = Vec::with_capacity(missing.len());
    for p in missing {
        let slot = NodeId::new(own.modality(), p);
        let reference = slot_reference(own, p);
        let best = similarity::top_k(slot, &reference, &other_pool, 1)?;
        let anchor = best.members[0].id;

        let mut neighbors =
            similarity::select_k0_neighbors(anchor, &other_pool, &own_pool, params.k, params.k0)?.ids();
        if neighbors.len() < params.k0 {
            let anchor_vec = other_pool.get(anchor.index).expect("anchor is present");
            for n in similarity::top_k(anchor, anchor_vec, &own_pool, params.k)?.members {
                if neighbors.len() == params.k0 {
                    break;
                }
                if !neighbors.contains(&n.id) {
                    neighbors.push(n.id);
                }
            }
        }
        plans.push(SlotPlan { slot, anchor, neighbors });
    }
    Ok(plans)
}

/// Choose anchors and neighbours for every missing slot of the pair.
///
/// The anchor of a missing frame is the present word most similar to the
/// slot's reference point (the midpoint of its immediate present neighbours,
/// or the video mean when both are missing); its neighbours are the K0
/// Jaccard-ranked cross-modal reciprocal frames of that word, topped up with
/// the word's plain cosine neighbours when fewer than K0 are reciprocal.
/// Missing words are handled symmetrically. Only originally present elements
/// take part, so the plan does not depend on slot order.
pub fn plan_completion(
    video: &FeatureSequence,
    text: &FeatureSequence,
    params: CompletionParams,
) -> Result<CompletionPlan, ApproxError> {
    params.validate()?;
    Ok(CompletionPlan {
        video: plan_modality(video, text, params)?,
        text: plan_modality(text, video, params)?,
    })
}

fn lookup<'a>(video: &'a FeatureSequence, text: &'a FeatureSequence, id: NodeId) -> &'a [f64] {
    match id.modality {
        Modality::Video => video.get(id.index),
        Modality::Text => text.get(id.index),
    }
    .expect("plans only reference present elements")
}

/// Build the affinity graph of a planned slot.
pub fn slot_graph(
    video: &FeatureSequence,
    text: &FeatureSequence,
    plan: &SlotPlan,
) -> Result<AffinityGraph, ApproxError> {
    let anchor = lookup(video, text, plan.anchor);
    let neighbors: Vec<&[f64]> = plan.neighbors.iter().map(|&n| lookup(video, text, n)).collect();
    build_affinity(anchor, &neighbors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot {
    pub slot: NodeId,
    pub anchor: NodeId,
    pub anchor_vector: Vec<f64>,
    pub neighbors: Vec<NodeId>,
    pub approximated: Vec<f64>,
    pub variants: Vec<Vec<f64>>,
}

/// Approximations for the missing slots of one modality (`V̂_a` / `T̂_b`).
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionMemory {
    pub modality: Modality,
    pub slots: Vec<MemorySlot>,
}

impl CompletionMemory {
    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `(anchor, approximation)` pairs for the approximation loss.
    pub fn terms(&self) -> Vec<(&[f64], &[f64])> {
        self.slots.iter().map(|s| (s.anchor_vector.as_slice(), s.approximated.as_slice())).collect()
    }

    fn shape(&self) -> Vec<(NodeId, usize, usize, Vec<usize>)> {
        self.slots
            .iter()
            .map(|s| {
                (s.slot, s.approximated.len(), s.variants.len(), s.variants.iter().map(Vec::len).collect())
            })
            .collect()
    }
}

/// Post-processing hook over the completion memories. Must preserve shapes.
pub trait Refiner: Send + Sync {
    fn refine(
        &self,
        video: CompletionMemory,
        text: CompletionMemory,
    ) -> (CompletionMemory, CompletionMemory);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(
        &self,
        video: CompletionMemory,
        text: CompletionMemory,
    ) -> (CompletionMemory, CompletionMemory) {
        (video, text)
    }
}

impl<F> Refiner for F
where
    F: Fn(CompletionMemory, CompletionMemory) -> (CompletionMemory, CompletionMemory) + Send + Sync,
{
    fn refine(
        &self,
        video: CompletionMemory,
        text: CompletionMemory,
    ) -> (CompletionMemory, CompletionMemory) {
        self(video, text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub pair: PairedSample,
    pub video_memory: CompletionMemory,
    pub text_memory: CompletionMemory,
}

fn memory_for(
    modality: Modality,
    plans: &[SlotPlan],
    video: &FeatureSequence,
    text: &FeatureSequence,
) -> Result<CompletionMemory, ApproxError> {
    let mut slots = Vec::with_capacity(plans.len());
    for plan in plans {
        let graph = slot_graph(video, text, plan)?;
        slots.push(MemorySlot {
            slot: plan.slot,
            anchor: plan.anchor,
            anchor_vector: graph.nodes[0].clone(),
            neighbors: plan.neighbors.clone(),
            approximated: approximate_feature(&graph),
            variants: graph.variants(),
        });
    }
    Ok(CompletionMemory { modality, slots })
}

/// Complete every missing frame and word of a pair.
///
/// With a bank, present elements are first re-embedded through it and the
/// returned pair lives in that joint space. Fully present pairs pass through
/// unchanged with empty memories.
pub fn complete_pair(
    pair: &PairedSample,
    bank: Option<&PrototypeBank>,
    params: CompletionParams,
    refiner: &dyn Refiner,
) -> Result<Completion, ApproxError> {
    params.validate()?;
    let (video, text) = match bank {
        Some(b) => (reconstruct_with_prototypes(&pair.video, b)?, reconstruct_with_prototypes(&pair.text, b)?),
        None => (pair.video.clone(), pair.text.clone()),
    };
    let plan = plan_completion(&video, &text, params)?;
    let vmem = memory_for(Modality::Video, &plan.video, &video, &text)?;
    let tmem = memory_for(Modality::Text, &plan.text, &video, &text)?;

    let before = (vmem.shape(), tmem.shape());
    let (vmem, tmem) = refiner.refine(vmem, tmem);
    if (vmem.shape(), tmem.shape()) != before
        || vmem.modality != Modality::Video
        || tmem.modality != Modality::Text
    {
        return Err(ApproxError::RefinerShape("memory layout changed".into()));
    }

    let mut out = pair.clone();
    out.video = video;
    out.text = text;
    for s in &vmem.slots {
        out.video.fill(s.slot.index, s.approximated.clone());
    }
    for s in &tmem.slots {
        out.text.fill(s.slot.index, s.approximated.clone());
    }
    Ok(Completion { pair: out, video_memory: vmem, text_memory: tmem })
}

/// `L_0`: mean squared distance between each anchor and the approximation of
/// its missing slot, averaged separately over missing frames and words. An
/// empty side contributes 0.
pub fn loss_approximation(video: &[(&[f64], &[f64])], text: &[(&[f64], &[f64])]) -> f64 {
    let term = |pairs: &[(&[f64], &[f64])]| {
        if pairs.is_empty() {
            0.0
        } else {
            pairs.iter().map(|(a, v)| ops::squared_distance(a, v)).sum::<f64>() / pairs.len() as f64
        }
    };
    term(video) + term(text)
}

/// Gradients of [`loss_approximation`] for one side: per term, the gradient
/// with respect to the anchor and to the approximation.
pub fn loss_approximation_grad(pairs: &[(&[f64], &[f64])]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let n = pairs.len() as f64;
    pairs
        .iter()
        .map(|(a, v)| {
            let g: Vec<f64> = v.iter().zip(a.iter()).map(|(x, y)| 2.0 * (x - y) / n).collect();
            (ops::scaled(&g, -1.0), g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_detailed, SyntheticConfig};
    use rand::SeedableRng;

    fn rng() -> crate::seed::Rng {
        crate::seed::Rng::seed_from_u64(17)
    }

    #[test]
    fn zero_output_weights_give_identity() {
        let bank = PrototypeBank::identity(4, 3, 2, 5, &mut rng()).unwrap();
        let seq = FeatureSequence::new(
            Modality::Video,
            vec![vec![0.1, -0.2, 0.3, 0.4], vec![0.0; 4], vec![1.0, 2.0, -1.0, 0.5]],
            vec![true, false, true],
        )
        .unwrap();
        let out = reconstruct_with_prototypes(&seq, &bank).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn single_element_single_prototype_by_hand() {
        // One prototype, one head, one element: the attention weight is 1, so
        // MCA(x) = (x Wv) Wo and the output is x + W2ᵀ tanh(W1ᵀ(x + x Wv Wo) + b1) + b2.
        let mut bank = PrototypeBank::random(2, 1, 1, 2, &mut rng()).unwrap();
        bank.wv = ndarray::arr2(&[[1.0, 0.0], [0.0, 2.0]]);
        bank.wo = ndarray::arr2(&[[0.5, 0.0], [0.0, 1.0]]);
        bank.w1 = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        bank.b1 = ndarray::arr2(&[[0.0, 0.1]]);
        bank.w2 = ndarray::arr2(&[[2.0, 0.0], [0.0, 1.0]]);
        bank.b2 = ndarray::arr2(&[[0.0, -0.5]]);
        let x = [0.4, -0.3];
        // x Wv = [0.4, -0.6]; · Wo = [0.2, -0.6]; u = [0.6, -0.9]
        let h = [0.6f64.tanh(), (-0.9f64 + 0.1).tanh()];
        let expected = [0.4 + 2.0 * h[0], -0.3 + h[1] - 0.5];
        let seq = FeatureSequence::complete(Modality::Text, vec![x.to_vec()]).unwrap();
        let out = reconstruct_with_prototypes(&seq, &bank).unwrap();
        let got = out.get(0).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-14, "{g} vs {e}");
        }
    }

    #[test]
    fn bank_dim_mismatch_is_reported() {
        let bank = PrototypeBank::random(4, 2, 2, 3, &mut rng()).unwrap();
        let seq = FeatureSequence::complete(Modality::Video, vec![vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            reconstruct_with_prototypes(&seq, &bank),
            Err(ApproxError::DimMismatch { expected: 4, got: 2 })
        ));
        assert!(matches!(
            PrototypeBank::random(5, 2, 2, 3, &mut rng()),
            Err(ApproxError::InvalidBank(_))
        ));
    }

    #[test]
    fn affinity_of_identical_nodes_is_uniform() {
        let u = [0.3, -0.4, 1.2];
        let g = build_affinity(&u, &[&u, &u, &u]).unwrap();
        for v in g.m1.iter() {
            assert!((v - std::f64::consts::E).abs() < 1e-12);
        }
        for v in g.mv.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let a = approximate_feature(&g);
        for (x, y) in a.iter().zip(u) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_of_orthogonal_pair_in_closed_form() {
        let e = std::f64::consts::E;
        let g = build_affinity(&[1.0, 0.0], &[&[0.0, 1.0]]).unwrap();
        assert!((g.m1[[0, 0]] - e).abs() < 1e-12 && (g.m1[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((g.mv[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.mv[[0, 1]] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((g.mv[[1, 0]] - 1.0 / (e + 1.0)).abs() < 1e-12);
        let a = approximate_feature(&g);
        assert!((a[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((a[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!(matches!(build_affinity(&[0.0, 0.0], &[&[1.0, 0.0]]), Err(ApproxError::ZeroVector)));
        assert!(matches!(build_affinity(&[1.0, 0.0], &[]), Err(ApproxError::NoNeighbors)));
    }

    #[test]
    fn approximate_backward_matches_finite_differences() {
        let nodes = [vec![0.5, -1.0, 0.2], vec![0.1, 0.3, -0.7], vec![-0.4, 0.9, 0.6]];
        let up = [0.7, -0.2, 1.1];
        let f = |nodes: &[Vec<f64>]| {
            let refs: Vec<&[f64]> = nodes[1..].iter().map(Vec::as_slice).collect();
            let g = build_affinity(&nodes[0], &refs).unwrap();
            ops::dot(&approximate_feature(&g), &up)
        };
        let refs: Vec<&[f64]> = nodes[1..].iter().map(Vec::as_slice).collect();
        let graph = build_affinity(&nodes[0], &refs).unwrap();
        let grads = approximate_backward(&graph, &up);
        let h = 1e-6;
        for n in 0..3 {
            for i in 0..3 {
                let mut p = nodes.clone();
                let mut m = nodes.clone();
                p[n][i] += h;
                m[n][i] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - grads[n][i]).abs() < 1e-8, "node {n} coord {i}: {fd} vs {}", grads[n][i]);
            }
        }
    }

    #[test]
    fn approximation_loss_cases() {
        assert_eq!(loss_approximation(&[], &[]), 0.0);
        let t = [1.0, 0.0];
        let v = [0.0, 1.0];
        assert_eq!(loss_approximation(&[(&t, &v)], &[]), 2.0);
        assert_eq!(loss_approximation(&[(&t, &t)], &[(&v, &v)]), 0.0);
        let g = loss_approximation_grad(&[(&t, &v)]);
        assert_eq!(g[0].1, vec![-2.0, 2.0]);
        assert_eq!(g[0].0, vec![2.0, -2.0]);
    }

    fn noise_free_pair() -> (PairedSample, crate::dataset::SyntheticWorld) {
        let cfg = SyntheticConfig { num_pairs: 1, seed: 5, keyframes: 3, keyframe_jitter: 0.5, ..Default::default() };
        let (mut data, world) = generate_synthetic_detailed(&cfg).unwrap();
        (data.remove(0), world)
    }

    #[test]
    fn complete_pair_passes_complete_pairs_through() {
        let (pair, _) = noise_free_pair();
        let c = complete_pair(&pair, None, CompletionParams::default(), &IdentityRefiner).unwrap();
        assert_eq!(c.pair, pair);
        assert!(c.video_memory.is_empty() && c.text_memory.is_empty());
    }

    #[test]
    fn noise_free_missing_frame_is_recovered() {
        let (pair, _) = noise_free_pair();
        let mut total = 0.0;
        for slot in 0..pair.video.len() {
            let truth = pair.video.get(slot).unwrap().to_vec();
            let mut holed = pair.clone();
            holed.video = pair.video.with_missing(&[slot]);
            let c = complete_pair(&holed, None, CompletionParams::default(), &IdentityRefiner).unwrap();
            let filled = c.pair.video.get(slot).unwrap();
            let cos = similarity::cosine(filled, &truth).unwrap();
            // boundary frames only have one present neighbour to anchor on
            assert!(cos > 0.85, "slot {slot}: cosine {cos}");
            total += cos;
            let mem = &c.video_memory.slots[0];
            assert_eq!(mem.variants.len(), 3);
            assert_eq!(mem.anchor.modality, Modality::Text);
        }
        assert!(total / pair.video.len() as f64 > 0.95);
    }

    #[test]
    fn completion_is_idempotent_and_refiner_default_is_identity() {
        let (pair, _) = noise_free_pair();
        let mut holed = pair.clone();
        holed.video = pair.video.with_missing(&[2, 7, 11]);
        holed.text = pair.text.with_missing(&[0, 5]);
        let p = CompletionParams::default();
        let a = complete_pair(&holed, None, p, &IdentityRefiner).unwrap();
        let keep = |v: CompletionMemory, t: CompletionMemory| (v, t);
        let b = complete_pair(&holed, None, p, &keep).unwrap();
        assert_eq!(a, b);
        assert!(a.pair.is_complete());
        let again = complete_pair(&a.pair, None, p, &IdentityRefiner).unwrap();
        assert_eq!(again.pair, a.pair);
        assert_eq!(a.text_memory.slots.len(), 2);
    }

    #[test]
    fn shape_changing_refiner_is_rejected() {
        let (pair, _) = noise_free_pair();
        let mut holed = pair.clone();
        holed.video = pair.video.with_missing(&[3]);
        let drop_slots = |mut v: CompletionMemory, t: CompletionMemory| {
            v.slots.clear();
            (v, t)
        };
        let r = complete_pair(&holed, None, CompletionParams::default(), &drop_slots);
        assert!(matches!(r, Err(ApproxError::RefinerShape(_))));
    }

    #[test]
    fn missing_opposite_modality_has_no_anchor() {
        let (pair, _) = noise_free_pair();
        let mut holed = pair.clone();
        holed.video = pair.video.with_missing(&[0]);
        holed.text = FeatureSequence::new(
            Modality::Text,
            pair.text.raw_elements().to_vec(),
            vec![false; pair.text.len()],
        )
        .unwrap();
        let r = complete_pair(&holed, None, CompletionParams::default(), &IdentityRefiner);
        assert!(matches!(r, Err(ApproxError::NoAnchor(Modality::Text))));
    }
}
