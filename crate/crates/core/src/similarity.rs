//! Cosine neighbourhoods: top-K sets, cross- and intra-modal K-reciprocal
//! sets, the Jaccard distance between reciprocal sets, and the Jaccard-ranked
//! K0 neighbour selection that feeds feature approximation.
//!
//! Rankings are by descending cosine with ties broken by ascending index, so
//! every result is deterministic.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use thiserror::Error;

use crate::dataset::{FeatureSequence, Modality};
use crate::ops;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("cosine of an all-zero vector is undefined")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("neighbour pool is empty")]
    EmptyPool,
    #[error("anchor {0:?} is missing from its pool")]
    MissingAnchor(NodeId),
    #[error("jaccard distance of two empty sets is undefined")]
    BothEmpty,
    #[error("invalid neighbourhood size: {0}")]
    InvalidK(String),
}

/// Identifies one element: a frame or a word by its slot index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub modality: Modality,
    pub index: usize,
}

impl NodeId {
    pub fn new(modality: Modality, index: usize) -> Self {
        Self { modality, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: NodeId,
    pub score: f64,
}

/// Members ordered by (score desc, index asc), at most K of them.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub anchor: NodeId,
    pub members: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn contains(&self, id: NodeId) -> bool {
        self.members.iter().any(|m| m.id == id)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.members.iter().map(|m| m.id).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReciprocalSet {
    pub anchor: NodeId,
    pub members: BTreeSet<NodeId>,
}

/// The present elements of one modality that neighbour searches run over.
#[derive(Debug, Clone)]
pub struct Pool<'a> {
    modality: Modality,
    items: Vec<(usize, &'a [f64])>,
}

impl<'a> Pool<'a> {
    pub fn new(modality: Modality, items: Vec<(usize, &'a [f64])>) -> Self {
        Self { modality, items }
    }

    /// Present elements only; missing slots never enter a pool.
    pub fn from_sequence(seq: &'a FeatureSequence) -> Self {
        Self::new(seq.modality(), seq.present().collect())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&'a [f64]> {
        self.items.iter().find(|(i, _)| *i == index).map(|(_, v)| *v)
    }

    pub fn items(&self) -> &[(usize, &'a [f64])] {
        &self.items
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::DimMismatch(a.len(), b.len()));
    }
    if ops::is_zero(a) || ops::is_zero(b) {
        return Err(SimilarityError::ZeroVector);
    }
    Ok(ops::cosine_unchecked(a, b))
}

fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.id.index.cmp(&b.id.index))
}

/// The `k` pool members most cosine-similar to `vector`.
pub fn top_k(
    anchor: NodeId,
    vector: &[f64],
    pool: &Pool<'_>,
    k: usize,
) -> Result<NeighborSet, SimilarityError> {
    if k == 0 {
        return Err(SimilarityError::InvalidK("k must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(SimilarityError::EmptyPool);
    }
    let mut members = pool
        .items
        .iter()
        .map(|&(index, v)| {
            Ok(Neighbor { id: NodeId::new(pool.modality, index), score: cosine(vector, v)? })
        })
        .collect::<Result<Vec<_>, SimilarityError>>()?;
    members.sort_by(rank_order);
    members.truncate(k);
    Ok(NeighborSet { anchor, members })
}

#[derive(Debug, Clone, Copy)]
pub enum ReciprocalMode<'p, 'a> {
    /// Candidates come from the other modality's pool.
    Cross(&'p Pool<'a>),
    /// Candidates come from the anchor's own pool (the anchor included).
    Intra,
}

/// Members `m` with `m ∈ N_K(anchor)` and `anchor ∈ N_K(m)`.
///
/// `pool_self` is the anchor's own modality. In cross mode the candidates'
/// neighbourhoods are searched in `pool_self`, so mutuality is checked across
/// modalities; in intra mode everything stays inside `pool_self`.
pub fn k_reciprocal(
    anchor: NodeId,
    pool_self: &Pool<'_>,
    mode: ReciprocalMode<'_, '_>,
    k: usize,
) -> Result<ReciprocalSet, SimilarityError> {
    if pool_self.is_empty() {
        return Err(SimilarityError::EmptyPool);
    }
    let vector = pool_self
        .get(anchor.index)
        .filter(|_| pool_self.modality == anchor.modality)
        .ok_or(SimilarityError::MissingAnchor(anchor))?;
    let candidate_pool = match mode {
        ReciprocalMode::Cross(other) => other,
        ReciprocalMode::Intra => pool_self,
    };
    let forward = top_k(anchor, vector, candidate_pool, k)?;
    let mut members = BTreeSet::new();
    for cand in &forward.members {
        let cand_vec = candidate_pool.get(cand.id.index).expect("candidate comes from the pool");
        let back = top_k(cand.id, cand_vec, pool_self, k)?;
        if back.contains(anchor) {
            members.insert(cand.id);
        }
    }
    Ok(ReciprocalSet { anchor, members })
}

/// `(|A ∪ B| - |A ∩ B|) / |A ∪ B|` over member ids.
pub fn jaccard_distance(a: &ReciprocalSet, b: &ReciprocalSet) -> Result<f64, SimilarityError> {
    let inter = a.members.intersection(&b.members).count();
    let union = a.members.len() + b.members.len() - inter;
    if union == 0 {
        return Err(SimilarityError::BothEmpty);
    }
    Ok((union - inter) as f64 / union as f64)
}

/// One reciprocal candidate scored against the anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedCandidate {
    pub id: NodeId,
    pub jaccard: f64,
    pub cosine: f64,
}

/// Every member of the anchor's cross-modal reciprocal set, ranked by
/// ascending Jaccard distance between the candidate's intra-modal reciprocal
/// set and the anchor's cross-modal one; ties go to higher cosine, then lower
/// index.
pub fn rank_reciprocal_candidates(
    anchor: NodeId,
    pool_self: &Pool<'_>,
    pool_other: &Pool<'_>,
    k: usize,
) -> Result<Vec<RankedCandidate>, SimilarityError> {
    let anchor_set = k_reciprocal(anchor, pool_self, ReciprocalMode::Cross(pool_other), k)?;
    let anchor_vec = pool_self.get(anchor.index).expect("checked by k_reciprocal");
    let mut ranked = Vec::with_capacity(anchor_set.members.len());
    for &cand in &anchor_set.members {
        let own = k_reciprocal(cand, pool_other, ReciprocalMode::Intra, k)?;
        let cand_vec = pool_other.get(cand.index).expect("candidate comes from the pool");
        ranked.push(RankedCandidate {
            id: cand,
            jaccard: jaccard_distance(&own, &anchor_set)?,
            cosine: cosine(anchor_vec, cand_vec)?,
        });
    }
    ranked.sort_by(|a, b| {
        a.jaccard
            .partial_cmp(&b.jaccard)
            .unwrap_or(Ordering::Equal)
            .then(b.cosine.partial_cmp(&a.cosine).unwrap_or(Ordering::Equal))
            .then(a.id.index.cmp(&b.id.index))
    });
    Ok(ranked)
}

/// The `k0` reciprocal candidates closest to the anchor in Jaccard distance,
/// returned as a neighbour set (cosine-ordered).
pub fn select_k0_neighbors(
    anchor: NodeId,
    pool_self: &Pool<'_>,
    pool_other: &Pool<'_>,
    k: usize,
    k0: usize,
) -> Result<NeighborSet, SimilarityError> {
    if k0 == 0 || k0 > k {
        return Err(SimilarityError::InvalidK(format!("need 1 <= k0 <= k, got k0={k0}, k={k}")));
    }
    let ranked = rank_reciprocal_candidates(anchor, pool_self, pool_other, k)?;
    let mut members: Vec<Neighbor> = ranked
        .iter()
        .take(k0)
        .map(|c| Neighbor { id: c.id, score: c.cosine })
        .collect();
    members.sort_by(rank_order);
    Ok(NeighborSet { anchor, members })
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: Modality = Modality::Video;
    const T: Modality = Modality::Text;

    fn ids(set: &ReciprocalSet) -> Vec<usize> {
        set.members.iter().map(|m| m.index).collect()
    }

    fn rs(anchor: usize, members: &[usize]) -> ReciprocalSet {
        ReciprocalSet {
            anchor: NodeId::new(V, anchor),
            members: members.iter().map(|&i| NodeId::new(V, i)).collect(),
        }
    }

    #[test]
    fn cosine_hand_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(SimilarityError::ZeroVector));
        assert_eq!(cosine(&[1.0], &[1.0, 0.0]), Err(SimilarityError::DimMismatch(1, 2)));
    }

    #[test]
    fn top_k_small_pools() {
        let a = [1.0, 2.0];
        let single = Pool::new(V, vec![(4, &a[..])]);
        let n = top_k(NodeId::new(T, 0), &[0.0, -1.0], &single, 3).unwrap();
        assert_eq!(n.ids(), vec![NodeId::new(V, 4)]);

        let vs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.3, -0.7], [-1.0, 0.2]];
        let pool = Pool::new(V, vs.iter().enumerate().map(|(i, v)| (i, &v[..])).collect());
        let n = top_k(NodeId::new(T, 0), &vs[3], &pool, 5).unwrap();
        assert_eq!(n.members[0].id.index, 3);
        assert_eq!(n.members[0].score, 1.0);
        assert!(matches!(
            top_k(NodeId::new(T, 0), &[1.0, 0.0], &Pool::new(V, vec![]), 1),
            Err(SimilarityError::EmptyPool)
        ));
    }

    #[test]
    fn ties_break_by_lower_index() {
        let v = [1.0, 0.0];
        let pool = Pool::new(V, vec![(5, &v[..]), (2, &v[..]), (9, &v[..])]);
        let n = top_k(NodeId::new(T, 0), &[2.0, 0.0], &pool, 2).unwrap();
        assert_eq!(n.members.iter().map(|m| m.id.index).collect::<Vec<_>>(), vec![2, 5]);
    }

    #[test]
    fn singleton_pools_are_always_reciprocal() {
        let w = [0.2, 0.9];
        let f = [-0.4, 0.1];
        let words = Pool::new(T, vec![(0, &w[..])]);
        let frames = Pool::new(V, vec![(0, &f[..])]);
        let set = k_reciprocal(NodeId::new(T, 0), &words, ReciprocalMode::Cross(&frames), 1).unwrap();
        assert_eq!(ids(&set), vec![0]);
    }

    #[test]
    fn anchor_outside_every_neighbourhood_has_empty_set() {
        // Word w0 sits between two frames, but each frame has a closer word,
        // so with K = 1 nobody ranks w0 first.
        let w = [[1.0, 1.0], [1.0, 0.1], [0.1, 1.0]];
        let f = [[1.0, 0.0], [0.0, 1.0]];
        let words = Pool::new(T, w.iter().enumerate().map(|(i, v)| (i, &v[..])).collect());
        let frames = Pool::new(V, f.iter().enumerate().map(|(i, v)| (i, &v[..])).collect());
        let set = k_reciprocal(NodeId::new(T, 0), &words, ReciprocalMode::Cross(&frames), 1).unwrap();
        assert!(set.members.is_empty());
        // Brute-force confirmation of every N_1 set involved.
        let n_w0 = top_k(NodeId::new(T, 0), &w[0], &frames, 1).unwrap();
        assert_eq!(n_w0.members[0].id.index, 0);
        let n_f0 = top_k(NodeId::new(V, 0), &f[0], &words, 1).unwrap();
        assert_eq!(n_f0.members[0].id.index, 1);
        let n_f1 = top_k(NodeId::new(V, 1), &f[1], &words, 1).unwrap();
        assert_eq!(n_f1.members[0].id.index, 2);
    }

    #[test]
    fn missing_anchor_is_reported() {
        let f = [1.0, 0.0];
        let frames = Pool::new(V, vec![(0, &f[..])]);
        let words = Pool::new(T, vec![(1, &f[..])]);
        let r = k_reciprocal(NodeId::new(T, 0), &words, ReciprocalMode::Cross(&frames), 2);
        assert_eq!(r, Err(SimilarityError::MissingAnchor(NodeId::new(T, 0))));
    }

    #[test]
    fn jaccard_hand_cases() {
        assert_eq!(jaccard_distance(&rs(0, &[1, 2]), &rs(1, &[1, 2])).unwrap(), 0.0);
        assert_eq!(jaccard_distance(&rs(0, &[1, 2]), &rs(1, &[3])).unwrap(), 1.0);
        assert_eq!(jaccard_distance(&rs(0, &[1, 2]), &rs(1, &[1, 3])).unwrap(), 2.0 / 3.0);
        assert_eq!(jaccard_distance(&rs(0, &[]), &rs(1, &[])), Err(SimilarityError::BothEmpty));
        assert_eq!(jaccard_distance(&rs(0, &[]), &rs(1, &[4])).unwrap(), 1.0);
    }

    #[test]
    fn k0_selection_returns_all_when_k0_covers_candidates() {
        let w = [[1.0, 0.2], [0.1, 1.0]];
        let f = [[1.0, 0.0], [0.9, 0.3], [0.0, 1.0]];
        let words = Pool::new(T, w.iter().enumerate().map(|(i, v)| (i, &v[..])).collect());
        let frames = Pool::new(V, f.iter().enumerate().map(|(i, v)| (i, &v[..])).collect());
        let anchor = NodeId::new(T, 0);
        let cands = k_reciprocal(anchor, &words, ReciprocalMode::Cross(&frames), 2).unwrap();
        let n = cands.members.len();
        assert!(n >= 1);
        let sel = select_k0_neighbors(anchor, &words, &frames, 2, n).unwrap();
        let got: BTreeSet<NodeId> = sel.ids().into_iter().collect();
        assert_eq!(got, cands.members);
        assert!(matches!(
            select_k0_neighbors(anchor, &words, &frames, 2, 3),
            Err(SimilarityError::InvalidK(_))
        ));
    }
}
