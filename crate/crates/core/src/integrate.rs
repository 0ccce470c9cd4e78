//! Multi-granularity integration: noun-phrase sets, phrase-overlap matching
//! weights, and the weighted bidirectional contrastive objective.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("batches differ: {0}")]
    BatchMismatch(String),
    #[error("contrastive loss needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("weight {name} = {value} is outside [0, 1]")]
    BadWeight { name: &'static str, value: f64 },
    #[error("embedding is all zero")]
    ZeroVector,
    #[error("synonym table: {0}")]
    Synonyms(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Adj,
    Noun,
    Other,
}

/// Surface phrase → canonical phrase. Keys and values are stored lowercase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymTable(HashMap<String, String>);

fn normalize(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

impl SynonymTable {
    pub fn new<I, K, V>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        Self(entries.into_iter().map(|(k, v)| (normalize(k.as_ref()), normalize(v.as_ref()))).collect())
    }

    /// Read a JSON object `{surface: canonical}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, IntegrateError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| IntegrateError::Synonyms(format!("{}: {e}", path.as_ref().display())))?;
        let map: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| IntegrateError::Synonyms(e.to_string()))?;
        Ok(Self::new(map))
    }

    /// Lowercase, collapse whitespace and follow synonym links to a fixed
    /// point, so canonicalisation is idempotent even for chained entries.
    pub fn canonical(&self, phrase: &str) -> String {
        let mut current = normalize(phrase);
        for _ in 0..=self.0.len() {
            match self.0.get(&current) {
                Some(next) if *next != current => current = next.clone(),
                _ => break,
            }
        }
        current
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSet {
    pub phrases: BTreeSet<String>,
}

impl PhraseSet {
    pub fn from_phrases<I, S>(phrases: I, synonyms: &SynonymTable) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self { phrases: phrases.into_iter().map(|p| synonyms.canonical(p.as_ref())).collect() }
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// `|A ∩ B| / |A ∪ B|`, 0 when both are empty.
    pub fn overlap(&self, other: &PhraseSet) -> f64 {
        let inter = self.phrases.intersection(&other.phrases).count();
        let union = self.phrases.len() + other.phrases.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Maximal `ADJ* NOUN+` runs become lowercase phrases, canonicalised through
/// the synonym table.
pub fn extract_noun_phrases<S: AsRef<str>>(tokens: &[(S, PosTag)], synonyms: &SynonymTable) -> PhraseSet {
    let mut phrases = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let start = i;
        while i < tokens.len() && tokens[i].1 == PosTag::Adj {
            i += 1;
        }
        let nouns_start = i;
        while i < tokens.len() && tokens[i].1 == PosTag::Noun {
            i += 1;
        }
        if i > nouns_start {
            let words: Vec<&str> = tokens[start..i].iter().map(|(w, _)| w.as_ref()).collect();
            phrases.insert(synonyms.canonical(&words.join(" ")));
        } else if i == start {
            i += 1;
        }
    }
    PhraseSet { phrases }
}

/// Row-stochastic matching-probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(pub Array2<f64>);

impl WeightMatrix {
    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }
}

/// `W[i][j] = J(Z_i, Z_j) / Σ_k J(Z_i, Z_k)` with `J` the phrase-set Jaccard
/// similarity. A row whose sum is zero (only possible for an empty `Z_i`)
/// falls back to one-hot self supervision.
pub fn matching_weights(sets: &[PhraseSet]) -> WeightMatrix {
    let n = sets.len();
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        let row: Vec<f64> = sets.iter().map(|other| sets[i].overlap(other)).collect();
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            for (j, v) in row.iter().enumerate() {
                w[[i, j]] = v / sum;
            }
        } else {
            w[[i, i]] = 1.0;
        }
    }
    WeightMatrix(w)
}

fn check_inputs(
    src: &[Vec<f64>],
    tgt: &[Vec<f64>],
    w: &WeightMatrix,
    alpha: f64,
    sigma: f64,
) -> Result<usize, IntegrateError> {
    let n = src.len();
    if tgt.len() != n {
        return Err(IntegrateError::BatchMismatch(format!("{n} sources vs {} targets", tgt.len())));
    }
    if w.0.dim() != (n, n) {
        return Err(IntegrateError::BatchMismatch(format!("weights {:?} for batch {n}", w.0.dim())));
    }
    let dim = src.first().map_or(0, Vec::len);
    if src.iter().chain(tgt).any(|v| v.len() != dim) {
        return Err(IntegrateError::BatchMismatch("embedding dimensions differ".into()));
    }
    if n < 2 {
        return Err(IntegrateError::BatchTooSmall(n));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(IntegrateError::BadTemperature(sigma));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(IntegrateError::BadWeight { name: "alpha", value: alpha });
    }
    if src.iter().chain(tgt).any(|v| ops::is_zero(v)) {
        return Err(IntegrateError::ZeroVector);
    }
    Ok(n)
}

fn target_weight(w: &WeightMatrix, alpha: f64, i: usize, j: usize) -> f64 {
    alpha * w.get(i, j) + if i == j { 1.0 - alpha } else { 0.0 }
}

/// `(1/N) Σ_i Σ_j L(src_i, tgt_j) · (α W_ij + (1 − α) I_ij)` where `L` is the
/// temperature-scaled cosine cross-entropy of `tgt_j` among all targets.
pub fn contrastive_loss_directional(
    src: &[Vec<f64>],
    tgt: &[Vec<f64>],
    w: &WeightMatrix,
    alpha: f64,
    sigma: f64,
) -> Result<f64, IntegrateError> {
    contrastive_grad(src, tgt, w, alpha, sigma).map(|(l, _, _)| l)
}

/// Loss, then gradients for the first and second batch.
pub type LossAndGrads = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Loss plus gradients with respect to the source and target batches.
pub fn contrastive_grad(
    src: &[Vec<f64>],
    tgt: &[Vec<f64>],
    w: &WeightMatrix,
    alpha: f64,
    sigma: f64,
) -> Result<LossAndGrads, IntegrateError> {
    let n = check_inputs(src, tgt, w, alpha, sigma)?;
    let dim = src[0].len();
    let mut loss = 0.0;
    let mut dsrc = vec![vec![0.0; dim]; n];
    let mut dtgt = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let z: Vec<f64> = tgt.iter().map(|t| ops::cosine_unchecked(&src[i], t) / sigma).collect();
        let lse = ops::log_sum_exp(&z);
        let weights: Vec<f64> = (0..n).map(|j| target_weight(w, alpha, i, j)).collect();
        let mass: f64 = weights.iter().sum();
        for j in 0..n {
            loss += (lse - z[j]) * weights[j];
        }
        for j in 0..n {
            let p = (z[j] - lse).exp();
            let dz = (mass * p - weights[j]) / n as f64;
            if dz == 0.0 {
                continue;
            }
            let (gs, gt) = ops::cosine_backward(&src[i], &tgt[j]);
            ops::axpy(&mut dsrc[i], dz / sigma, &gs);
            ops::axpy(&mut dtgt[j], dz / sigma, &gt);
        }
    }
    Ok((loss / n as f64, dsrc, dtgt))
}

/// `L_2 = μ L_v2t + (1 − μ) L_t2v`; the text-to-video direction swaps the
/// roles of the two batches and reuses the same weights.
pub fn loss_integration(
    v: &[Vec<f64>],
    t: &[Vec<f64>],
    w: &WeightMatrix,
    alpha: f64,
    sigma: f64,
    mu: f64,
) -> Result<f64, IntegrateError> {
    integration_grad(v, t, w, alpha, sigma, mu).map(|(l, _, _)| l)
}

pub fn integration_grad(
    v: &[Vec<f64>],
    t: &[Vec<f64>],
    w: &WeightMatrix,
    alpha: f64,
    sigma: f64,
    mu: f64,
) -> Result<LossAndGrads, IntegrateError> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(IntegrateError::BadWeight { name: "mu", value: mu });
    }
    let (l_vt, dv1, dt1) = contrastive_grad(v, t, w, alpha, sigma)?;
    let (l_tv, dt2, dv2) = contrastive_grad(t, v, w, alpha, sigma)?;
    let combine = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        a.into_iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(&y).map(|(p, q)| mu * p + (1.0 - mu) * q).collect())
            .collect()
    };
    Ok((mu * l_vt + (1.0 - mu) * l_tv, combine(dv1, dv2), combine(dt1, dt2)))
}

/// `L = L_0 + α₁ L_1 + α₂ L_2`.
pub fn total_loss(l0: f64, l1: f64, l2: f64, alpha1: f64, alpha2: f64) -> f64 {
    l0 + alpha1 * l1 + alpha2 * l2
}

#[cfg(test)]
mod tests {
    use super::*;
    use PosTag::*;

    fn set(items: &[&str]) -> PhraseSet {
        PhraseSet::from_phrases(items.iter().copied(), &SynonymTable::default())
    }

    #[test]
    fn adjective_noun_runs() {
        let none = SynonymTable::default();
        let p = extract_noun_phrases(&[("a", Other), ("Red", Adj), ("car", Noun)], &none);
        assert_eq!(p, set(&["red car"]));
        let p = extract_noun_phrases(&[("quickly", Other), ("big", Adj), ("runs", Other)], &none);
        assert!(p.is_empty());
        let toks = [("red", Adj), ("car", Noun), ("and", Other), ("red", Adj), ("car", Noun)];
        assert_eq!(extract_noun_phrases(&toks, &none).len(), 1);
        let toks = [("old", Adj), ("fire", Noun), ("truck", Noun), ("big", Adj), ("dog", Noun)];
        assert_eq!(extract_noun_phrases(&toks, &none), set(&["old fire truck", "big dog"]));
    }

    #[test]
    fn synonyms_canonicalise_idempotently() {
        let syn = SynonymTable::new([("automobile", "car"), ("red automobile", "red car"), ("car", "vehicle")]);
        assert_eq!(syn.canonical("Red  Automobile"), "red car");
        assert_eq!(syn.canonical("automobile"), "vehicle");
        let once = syn.canonical("automobile");
        assert_eq!(syn.canonical(&once), once);
        let p = extract_noun_phrases(&[("red", Adj), ("automobile", Noun)], &syn);
        assert_eq!(p.phrases.iter().next().unwrap(), "red car");
    }

    #[test]
    fn weights_of_identical_disjoint_and_single_sets() {
        let same = vec![set(&["a", "b"]); 4];
        let w = matching_weights(&same);
        assert!(w.0.iter().all(|&x| x == 0.25));
        let disjoint = vec![set(&["a"]), set(&["b"]), set(&["c", "d"])];
        assert_eq!(matching_weights(&disjoint), WeightMatrix::identity(3));
        assert_eq!(matching_weights(&[set(&["x"])]).0, ndarray::arr2(&[[1.0]]));
    }

    #[test]
    fn empty_phrase_set_falls_back_to_self() {
        let w = matching_weights(&[set(&[]), set(&["a"]), set(&["a", "b"])]);
        assert_eq!(w.0.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        // row 1: J = [0, 1, 1/2] normalised by 3/2
        assert!((w.get(1, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.get(1, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_pair_infonce_closed_form() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = contrastive_loss_directional(&v, &v, &WeightMatrix::identity(2), 0.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - -(e / (e + 1.0)).ln()).abs() < 1e-15);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn identity_weights_make_alpha_irrelevant() {
        let v = vec![vec![1.0, 0.3, -0.2], vec![0.1, 1.0, 0.4], vec![-0.6, 0.2, 0.9]];
        let t = vec![vec![0.8, 0.1, 0.0], vec![0.4, 0.7, 0.3], vec![-0.1, -0.5, 1.0]];
        let id = WeightMatrix::identity(3);
        let base = contrastive_loss_directional(&v, &t, &id, 0.0, 0.5).unwrap();
        for a in [0.2, 0.7, 1.0] {
            let l = contrastive_loss_directional(&v, &t, &id, a, 0.5).unwrap();
            assert!((l - base).abs() < 1e-14);
        }
    }

    #[test]
    fn input_validation() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let id = WeightMatrix::identity(2);
        assert!(matches!(
            contrastive_loss_directional(&v, &v[..1], &id, 0.0, 1.0),
            Err(IntegrateError::BatchMismatch(_))
        ));
        assert_eq!(
            contrastive_loss_directional(&v, &v, &id, 0.0, 0.0),
            Err(IntegrateError::BadTemperature(0.0))
        );
        assert!(matches!(
            contrastive_loss_directional(&v[..1], &v[..1], &WeightMatrix::identity(1), 0.0, 1.0),
            Err(IntegrateError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn integration_mixes_directions() {
        let v = vec![vec![1.0, 0.3, -0.2], vec![0.1, 1.0, 0.4], vec![-0.6, 0.2, 0.9]];
        let t = vec![vec![0.8, 0.1, 0.0], vec![0.4, 0.7, 0.3], vec![-0.1, -0.5, 1.0]];
        let w = matching_weights(&[set(&["a", "b"]), set(&["b"]), set(&["c"])]);
        let vt = contrastive_loss_directional(&v, &t, &w, 0.3, 0.2).unwrap();
        let tv = contrastive_loss_directional(&t, &v, &w, 0.3, 0.2).unwrap();
        assert_eq!(loss_integration(&v, &t, &w, 0.3, 0.2, 1.0).unwrap(), vt);
        let half = loss_integration(&v, &t, &w, 0.3, 0.2, 0.5).unwrap();
        assert!((half - 0.5 * (vt + tv)).abs() < 1e-14);
        let sym_a = loss_integration(&v, &v, &w, 0.3, 0.2, 0.1).unwrap();
        let sym_b = loss_integration(&v, &v, &w, 0.3, 0.2, 0.9).unwrap();
        assert!((sym_a - sym_b).abs() < 1e-14);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.0, 0.0), 1.0);
        assert!((total_loss(1.0, 2.0, 3.0, 0.5, 0.1) - 2.3).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 4.0, 6.0, 0.5, 0.1), 2.0 * total_loss(1.0, 2.0, 3.0, 0.5, 0.1));
    }
}
