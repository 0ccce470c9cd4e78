//! Recall@K retrieval evaluation, naive completion baselines and the
//! incompleteness sweeps.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{CompletionParams, IdentityRefiner};
use crate::dataset::{apply_incompleteness, DataError, FeatureSequence, IncompletenessConfig, PairedSample};
use crate::distill::DecisiveFeatures;
use crate::model::{ModelError, TwoTowerModel};
use crate::ops;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0:?} sequence has no present elements to complete from")]
    AllMissing(crate::dataset::Modality),
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
    #[error("report output: {0}")]
    Output(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Row `i` scores query `i` against every candidate; the truth is column `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub Array2<f64>);

impl SimilarityMatrix {
    /// Cosine scores. A zero embedding scores 0 against everything.
    pub fn from_embeddings(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Self {
        Self(Array2::from_shape_fn((queries.len(), candidates.len()), |(i, j)| {
            let (q, c) = (&queries[i], &candidates[j]);
            if ops::is_zero(q) || ops::is_zero(c) {
                0.0
            } else {
                ops::cosine_unchecked(q, c)
            }
        }))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    /// 0-based rank of the diagonal candidate in row `i`; equal scores rank
    /// by ascending candidate index.
    pub fn rank_of_truth(&self, i: usize) -> usize {
        let row = self.0.row(i);
        let truth = row[i];
        row.iter().enumerate().filter(|&(j, &s)| s > truth || (s == truth && j < i)).count()
    }
}

/// Percentage of queries whose truth ranks within the top `k`. `k = 0` or an
/// empty matrix give 0.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> f64 {
    let n = sim.len();
    if n == 0 || k == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&i| sim.rank_of_truth(i) < k).count();
    100.0 * hits as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Neighbour approximation in the bank's reconstructed space.
    Pipeline,
    Zero,
    Mean,
    Interpolate,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Pipeline, Strategy::Zero, Strategy::Mean, Strategy::Interpolate];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pipeline => "pipeline",
            Strategy::Zero => "zero",
            Strategy::Mean => "mean",
            Strategy::Interpolate => "interpolate",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}; expected pipeline, zero, mean or interpolate"))
    }
}

fn fill_sequence(seq: &FeatureSequence, strategy: Strategy) -> Result<FeatureSequence, EvalError> {
    let missing = seq.missing_indices();
    if missing.is_empty() {
        return Ok(seq.clone());
    }
    let present: Vec<usize> = seq.present().map(|(i, _)| i).collect();
    if present.is_empty() && strategy != Strategy::Zero {
        return Err(EvalError::AllMissing(seq.modality()));
    }
    let mut out = seq.clone();
    let mean = ops::mean(seq.present().map(|(_, v)| v), seq.dim());
    for p in missing {
        let value = match strategy {
            Strategy::Zero => vec![0.0; seq.dim()],
            Strategy::Mean => mean.clone(),
            Strategy::Interpolate => {
                let left = present.iter().rev().find(|&&i| i < p).copied();
                let right = present.iter().find(|&&i| i > p).copied();
                match (left, right) {
                    (Some(l), Some(r)) => {
                        let t = (p - l) as f64 / (r - l) as f64;
                        let (a, b) = (seq.get(l).expect("present"), seq.get(r).expect("present"));
                        a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
                    }
                    (Some(i), None) | (None, Some(i)) => seq.get(i).expect("present").to_vec(),
                    (None, None) => unreachable!("checked above"),
                }
            }
            Strategy::Pipeline => {
                return Err(EvalError::Invalid("the pipeline is not a baseline".into()));
            }
        };
        out.fill(p, value);
    }
    Ok(out)
}

/// Fill every missing slot with zeros, the modality mean, or a linear
/// interpolation between the nearest present neighbours.
pub fn baseline_complete(pair: &PairedSample, strategy: Strategy) -> Result<PairedSample, EvalError> {
    let mut out = pair.clone();
    out.video = fill_sequence(&pair.video, strategy)?;
    out.text = fill_sequence(&pair.text, strategy)?;
    Ok(out)
}

/// Encode a possibly incomplete pair after completing it with `strategy`.
pub fn encode_with_strategy(
    model: &TwoTowerModel,
    pair: &PairedSample,
    strategy: Strategy,
    params: CompletionParams,
) -> Result<DecisiveFeatures, EvalError> {
    match strategy {
        Strategy::Pipeline => Ok(model.encode_with_completion(pair, params, &IdentityRefiner)?),
        s => Ok(model.encode(&baseline_complete(pair, s)?)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    T2v,
    V2t,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::T2v => "t2v",
            Direction::V2t => "v2t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub video_rate: f64,
    pub text_rate: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

/// Corrupt both sides at the configured rates, complete, encode and score
/// text-to-video and video-to-text retrieval.
pub fn evaluate_retrieval(
    model: &TwoTowerModel,
    data: &[PairedSample],
    strategy: Strategy,
    rates: &IncompletenessConfig,
    params: CompletionParams,
) -> Result<(EvalReport, EvalReport), EvalError> {
    rates.validate()?;
    params.validate().map_err(ModelError::from)?;
    let corrupted = apply_incompleteness(data, rates)?;
    let feats: Vec<DecisiveFeatures> = corrupted
        .par_iter()
        .map(|p| encode_with_strategy(model, p, strategy, params))
        .collect::<Result<_, _>>()?;
    let f_v: Vec<Vec<f64>> = feats.iter().map(|f| f.f_v.clone()).collect();
    let f_t: Vec<Vec<f64>> = feats.iter().map(|f| f.f_t.clone()).collect();
    let report = |direction, sim: SimilarityMatrix| EvalReport {
        direction,
        r1: recall_at_k(&sim, 1),
        r5: recall_at_k(&sim, 5),
        r10: recall_at_k(&sim, 10),
        video_rate: rates.video_rate,
        text_rate: rates.text_rate,
        strategy,
        seed: rates.seed,
    };
    Ok((
        report(Direction::T2v, SimilarityMatrix::from_embeddings(&f_t, &f_v)),
        report(Direction::V2t, SimilarityMatrix::from_embeddings(&f_v, &f_t)),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub video_rate: f64,
    pub text_rate: f64,
    pub strategy: Strategy,
    pub t2v: EvalReport,
    pub v2t: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

/// `(r, r)` for every rate.
pub fn balanced_grid(rates: &[f64]) -> Vec<(f64, f64)> {
    rates.iter().map(|&r| (r, r)).collect()
}

/// The balanced 50/50 setting and the two unbalanced settings 70/30, 30/70
/// (video rate first).
pub fn unbalanced_grid() -> Vec<(f64, f64)> {
    vec![(0.5, 0.5), (0.7, 0.3), (0.3, 0.7)]
}

/// One evaluation per `(cell, strategy)`, in grid-major order. Every cell
/// uses the same masking seed, so strategies are compared on identical gaps.
pub fn sweep_incompleteness(
    model: &TwoTowerModel,
    data: &[PairedSample],
    grid: &[(f64, f64)],
    strategies: &[Strategy],
    seed: u64,
    params: CompletionParams,
) -> Result<SweepReport, EvalError> {
    if grid.is_empty() || strategies.is_empty() {
        return Err(EvalError::Invalid("empty grid or strategy list".into()));
    }
    let jobs: Vec<((f64, f64), Strategy)> =
        grid.iter().flat_map(|&cell| strategies.iter().map(move |&s| (cell, s))).collect();
    let cells = jobs
        .par_iter()
        .map(|&((v, t), strategy)| {
            let (t2v, v2t) =
                evaluate_retrieval(model, data, strategy, &IncompletenessConfig::new(v, t, seed), params)?;
            Ok(SweepCell { video_rate: v, text_rate: t, strategy, t2v, v2t })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(SweepReport { cells })
}

impl SweepReport {
    pub fn get(&self, video_rate: f64, text_rate: f64, strategy: Strategy) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.video_rate == video_rate && c.text_rate == text_rate && c.strategy == strategy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per cell and direction.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let out = |e: csv::Error| EvalError::Output(e.to_string());
        w.write_record(["video_rate", "text_rate", "strategy", "direction", "r1", "r5", "r10", "seed"])
            .map_err(out)?;
        for cell in &self.cells {
            for r in [&cell.t2v, &cell.v2t] {
                w.write_record([
                    r.video_rate.to_string(),
                    r.text_rate.to_string(),
                    r.strategy.to_string(),
                    r.direction.name().to_string(),
                    r.r1.to_string(),
                    r.r5.to_string(),
                    r.r10.to_string(),
                    r.seed.to_string(),
                ])
                .map_err(out)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Output(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Output(e.to_string()))
    }

    pub fn write(&self, json: impl AsRef<Path>, csv: impl AsRef<Path>) -> Result<(), EvalError> {
        let io = |p: &Path, e: std::io::Error| EvalError::Output(format!("{}: {e}", p.display()));
        std::fs::write(json.as_ref(), self.to_json()).map_err(|e| io(json.as_ref(), e))?;
        std::fs::write(csv.as_ref(), self.to_csv()?).map_err(|e| io(csv.as_ref(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Modality, SyntheticConfig};
    use crate::gradcheck::small_config;

    #[test]
    fn identity_and_reversed_matrices() {
        let id = SimilarityMatrix(Array2::eye(10));
        assert_eq!(recall_at_k(&id, 1), 100.0);
        // truth always scores lowest
        let rev = SimilarityMatrix(Array2::from_shape_fn((10, 10), |(i, j)| if i == j { -1.0 } else { j as f64 }));
        assert_eq!(recall_at_k(&rev, 1), 0.0);
        assert_eq!(recall_at_k(&rev, 9), 0.0);
        assert_eq!(recall_at_k(&rev, 10), 100.0);
        assert_eq!(recall_at_k(&rev, 50), 100.0);
    }

    #[test]
    fn ties_rank_by_candidate_index() {
        let flat = SimilarityMatrix(Array2::from_elem((4, 4), 0.5));
        assert_eq!((0..4).map(|i| flat.rank_of_truth(i)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(recall_at_k(&flat, 2), 50.0);
    }

    fn seq(mask: Vec<bool>) -> FeatureSequence {
        let elements = (0..mask.len()).map(|i| vec![i as f64, 1.0]).collect();
        FeatureSequence::new(Modality::Video, elements, mask).unwrap()
    }

    #[test]
    fn baselines_fill_by_hand() {
        let s = seq(vec![true, false, true, false]);
        let interp = fill_sequence(&s, Strategy::Interpolate).unwrap();
        assert_eq!(interp.get(1).unwrap(), &[1.0, 1.0]);
        assert_eq!(interp.get(3).unwrap(), &[2.0, 1.0]);
        let mean = fill_sequence(&s, Strategy::Mean).unwrap();
        assert_eq!(mean.get(3).unwrap(), &[1.0, 1.0]);
        let zero = fill_sequence(&s, Strategy::Zero).unwrap();
        assert_eq!(zero.get(1).unwrap(), &[0.0, 0.0]);
        assert_eq!(zero.present_count(), 4);
        let full = seq(vec![true; 3]);
        for st in [Strategy::Zero, Strategy::Mean, Strategy::Interpolate] {
            assert_eq!(fill_sequence(&full, st).unwrap(), full);
        }
        assert!(matches!(fill_sequence(&seq(vec![false; 2]), Strategy::Mean), Err(EvalError::AllMissing(_))));
    }

    fn setup(n: usize) -> (TwoTowerModel, Vec<PairedSample>) {
        let data = generate_synthetic(&SyntheticConfig {
            num_pairs: n,
            frames_per_video: 6,
            words_per_text: 5,
            dim: 8,
            latent_dim: 4,
            vocabulary: (0..4).map(|i| format!("adj{i} noun{i}")).collect(),
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        (TwoTowerModel::new(&small_config(), 5).unwrap(), data)
    }

    #[test]
    fn zero_rates_match_clean_evaluation_for_every_strategy() {
        let (model, data) = setup(12);
        let clean = evaluate_retrieval(&model, &data, Strategy::Zero, &IncompletenessConfig::new(0.0, 0.0, 3), Default::default())
            .unwrap();
        for s in Strategy::ALL {
            let r = evaluate_retrieval(&model, &data, s, &IncompletenessConfig::new(0.0, 0.0, 3), Default::default())
                .unwrap();
            assert_eq!((r.0.r1, r.0.r5, r.1.r10), (clean.0.r1, clean.0.r5, clean.1.r10));
        }
    }

    #[test]
    fn single_pair_recalls_itself() {
        let (model, data) = setup(1);
        let (t2v, v2t) =
            evaluate_retrieval(&model, &data, Strategy::Pipeline, &IncompletenessConfig::new(0.3, 0.3, 1), Default::default())
                .unwrap();
        assert_eq!((t2v.r1, v2t.r1), (100.0, 100.0));
    }

    #[test]
    fn sweep_shape_order_and_csv() {
        let (model, data) = setup(10);
        let grid = balanced_grid(&[0.0, 0.3]);
        let strategies = [Strategy::Pipeline, Strategy::Zero];
        let r = sweep_incompleteness(&model, &data, &grid, &strategies, 4, Default::default()).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert_eq!((r.cells[1].video_rate, r.cells[1].strategy), (0.0, Strategy::Zero));
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("video_rate,text_rate,strategy,direction,r1,r5,r10,seed\n"));
        assert_eq!(csv.lines().count(), 1 + 8);
        let again = sweep_incompleteness(&model, &data, &grid, &strategies, 4, Default::default()).unwrap();
        assert_eq!(again, r);
    }
}
