//! Domain types and the experimental substrate: feature sequences with
//! presence masks, paired samples, JSONL persistence, the seeded synthetic
//! corpus and incompleteness masking.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Video => Modality::Text,
            Modality::Text => Modality::Video,
        }
    }
}

/// Ordered per-element embeddings (frames or words) with a presence mask.
///
/// Missing slots keep their position and hold an all-zero placeholder. They
/// are only reachable through [`FeatureSequence::get`] after a completion
/// step has filled them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    modality: Modality,
    dim: usize,
    elements: Vec<Vec<f64>>,
    mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(
        modality: Modality,
        mut elements: Vec<Vec<f64>>,
        mask: Vec<bool>,
    ) -> Result<Self, DataError> {
        if elements.is_empty() {
            return Err(DataError::Invalid("sequence must hold at least one element".into()));
        }
        if elements.len() != mask.len() {
            return Err(DataError::Invalid(format!(
                "mask length {} does not match element count {}",
                mask.len(),
                elements.len()
            )));
        }
        let dim = elements[0].len();
        if dim == 0 {
            return Err(DataError::Invalid("feature dimension must be at least 1".into()));
        }
        for (i, (e, &present)) in elements.iter_mut().zip(&mask).enumerate() {
            if e.len() != dim {
                return Err(DataError::Invalid(format!(
                    "element {i} has dimension {} (expected {dim})",
                    e.len()
                )));
            }
            if present {
                if e.iter().any(|x| !x.is_finite()) {
                    return Err(DataError::Invalid(format!("element {i} is not finite")));
                }
            } else {
                e.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(Self { modality, dim, elements, mask })
    }

    /// A sequence with every element present.
    pub fn complete(modality: Modality, elements: Vec<Vec<f64>>) -> Result<Self, DataError> {
        let mask = vec![true; elements.len()];
        Self::new(modality, elements, mask)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.mask.get(i).copied().unwrap_or(false)
    }

    /// The element at `i`, or `None` when the slot is missing.
    pub fn get(&self, i: usize) -> Option<&[f64]> {
        if self.is_present(i) {
            Some(&self.elements[i])
        } else {
            None
        }
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.elements
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(i, (e, _))| (i, e.as_slice()))
    }

    pub fn present_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i)
            .collect()
    }

    /// All slots including zero placeholders, for serialization.
    pub fn raw_elements(&self) -> &[Vec<f64>] {
        &self.elements
    }

    /// Copy with the given slots marked missing and zeroed.
    pub fn with_missing(&self, indices: &[usize]) -> Self {
        let mut out = self.clone();
        for &i in indices {
            if i < out.len() {
                out.mask[i] = false;
                out.elements[i].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        out
    }

    /// Store a completed value in slot `i` and mark it present.
    pub(crate) fn fill(&mut self, i: usize, value: Vec<f64>) {
        debug_assert_eq!(value.len(), self.dim);
        self.elements[i] = value;
        self.mask[i] = true;
    }

    /// Overwrite a present slot (used when re-embedding a sequence).
    pub(crate) fn replace(&mut self, i: usize, value: Vec<f64>) {
        debug_assert!(self.mask[i]);
        self.elements[i] = value;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub video: FeatureSequence,
    pub text: FeatureSequence,
    pub phrases: Option<BTreeSet<String>>,
    pub label: Option<i64>,
}

impl PairedSample {
    pub fn new(
        id: impl Into<String>,
        video: FeatureSequence,
        text: FeatureSequence,
    ) -> Result<Self, DataError> {
        let sample = Self { id: id.into(), video, text, phrases: None, label: None };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.video.modality() != Modality::Video || self.text.modality() != Modality::Text {
            return Err(DataError::Invalid(format!("{}: modalities are swapped", self.id)));
        }
        if self.video.dim() != self.text.dim() {
            return Err(DataError::Invalid(format!(
                "{}: video dimension {} differs from text dimension {}",
                self.id,
                self.video.dim(),
                self.text.dim()
            )));
        }
        Ok(())
    }

    pub fn sequence(&self, modality: Modality) -> &FeatureSequence {
        match modality {
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.video.present_count() == self.video.len() && self.text.present_count() == self.text.len()
    }
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    video: Vec<Vec<f64>>,
    video_mask: Vec<bool>,
    text: Vec<Vec<f64>>,
    text_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phrases: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
}

impl From<&PairedSample> for Record {
    fn from(s: &PairedSample) -> Self {
        Record {
            id: s.id.clone(),
            video: s.video.raw_elements().to_vec(),
            video_mask: s.video.mask().to_vec(),
            text: s.text.raw_elements().to_vec(),
            text_mask: s.text.mask().to_vec(),
            phrases: s.phrases.as_ref().map(|p| p.iter().cloned().collect()),
            label: s.label,
        }
    }
}

impl TryFrom<Record> for PairedSample {
    type Error = DataError;

    fn try_from(r: Record) -> Result<Self, DataError> {
        let video = FeatureSequence::new(Modality::Video, r.video, r.video_mask)?;
        let text = FeatureSequence::new(Modality::Text, r.text, r.text_mask)?;
        let mut sample = PairedSample::new(r.id, video, text)?;
        sample.phrases = r.phrases.map(|p| p.into_iter().collect());
        sample.label = r.label;
        Ok(sample)
    }
}

pub fn parse_record(line: &str) -> Result<PairedSample, DataError> {
    let record: Record =
        serde_json::from_str(line).map_err(|e| DataError::Invalid(e.to_string()))?;
    PairedSample::try_from(record)
}

pub fn record_to_string(sample: &PairedSample) -> String {
    serde_json::to_string(&Record::from(sample)).expect("records always serialize")
}

/// Read a JSONL dataset. Blank lines are skipped; errors carry the 1-based
/// line number.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PairedSample>, DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_record(&line).map_err(|e| DataError::Format {
            line: i + 1,
            message: match e {
                DataError::Invalid(m) => m,
                other => other.to_string(),
            },
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[PairedSample]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for s in samples {
        writeln!(w, "{}", record_to_string(s)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

// ---------------------------------------------------------------------------
// Incompleteness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncompletenessConfig {
    pub video_rate: f64,
    pub text_rate: f64,
    pub seed: u64,
}

/// The customary 30% balanced setting.
impl Default for IncompletenessConfig {
    fn default() -> Self {
        Self::balanced(0.3, 0)
    }
}

impl IncompletenessConfig {
    pub fn new(video_rate: f64, text_rate: f64, seed: u64) -> Self {
        Self { video_rate, text_rate, seed }
    }

    pub fn balanced(rate: f64, seed: u64) -> Self {
        Self::new(rate, rate, seed)
    }

    pub fn is_balanced(&self) -> bool {
        self.video_rate == self.text_rate
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, r) in [("video_rate", self.video_rate), ("text_rate", self.text_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(DataError::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// Number of slots to drop from a sequence of `len` at `rate`: the floor of
/// `rate * len`, clamped so one element survives. The 1e-9 slack absorbs
/// binary representation error (0.3 * 10 must give 3, not 2).
pub fn missing_count(rate: f64, len: usize) -> usize {
    let raw = (rate * len as f64 + 1e-9).floor() as usize;
    raw.min(len.saturating_sub(1))
}

/// Fraction of missing slots.
pub fn incompleteness_rate(seq: &FeatureSequence) -> f64 {
    (seq.len() - seq.present_count()) as f64 / seq.len() as f64
}

fn mask_sequence(seq: &FeatureSequence, rate: f64, rng: &mut seed::Rng) -> FeatureSequence {
    let present: Vec<usize> = seq.present().map(|(i, _)| i).collect();
    let count = missing_count(rate, seq.len()).min(present.len().saturating_sub(1));
    if count == 0 {
        return seq.clone();
    }
    let picked: Vec<usize> = index::sample(rng, present.len(), count)
        .into_iter()
        .map(|j| present[j])
        .collect();
    seq.with_missing(&picked)
}

/// Mask `⌊rate·len⌋` uniformly chosen present slots per sequence. Each sample
/// gets its own stream derived from `(cfg.seed, sample index)`.
pub fn apply_incompleteness(
    dataset: &[PairedSample],
    cfg: &IncompletenessConfig,
) -> Result<Vec<PairedSample>, DataError> {
    cfg.validate()?;
    Ok(dataset
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let mut rng = seed::rng_indexed(cfg.seed, "incompleteness", n as u64);
            let mut out = s.clone();
            out.video = mask_sequence(&s.video, cfg.video_rate, &mut rng);
            out.text = mask_sequence(&s.text, cfg.text_rate, &mut rng);
            out
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

pub const DEFAULT_VOCABULARY: [&str; 16] = [
    "red car", "small dog", "old man", "green field", "wooden table", "city street",
    "young woman", "white cat", "blue sky", "kitchen counter", "soccer ball", "grand piano",
    "running water", "black horse", "snowy mountain", "busy market",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_pairs: usize,
    pub frames_per_video: usize,
    pub words_per_text: usize,
    pub dim: usize,
    pub latent_dim: usize,
    pub noise_std: f64,
    pub vocabulary: Vec<String>,
    /// Number of latent keyframes each trajectory passes through.
    pub keyframes: usize,
    /// Spread of each keyframe around its cluster centre.
    pub keyframe_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_pairs: 64,
            frames_per_video: 16,
            words_per_text: 12,
            dim: 32,
            latent_dim: 8,
            noise_std: 0.0,
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            keyframes: 8,
            keyframe_jitter: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("num_pairs", self.num_pairs),
            ("frames_per_video", self.frames_per_video),
            ("words_per_text", self.words_per_text),
            ("dim", self.dim),
            ("latent_dim", self.latent_dim),
            ("keyframes", self.keyframes),
            ("vocabulary size", self.vocabulary.len()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DataError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.keyframe_jitter >= 0.0 && self.keyframe_jitter.is_finite()) {
            return Err(DataError::Config("keyframe_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// The hidden generative structure behind a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    /// `dim × latent_dim`, shared by both modalities.
    pub projection: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
    /// Per pair: the cluster index and latent state of every keyframe.
    pub keyframes: Vec<Vec<(usize, Vec<f64>)>>,
}

impl SyntheticWorld {
    pub fn project(&self, latent: &[f64]) -> Vec<f64> {
        self.projection.iter().map(|row| crate::ops::dot(row, latent)).collect()
    }

    /// Latent state of pair `n` at normalised time `tau` in [0, 1]:
    /// piecewise-linear interpolation between keyframes.
    pub fn latent_at(&self, n: usize, tau: f64) -> Vec<f64> {
        let keys = &self.keyframes[n];
        if keys.len() == 1 {
            return keys[0].1.clone();
        }
        let pos = tau.clamp(0.0, 1.0) * (keys.len() - 1) as f64;
        let seg = (pos.floor() as usize).min(keys.len() - 2);
        let w = pos - seg as f64;
        keys[seg]
            .1
            .iter()
            .zip(&keys[seg + 1].1)
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect()
    }
}

/// Sample position of element `i` of `len` on the shared time axis.
pub fn element_time(i: usize, len: usize) -> f64 {
    (i as f64 + 0.5) / len as f64
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<PairedSample>, DataError> {
    generate_synthetic_detailed(cfg).map(|(samples, _)| samples)
}

/// Generate the corpus and also return its latent structure.
///
/// Every pair follows a trajectory through `keyframes` latent states, each a
/// jittered cluster centre. Frames and words sample that trajectory at evenly
/// spaced times and are mapped to feature space by the same projection, so a
/// missing element can be recovered from its temporal and cross-modal
/// neighbours. Phrases are the vocabulary entries of the visited clusters and
/// the label is the cluster of the first keyframe.
pub fn generate_synthetic_detailed(
    cfg: &SyntheticConfig,
) -> Result<(Vec<PairedSample>, SyntheticWorld), DataError> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, "synthetic");
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let gaussian = |rng: &mut seed::Rng| -> f64 { StandardNormal.sample(rng) };

    let projection: Vec<Vec<f64>> = (0..cfg.dim)
        .map(|_| (0..cfg.latent_dim).map(|_| gaussian(&mut rng) * scale).collect())
        .collect();
    let centers: Vec<Vec<f64>> = (0..cfg.vocabulary.len())
        .map(|_| (0..cfg.latent_dim).map(|_| gaussian(&mut rng)).collect())
        .collect();

    let mut keyframes = Vec::with_capacity(cfg.num_pairs);
    for _ in 0..cfg.num_pairs {
        let keys: Vec<(usize, Vec<f64>)> = (0..cfg.keyframes)
            .map(|_| {
                let c = rng.random_range(0..centers.len());
                let state = centers[c]
                    .iter()
                    .map(|&x| x + cfg.keyframe_jitter * gaussian(&mut rng))
                    .collect();
                (c, state)
            })
            .collect();
        keyframes.push(keys);
    }
    let world = SyntheticWorld { projection, centers, keyframes };

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| DataError::Config(e.to_string()))?;
    let mut noise_rng = seed::rng(cfg.seed, "synthetic-noise");
    let mut observe = |latent: &[f64]| -> Vec<f64> {
        let mut x = world.project(latent);
        if cfg.noise_std > 0.0 {
            x.iter_mut().for_each(|v| *v += noise.sample(&mut noise_rng));
        }
        x
    };

    let mut samples = Vec::with_capacity(cfg.num_pairs);
    for n in 0..cfg.num_pairs {
        let frames: Vec<Vec<f64>> = (0..cfg.frames_per_video)
            .map(|t| observe(&world.latent_at(n, element_time(t, cfg.frames_per_video))))
            .collect();
        let words: Vec<Vec<f64>> = (0..cfg.words_per_text)
            .map(|m| observe(&world.latent_at(n, element_time(m, cfg.words_per_text))))
            .collect();
        let mut sample = PairedSample::new(
            format!("pair-{n:05}"),
            FeatureSequence::complete(Modality::Video, frames)?,
            FeatureSequence::complete(Modality::Text, words)?,
        )?;
        let keys = &world.keyframes[n];
        sample.phrases = Some(keys.iter().map(|(c, _)| cfg.vocabulary[*c].clone()).collect());
        sample.label = Some(keys[0].0 as i64);
        samples.push(sample);
    }
    Ok((samples, world))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(mask: &[bool]) -> FeatureSequence {
        let elements = mask.iter().map(|_| vec![1.0, 2.0]).collect();
        FeatureSequence::new(Modality::Video, elements, mask.to_vec()).unwrap()
    }

    #[test]
    fn rate_of_hand_masks() {
        let mut m = vec![true; 10];
        m[..3].iter_mut().for_each(|x| *x = false);
        assert_eq!(incompleteness_rate(&seq(&m)), 0.3);
        assert_eq!(incompleteness_rate(&seq(&[true; 4])), 0.0);
        assert_eq!(incompleteness_rate(&seq(&[false, true])), 0.5);
    }

    #[test]
    fn missing_count_floors_and_clamps() {
        assert_eq!(missing_count(0.3, 10), 3);
        assert_eq!(missing_count(0.99, 5), 4);
        assert_eq!(missing_count(1.0, 1), 0);
        assert_eq!(missing_count(0.0, 7), 0);
        assert_eq!(missing_count(0.3, 16), 4);
    }

    #[test]
    fn mask_length_mismatch_is_rejected() {
        let err = FeatureSequence::new(Modality::Text, vec![vec![1.0]; 3], vec![true; 2]);
        assert!(matches!(err, Err(DataError::Invalid(_))));
    }

    #[test]
    fn missing_slots_are_zeroed_and_hidden() {
        let s = FeatureSequence::new(
            Modality::Video,
            vec![vec![1.0, 1.0], vec![5.0, 5.0]],
            vec![true, false],
        )
        .unwrap();
        assert_eq!(s.raw_elements()[1], vec![0.0, 0.0]);
        assert!(s.get(1).is_none());
        assert_eq!(s.missing_indices(), vec![1]);
    }

    #[test]
    fn incompleteness_masks_exact_counts() {
        let cfg = SyntheticConfig { num_pairs: 3, frames_per_video: 10, ..Default::default() };
        let data = generate_synthetic(&cfg).unwrap();
        let out = apply_incompleteness(&data, &IncompletenessConfig::balanced(0.3, 1)).unwrap();
        for s in &out {
            assert_eq!(s.video.len() - s.video.present_count(), 3);
            assert_eq!(s.text.len() - s.text.present_count(), 3);
            for i in s.video.missing_indices() {
                assert!(s.video.raw_elements()[i].iter().all(|&x| x == 0.0));
            }
        }
        // input untouched
        assert!(data.iter().all(PairedSample::is_complete));
    }

    #[test]
    fn zero_rate_is_identity_and_high_rate_clamps() {
        let cfg = SyntheticConfig { num_pairs: 2, frames_per_video: 5, ..Default::default() };
        let data = generate_synthetic(&cfg).unwrap();
        let same = apply_incompleteness(&data, &IncompletenessConfig::balanced(0.0, 9)).unwrap();
        assert_eq!(same, data);
        let heavy = apply_incompleteness(&data, &IncompletenessConfig::new(0.99, 0.0, 9)).unwrap();
        assert!(heavy.iter().all(|s| s.video.present_count() == 1));
    }

    #[test]
    fn rates_outside_unit_interval_are_config_errors() {
        let r = apply_incompleteness(&[], &IncompletenessConfig::new(1.2, 0.0, 0));
        assert!(matches!(r, Err(DataError::Config(_))));
        let r = apply_incompleteness(&[], &IncompletenessConfig::new(0.2, -0.1, 0));
        assert!(matches!(r, Err(DataError::Config(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            num_pairs: 4,
            frames_per_video: 8,
            words_per_text: 6,
            dim: 16,
            noise_std: 0.1,
            seed: 7,
            ..Default::default()
        };
        let a: Vec<String> = generate_synthetic(&cfg).unwrap().iter().map(record_to_string).collect();
        let b: Vec<String> = generate_synthetic(&cfg).unwrap().iter().map(record_to_string).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn single_pair_is_fully_present() {
        let cfg = SyntheticConfig { num_pairs: 1, ..Default::default() };
        let data = generate_synthetic(&cfg).unwrap();
        assert_eq!(data.len(), 1);
        assert!(data[0].is_complete());
    }

    #[test]
    fn noise_free_frames_and_words_share_latent_states() {
        // With T == M both modalities sample the trajectory at the same times.
        let cfg = SyntheticConfig {
            num_pairs: 3,
            frames_per_video: 6,
            words_per_text: 6,
            dim: 12,
            latent_dim: 4,
            seed: 3,
            ..Default::default()
        };
        let (data, world) = generate_synthetic_detailed(&cfg).unwrap();
        for (n, s) in data.iter().enumerate() {
            for t in 0..6 {
                let expected = world.project(&world.latent_at(n, element_time(t, 6)));
                assert_eq!(s.video.get(t).unwrap(), expected.as_slice());
                assert_eq!(s.video.get(t), s.text.get(t));
            }
        }
    }

    #[test]
    fn invalid_synthetic_config_is_rejected() {
        let cfg = SyntheticConfig { dim: 0, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(DataError::Config(_))));
        let cfg = SyntheticConfig { noise_std: -1.0, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(DataError::Config(_))));
    }

    #[test]
    fn load_reports_line_of_bad_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let cfg = SyntheticConfig { num_pairs: 1, frames_per_video: 2, words_per_text: 2, dim: 2, ..Default::default() };
        let good = record_to_string(&generate_synthetic(&cfg).unwrap()[0]);
        let bad = r#"{"id":"x","video":[[1.0,2.0]],"video_mask":[true,false],"text":[[1.0,2.0]],"text_mask":[true]}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_dataset(&path) {
            Err(DataError::Format { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("mask length"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn load_empty_file_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
        assert!(matches!(load_dataset(dir.path().join("nope")), Err(DataError::Io { .. })));
    }

    #[test]
    fn save_then_load_preserves_order_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let cfg = SyntheticConfig { num_pairs: 2, noise_std: 0.3, seed: 11, ..Default::default() };
        let data = generate_synthetic(&cfg).unwrap();
        let data = apply_incompleteness(&data, &IncompletenessConfig::balanced(0.3, 2)).unwrap();
        save_dataset(&path, &data).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(back[0].id, "pair-00000");
        assert_eq!(back[1].id, "pair-00001");
    }
}
