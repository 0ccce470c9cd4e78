//! Two-tower encoder used for both teacher and student, with a hand-written
//! backward pass through towers, completion graphs and the prototype bank.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{
    self, AffinityGraph, ApproxError, BankCache, CompletionParams, CompletionPlan, PrototypeBank, Refiner,
    SlotPlan, BANK_PARAM_NAMES,
};
use crate::dataset::{FeatureSequence, Modality, PairedSample};
use crate::distill::{self, DecisiveFeatures, DistillError, LinearSoftmaxHead, TaskHead};
use crate::integrate::{self, IntegrateError, PhraseSet, WeightMatrix};
use crate::ops;
use crate::seed;
use crate::similarity::NodeId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0:?} sequence has no present elements")]
    AllMissing(Modality),
    #[error("sample {0} has no label")]
    MissingLabel(String),
    #[error("label {label} of sample {id} is outside 0..{classes}")]
    BadLabel { id: String, label: i64, classes: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid loss specification: {0}")]
    Spec(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature dimension `D`.
    pub dim: usize,
    /// Embedding dimension `d` of both towers.
    pub embed_dim: usize,
    pub prototypes: usize,
    pub heads: usize,
    pub bank_hidden: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 32, embed_dim: 32, prototypes: 8, heads: 4, bank_hidden: 32, classes: 16 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if [self.dim, self.embed_dim, self.prototypes, self.heads, self.bank_hidden, self.classes].contains(&0) {
            return Err(ModelError::Config("all sizes must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// `x ↦ tanh(x W1 + b1) W2 + b2`, applied per element and mean-pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl Tower {
    pub fn random<R: rand::Rng + ?Sized>(dim: usize, embed: usize, rng: &mut R) -> Self {
        Self {
            w1: ops::uniform_init(dim, embed, dim, rng),
            b1: ops::uniform_init(1, embed, dim, rng),
            w2: ops::uniform_init(embed, embed, embed, rng),
            b2: ops::uniform_init(1, embed, embed, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Array2<f64>| Array2::zeros(m.raw_dim());
        Self { w1: z(&self.w1), b1: z(&self.b1), w2: z(&self.w2), b2: z(&self.b2) }
    }

    /// Returns the per-element outputs and the hidden activations.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let e = h.dot(&self.w2) + &self.b2;
        (e, h)
    }

    /// Mean of the per-element outputs.
    pub fn pool(&self, x: &Array2<f64>) -> Vec<f64> {
        let (e, _) = self.forward(x);
        e.mean_axis(Axis(0)).expect("at least one row").to_vec()
    }

    /// Backward through pooling: accumulates parameter gradients and returns
    /// the gradient with respect to every input row.
    fn backward_pooled(&self, x: &Array2<f64>, h: &Array2<f64>, df: &[f64], grad: &mut Tower) -> Array2<f64> {
        let n = x.nrows() as f64;
        let de = Array2::from_shape_fn((x.nrows(), df.len()), |(_, j)| df[j] / n);
        grad.w2 += &h.t().dot(&de);
        grad.b2 += &de.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dpre = de.dot(&self.w2.t()) * h.mapv(|v| 1.0 - v * v);
        grad.w1 += &x.t().dot(&dpre);
        grad.b1 += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        dpre.dot(&self.w1.t())
    }
}

/// Teacher and student share this architecture. A zero-initialised copy
/// doubles as the gradient store.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    pub bank: PrototypeBank,
    pub video: Tower,
    pub text: Tower,
    pub head_a: LinearSoftmaxHead,
    pub head_b: LinearSoftmaxHead,
}

const TOWER_PARAM_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl TwoTowerModel {
    /// Uniform `±1/√fan_in` initialisation from the `init` stage of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(seed, "init");
        let bank = PrototypeBank::random(config.dim, config.prototypes, config.heads, config.bank_hidden, &mut rng)?;
        let video = Tower::random(config.dim, config.embed_dim, &mut rng);
        let text = Tower::random(config.dim, config.embed_dim, &mut rng);
        let head_a = LinearSoftmaxHead::random(config.embed_dim, config.classes, &mut rng);
        let head_b = LinearSoftmaxHead::random(config.embed_dim, config.classes, &mut rng);
        Ok(Self { bank, video, text, head_a, head_b })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.bank.dim(),
            embed_dim: self.video.w1.ncols(),
            prototypes: self.bank.num_prototypes(),
            heads: self.bank.heads,
            bank_hidden: self.bank.hidden(),
            classes: self.head_a.num_classes(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bank: self.bank.zeros_like(),
            video: self.video.zeros_like(),
            text: self.text.zeros_like(),
            head_a: self.head_a.zeros_like(),
            head_b: self.head_b.zeros_like(),
        }
    }

    pub fn tower(&self, modality: Modality) -> &Tower {
        match modality {
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        }
    }

    pub fn param_names() -> Vec<String> {
        let mut names: Vec<String> = BANK_PARAM_NAMES.iter().map(|n| format!("bank.{n}")).collect();
        for tower in ["video", "text"] {
            names.extend(TOWER_PARAM_NAMES.iter().map(|n| format!("{tower}.{n}")));
        }
        for head in ["head_a", "head_b"] {
            names.extend(["weight", "bias"].iter().map(|n| format!("{head}.{n}")));
        }
        names
    }

    /// Every parameter matrix, in [`Self::param_names`] order.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = self.bank.params().into_iter().collect();
        for t in [&self.video, &self.text] {
            out.extend([&t.w1, &t.b1, &t.w2, &t.b2]);
        }
        for h in [&self.head_a, &self.head_b] {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self.bank.params_mut().into_iter().collect();
        for t in [&mut self.video, &mut self.text] {
            out.extend([&mut t.w1, &mut t.b1, &mut t.w2, &mut t.b2]);
        }
        for h in [&mut self.head_a, &mut self.head_b] {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        Self::param_names().into_iter().zip(self.params()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, scale: f64, other: &TwoTowerModel) {
        for (p, q) in self.params_mut().into_iter().zip(other.params()) {
            p.scaled_add(scale, q);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    fn check_dim(&self, pair: &PairedSample) -> Result<(), ModelError> {
        if pair.video.dim() != self.bank.dim() || pair.text.dim() != self.bank.dim() {
            return Err(ModelError::Approx(ApproxError::DimMismatch {
                expected: self.bank.dim(),
                got: if pair.video.dim() != self.bank.dim() { pair.video.dim() } else { pair.text.dim() },
            }));
        }
        Ok(())
    }

    fn pool_present(&self, seq: &FeatureSequence) -> Result<Vec<f64>, ModelError> {
        let rows: Vec<&[f64]> = seq.present().map(|(_, v)| v).collect();
        if rows.is_empty() {
            return Err(ModelError::AllMissing(seq.modality()));
        }
        Ok(self.tower(seq.modality()).pool(&approx::rows_to_matrix(&rows, seq.dim())))
    }

    /// Reconstruct present elements through the bank, run each tower over
    /// them and mean-pool. Missing slots are ignored.
    pub fn encode(&self, pair: &PairedSample) -> Result<DecisiveFeatures, ModelError> {
        self.check_dim(pair)?;
        for seq in [&pair.video, &pair.text] {
            if seq.present_count() == 0 {
                return Err(ModelError::AllMissing(seq.modality()));
            }
        }
        let video = approx::reconstruct_with_prototypes(&pair.video, &self.bank)?;
        let text = approx::reconstruct_with_prototypes(&pair.text, &self.bank)?;
        Ok(DecisiveFeatures::from_towers(self.pool_present(&video)?, self.pool_present(&text)?))
    }

    /// Towers only, for a pair whose elements already live in the bank's
    /// reconstructed space (the output of [`approx::complete_pair`]).
    pub fn encode_completed(&self, pair: &PairedSample) -> Result<DecisiveFeatures, ModelError> {
        self.check_dim(pair)?;
        Ok(DecisiveFeatures::from_towers(self.pool_present(&pair.video)?, self.pool_present(&pair.text)?))
    }

    /// Complete the pair in reconstructed space, then encode it.
    pub fn encode_with_completion(
        &self,
        pair: &PairedSample,
        params: CompletionParams,
        refiner: &dyn Refiner,
    ) -> Result<DecisiveFeatures, ModelError> {
        self.check_dim(pair)?;
        let completion = approx::complete_pair(pair, Some(&self.bank), params, refiner)?;
        self.encode_completed(&completion.pair)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        let mut entries = vec![("bank.num_heads".to_string(), Array2::from_elem((1, 1), self.bank.heads as f64))];
        entries.extend(self.named_params().into_iter().map(|(n, p)| (n, p.clone())));
        ModelSnapshot { entries }
    }

    pub fn from_snapshot(snapshot: &ModelSnapshot) -> Result<Self, ModelError> {
        let mut it = snapshot.entries.iter();
        let heads = match it.next() {
            Some((name, m)) if name == "bank.num_heads" && m.dim() == (1, 1) => m[[0, 0]],
            _ => return Err(ModelError::Snapshot("first entry must be bank.num_heads".into())),
        };
        if !(heads >= 1.0 && heads.fract() == 0.0) {
            return Err(ModelError::Snapshot(format!("bad head count {heads}")));
        }
        let names = Self::param_names();
        if snapshot.entries.len() != names.len() + 1 {
            return Err(ModelError::Snapshot(format!(
                "expected {} entries, found {}",
                names.len() + 1,
                snapshot.entries.len()
            )));
        }
        let mut mats = Vec::with_capacity(names.len());
        for (want, (name, m)) in names.iter().zip(it) {
            if want != name {
                return Err(ModelError::Snapshot(format!("expected {want}, found {name}")));
            }
            mats.push(m.clone());
        }
        let mut mats = mats.into_iter();
        let mut next = || mats.next().expect("length checked");
        let bank = PrototypeBank {
            heads: heads as usize,
            prototypes: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        bank.validate()?;
        let mut tower = || Tower { w1: next(), b1: next(), w2: next(), b2: next() };
        let video = tower();
        let text = tower();
        let mut head = || LinearSoftmaxHead { weight: next(), bias: next() };
        let head_a = head();
        let head_b = head();
        let model = Self { bank, video, text, head_a, head_b };
        let cfg = model.config();
        let d = cfg.dim;
        let e = cfg.embed_dim;
        let expected: Vec<(usize, usize)> = vec![
            (d, e), (1, e), (e, e), (1, e),
            (d, e), (1, e), (e, e), (1, e),
            (e, cfg.classes), (1, cfg.classes), (e, cfg.classes), (1, cfg.classes),
        ];
        let got: Vec<(usize, usize)> = model.params()[BANK_PARAM_NAMES.len()..].iter().map(|m| m.dim()).collect();
        if got != expected {
            return Err(ModelError::Snapshot(format!("inconsistent tower/head shapes {got:?}")));
        }
        if !model.is_finite() {
            return Err(ModelError::Snapshot("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.snapshot().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_snapshot(&ModelSnapshot::load(path)?)
    }
}

/// Ordered `(name, matrix)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub entries: Vec<(String, Array2<f64>)>,
}

const MAGIC: &[u8; 4] = b"MMND";
const FORMAT_VERSION: u32 = 1;

impl ModelSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ModelError> {
        let err = |m: &str| ModelError::Snapshot(m.to_string());
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != MAGIC {
            return Err(err("bad magic bytes"));
        }
        let read_u32 = |b: &mut &[u8]| -> Result<u32, ModelError> {
            let mut buf = [0u8; 4];
            b.read_exact(&mut buf).map_err(|_| err("truncated"))?;
            Ok(u32::from_le_bytes(buf))
        };
        let version = read_u32(&mut bytes)?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Snapshot(format!("unsupported format version {version}")));
        }
        let mut entries = Vec::new();
        while !bytes.is_empty() {
            let len = read_u32(&mut bytes)? as usize;
            if bytes.len() < len {
                return Err(err("truncated name"));
            }
            let name = std::str::from_utf8(&bytes[..len]).map_err(|_| err("name is not UTF-8"))?.to_string();
            bytes = &bytes[len..];
            let rows = read_u32(&mut bytes)? as usize;
            let cols = read_u32(&mut bytes)? as usize;
            let count = rows.checked_mul(cols).ok_or_else(|| err("matrix too large"))?;
            if bytes.len() / 8 < count {
                return Err(err("truncated matrix"));
            }
            let values: Vec<f64> = bytes[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            bytes = &bytes[count * 8..];
            let m = Array2::from_shape_vec((rows, cols), values).map_err(|e| ModelError::Snapshot(e.to_string()))?;
            entries.push((name, m));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let io = |source| ModelError::Io { path: path.to_path_buf(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Losses over a batch
// ---------------------------------------------------------------------------

/// Task loss inside `L_1`: the classification heads, or the integration
/// contrastive loss for the retrieval configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLoss {
    Mlt,
    Retrieval,
}

/// Weights of `w0 L_0 + α₁ (β L_KD + (1 − β) L_task) + α₂ L_2`. Terms with a
/// zero coefficient are skipped entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub w0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub mu_mlt: f64,
    pub mu_dir: f64,
    pub alpha_w: f64,
    pub sigma_kd: f64,
    pub sigma_nce: f64,
    pub task: TaskLoss,
    pub completion: CompletionParams,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            w0: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 0.5,
            mu_mlt: 0.5,
            mu_dir: 0.5,
            alpha_w: 0.3,
            sigma_kd: 2.0,
            sigma_nce: 0.07,
            task: TaskLoss::Mlt,
            completion: CompletionParams::default(),
        }
    }
}

impl LossSpec {
    /// Every coefficient zero: the loss is identically 0.
    pub fn zero() -> Self {
        Self { w0: 0.0, alpha1: 0.0, alpha2: 0.0, ..Self::default() }
    }

    /// The teacher objective: the task loss alone.
    pub fn teacher(self) -> Self {
        Self { w0: 0.0, alpha1: 1.0, alpha2: 0.0, beta: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Spec(m));
        for (name, v) in [("w0", self.w0), ("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("beta", self.beta), ("mu_dir", self.mu_dir), ("alpha_w", self.alpha_w)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.mu_mlt > 0.0 && self.mu_mlt < 1.0) {
            return bad(format!("mu_mlt must lie in (0, 1), got {}", self.mu_mlt));
        }
        for (name, v) in [("sigma_kd", self.sigma_kd), ("sigma_nce", self.sigma_nce)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        self.completion.validate()?;
        Ok(())
    }

    fn kd_weight(&self) -> f64 {
        self.alpha1 * self.beta
    }

    fn task_weight(&self) -> f64 {
        self.alpha1 * (1.0 - self.beta)
    }
}

/// Per-term values of one batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l0: f64,
    pub l_kd: f64,
    pub l_task: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

struct Side {
    /// Positions of the present elements, in row order of the bank input.
    present: Vec<usize>,
    cache: BankCache,
    recon: FeatureSequence,
}

struct SampleForward {
    video: Side,
    text: Side,
    plan: CompletionPlan,
    graphs: Vec<(Modality, AffinityGraph)>,
    xv: Array2<f64>,
    hv: Array2<f64>,
    xt: Array2<f64>,
    ht: Array2<f64>,
    feats: DecisiveFeatures,
}

impl SampleForward {
    fn slot_plans(&self) -> impl Iterator<Item = &SlotPlan> {
        self.plan.video.iter().chain(&self.plan.text)
    }
}

fn side_forward(bank: &PrototypeBank, seq: &FeatureSequence) -> Result<Side, ModelError> {
    let (present, rows): (Vec<usize>, Vec<&[f64]>) = seq.present().unzip();
    if present.is_empty() {
        return Err(ModelError::AllMissing(seq.modality()));
    }
    let (y, cache) = bank.forward(&approx::rows_to_matrix(&rows, seq.dim()))?;
    let mut recon = seq.clone();
    for (r, &i) in present.iter().enumerate() {
        recon.replace(i, y.row(r).to_vec());
    }
    Ok(Side { present, cache, recon })
}

fn check_plan(plan: &CompletionPlan, video: &FeatureSequence, text: &FeatureSequence) -> Result<(), ModelError> {
    let seq = |m: Modality| if m == Modality::Video { video } else { text };
    for (m, slots) in [(Modality::Video, &plan.video), (Modality::Text, &plan.text)] {
        let planned: Vec<usize> = slots.iter().map(|s| s.slot.index).collect();
        if planned != seq(m).missing_indices() {
            return Err(ModelError::Batch(format!("plan does not cover the missing {m:?} slots")));
        }
        for s in slots {
            let ok = s.slot.modality == m
                && std::iter::once(s.anchor).chain(s.neighbors.iter().copied()).all(|id| seq(id.modality).is_present(id.index))
                && !s.neighbors.is_empty();
            if !ok {
                return Err(ModelError::Batch("plan references a missing element".into()));
            }
        }
    }
    Ok(())
}

fn all_rows(seq: &FeatureSequence) -> Array2<f64> {
    let rows: Vec<&[f64]> = seq.raw_elements().iter().map(Vec::as_slice).collect();
    approx::rows_to_matrix(&rows, seq.dim())
}

impl TwoTowerModel {
    fn forward_sample(
        &self,
        pair: &PairedSample,
        params: CompletionParams,
        plan: Option<&CompletionPlan>,
    ) -> Result<SampleForward, ModelError> {
        self.check_dim(pair)?;
        let video = side_forward(&self.bank, &pair.video)?;
        let text = side_forward(&self.bank, &pair.text)?;
        let plan = match plan {
            Some(p) => {
                check_plan(p, &video.recon, &text.recon)?;
                p.clone()
            }
            None => approx::plan_completion(&video.recon, &text.recon, params)?,
        };
        let mut cv = video.recon.clone();
        let mut ct = text.recon.clone();
        let mut graphs = Vec::with_capacity(plan.video.len() + plan.text.len());
        for s in plan.slots() {
            let g = approx::slot_graph(&video.recon, &text.recon, s)?;
            let target = if s.slot.modality == Modality::Video { &mut cv } else { &mut ct };
            target.fill(s.slot.index, approx::approximate_feature(&g));
            graphs.push((s.slot.modality, g));
        }
        let xv = all_rows(&cv);
        let xt = all_rows(&ct);
        let (ev, hv) = self.video.forward(&xv);
        let (et, ht) = self.text.forward(&xt);
        let mean = |e: Array2<f64>| e.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let feats = DecisiveFeatures::from_towers(mean(ev), mean(et));
        Ok(SampleForward { video, text, plan, graphs, xv, hv, xt, ht, feats })
    }

    /// `l0_scale[m]` is `w0 · 2 / N_m` for the modality of the slot.
    fn backward_sample(
        &self,
        sf: &SampleForward,
        df_v: &[f64],
        df_t: &[f64],
        l0_scale: [f64; 2],
    ) -> TwoTowerModel {
        let mut grad = self.zeros_like();
        let dxv = self.video.backward_pooled(&sf.xv, &sf.hv, df_v, &mut grad.video);
        let dxt = self.text.backward_pooled(&sf.xt, &sf.ht, df_t, &mut grad.text);
        let mut dy = [Array2::zeros(dxv.raw_dim()), Array2::zeros(dxt.raw_dim())];
        let slot_of = |m: Modality| if m == Modality::Video { 0 } else { 1 };
        for (m, dx, side) in [(Modality::Video, &dxv, &sf.video), (Modality::Text, &dxt, &sf.text)] {
            for &i in &side.present {
                dy[slot_of(m)].row_mut(i).assign(&dx.row(i));
            }
        }
        for (plan, (m, graph)) in sf.slot_plans().zip(&sf.graphs) {
            let dx = if *m == Modality::Video { &dxv } else { &dxt };
            let approx_vec = approx::approximate_feature(graph);
            let mut upstream = dx.row(plan.slot.index).to_vec();
            let scale = l0_scale[slot_of(*m)];
            let diff: Vec<f64> = approx_vec.iter().zip(&graph.nodes[0]).map(|(v, a)| v - a).collect();
            ops::axpy(&mut upstream, scale, &diff);
            let mut node_grads = approx::approximate_backward(graph, &upstream);
            ops::axpy(&mut node_grads[0], -scale, &diff);
            let ids: Vec<NodeId> = std::iter::once(plan.anchor).chain(plan.neighbors.iter().copied()).collect();
            for (id, g) in ids.iter().zip(&node_grads) {
                let mut row = dy[slot_of(id.modality)].row_mut(id.index);
                row += &ndarray::ArrayView1::from(g.as_slice());
            }
        }
        for (m, side) in [(Modality::Video, &sf.video), (Modality::Text, &sf.text)] {
            let d = &dy[slot_of(m)];
            let rows = Array2::from_shape_fn((side.present.len(), d.ncols()), |(r, c)| d[[side.present[r], c]]);
            self.bank.backward(&side.cache, &rows, &mut grad.bank);
        }
        grad
    }
}

/// Completion plans of every pair at the current parameters.
pub fn plan_batch(
    model: &TwoTowerModel,
    batch: &[PairedSample],
    params: CompletionParams,
) -> Result<Vec<CompletionPlan>, ModelError> {
    batch
        .par_iter()
        .map(|p| {
            model.check_dim(p)?;
            let v = side_forward(&model.bank, &p.video)?;
            let t = side_forward(&model.bank, &p.text)?;
            Ok(approx::plan_completion(&v.recon, &t.recon, params)?)
        })
        .collect()
}

/// Phrase-overlap weights of a batch; pairs without phrases get an empty set.
pub fn batch_weights(batch: &[PairedSample]) -> WeightMatrix {
    let sets: Vec<PhraseSet> =
        batch.iter().map(|p| PhraseSet { phrases: p.phrases.clone().unwrap_or_default() }).collect();
    integrate::matching_weights(&sets)
}

fn label_of(pair: &PairedSample, classes: usize) -> Result<usize, ModelError> {
    let label = pair.label.ok_or_else(|| ModelError::MissingLabel(pair.id.clone()))?;
    if label < 0 || label as usize >= classes {
        return Err(ModelError::BadLabel { id: pair.id.clone(), label, classes });
    }
    Ok(label as usize)
}

/// Batch objective and its gradient with respect to every parameter.
///
/// Missing elements are completed inside the forward pass; the gradient flows
/// through the completion graphs into the bank but treats the discrete
/// anchor and neighbour choices as fixed.
pub fn forward_backward(
    model: &TwoTowerModel,
    batch: &[PairedSample],
    spec: &LossSpec,
    teacher_fc: Option<&[Vec<f64>]>,
) -> Result<(LossBreakdown, TwoTowerModel), ModelError> {
    forward_backward_planned(model, batch, spec, teacher_fc, None)
}

/// As [`forward_backward`], with the completion plans held fixed.
pub fn forward_backward_planned(
    model: &TwoTowerModel,
    batch: &[PairedSample],
    spec: &LossSpec,
    teacher_fc: Option<&[Vec<f64>]>,
    plans: Option<&[CompletionPlan]>,
) -> Result<(LossBreakdown, TwoTowerModel), ModelError> {
    let (loss, grad) = evaluate(model, batch, spec, teacher_fc, plans, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn evaluate(
    model: &TwoTowerModel,
    batch: &[PairedSample],
    spec: &LossSpec,
    teacher_fc: Option<&[Vec<f64>]>,
    plans: Option<&[CompletionPlan]>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<TwoTowerModel>), ModelError> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(ModelError::Batch("empty batch".into()));
    }
    if let Some(p) = plans {
        if p.len() != batch.len() {
            return Err(ModelError::Batch(format!("{} plans for {} pairs", p.len(), batch.len())));
        }
    }
    if let Some(t) = teacher_fc {
        if t.len() != batch.len() {
            return Err(ModelError::Batch(format!("{} teacher features for {} pairs", t.len(), batch.len())));
        }
    }
    let forwards: Vec<SampleForward> = batch
        .par_iter()
        .enumerate()
        .map(|(i, pair)| model.forward_sample(pair, spec.completion, plans.map(|p| &p[i])))
        .collect::<Result<_, _>>()?;

    let n = batch.len();
    let embed = model.video.w1.ncols();
    let f_v: Vec<Vec<f64>> = forwards.iter().map(|f| f.feats.f_v.clone()).collect();
    let f_t: Vec<Vec<f64>> = forwards.iter().map(|f| f.feats.f_t.clone()).collect();
    let f_c: Vec<Vec<f64>> = forwards.iter().map(|f| f.feats.f_c.clone()).collect();
    let mut df_v = vec![vec![0.0; embed]; n];
    let mut df_t = vec![vec![0.0; embed]; n];
    let mut df_c = vec![vec![0.0; embed]; n];
    let mut head_grads = (model.head_a.zeros_like(), model.head_b.zeros_like());
    let mut out = LossBreakdown::default();

    // L_0, averaged separately over the batch's missing frames and words.
    let mut counts = [0usize; 2];
    let mut sums = [0.0; 2];
    for f in &forwards {
        for (m, g) in &f.graphs {
            let k = if *m == Modality::Video { 0 } else { 1 };
            counts[k] += 1;
            sums[k] += ops::squared_distance(&g.nodes[0], &approx::approximate_feature(g));
        }
    }
    let mut l0_scale = [0.0; 2];
    if spec.w0 != 0.0 {
        for k in 0..2 {
            if counts[k] > 0 {
                out.l0 += sums[k] / counts[k] as f64;
                l0_scale[k] = spec.w0 * 2.0 / counts[k] as f64;
            }
        }
    }

    let weights = batch_weights(batch);
    let integration = |coef: f64, df_v: &mut Vec<Vec<f64>>, df_t: &mut Vec<Vec<f64>>| -> Result<f64, ModelError> {
        let (l, gv, gt) = integrate::integration_grad(&f_v, &f_t, &weights, spec.alpha_w, spec.sigma_nce, spec.mu_dir)?;
        for i in 0..n {
            ops::axpy(&mut df_v[i], coef, &gv[i]);
            ops::axpy(&mut df_t[i], coef, &gt[i]);
        }
        Ok(l)
    };

    if spec.kd_weight() != 0.0 {
        let teacher = teacher_fc.ok_or_else(|| ModelError::Spec("distillation needs teacher features".into()))?;
        let (l, g) = distill::loss_kd_grad(teacher, &f_c, spec.sigma_kd)?;
        out.l_kd = l;
        for i in 0..n {
            ops::axpy(&mut df_c[i], spec.kd_weight(), &g[i]);
        }
    }
    if spec.task_weight() != 0.0 {
        let coef = spec.task_weight();
        match spec.task {
            TaskLoss::Mlt => {
                let classes = model.head_a.num_classes();
                for i in 0..n {
                    let label = label_of(&batch[i], classes)?;
                    out.l_task +=
                        distill::loss_mlt(&f_c[i], label, &model.head_a, &model.head_b, spec.mu_mlt)? / n as f64;
                    let sa = -coef * spec.mu_mlt / n as f64;
                    let sb = -coef * (1.0 - spec.mu_mlt) / n as f64;
                    let ga = model.head_a.backward(&f_c[i], label, sa, &mut head_grads.0)?;
                    let gb = model.head_b.backward(&f_c[i], label, sb, &mut head_grads.1)?;
                    ops::axpy(&mut df_c[i], 1.0, &ga);
                    ops::axpy(&mut df_c[i], 1.0, &gb);
                }
            }
            TaskLoss::Retrieval => out.l_task = integration(coef, &mut df_v, &mut df_t)?,
        }
    }
    if spec.alpha2 != 0.0 {
        out.l2 = integration(spec.alpha2, &mut df_v, &mut df_t)?;
    }
    out.l1 = distill::loss_student(out.l_kd, out.l_task, spec.beta);
    out.total = integrate::total_loss(spec.w0 * out.l0, out.l1, out.l2, spec.alpha1, spec.alpha2);
    if !out.total.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    if !want_grad {
        return Ok((out, None));
    }

    for i in 0..n {
        ops::axpy(&mut df_v[i], 0.5, &df_c[i]);
        ops::axpy(&mut df_t[i], 0.5, &df_c[i]);
    }
    let per_sample: Vec<TwoTowerModel> = forwards
        .par_iter()
        .enumerate()
        .map(|(i, sf)| model.backward_sample(sf, &df_v[i], &df_t[i], l0_scale))
        .collect();
    // ordered reduction keeps the sum independent of thread scheduling
    let mut grad = model.zeros_like();
    for g in &per_sample {
        grad.add_scaled(1.0, g);
    }
    grad.head_a = head_grads.0;
    grad.head_b = head_grads.1;
    Ok((out, Some(grad)))
}

/// Loss only, with optional fixed plans.
pub fn batch_loss(
    model: &TwoTowerModel,
    batch: &[PairedSample],
    spec: &LossSpec,
    teacher_fc: Option<&[Vec<f64>]>,
    plans: Option<&[CompletionPlan]>,
) -> Result<LossBreakdown, ModelError> {
    evaluate(model, batch, spec, teacher_fc, plans, false).map(|(l, _)| l)
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<TwoTowerModel>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: None }
    }

    /// `v ← μ v + g`, `θ ← θ − lr · v`.
    pub fn step(&mut self, model: &mut TwoTowerModel, grad: &TwoTowerModel) {
        let v = self.velocity.get_or_insert_with(|| model.zeros_like());
        for (vp, gp) in v.params_mut().into_iter().zip(grad.params()) {
            vp.zip_mut_with(gp, |a, &b| *a = self.momentum * *a + b);
        }
        model.add_scaled(-self.lr, v);
    }
}
