//! Teacher training on complete pairs, then student training on
//! dropout-corrupted, completed pairs against the frozen teacher.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{ApproxError, CompletionParams};
use crate::dataset::{missing_count, PairedSample};
use crate::model::{self, LossBreakdown, LossSpec, ModelConfig, ModelError, Sgd, TaskLoss, TwoTowerModel};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss diverged in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("teacher parameters changed during student training")]
    TeacherMutated,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub mu_mlt: f64,
    pub mu_dir: f64,
    pub alpha_w: f64,
    pub sigma_kd: f64,
    pub sigma_nce: f64,
    pub task: TaskLoss,
    pub k: usize,
    pub k0: usize,
    /// Fraction of each student video's present frames masked per batch.
    pub dropout: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-2,
            momentum: 0.9,
            seed: 0,
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 0.5,
            mu_mlt: 0.5,
            mu_dir: 0.5,
            alpha_w: 0.3,
            sigma_kd: 2.0,
            sigma_nce: 0.07,
            task: TaskLoss::Mlt,
            k: 5,
            k0: 3,
            dropout: 0.3,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            w0: 1.0,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            beta: self.beta,
            mu_mlt: self.mu_mlt,
            mu_dir: self.mu_dir,
            alpha_w: self.alpha_w,
            sigma_kd: self.sigma_kd,
            sigma_nce: self.sigma_nce,
            task: self.task,
            completion: CompletionParams { k: self.k, k0: self.k0 },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        self.model.validate()?;
        self.loss_spec().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub role: String,
    pub config: TrainConfig,
    /// Batch-averaged losses of each epoch.
    pub curve: Vec<EpochLoss>,
    pub snapshot_path: Option<String>,
    /// Logged but never serialised, so reports stay bitwise reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Shuffled batches for one epoch. A trailing batch of one pair is merged
/// into its predecessor because the contrastive and distillation terms need
/// at least two.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_indexed(seed, "shuffle", epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l0: sum(|l| l.l0),
        l_kd: sum(|l| l.l_kd),
        l_task: sum(|l| l.l_task),
        l1: sum(|l| l.l1),
        l2: sum(|l| l.l2),
        total: sum(|l| l.total),
    }
}

/// Mask `⌊rate · present⌋` of the present frames of every video.
pub fn video_dropout(batch: &mut [PairedSample], rate: f64, seed: u64, batch_index: u64) {
    if rate == 0.0 {
        return;
    }
    let mut rng = seed::rng_indexed(seed, "dropout", batch_index);
    for pair in batch {
        let present: Vec<usize> = pair.video.present().map(|(i, _)| i).collect();
        let count = missing_count(rate, present.len());
        if count == 0 {
            continue;
        }
        let drop: Vec<usize> =
            rand::seq::index::sample(&mut rng, present.len(), count).into_iter().map(|j| present[j]).collect();
        pair.video = pair.video.with_missing(&drop);
    }
}

fn run(
    role: &str,
    data: &[PairedSample],
    cfg: &TrainConfig,
    spec: LossSpec,
    teacher_fc: Option<&[Vec<f64>]>,
    dropout: f64,
) -> Result<(TwoTowerModel, TrainReport), TrainError> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(TrainError::Config(format!("need at least 2 pairs, got {}", data.len())));
    }
    let started = std::time::Instant::now();
    let mut model = TwoTowerModel::new(&cfg.model, cfg.seed)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0u64;
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let mut batch: Vec<PairedSample> = idx.iter().map(|&i| data[i].clone()).collect();
            video_dropout(&mut batch, dropout, cfg.seed, batch_index);
            batch_index += 1;
            let teacher: Option<Vec<Vec<f64>>> = teacher_fc.map(|t| idx.iter().map(|&i| t[i].clone()).collect());
            let (loss, grad) = match model::forward_backward(&model, &batch, &spec, teacher.as_deref()) {
                Err(ModelError::NonFiniteLoss | ModelError::Approx(ApproxError::NonFinite(_))) => {
                    return Err(TrainError::NonFiniteLoss { epoch })
                }
                other => other?,
            };
            opt.step(&mut model, &grad);
            if !model.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            losses.push(loss);
        }
        let loss = mean_breakdown(&losses);
        log::info!("{role} epoch {epoch}: total {:.6}", loss.total);
        curve.push(EpochLoss { epoch, loss });
    }
    let report = TrainReport {
        role: role.to_string(),
        config: cfg.clone(),
        curve,
        snapshot_path: None,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Minimise the task loss alone on complete pairs.
pub fn train_teacher(data: &[PairedSample], cfg: &TrainConfig) -> Result<(TwoTowerModel, TrainReport), TrainError> {
    if let Some(p) = data.iter().find(|p| !p.is_complete()) {
        return Err(TrainError::Config(format!("teacher needs complete pairs; {} has missing elements", p.id)));
    }
    run("teacher", data, cfg, cfg.loss_spec().teacher(), None, 0.0)
}

/// Minimise `L_0 + α₁ L_1 + α₂ L_2` on dropout-corrupted pairs, distilling
/// from the frozen teacher's features of the uncorrupted pairs.
pub fn train_student(
    data: &[PairedSample],
    teacher: &TwoTowerModel,
    cfg: &TrainConfig,
) -> Result<(TwoTowerModel, TrainReport), TrainError> {
    cfg.validate()?;
    if teacher.config() != cfg.model {
        return Err(TrainError::Config("teacher architecture differs from the configured model".into()));
    }
    let before = teacher.snapshot().to_bytes();
    let teacher_fc: Vec<Vec<f64>> =
        data.iter().map(|p| teacher.encode(p).map(|f| f.f_c)).collect::<Result<_, _>>()?;
    let out = run("student", data, cfg, cfg.loss_spec(), Some(&teacher_fc), cfg.dropout)?;
    if teacher.snapshot().to_bytes() != before {
        return Err(TrainError::TeacherMutated);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::gradcheck::small_config;

    fn data(n: usize) -> Vec<PairedSample> {
        generate_synthetic(&SyntheticConfig {
            num_pairs: n,
            frames_per_video: 6,
            words_per_text: 5,
            dim: 8,
            latent_dim: 4,
            vocabulary: (0..4).map(|i| format!("adj{i} noun{i}")).collect(),
            seed: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 3, batch_size: 4, model: small_config(), sigma_nce: 0.2, ..Default::default() }
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let c = TrainConfig { epochs: 0, ..cfg() };
        let (m, r) = train_teacher(&data(6), &c).unwrap();
        assert_eq!(m, TwoTowerModel::new(&c.model, c.seed).unwrap());
        assert!(r.curve.is_empty());
    }

    #[test]
    fn batches_cover_every_pair_once() {
        let b = epoch_batches(9, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn dropout_keeps_a_frame_and_counts() {
        let mut d = data(3);
        video_dropout(&mut d, 0.5, 2, 0);
        assert!(d.iter().all(|p| p.video.present_count() == 3));
        let mut d = data(3);
        video_dropout(&mut d, 0.99, 2, 0);
        assert!(d.iter().all(|p| p.video.present_count() == 1));
    }

    #[test]
    fn teacher_rejects_incomplete_data() {
        let mut d = data(4);
        d[2].text = d[2].text.with_missing(&[0]);
        assert!(matches!(train_teacher(&d, &cfg()), Err(TrainError::Config(_))));
    }

    #[test]
    fn student_reduces_to_teacher_without_kd_l2_dropout_or_gaps() {
        let d = data(8);
        let c = TrainConfig { beta: 0.0, alpha1: 1.0, alpha2: 0.0, dropout: 0.0, ..cfg() };
        let (teacher, tr) = train_teacher(&d, &c).unwrap();
        let (student, sr) = train_student(&d, &teacher, &c).unwrap();
        assert_eq!(tr.curve, sr.curve);
        assert_eq!(teacher, student);
    }

    #[test]
    fn total_is_the_weighted_sum_of_terms() {
        let d = data(8);
        let c = cfg();
        let (teacher, _) = train_teacher(&d, &c).unwrap();
        let (_, r) = train_student(&d, &teacher, &c).unwrap();
        for e in &r.curve {
            let l = e.loss;
            assert!((l.total - (l.l0 + c.alpha1 * l.l1 + c.alpha2 * l.l2)).abs() < 1e-10);
            assert!(l.l0 > 0.0 && l.l_kd > 0.0);
        }
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let c = TrainConfig { lr: 1e300, momentum: 0.0, ..cfg() };
        let r = train_teacher(&data(8), &c);
        assert!(matches!(r, Err(TrainError::NonFiniteLoss { epoch: 0 })), "{r:?}");
    }

    #[test]
    fn report_json_omits_wall_time() {
        let (_, r) = train_teacher(&data(6), &TrainConfig { epochs: 1, ..cfg() }).unwrap();
        let json = r.to_json();
        assert!(!json.contains("wall"));
        let back: TrainReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.curve, r.curve);
    }
}
