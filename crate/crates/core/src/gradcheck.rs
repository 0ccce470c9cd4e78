//! Central finite-difference checks of the analytic gradients, per loss term
//! and for the full objective, through the whole two-tower model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, PairedSample, SyntheticConfig};
use crate::model::{self, LossSpec, ModelConfig, ModelError, TaskLoss, TwoTowerModel};
use crate::seed;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckedLoss {
    L0,
    Kd,
    Mlt,
    L2,
    Total,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 5] =
        [CheckedLoss::L0, CheckedLoss::Kd, CheckedLoss::Mlt, CheckedLoss::L2, CheckedLoss::Total];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::L0 => "l0",
            CheckedLoss::Kd => "kd",
            CheckedLoss::Mlt => "mlt",
            CheckedLoss::L2 => "l2",
            CheckedLoss::Total => "total",
        }
    }

    /// The loss term in isolation, or the standard objective for `Total`.
    pub fn spec(self) -> LossSpec {
        let base = LossSpec { task: TaskLoss::Mlt, sigma_nce: 0.5, ..LossSpec::default() };
        match self {
            CheckedLoss::L0 => LossSpec { w0: 1.0, ..LossSpec::zero() },
            CheckedLoss::Kd => LossSpec { alpha1: 1.0, beta: 1.0, ..LossSpec::zero() },
            CheckedLoss::Mlt => LossSpec { alpha1: 1.0, beta: 0.0, ..LossSpec::zero() },
            CheckedLoss::L2 => LossSpec { alpha2: 1.0, sigma_nce: 0.5, ..LossSpec::zero() },
            CheckedLoss::Total => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: CheckedLoss,
    pub points: usize,
    pub scalars_per_point: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn small_config() -> ModelConfig {
    ModelConfig { dim: 8, embed_dim: 6, prototypes: 3, heads: 2, bank_hidden: 5, classes: 4 }
}

/// A small labelled batch with missing frames and words, plus random
/// teacher features.
pub fn random_point(point_seed: u64) -> (TwoTowerModel, Vec<PairedSample>, Vec<Vec<f64>>) {
    let cfg = small_config();
    let model = TwoTowerModel::new(&cfg, seed::derive(point_seed, "gradcheck-model")).expect("valid config");
    let data = SyntheticConfig {
        num_pairs: 4,
        frames_per_video: 6,
        words_per_text: 5,
        dim: cfg.dim,
        latent_dim: 4,
        noise_std: 0.1,
        vocabulary: (0..cfg.classes).map(|i| format!("adj{i} noun{i}")).collect(),
        seed: seed::derive(point_seed, "gradcheck-data"),
        ..Default::default()
    };
    let mut batch = generate_synthetic(&data).expect("valid synthetic config");
    let holes: [(&[usize], &[usize]); 4] = [(&[1], &[]), (&[0, 4], &[2]), (&[], &[0, 3]), (&[5], &[4])];
    for (pair, (v, t)) in batch.iter_mut().zip(holes) {
        pair.video = pair.video.with_missing(v);
        pair.text = pair.text.with_missing(t);
    }
    let mut rng = seed::rng(point_seed, "gradcheck-teacher");
    let teacher = (0..batch.len())
        .map(|_| (0..cfg.embed_dim).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
        .collect();
    (model, batch, teacher)
}

/// Max relative error between the analytic gradient and central differences
/// over every parameter scalar, with the completion plans frozen.
pub fn check_point(loss: CheckedLoss, point_seed: u64) -> Result<(f64, (String, usize), usize), ModelError> {
    let (model, batch, teacher) = random_point(point_seed);
    let spec = loss.spec();
    let plans = model::plan_batch(&model, &batch, spec.completion)?;
    let (_, grad) = model::forward_backward_planned(&model, &batch, &spec, Some(&teacher), Some(&plans))?;
    let names = TwoTowerModel::param_names();
    let mut probe = model.clone();
    let mut worst = (0.0, (String::new(), 0));
    let mut scalars = 0;
    let eval = |m: &TwoTowerModel| -> Result<f64, ModelError> {
        Ok(model::batch_loss(m, &batch, &spec, Some(&teacher), Some(&plans))?.total)
    };
    for (p, name) in names.iter().enumerate() {
        let len = model.params()[p].len();
        for e in 0..len {
            let orig = model.params()[p].as_slice().expect("standard layout")[e];
            probe.params_mut()[p].as_slice_mut().expect("standard layout")[e] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.params_mut()[p].as_slice_mut().expect("standard layout")[e] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.params_mut()[p].as_slice_mut().expect("standard layout")[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grad.params()[p].as_slice().expect("standard layout")[e];
            let err = relative_error(analytic, numeric);
            if err > worst.0 {
                worst = (err, (name.clone(), e));
            }
            scalars += 1;
        }
    }
    Ok((worst.0, worst.1, scalars))
}

pub fn check_loss(loss: CheckedLoss, points: usize, root_seed: u64) -> Result<GradCheckReport, ModelError> {
    let mut report = GradCheckReport {
        loss,
        points,
        scalars_per_point: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        passed: true,
    };
    let results: Vec<_> = (0..points)
        .into_par_iter()
        .map(|i| check_point(loss, seed::derive_indexed(root_seed, loss.name(), i as u64)))
        .collect();
    for result in results {
        let (err, at, scalars) = result?;
        report.scalars_per_point = scalars;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = at;
        }
    }
    report.passed = report.max_rel_error < TOLERANCE;
    Ok(report)
}
