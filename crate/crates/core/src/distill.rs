//! Teacher-student distillation at the hidden-feature level.
//!
//! `L_KD` compares batch-level distributions: each batch of modality-general
//! features is mapped to logits by its cosine to the batch centroid, softened
//! with a temperature softmax, and the student distribution is pulled toward
//! the teacher's with a KL divergence. Task supervision (`L_MLT`) mixes two
//! pluggable log-likelihood heads.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use thiserror::Error;

use crate::ops;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("logits must be finite and non-empty")]
    BadLogits,
    #[error("not a probability distribution: {0}")]
    NotDistribution(String),
    #[error("distributions have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("q has zero mass where p does not (index {0})")]
    SupportMismatch(usize),
    #[error("distillation needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("teacher and student batches differ in shape")]
    ShapeMismatch,
    #[error("feature vector is all zero")]
    ZeroVector,
    #[error("mixing weight {name} = {value} is outside its range")]
    BadWeight { name: &'static str, value: f64 },
    #[error("label {label} outside head with {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("head expects {expected}-dimensional features, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Non-negative probabilities summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistillError> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DistillError::NotDistribution("entries must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DistillError::NotDistribution(format!("sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `softmax(logits / sigma)` with max subtraction.
pub fn softmax_temperature(logits: &[f64], sigma: f64) -> Result<Distribution, DistillError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DistillError::BadTemperature(sigma));
    }
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(DistillError::BadLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / sigma).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Distribution(exps.into_iter().map(|e| e / sum).collect()))
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64, DistillError> {
    if p.len() != q.len() {
        return Err(DistillError::LengthMismatch(p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.0.iter().zip(&q.0).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(DistillError::SupportMismatch(i));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

fn check_batch(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<usize, DistillError> {
    if teacher.len() != student.len()
        || teacher.iter().zip(student).any(|(a, b)| a.len() != b.len())
    {
        return Err(DistillError::ShapeMismatch);
    }
    if student.len() < 2 {
        return Err(DistillError::BatchTooSmall(student.len()));
    }
    Ok(student.len())
}

/// Sample function: cosine of every batch element to the batch centroid.
pub fn batch_logits(batch: &[Vec<f64>]) -> Result<Vec<f64>, DistillError> {
    let dim = batch.first().map_or(0, Vec::len);
    let centroid = ops::mean(batch.iter().map(Vec::as_slice), dim);
    if ops::is_zero(&centroid) || batch.iter().any(|f| ops::is_zero(f)) {
        return Err(DistillError::ZeroVector);
    }
    Ok(batch.iter().map(|f| ops::cosine_unchecked(f, &centroid)).collect())
}

/// `L_KD = KL(δσ(F_s(teacher)), δσ(F_s(student)))`.
pub fn loss_kd(teacher: &[Vec<f64>], student: &[Vec<f64>], sigma: f64) -> Result<f64, DistillError> {
    check_batch(teacher, student)?;
    let p = softmax_temperature(&batch_logits(teacher)?, sigma)?;
    let q = softmax_temperature(&batch_logits(student)?, sigma)?;
    kl_divergence(&p, &q)
}

/// `L_KD` and its gradient with respect to every student feature vector.
pub fn loss_kd_grad(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    sigma: f64,
) -> Result<(f64, Vec<Vec<f64>>), DistillError> {
    let n = check_batch(teacher, student)?;
    let p = softmax_temperature(&batch_logits(teacher)?, sigma)?;
    let q = softmax_temperature(&batch_logits(student)?, sigma)?;
    let loss = kl_divergence(&p, &q)?;

    let dim = student[0].len();
    let centroid = ops::mean(student.iter().map(Vec::as_slice), dim);
    let mut grads = vec![vec![0.0; dim]; n];
    let mut dcentroid = vec![0.0; dim];
    for i in 0..n {
        let dlogit = (q.0[i] - p.0[i]) / sigma;
        let (gf, gc) = ops::cosine_backward(&student[i], &centroid);
        ops::axpy(&mut grads[i], dlogit, &gf);
        ops::axpy(&mut dcentroid, dlogit, &gc);
    }
    for g in &mut grads {
        ops::axpy(g, 1.0 / n as f64, &dcentroid);
    }
    Ok((loss, grads))
}

/// Modality-specific (`f_v`, `f_t`) and modality-general (`f_c`) features.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisiveFeatures {
    pub f_v: Vec<f64>,
    pub f_t: Vec<f64>,
    pub f_c: Vec<f64>,
}

impl DecisiveFeatures {
    /// `f_c` is the elementwise mean of the two towers' outputs.
    pub fn from_towers(f_v: Vec<f64>, f_t: Vec<f64>) -> Self {
        let f_c = f_v.iter().zip(&f_t).map(|(a, b)| 0.5 * (a + b)).collect();
        Self { f_v, f_t, f_c }
    }
}

/// A differentiable scorer of `log P(label | features)`.
pub trait TaskHead {
    fn num_classes(&self) -> usize;

    fn log_likelihood(&self, features: &[f64], label: usize) -> Result<f64, DistillError>;

    /// Gradient of the log-likelihood with respect to the features.
    fn log_likelihood_grad(&self, features: &[f64], label: usize) -> Result<Vec<f64>, DistillError>;
}

/// Linear map followed by a softmax over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxHead {
    /// `dim × classes`
    pub weight: Array2<f64>,
    /// `1 × classes`
    pub bias: Array2<f64>,
}

impl LinearSoftmaxHead {
    pub fn random<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            weight: ops::uniform_init(dim, classes, dim, rng),
            bias: ops::uniform_init(1, classes, dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array2::zeros(self.bias.raw_dim()),
        }
    }

    fn check(&self, features: &[f64], label: usize) -> Result<(), DistillError> {
        if features.len() != self.weight.nrows() {
            return Err(DistillError::DimMismatch { expected: self.weight.nrows(), got: features.len() });
        }
        if label >= self.num_classes() {
            return Err(DistillError::BadLabel { label, classes: self.num_classes() });
        }
        Ok(())
    }

    /// Class probabilities and the log-likelihood of `label`.
    fn forward(&self, features: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let logits = ArrayView1::from(features).dot(&self.weight) + self.bias.row(0);
        let logits = logits.to_vec();
        let lse = ops::log_sum_exp(&logits);
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        (probs, log_probs)
    }

    /// Accumulate `scale · ∂loglik/∂θ` into `grad` and return
    /// `scale · ∂loglik/∂features`.
    pub fn backward(
        &self,
        features: &[f64],
        label: usize,
        scale: f64,
        grad: &mut LinearSoftmaxHead,
    ) -> Result<Vec<f64>, DistillError> {
        self.check(features, label)?;
        let (probs, _) = self.forward(features);
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(c, p)| scale * (if c == label { 1.0 } else { 0.0 } - p))
            .collect();
        for (i, f) in features.iter().enumerate() {
            for (c, d) in dlogits.iter().enumerate() {
                grad.weight[[i, c]] += f * d;
            }
        }
        for (c, d) in dlogits.iter().enumerate() {
            grad.bias[[0, c]] += d;
        }
        Ok(self.weight.dot(&ndarray::Array1::from(dlogits)).to_vec())
    }
}

impl TaskHead for LinearSoftmaxHead {
    fn num_classes(&self) -> usize {
        self.weight.ncols()
    }

    fn log_likelihood(&self, features: &[f64], label: usize) -> Result<f64, DistillError> {
        self.check(features, label)?;
        Ok(self.forward(features).1[label])
    }

    fn log_likelihood_grad(&self, features: &[f64], label: usize) -> Result<Vec<f64>, DistillError> {
        let mut scratch = self.zeros_like();
        self.backward(features, label, 1.0, &mut scratch)
    }
}

/// `L_MLT = −[μ log P_a(y | f_c) + (1 − μ) log P_b(y | f_c)]`, μ ∈ (0, 1).
pub fn loss_mlt(
    f_c: &[f64],
    label: usize,
    head_a: &dyn TaskHead,
    head_b: &dyn TaskHead,
    mu: f64,
) -> Result<f64, DistillError> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(DistillError::BadWeight { name: "mu", value: mu });
    }
    let a = head_a.log_likelihood(f_c, label)?;
    let b = head_b.log_likelihood(f_c, label)?;
    Ok(-(mu * a + (1.0 - mu) * b))
}

/// `L_1 = β L_KD + (1 − β) L_MLT`.
pub fn loss_student(l_kd: f64, l_mlt: f64, beta: f64) -> f64 {
    beta * l_kd + (1.0 - beta) * l_mlt
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    struct Fixed(f64);

    impl TaskHead for Fixed {
        fn num_classes(&self) -> usize {
            1
        }
        fn log_likelihood(&self, _: &[f64], _: usize) -> Result<f64, DistillError> {
            Ok(self.0)
        }
        fn log_likelihood_grad(&self, f: &[f64], _: usize) -> Result<Vec<f64>, DistillError> {
            Ok(vec![0.0; f.len()])
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let d = softmax_temperature(&[0.0, 0.0], 3.7).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
        let d = softmax_temperature(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((d.probs()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((d.probs()[0] - 0.73106).abs() < 1e-5);
        assert!((d.probs()[1] - 0.26894).abs() < 1e-5);
        let d = softmax_temperature(&[3.0, -1.0], 1e6).unwrap();
        assert!(d.probs().iter().all(|p| (p - 0.5).abs() < 1e-5));
        assert_eq!(softmax_temperature(&[1.0], 0.0), Err(DistillError::BadTemperature(0.0)));
        assert_eq!(softmax_temperature(&[1.0], -2.0), Err(DistillError::BadTemperature(-2.0)));
    }

    #[test]
    fn kl_closed_forms() {
        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        let q = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert_eq!(kl_divergence(&q, &p), Err(DistillError::SupportMismatch(1)));
        let r = Distribution::new(vec![1.0]).unwrap();
        assert_eq!(kl_divergence(&p, &r), Err(DistillError::LengthMismatch(2, 1)));
    }

    #[test]
    fn kd_loss_is_zero_for_identical_batches_and_permutation_invariant() {
        let t = vec![vec![1.0, 0.2, -0.3], vec![0.1, 0.9, 0.4], vec![-0.5, 0.3, 1.0]];
        let s = vec![vec![0.8, 0.1, -0.2], vec![0.3, 1.1, 0.1], vec![-0.2, 0.5, 0.7]];
        assert_eq!(loss_kd(&t, &t, 2.0).unwrap(), 0.0);
        let base = loss_kd(&t, &s, 0.5).unwrap();
        let perm = [2, 0, 1];
        let tp: Vec<_> = perm.iter().map(|&i| t[i].clone()).collect();
        let sp: Vec<_> = perm.iter().map(|&i| s[i].clone()).collect();
        assert!((loss_kd(&tp, &sp, 0.5).unwrap() - base).abs() < 1e-15);
        assert_eq!(loss_kd(&t[..1], &s[..1], 1.0), Err(DistillError::BatchTooSmall(1)));
    }

    #[test]
    fn kd_gradient_matches_central_differences() {
        let t = vec![vec![1.0, 0.2, -0.3], vec![0.1, 0.9, 0.4], vec![-0.5, 0.3, 1.0]];
        let s = vec![vec![0.8, 0.1, -0.2], vec![0.3, 1.1, 0.1], vec![-0.2, 0.5, 0.7]];
        let (_, g) = loss_kd_grad(&t, &s, 0.3).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = s.clone();
                let mut m = s.clone();
                p[i][j] += h;
                m[i][j] -= h;
                let fd = (loss_kd(&t, &p, 0.3).unwrap() - loss_kd(&t, &m, 0.3).unwrap()) / (2.0 * h);
                let rel = (fd - g[i][j]).abs() / fd.abs().max(g[i][j].abs()).max(1e-3);
                assert!(rel < 1e-6, "({i},{j}) fd {fd} vs {}", g[i][j]);
            }
        }
    }

    #[test]
    fn mlt_mixture() {
        assert_eq!(loss_mlt(&[0.0], 0, &Fixed(0.0), &Fixed(0.0), 0.3).unwrap(), 0.0);
        assert_eq!(loss_mlt(&[0.0], 0, &Fixed(-1.0), &Fixed(-3.0), 0.5).unwrap(), 2.0);
        let near_one = loss_mlt(&[0.0], 0, &Fixed(-1.0), &Fixed(-3.0), 1.0 - 1e-9).unwrap();
        assert!((near_one - 1.0).abs() < 1e-8);
        assert!(matches!(
            loss_mlt(&[0.0], 0, &Fixed(-1.0), &Fixed(-3.0), 1.0),
            Err(DistillError::BadWeight { .. })
        ));
    }

    #[test]
    fn student_loss_is_affine() {
        assert_eq!(loss_student(2.0, 1.0, 0.0), 1.0);
        assert_eq!(loss_student(2.0, 1.0, 1.0), 2.0);
        assert!((loss_student(2.0, 1.0, 0.3) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn linear_head_gradient_matches_central_differences() {
        let mut rng = crate::seed::Rng::seed_from_u64(3);
        let head = LinearSoftmaxHead::random(4, 3, &mut rng);
        let f = [0.3, -0.7, 1.2, 0.05];
        let g = head.log_likelihood_grad(&f, 2).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = f;
            let mut m = f;
            p[i] += h;
            m[i] -= h;
            let fd = (head.log_likelihood(&p, 2).unwrap() - head.log_likelihood(&m, 2).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert!(matches!(head.log_likelihood(&f, 3), Err(DistillError::BadLabel { .. })));
    }
}
