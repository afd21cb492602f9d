//! Numerically stable dense kernels: softmax family, sigmoid family,
//! negative KL divergence. All arithmetic is f64; exp-family kernels are
//! max-shifted so unbounded dot-product logits cannot overflow.

use crate::{Error, Result};

/// Probability floor applied before any log or KL. Entries are clamped to
/// this value and the vector renormalized.
pub const PROB_FLOOR: f64 = 1e-12;

/// A vector on the probability simplex: nonnegative entries summing to 1
/// within 1e-9. The [`PROB_FLOOR`] clamp is applied where logs are taken
/// ([`neg_kl`]), not here, so softmax outputs stay exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    /// Validate and renormalize to sum 1.
    pub fn new(mut data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        let mut sum = 0.0;
        for x in &data {
            if !x.is_finite() || *x < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "probability entries must be finite and nonnegative, got {x}"
                )));
            }
            sum += x;
        }
        if sum <= 0.0 {
            return Err(Error::InvalidConfig("probability mass is zero".into()));
        }
        for x in &mut data {
            *x /= sum;
        }
        Ok(Self(data))
    }

    /// Entries clamped to at least [`PROB_FLOOR`], then renormalized.
    pub fn clamped(&self) -> ProbVec {
        let mut data: Vec<f64> = self.0.iter().map(|x| x.max(PROB_FLOOR)).collect();
        let sum: f64 = data.iter().sum();
        for x in &mut data {
            *x /= sum;
        }
        ProbVec(data)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Inner product of two equal-length vectors.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Max-shifted `log(sum(exp(z)))`. Satisfies `max(z) <= out <= max(z) + ln(len)`.
pub fn logsumexp(z: &[f64]) -> f64 {
    assert!(!z.is_empty(), "logsumexp of empty slice");
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Max-shifted softmax. Finite inputs land exactly on the simplex;
/// non-finite inputs propagate NaN so callers can flag the loss instead of
/// panicking mid-batch.
pub fn softmax(z: &[f64]) -> ProbVec {
    assert!(!z.is_empty(), "softmax of empty slice");
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for x in &mut exps {
        *x /= sum;
    }
    ProbVec(exps)
}

/// `z_i - logsumexp(z)`; exp of the output equals `softmax(z)`.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|&x| x - lse).collect()
}

/// Stable `log(1 + exp(t))`.
pub fn softplus(t: f64) -> f64 {
    // log(1+exp(t)) = max(t,0) + log(1+exp(-|t|))
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic function, clamped to the open interval (0, 1): saturation to an
/// exact 0 or 1 would make the log weights collapse.
pub fn sigmoid(t: f64) -> f64 {
    let e = (-t.abs()).exp();
    let recip = 1.0 / (1.0 + e);
    let s = if t >= 0.0 { recip } else { e * recip };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `log(sigmoid(t))` computed as `-softplus(-t)`; finite for any finite `t`.
pub fn log_sigmoid(t: f64) -> f64 {
    -softplus(-t)
}

/// Negative KL divergence `-KL(p || q) <= 0`, zero iff `p == q` after
/// clamping. Both arguments are floored at [`PROB_FLOOR`] and renormalized
/// first so no log of zero can occur.
pub fn neg_kl(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let pc = p.clamped();
    let qc = q.clamped();
    let mut kl = 0.0;
    for (&pi, &qi) in pc.as_slice().iter().zip(qc.as_slice()) {
        kl += pi * (pi / qi).ln();
    }
    Ok(-kl)
}

/// L2-normalize a feature vector in place. Zero vectors are left unchanged.
pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
