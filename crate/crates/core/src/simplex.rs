//! Probability-simplex primitives over a finite vocabulary.
//!
//! Conventions used everywhere in this crate:
//! - natural logarithms; entropies, advantages and divergences are in nats;
//! - Shannon convention `0 * ln 0 = 0`;
//! - softmax is computed with max subtraction;
//! - probabilities are floored at [`PROB_FLOOR`] before entering a log in a
//!   divergence, while exact zeros on a required support still raise
//!   [`Error::AbsoluteContinuity`].

use crate::error::{Error, Result};

/// Floor applied to positive probabilities before taking logs inside
/// divergence computations. Keeps logits finite without masking exact zeros.
pub const PROB_FLOOR: f64 = 1e-300;

/// Absolute tolerance for the unit-mass invariant of [`ProbVector`].
pub const MASS_TOLERANCE: f64 = 1e-9;

fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Unconstrained per-token scores on the natural-log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    /// Builds a logit vector, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::OutOfRange {
                name: "logits",
                message: "vector must be nonempty".into(),
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteLogit { index, value });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A point on the probability simplex: nonnegative entries summing to one
/// within [`MASS_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    /// Builds a probability vector, checking nonnegativity and unit mass.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidProbVector("vector must be nonempty".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in values.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidProbVector(format!(
                    "entry {i} is {p}, expected a finite nonnegative value"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidProbVector(format!(
                "entries sum to {sum}, expected 1 within {MASS_TOLERANCE}"
            )));
        }
        Ok(Self { values })
    }

    /// Uniform distribution over `vocab` tokens.
    pub fn uniform(vocab: usize) -> Self {
        Self {
            values: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, token: usize) -> f64 {
        self.values[token]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The K highest-teacher-probability tokens at a position, stored as sorted
/// distinct token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    token_ids: Vec<usize>,
}

impl SupportSet {
    /// Builds a support set from token ids, which must be distinct and lie
    /// in `[0, vocab)`. Ids are stored sorted ascending.
    pub fn new(mut token_ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if token_ids.is_empty() || token_ids.len() > vocab {
            return Err(Error::OutOfRange {
                name: "support",
                message: format!("size {} not in [1, {vocab}]", token_ids.len()),
            });
        }
        token_ids.sort_unstable();
        for pair in token_ids.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::OutOfRange {
                    name: "support",
                    message: format!("duplicate token id {}", pair[0]),
                });
            }
        }
        if *token_ids.last().unwrap() >= vocab {
            return Err(Error::OutOfRange {
                name: "support",
                message: format!("token id {} >= vocab {vocab}", token_ids.last().unwrap()),
            });
        }
        Ok(Self { token_ids })
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn k(&self) -> usize {
        self.token_ids.len()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.token_ids.binary_search(&token).is_ok()
    }

    /// Position of `token` within the sorted support, if present.
    pub fn position(&self, token: usize) -> Option<usize> {
        self.token_ids.binary_search(&token).ok()
    }
}

/// Temperature softmax of a logit vector. Temperature defaults to 1
/// throughout the crate; it is exposed for completeness.
pub fn softmax(z: &LogitVector, temperature: f64) -> Result<ProbVector> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::OutOfRange {
            name: "temperature",
            message: format!("{temperature} is not a positive finite real"),
        });
    }
    let max = z.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z
        .values()
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::new(exps.iter().map(|&e| e / sum).collect())
}

/// Shannon entropy in nats, `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    p.values()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum()
}

/// Forward KL divergence `sum_v p_v ln(p_v / q_v)` in nats.
///
/// Requires `q_v > 0` wherever `p_v > 0`; an exact zero raises
/// [`Error::AbsoluteContinuity`] naming the offending token.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::VocabMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut total = 0.0;
    for (token, (&pv, &qv)) in p.values().iter().zip(q.values()).enumerate() {
        if pv > 0.0 {
            if qv == 0.0 {
                return Err(Error::AbsoluteContinuity { token });
            }
            total += pv * (ln_floored(pv) - ln_floored(qv));
        }
    }
    Ok(total)
}

/// Interpolated Jensen-Shannon family between the teacher and student
/// distributions:
///
/// `JSD_beta(P_T || P_S) = beta KL(P_T || P_M) + (1 - beta) KL(P_S || P_M)`
///
/// with midpoint `P_M = (1 - beta) P_T + beta P_S`, so that `beta = 1`
/// recovers forward KL `KL(P_T || P_S)` and `beta = 0` recovers reverse KL
/// `KL(P_S || P_T)`. Interior `beta` is always finite because the midpoint
/// dominates whichever argument carries weight.
pub fn jsd_beta(p_teacher: &ProbVector, p_student: &ProbVector, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if p_teacher.len() != p_student.len() {
        return Err(Error::VocabMismatch {
            left: p_teacher.len(),
            right: p_student.len(),
        });
    }
    if beta == 1.0 {
        return kl_divergence(p_teacher, p_student);
    }
    if beta == 0.0 {
        return kl_divergence(p_student, p_teacher);
    }
    let midpoint = ProbVector::new(
        p_teacher
            .values()
            .iter()
            .zip(p_student.values())
            .map(|(&t, &s)| (1.0 - beta) * t + beta * s)
            .collect(),
    )?;
    let forward = kl_divergence(p_teacher, &midpoint)?;
    let reverse = kl_divergence(p_student, &midpoint)?;
    Ok((beta * forward + (1.0 - beta) * reverse).max(0.0))
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) || !beta.is_finite() {
        return Err(Error::OutOfRange {
            name: "beta",
            message: format!("{beta} not in [0, 1]"),
        });
    }
    Ok(())
}

/// The `k` tokens with greatest teacher probability. Ties are broken by the
/// lower token id, which makes the selection deterministic across runs and
/// platforms.
pub fn topk_support(p_teacher: &ProbVector, k: usize) -> Result<SupportSet> {
    let vocab = p_teacher.len();
    if k == 0 || k > vocab {
        return Err(Error::OutOfRange {
            name: "k",
            message: format!("{k} not in [1, {vocab}]"),
        });
    }
    let mut order: Vec<usize> = (0..vocab).collect();
    order.sort_by(|&a, &b| {
        p_teacher
            .get(b)
            .partial_cmp(&p_teacher.get(a))
            .expect("probabilities are finite")
            .then_with(|| a.cmp(&b))
    });
    order.truncate(k);
    SupportSet::new(order, vocab)
}

/// Restriction of `p` to the support, renormalized to unit mass. The result
/// is parallel to `support.token_ids()`.
pub fn restrict_normalize(p: &ProbVector, support: &SupportSet) -> Result<Vec<f64>> {
    if *support.token_ids().last().unwrap() >= p.len() {
        return Err(Error::OutOfRange {
            name: "support",
            message: format!("token id exceeds vocab {}", p.len()),
        });
    }
    let mass: f64 = support.token_ids().iter().map(|&id| p.get(id)).sum();
    if mass <= 0.0 {
        return Err(Error::ZeroSupportMass);
    }
    Ok(support.token_ids().iter().map(|&id| p.get(id) / mass).collect())
}

/// Softmax of the logits restricted to the support: the student's conditional
/// distribution renormalized on the support, computed at the logit level for
/// stability. Parallel to `support.token_ids()`.
pub fn support_softmax(z: &LogitVector, support: &SupportSet) -> Vec<f64> {
    let max = support
        .token_ids()
        .iter()
        .map(|&id| z.values()[id])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = support
        .token_ids()
        .iter()
        .map(|&id| (z.values()[id] - max).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}
