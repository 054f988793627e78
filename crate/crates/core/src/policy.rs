//! Tabular order-m autoregressive softmax policies.
//!
//! A policy stores one logit row per context, where the context is the last
//! `m` tokens of the running sequence, left-padded with the reserved BOS
//! token id 0 when the history is shorter than `m`. The same structure plays
//! both roles: an exactly known teacher and a trainable student. Everything
//! is deterministic given (seed, config): tables, samples and updates.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::simplex::{softmax, LogitVector, ProbVector, PROB_FLOOR};

/// Reserved BOS token id used to left-pad short histories.
pub const BOS_TOKEN: u16 = 0;

/// Hard cap on the enumerable context space, V^m.
pub const MAX_CONTEXTS: usize = 65_536;

/// Largest supported vocabulary.
pub const MAX_VOCAB: usize = 256;

/// Whether a table acts as the fixed reference or the trainable policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Teacher => write!(f, "teacher"),
            Role::Student => write!(f, "student"),
        }
    }
}

/// The last-m token window identifying a conditional distribution.
///
/// A key may be longer than a policy's order (when policies of different
/// orders share one rollout); the policy then reads its own suffix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    tokens: Vec<u16>,
}

impl ContextKey {
    pub fn new(tokens: Vec<u16>) -> Self {
        Self { tokens }
    }

    /// Empty context, the single context of an order-0 policy.
    pub fn empty() -> Self {
        Self { tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    /// Row index of the last `order` tokens in base-`vocab` positional
    /// encoding, left-padding with BOS when the key is shorter than `order`.
    pub fn row_index(&self, order: usize, vocab: usize) -> usize {
        let mut idx = 0usize;
        for slot in 0..order {
            let pos = (self.tokens.len() + slot).checked_sub(order);
            let token = match pos {
                Some(p) => self.tokens[p],
                None => BOS_TOKEN,
            };
            idx = idx * vocab + token as usize;
        }
        idx
    }

    /// Inverse of [`row_index`](Self::row_index) for full-length keys.
    pub fn from_row_index(mut index: usize, order: usize, vocab: usize) -> Self {
        let mut tokens = vec![0u16; order];
        for slot in (0..order).rev() {
            tokens[slot] = (index % vocab) as u16;
            index /= vocab;
        }
        Self { tokens }
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.tokens.is_empty() {
            return write!(f, "-");
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Order-m context-conditioned softmax model over a finite vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    order: usize,
    vocab: usize,
    role: Role,
    seed: u64,
    /// Flat row-major storage: `vocab^order` rows of `vocab` logits.
    logits: Vec<f64>,
}

impl PolicyTable {
    /// All-zero logits, i.e. the uniform conditional everywhere.
    pub fn zero_init(order: usize, vocab: usize, role: Role, seed: u64) -> Result<Self> {
        let contexts = checked_context_count(order, vocab)?;
        Ok(Self {
            order,
            vocab,
            role,
            seed,
            logits: vec![0.0; contexts * vocab],
        })
    }

    /// Builds a table from explicit probability rows, storing `ln p` logits
    /// (floored at [`PROB_FLOOR`]).
    pub fn from_prob_rows(
        order: usize,
        vocab: usize,
        role: Role,
        seed: u64,
        rows: &[ProbVector],
    ) -> Result<Self> {
        let contexts = checked_context_count(order, vocab)?;
        if rows.len() != contexts {
            return Err(Error::ShapeMismatch(format!(
                "expected {contexts} rows, got {}",
                rows.len()
            )));
        }
        let mut logits = Vec::with_capacity(contexts * vocab);
        for row in rows {
            if row.len() != vocab {
                return Err(Error::VocabMismatch {
                    left: row.len(),
                    right: vocab,
                });
            }
            logits.extend(row.values().iter().map(|&p| p.max(PROB_FLOOR).ln()));
        }
        Ok(Self {
            order,
            vocab,
            role,
            seed,
            logits,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab
    }

    pub fn row_index(&self, ctx: &ContextKey) -> usize {
        ctx.row_index(self.order, self.vocab)
    }

    pub fn logits_row(&self, row: usize) -> &[f64] {
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    /// Overwrites one logit row. Entries must be finite.
    pub fn set_logits_row(&mut self, row: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.vocab {
            return Err(Error::VocabMismatch {
                left: values.len(),
                right: self.vocab,
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteLogit { index, value });
            }
        }
        self.logits[row * self.vocab..(row + 1) * self.vocab].copy_from_slice(values);
        Ok(())
    }

    /// The stored logits for a context, as an owned vector.
    pub fn conditional_logits(&self, ctx: &ContextKey) -> LogitVector {
        LogitVector::new(self.logits_row(self.row_index(ctx)).to_vec())
            .expect("stored logits are finite")
    }

    /// Softmax (temperature 1) of the stored logits row for a context.
    pub fn conditional_dist(&self, ctx: &ContextKey) -> ProbVector {
        softmax(&self.conditional_logits(ctx), 1.0).expect("stored logits are finite")
    }

    /// Draws one token from the conditional at `ctx` using a single uniform
    /// variate and an inverse-CDF walk. Identical rng state and inputs give
    /// identical draws.
    pub fn sample_token<R: Rng + ?Sized>(&self, ctx: &ContextKey, rng: &mut R) -> u16 {
        let dist = self.conditional_dist(ctx);
        sample_from_dist(&dist, rng)
    }

    /// SGD step: `logits[ctx] -= lr * grads[ctx]` for every context carried
    /// by the gradient table; unvisited rows are untouched.
    pub fn apply_gradient(&mut self, grads: &GradientTable, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::OutOfRange {
                name: "lr",
                message: format!("{lr} is not a finite nonnegative real"),
            });
        }
        if grads.vocab != self.vocab || grads.order != self.order {
            return Err(Error::ShapeMismatch(format!(
                "gradient table is order {} vocab {}, policy is order {} vocab {}",
                grads.order, grads.vocab, self.order, self.vocab
            )));
        }
        for (&row, grad) in &grads.rows {
            for (v, &g) in grad.iter().enumerate() {
                if !g.is_finite() {
                    let ctx = ContextKey::from_row_index(row, self.order, self.vocab);
                    return Err(Error::NonFiniteGradient {
                        context: format!("[{ctx}] token {v}"),
                    });
                }
                self.logits[row * self.vocab + v] -= lr * g;
            }
        }
        Ok(())
    }

    /// Writes the table in the text interchange format: a four-line header
    /// (order, vocab, role, seed) followed by `vocab^order` rows of `vocab`
    /// logits at 17 significant digits. The round trip is bit-exact.
    pub fn write_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "order {}", self.order)?;
        writeln!(w, "vocab {}", self.vocab)?;
        writeln!(w, "role {}", self.role)?;
        writeln!(w, "seed {}", self.seed)?;
        for row in 0..self.num_contexts() {
            let mut line = String::new();
            for (v, &z) in self.logits_row(row).iter().enumerate() {
                if v > 0 {
                    line.push(' ');
                }
                line.push_str(&format!("{z:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Parses the text interchange format written by [`write_text`](Self::write_text).
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let order: usize = parse_header(&mut lines, "order")?;
        let vocab: usize = parse_header(&mut lines, "vocab")?;
        let role_str: String = parse_header(&mut lines, "role")?;
        let role = match role_str.as_str() {
            "teacher" => Role::Teacher,
            "student" => Role::Student,
            other => return Err(Error::Parse(format!("unknown role '{other}'"))),
        };
        let seed: u64 = parse_header(&mut lines, "seed")?;
        let contexts = checked_context_count(order, vocab)?;
        let mut logits = Vec::with_capacity(contexts * vocab);
        for row in 0..contexts {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing logit row {row}")))??;
            let mut count = 0usize;
            for field in line.split_ascii_whitespace() {
                let z: f64 = field
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
                logits.push(z);
                count += 1;
            }
            if count != vocab {
                return Err(Error::Parse(format!(
                    "row {row} has {count} entries, expected {vocab}"
                )));
            }
        }
        Ok(Self {
            order,
            vocab,
            role,
            seed,
            logits,
        })
    }
}

fn parse_header<B: BufRead, T: std::str::FromStr>(
    lines: &mut std::io::Lines<B>,
    key: &str,
) -> Result<T>
where
    T::Err: fmt::Display,
{
    let line = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("missing header line '{key}'")))??;
    let value = line
        .strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| Error::Parse(format!("expected header '{key}', got '{line}'")))?;
    value
        .parse()
        .map_err(|e| Error::Parse(format!("header '{key}': {e}")))
}

fn checked_context_count(order: usize, vocab: usize) -> Result<usize> {
    if !(2..=MAX_VOCAB).contains(&vocab) {
        return Err(Error::OutOfRange {
            name: "vocab",
            message: format!("{vocab} not in [2, {MAX_VOCAB}]"),
        });
    }
    let mut contexts = 1usize;
    for _ in 0..order {
        contexts = contexts.saturating_mul(vocab);
        if contexts > MAX_CONTEXTS {
            return Err(Error::EnumerationTooLarge {
                size: contexts,
            });
        }
    }
    Ok(contexts)
}

pub(crate) fn sample_from_dist<R: Rng + ?Sized>(dist: &ProbVector, rng: &mut R) -> u16 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0u16;
    for (token, &p) in dist.values().iter().enumerate() {
        if p > 0.0 {
            last_positive = token as u16;
            cum += p;
            if u < cum {
                return token as u16;
            }
        }
    }
    // u landed past the accumulated mass (rounding); fall back to the last
    // token with positive probability.
    last_positive
}

/// Sparse per-context gradient accumulator shaped like a policy table. Only
/// contexts visited in a batch carry entries. Merging is associative, and
/// iteration order (ascending row index) is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    order: usize,
    vocab: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl GradientTable {
    pub fn new(order: usize, vocab: usize) -> Self {
        Self {
            order,
            vocab,
            rows: BTreeMap::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Adds `weight * grad` into the row for `row_index`.
    pub fn accumulate(&mut self, row_index: usize, grad: &[f64], weight: f64) {
        debug_assert_eq!(grad.len(), self.vocab);
        let row = self
            .rows
            .entry(row_index)
            .or_insert_with(|| vec![0.0; self.vocab]);
        for (slot, &g) in row.iter_mut().zip(grad) {
            *slot += weight * g;
        }
    }

    /// Adds `weight * other` into self.
    pub fn merge(&mut self, other: &GradientTable, weight: f64) {
        for (&row, grad) in &other.rows {
            self.accumulate(row, grad, weight);
        }
    }

    /// Component-wise sum with another table.
    pub fn combined(&self, other: &GradientTable) -> GradientTable {
        let mut out = self.clone();
        out.merge(other, 1.0);
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.rows.values_mut() {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// L2 norm over all stored entries.
    pub fn l2_norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|row| row.iter())
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn visited_contexts(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&row, grad)| (row, grad.as_slice()))
    }

    pub fn row(&self, row_index: usize) -> Option<&[f64]> {
        self.rows.get(&row_index).map(|v| v.as_slice())
    }
}

/// Draws a random teacher whose rows are symmetric-Dirichlet samples with
/// the given concentration, converted to logits. Deterministic per seed.
/// Small concentrations give peaked rows; large ones approach uniform.
pub fn make_random_teacher(
    order: usize,
    vocab: usize,
    concentration: f64,
    seed: u64,
) -> Result<PolicyTable> {
    if order < 1 {
        return Err(Error::OutOfRange {
            name: "order",
            message: format!("{order} must be >= 1 for a random teacher"),
        });
    }
    if !concentration.is_finite() || concentration <= 0.0 {
        return Err(Error::OutOfRange {
            name: "concentration",
            message: format!("{concentration} is not a positive finite real"),
        });
    }
    let contexts = checked_context_count(order, vocab)?;
    let mut table = PolicyTable::zero_init(order, vocab, Role::Teacher, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::OutOfRange {
        name: "concentration",
        message: e.to_string(),
    })?;
    let mut row = vec![0.0f64; vocab];
    for ctx in 0..contexts {
        // A symmetric Dirichlet draw is a normalized vector of iid Gamma
        // variates with shape = concentration.
        let mut sum = 0.0;
        for slot in row.iter_mut() {
            let g: f64 = gamma.sample(&mut rng);
            *slot = g;
            sum += g;
        }
        let logits: Vec<f64> = if sum > 0.0 {
            row.iter().map(|&g| (g / sum).max(PROB_FLOOR).ln()).collect()
        } else {
            vec![0.0; vocab]
        };
        table.set_logits_row(ctx, &logits)?;
    }
    Ok(table)
}

/// How to derive a deliberately weak student from a teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StudentMode {
    /// All-zero logits at the teacher's order: uniform conditionals.
    UniformInit,
    /// Order m-1 table whose rows average the teacher's conditionals over
    /// the dropped leading context token, creating an expressivity gap.
    LowerOrder,
    /// Teacher logits plus seeded Gaussian noise with the given sigma.
    Perturbed { sigma: f64 },
}

impl StudentMode {
    /// The default noise scale for the perturbed mode.
    pub const DEFAULT_SIGMA: f64 = 2.0;
}

/// Builds a weak student in one of the three modes. Deterministic per seed.
pub fn make_weak_student(
    teacher: &PolicyTable,
    mode: StudentMode,
    seed: u64,
) -> Result<PolicyTable> {
    match mode {
        StudentMode::UniformInit => {
            PolicyTable::zero_init(teacher.order(), teacher.vocab(), Role::Student, seed)
        }
        StudentMode::LowerOrder => {
            let order = teacher
                .order()
                .checked_sub(1)
                .ok_or_else(|| Error::OutOfRange {
                    name: "order",
                    message: "lower-order mode needs a teacher of order >= 1".into(),
                })?;
            let vocab = teacher.vocab();
            let suffix_count = checked_context_count(order, vocab)?;
            let mut rows = Vec::with_capacity(suffix_count);
            for suffix in 0..suffix_count {
                let mut mean = vec![0.0f64; vocab];
                for lead in 0..vocab {
                    let teacher_row = lead * suffix_count + suffix;
                    let dist = softmax(
                        &LogitVector::new(teacher.logits_row(teacher_row).to_vec())?,
                        1.0,
                    )?;
                    for (m, &p) in mean.iter_mut().zip(dist.values()) {
                        *m += p;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= vocab as f64;
                }
                rows.push(ProbVector::new(mean)?);
            }
            PolicyTable::from_prob_rows(order, vocab, Role::Student, seed, &rows)
        }
        StudentMode::Perturbed { sigma } => {
            if sigma < 0.0 || !sigma.is_finite() {
                return Err(Error::OutOfRange {
                    name: "sigma",
                    message: format!("{sigma} is not a finite nonnegative real"),
                });
            }
            let mut student = PolicyTable::zero_init(
                teacher.order(),
                teacher.vocab(),
                Role::Student,
                seed,
            )?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let vocab = teacher.vocab();
            let mut row = vec![0.0f64; vocab];
            for ctx in 0..teacher.num_contexts() {
                for (slot, &z) in row.iter_mut().zip(teacher.logits_row(ctx)) {
                    let noise: f64 = normal.sample(&mut rng);
                    *slot = z + sigma * noise;
                }
                student.set_logits_row(ctx, &row)?;
            }
            Ok(student)
        }
    }
}
