//! On-policy trajectory generation with per-position teacher annotation.
//!
//! Rollouts are fixed-horizon: every trajectory generates exactly `horizon`
//! tokens, which keeps the 1/|y| weighting uniform and removes termination
//! as a confound. Advantages, gaps and masks are annotated at rollout time
//! from the same policy snapshot that produced the samples, so there is no
//! replay staleness.
//!
//! Determinism: trajectory `i` of a batch draws from ChaCha stream `i` of a
//! generator seeded with the rollout seed, so parallel and serial execution
//! would produce identical outputs and identical seeds reproduce identical
//! batches. Stream ids coincide with prompt ids whenever the prompt set is
//! not cycled.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::{MaskRule, TokenRecord};
use crate::policy::{sample_from_dist, ContextKey, PolicyTable, BOS_TOKEN};

/// An input prefix for generation. Ids are assigned densely from 0 by
/// [`make_prompt_set`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub id: u64,
    pub tokens: Vec<u16>,
}

/// Which policy sampled a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectorySource {
    Student,
    Teacher,
}

/// A prompt plus its sampled continuation and per-position records.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub prompt: Vec<u16>,
    pub tokens: Vec<u16>,
    pub records: Vec<TokenRecord>,
    pub source: TrajectorySource,
}

/// Rolling last-W token window, initialized to BOS padding.
struct Window {
    tokens: Vec<u16>,
}

impl Window {
    fn new(width: usize) -> Self {
        Self {
            tokens: vec![BOS_TOKEN; width],
        }
    }

    fn push(&mut self, token: u16) {
        if self.tokens.is_empty() {
            return;
        }
        self.tokens.rotate_left(1);
        *self.tokens.last_mut().unwrap() = token;
    }

    fn key(&self) -> ContextKey {
        ContextKey::new(self.tokens.clone())
    }
}

/// Seeded uniform-random prompts of a fixed length. Ids run 0..count.
pub fn make_prompt_set(count: usize, length: usize, vocab: usize, seed: u64) -> Result<Vec<Prompt>> {
    if count == 0 {
        return Err(Error::OutOfRange {
            name: "count",
            message: "prompt count must be >= 1".into(),
        });
    }
    if vocab < 2 {
        return Err(Error::OutOfRange {
            name: "vocab",
            message: format!("{vocab} must be >= 2"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count as u64)
        .map(|id| Prompt {
            id,
            tokens: (0..length)
                .map(|_| rng.random_range(0..vocab) as u16)
                .collect(),
        })
        .collect())
}

/// Samples `horizon` tokens per prompt from the student and annotates every
/// position with teacher and student log-probs, the advantage, the
/// probability gap, and the run's intervention mask.
pub fn rollout_student(
    student: &PolicyTable,
    teacher: &PolicyTable,
    prompts: &[Prompt],
    horizon: usize,
    rule: &MaskRule,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if student.vocab() != teacher.vocab() {
        return Err(Error::VocabMismatch {
            left: student.vocab(),
            right: teacher.vocab(),
        });
    }
    check_horizon(horizon)?;
    let width = student.order().max(teacher.order());
    prompts
        .iter()
        .enumerate()
        .map(|(slot, prompt)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(slot as u64);
            let mut window = Window::new(width);
            for &t in &prompt.tokens {
                window.push(t);
            }
            let mut tokens = Vec::with_capacity(horizon);
            let mut records = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let ctx = window.key();
                let p_student = student.conditional_dist(&ctx);
                let p_teacher = teacher.conditional_dist(&ctx);
                let token = sample_from_dist(&p_student, &mut rng);
                records.push(TokenRecord::from_rows(
                    ctx, token, &p_teacher, &p_student, rule,
                )?);
                tokens.push(token);
                window.push(token);
            }
            Ok(Trajectory {
                prompt_id: prompt.id,
                prompt: prompt.tokens.clone(),
                tokens,
                records,
                source: TrajectorySource::Student,
            })
        })
        .collect()
}

/// Samples trajectories from the teacher (the SeqKD data path). Records
/// carry teacher log-probs only; advantages and gaps are undefined for
/// teacher-sampled tokens and are stored as zero with the source flag set.
pub fn rollout_teacher(
    teacher: &PolicyTable,
    prompts: &[Prompt],
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    check_horizon(horizon)?;
    let width = teacher.order();
    prompts
        .iter()
        .enumerate()
        .map(|(slot, prompt)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(slot as u64);
            let mut window = Window::new(width);
            for &t in &prompt.tokens {
                window.push(t);
            }
            let mut tokens = Vec::with_capacity(horizon);
            let mut records = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let ctx = window.key();
                let p_teacher = teacher.conditional_dist(&ctx);
                let token = sample_from_dist(&p_teacher, &mut rng);
                let logp_teacher = p_teacher.get(token as usize).ln();
                records.push(TokenRecord {
                    ctx,
                    token,
                    logp_teacher,
                    logp_student: 0.0,
                    advantage: 0.0,
                    prob_gap: 0.0,
                    mask: false,
                    advantage_floored: false,
                });
                tokens.push(token);
                window.push(token);
            }
            Ok(Trajectory {
                prompt_id: prompt.id,
                prompt: prompt.tokens.clone(),
                tokens,
                records,
                source: TrajectorySource::Teacher,
            })
        })
        .collect()
}

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::OutOfRange {
            name: "horizon",
            message: "horizon must be >= 1".into(),
        });
    }
    Ok(())
}

/// Writes trajectories in the dump format, one record per line:
/// `prompt_id,t,ctx,y,logp_teacher,logp_student,advantage,prob_gap,mask`
/// where `ctx` is the space-joined context window (`-` when empty).
pub fn write_trajectory_dump<W: Write>(trajectories: &[Trajectory], w: &mut W) -> Result<()> {
    writeln!(
        w,
        "prompt_id,t,ctx,y,logp_teacher,logp_student,advantage,prob_gap,mask"
    )?;
    for traj in trajectories {
        for (t, rec) in traj.records.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                traj.prompt_id,
                t,
                rec.ctx,
                rec.token,
                rec.logp_teacher,
                rec.logp_student,
                rec.advantage,
                rec.prob_gap,
                rec.mask as u8
            )?;
        }
    }
    Ok(())
}
