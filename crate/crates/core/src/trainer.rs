//! The training loop and its orchestration: single runs, ablation grids,
//! and the two-task continual-learning schedule.
//!
//! Every run is fully determined by its config: policies come from the
//! teacher/student seeds, prompts from the prompt seed, and step `s` rolls
//! out with a seed derived from (rollout seed, s). Exact reverse KL to the
//! teacher, enumerated with student-stationary context weighting, is the
//! ground-truth progress metric and is logged every step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::metrics::{AdvantageHistogram, RunLabel, RunMetrics};
use crate::objectives::{batch_loss_grad, ObjectiveConfig, ObjectiveKind};
use crate::oracle::{exact_reverse_kl, ContextWeighting};
use crate::policy::{
    make_random_teacher, make_weak_student, PolicyTable, StudentMode, MAX_CONTEXTS,
};
use crate::rollout::{make_prompt_set, rollout_student, rollout_teacher, Prompt, Trajectory};
use crate::simplex::entropy;

/// SplitMix64 step; used to derive per-phase and per-step seeds from a base
/// seed without correlated streams.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthetic model geometry and initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    /// Symmetric Dirichlet concentration of the teacher rows. The 0.3
    /// default gives peaked rows, the precondition for black-hole contexts
    /// under a weak student.
    #[serde(default = "default_concentration")]
    pub teacher_concentration: f64,
    #[serde(default)]
    pub student_mode: StudentModeConfig,
}

fn default_vocab() -> usize {
    16
}
fn default_order() -> usize {
    2
}
fn default_concentration() -> f64 {
    0.3
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: default_vocab(),
            order: default_order(),
            teacher_concentration: default_concentration(),
            student_mode: StudentModeConfig::Perturbed,
        }
    }
}

/// Serializable student-weakness mode; `perturbed` uses the default sigma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentModeConfig {
    UniformInit,
    LowerOrder,
    /// Teacher logits plus sigma = 2 Gaussian noise: a sharp but partially
    /// misaligned student, the closest stand-in for a thinly warmed-up
    /// model. This is the weak-student default; it is the mode that leaves
    /// essential tokens at genuinely low student probability.
    #[default]
    Perturbed,
}

impl StudentModeConfig {
    pub fn to_mode(self) -> StudentMode {
        match self {
            StudentModeConfig::UniformInit => StudentMode::UniformInit,
            StudentModeConfig::LowerOrder => StudentMode::LowerOrder,
            StudentModeConfig::Perturbed => StudentMode::Perturbed {
                sigma: StudentMode::DEFAULT_SIGMA,
            },
        }
    }
}

/// Loop-level run parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    /// Plain SGD step on tabular logits. Large on purpose: batch gradients
    /// average per-token contributions over batch * horizon tokens, so a
    /// visited row moves by roughly lr * visits / (batch * horizon) times
    /// the per-token gradient, and meaningful 90-step dynamics need steps
    /// of this size.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_trajectories: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_prompt_count")]
    pub prompt_count: usize,
    #[serde(default = "default_prompt_length")]
    pub prompt_length: usize,
    /// Advantage histograms are dumped every this many steps.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
}

fn default_lr() -> f64 {
    16.0
}
fn default_batch() -> usize {
    64
}
fn default_horizon() -> usize {
    32
}
fn default_steps() -> usize {
    90
}
fn default_prompt_count() -> usize {
    64
}
fn default_prompt_length() -> usize {
    2
}
fn default_eval_interval() -> usize {
    10
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_trajectories: default_batch(),
            horizon: default_horizon(),
            steps: default_steps(),
            prompt_count: default_prompt_count(),
            prompt_length: default_prompt_length(),
            eval_interval: default_eval_interval(),
        }
    }
}

/// All RNG roots of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default = "default_seed_teacher")]
    pub teacher: u64,
    #[serde(default = "default_seed_student")]
    pub student: u64,
    #[serde(default = "default_seed_rollout")]
    pub rollout: u64,
    #[serde(default = "default_seed_prompt")]
    pub prompt: u64,
}

fn default_seed_teacher() -> u64 {
    1
}
fn default_seed_student() -> u64 {
    2
}
fn default_seed_rollout() -> u64 {
    3
}
fn default_seed_prompt() -> u64 {
    4
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            teacher: 1,
            student: 2,
            rollout: 3,
            prompt: 4,
        }
    }
}

impl Seeds {
    /// Derives the four seeds from one base seed.
    pub fn from_base(base: u64) -> Self {
        Self {
            teacher: derive_seed(base, 1),
            student: derive_seed(base, 2),
            rollout: derive_seed(base, 3),
            prompt: derive_seed(base, 4),
        }
    }
}

/// Complete run configuration. Parses from the sectioned key = value config
/// format and round-trips losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub run: RunParams,
    #[serde(default)]
    pub seeds: Seeds,
}

impl TrainConfig {
    /// The weak-student default experiment: V = 16, order 2, concentration
    /// 0.3 teacher, perturbed student, AOPD(tau = 0, beta = 1).
    pub fn weak_student_default(kind: ObjectiveKind) -> Self {
        Self {
            model: ModelConfig::default(),
            objective: ObjectiveConfig::new(kind),
            run: RunParams::default(),
            seeds: Seeds::default(),
        }
    }

    pub fn with_base_seed(mut self, base: u64) -> Self {
        self.seeds = Seeds::from_base(base);
        self
    }

    /// Constant columns of this run's metrics CSV.
    pub fn run_label(&self) -> RunLabel {
        RunLabel {
            objective: self.objective.kind.to_string(),
            tau: self.objective.tau,
            beta: self.objective.beta,
            k: self.objective.effective_k(self.model.vocab_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.vocab_size < 2 || m.vocab_size > 256 {
            return Err(Error::Config(format!(
                "model.vocab_size {} not in [2, 256]",
                m.vocab_size
            )));
        }
        if m.order < 1 {
            return Err(Error::Config("model.order must be >= 1".into()));
        }
        let mut contexts = 1usize;
        for _ in 0..m.order {
            contexts = contexts.saturating_mul(m.vocab_size);
        }
        if contexts > MAX_CONTEXTS {
            return Err(Error::Config(format!(
                "context space {} exceeds the {MAX_CONTEXTS} enumeration cap",
                contexts
            )));
        }
        if !m.teacher_concentration.is_finite() || m.teacher_concentration <= 0.0 {
            return Err(Error::Config(
                "model.teacher_concentration must be a positive finite real".into(),
            ));
        }
        self.objective
            .validate(m.vocab_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        let r = &self.run;
        if !r.lr.is_finite() || r.lr < 0.0 {
            return Err(Error::Config("run.lr must be a finite value >= 0".into()));
        }
        if r.batch_trajectories == 0 {
            return Err(Error::Config("run.batch_trajectories must be >= 1".into()));
        }
        if r.horizon == 0 {
            return Err(Error::Config("run.horizon must be >= 1".into()));
        }
        if r.prompt_count == 0 {
            return Err(Error::Config("run.prompt_count must be >= 1".into()));
        }
        if r.eval_interval == 0 {
            return Err(Error::Config("run.eval_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub teacher: PolicyTable,
    pub final_student: PolicyTable,
    /// Exact reverse KL of the initial student, before any update.
    pub initial_rkl: f64,
    pub metrics: Vec<RunMetrics>,
}

impl TrainOutcome {
    /// Exact reverse KL after the last update (the initial value when the
    /// run had zero steps).
    pub fn final_rkl(&self) -> f64 {
        self.metrics
            .last()
            .map(|m| m.exact_rkl)
            .unwrap_or(self.initial_rkl)
    }

    pub fn final_entropy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.mean_entropy)
    }

    /// Mean intervention ratio over the run; `None` for SeqKD.
    pub fn mean_intervention_ratio(&self) -> Option<f64> {
        let ratios: Vec<f64> = self
            .metrics
            .iter()
            .filter_map(|m| m.intervention_ratio)
            .collect();
        if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
        }
    }
}

/// Builds the teacher and student from the config and runs the loop.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let teacher = make_random_teacher(
        config.model.order,
        config.model.vocab_size,
        config.model.teacher_concentration,
        config.seeds.teacher,
    )?;
    let student = make_weak_student(
        &teacher,
        config.model.student_mode.to_mode(),
        config.seeds.student,
    )?;
    train_with(config, student, &teacher)
}

/// Runs the loop with an existing student against a given teacher; the
/// entry point reused by the continual-learning schedule.
pub fn train_with(
    config: &TrainConfig,
    mut student: PolicyTable,
    teacher: &PolicyTable,
) -> Result<TrainOutcome> {
    config.validate()?;
    if student.vocab() != teacher.vocab() {
        return Err(Error::VocabMismatch {
            left: student.vocab(),
            right: teacher.vocab(),
        });
    }
    let prompts = make_prompt_set(
        config.run.prompt_count,
        config.run.prompt_length,
        config.model.vocab_size,
        config.seeds.prompt,
    )?;
    // Prompts are cycled to fill the batch; rng streams are keyed by slot.
    let batch_prompts: Vec<Prompt> = (0..config.run.batch_trajectories)
        .map(|i| prompts[i % prompts.len()].clone())
        .collect();
    let initial_rkl = exact_reverse_kl(&student, teacher, ContextWeighting::StudentStationary)?;
    let mut metrics = Vec::with_capacity(config.run.steps);

    for step in 0..config.run.steps {
        let step_seed = derive_seed(config.seeds.rollout, step as u64);
        let trajectories = match config.objective.kind {
            ObjectiveKind::SeqKd => {
                rollout_teacher(teacher, &batch_prompts, config.run.horizon, step_seed)?
            }
            _ => {
                let rule = config
                    .objective
                    .mask_rule()
                    .expect("non-SeqKD objectives define a mask rule");
                rollout_student(
                    &student,
                    teacher,
                    &batch_prompts,
                    config.run.horizon,
                    &rule,
                    step_seed,
                )?
            }
        };
        let (losses, grads) = batch_loss_grad(&trajectories, &student, teacher, &config.objective)?;
        if !losses.total().is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let combined = grads.combined();
        let batch_stats = batch_statistics(&trajectories, &student, &config.objective);

        student.apply_gradient(&combined, config.run.lr)?;
        let exact_rkl =
            exact_reverse_kl(&student, teacher, ContextWeighting::StudentStationary)?;
        metrics.push(RunMetrics {
            step,
            loss_total: losses.total(),
            loss_pos: losses.policy(),
            loss_guidance: losses.guidance,
            grad_norm: combined.l2_norm(),
            guidance_grad_norm: grads.guidance.l2_norm(),
            visited_contexts: combined.visited_contexts(),
            mean_entropy: batch_stats.mean_entropy,
            intervention_ratio: batch_stats.intervention_ratio,
            exact_rkl,
            advantage_histogram: batch_stats.histogram,
            floored_tokens: batch_stats.floored_tokens,
        });
    }
    Ok(TrainOutcome {
        teacher: teacher.clone(),
        final_student: student,
        initial_rkl,
        metrics,
    })
}

struct BatchStatistics {
    mean_entropy: f64,
    intervention_ratio: Option<f64>,
    histogram: AdvantageHistogram,
    floored_tokens: usize,
}

/// Batch diagnostics measured on the pre-update student snapshot.
fn batch_statistics(
    trajectories: &[Trajectory],
    student: &PolicyTable,
    objective: &ObjectiveConfig,
) -> BatchStatistics {
    let mut visited = BTreeSet::new();
    let mut histogram = AdvantageHistogram::new();
    let mut masked = 0usize;
    let mut tokens = 0usize;
    let mut floored_tokens = 0usize;
    for traj in trajectories {
        for rec in &traj.records {
            visited.insert(student.row_index(&rec.ctx));
            histogram.record(rec.advantage);
            masked += rec.mask as usize;
            tokens += 1;
            floored_tokens += rec.advantage_floored as usize;
        }
    }
    let mean_entropy = visited
        .iter()
        .map(|&row| {
            entropy(&student.conditional_dist(&crate::policy::ContextKey::from_row_index(
                row,
                student.order(),
                student.vocab(),
            )))
        })
        .sum::<f64>()
        / visited.len().max(1) as f64;
    let intervention_ratio = match objective.kind {
        ObjectiveKind::SeqKd => None,
        _ => Some(masked as f64 / tokens.max(1) as f64),
    };
    BatchStatistics {
        mean_entropy,
        intervention_ratio,
        histogram,
        floored_tokens,
    }
}

/// Retention of task-A skill across a task-B phase: exact reverse KL to
/// teacher A, measured right before and right after phase B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetentionReport {
    pub rkl_to_teacher_a_before_b: f64,
    pub rkl_to_teacher_a_after_b: f64,
}

impl RetentionReport {
    /// Positive when phase B pushed the student away from teacher A.
    pub fn drop(&self) -> f64 {
        self.rkl_to_teacher_a_after_b - self.rkl_to_teacher_a_before_b
    }
}

/// Outcome of the two-task continual-learning schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinualOutcome {
    pub final_student: PolicyTable,
    pub metrics_a: Vec<RunMetrics>,
    pub metrics_b: Vec<RunMetrics>,
    pub retention: RetentionReport,
}

/// Trains on task A, then on task B (a second random teacher over the same
/// geometry), sharing one student across phases.
pub fn continual_train(
    config_a: &TrainConfig,
    config_b: &TrainConfig,
) -> Result<ContinualOutcome> {
    config_a.validate()?;
    config_b.validate()?;
    if config_a.model.vocab_size != config_b.model.vocab_size
        || config_a.model.order != config_b.model.order
    {
        return Err(Error::Config(
            "continual phases must share vocab size and order".into(),
        ));
    }
    let teacher_a = make_random_teacher(
        config_a.model.order,
        config_a.model.vocab_size,
        config_a.model.teacher_concentration,
        config_a.seeds.teacher,
    )?;
    let student = make_weak_student(
        &teacher_a,
        config_a.model.student_mode.to_mode(),
        config_a.seeds.student,
    )?;
    let phase_a = train_with(config_a, student, &teacher_a)?;

    let teacher_b = make_random_teacher(
        config_b.model.order,
        config_b.model.vocab_size,
        config_b.model.teacher_concentration,
        config_b.seeds.teacher,
    )?;
    let before =
        exact_reverse_kl(&phase_a.final_student, &teacher_a, ContextWeighting::StudentStationary)?;
    let phase_b = train_with(config_b, phase_a.final_student, &teacher_b)?;
    let after =
        exact_reverse_kl(&phase_b.final_student, &teacher_a, ContextWeighting::StudentStationary)?;
    Ok(ContinualOutcome {
        final_student: phase_b.final_student,
        metrics_a: phase_a.metrics,
        metrics_b: phase_b.metrics,
        retention: RetentionReport {
            rkl_to_teacher_a_before_b: before,
            rkl_to_teacher_a_after_b: after,
        },
    })
}

/// Sweep axis for [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Beta,
    Tau,
    TopK,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(AblationAxis::Beta),
            "tau" => Ok(AblationAxis::Tau),
            "topk" => Ok(AblationAxis::TopK),
            other => Err(Error::Config(format!(
                "unknown ablation axis '{other}' (expected beta, tau or topk)"
            ))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationAxis::Beta => write!(f, "beta"),
            AblationAxis::Tau => write!(f, "tau"),
            AblationAxis::TopK => write!(f, "topk"),
        }
    }
}

/// One grid point of an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateRow {
    pub value: f64,
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
}

/// Applies one axis value to a base config, validating the value first.
pub fn apply_axis(base: &TrainConfig, axis: AblationAxis, value: f64) -> Result<TrainConfig> {
    let mut config = base.clone();
    match axis {
        AblationAxis::Beta => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config(format!("beta value {value} not in [0, 1]")));
            }
            config.objective.beta = value;
        }
        AblationAxis::Tau => {
            if !(-1.0..=1.0).contains(&value) {
                return Err(Error::Config(format!("tau value {value} not in [-1, 1]")));
            }
            config.objective.tau = value;
        }
        AblationAxis::TopK => {
            if value.fract() != 0.0 || value < 1.0 || value > config.model.vocab_size as f64 {
                return Err(Error::Config(format!(
                    "topk value {value} must be an integer in [1, {}]",
                    config.model.vocab_size
                )));
            }
            config.objective.k_support = Some(value as usize);
        }
    }
    config.validate()?;
    Ok(config)
}

/// One full training run per grid value, sharing the base config's seeds
/// across points. Values are validated before any run starts, and the
/// independent runs execute in parallel.
pub fn ablate(base: &TrainConfig, axis: AblationAxis, values: &[f64]) -> Result<Vec<AblateRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation grid must be nonempty".into()));
    }
    let configs: Vec<TrainConfig> = values
        .iter()
        .map(|&v| apply_axis(base, axis, v))
        .collect::<Result<_>>()?;
    configs
        .into_par_iter()
        .zip(values.par_iter())
        .map(|(config, &value)| {
            let outcome = train(&config)?;
            Ok(AblateRow {
                value,
                config,
                outcome,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::FklVariant;
    use crate::policy::Role;

    fn quick_config(kind: ObjectiveKind, steps: usize) -> TrainConfig {
        let mut config = TrainConfig::weak_student_default(kind);
        config.model.vocab_size = 8;
        config.model.order = 1;
        config.run.steps = steps;
        config.run.batch_trajectories = 8;
        config.run.horizon = 8;
        config.run.prompt_count = 8;
        config
    }

    #[test]
    fn identical_policies_are_a_fixed_point_of_aopd() {
        // Teacher == student: every advantage and gap is exactly zero, the
        // guidance branch sees identical support distributions, and the
        // exact reverse KL stays at zero for the whole run.
        let config = quick_config(ObjectiveKind::Aopd, 6);
        let teacher = make_random_teacher(1, 8, 0.3, config.seeds.teacher).unwrap();
        let mut student = PolicyTable::zero_init(1, 8, Role::Student, 0).unwrap();
        for row in 0..teacher.num_contexts() {
            student.set_logits_row(row, teacher.logits_row(row)).unwrap();
        }
        let outcome = train_with(&config, student, &teacher).unwrap();
        assert!(outcome.initial_rkl.abs() <= 1e-9);
        for m in &outcome.metrics {
            assert!(m.exact_rkl.abs() <= 1e-9, "step {}: rkl {}", m.step, m.exact_rkl);
            assert!(m.grad_norm <= 1e-12, "step {}: grad {}", m.step, m.grad_norm);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_the_student_unchanged() {
        let mut config = quick_config(ObjectiveKind::Aopd, 4);
        config.run.lr = 0.0;
        let outcome = train(&config).unwrap();
        let teacher = make_random_teacher(1, 8, 0.3, config.seeds.teacher).unwrap();
        let initial = make_weak_student(
            &teacher,
            config.model.student_mode.to_mode(),
            config.seeds.student,
        )
        .unwrap();
        assert_eq!(outcome.final_student, initial);
    }

    #[test]
    fn weak_student_default_reduces_exact_rkl() {
        let config = quick_config(ObjectiveKind::Aopd, 30);
        let outcome = train(&config).unwrap();
        assert!(
            outcome.final_rkl() < outcome.initial_rkl,
            "rkl {} -> {}",
            outcome.initial_rkl,
            outcome.final_rkl()
        );
    }

    #[test]
    fn metrics_are_deterministic_per_config() {
        let config = quick_config(ObjectiveKind::Aopd, 10);
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_student, b.final_student);
    }

    #[test]
    fn uniform_init_entropy_starts_at_ln_v() {
        let mut config = quick_config(ObjectiveKind::Aopd, 1);
        config.model.student_mode = StudentModeConfig::UniformInit;
        let outcome = train(&config).unwrap();
        assert!((outcome.metrics[0].mean_entropy - 8f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn intervention_ratio_positive_at_step_zero_for_tau_zero() {
        let config = quick_config(ObjectiveKind::Aopd, 1);
        let outcome = train(&config).unwrap();
        let ratio = outcome.metrics[0].intervention_ratio.unwrap();
        assert!(ratio > 0.0);
        let count = outcome.metrics[0].advantage_histogram.total();
        assert_eq!(count, 8 * 8);
    }

    #[test]
    fn seqkd_has_no_intervention_ratio() {
        let config = quick_config(ObjectiveKind::SeqKd, 3);
        let outcome = train(&config).unwrap();
        for m in &outcome.metrics {
            assert!(m.intervention_ratio.is_none());
            assert_eq!(m.loss_pos, 0.0);
            assert!(m.loss_guidance > 0.0);
        }
    }

    #[test]
    fn reduction_identities_hold_bit_for_bit() {
        // AOPD(tau = -1) == OPD and AOPD(tau = +1, beta = 1) == GKD under
        // shared seeds, compared on every float of every step.
        let steps = 8;
        let opd = train(&quick_config(ObjectiveKind::Opd, steps)).unwrap();
        let mut aopd_neg = quick_config(ObjectiveKind::Aopd, steps);
        aopd_neg.objective.tau = -1.0;
        let aopd_neg = train(&aopd_neg).unwrap();
        assert_metric_bits_equal(&opd.metrics, &aopd_neg.metrics);

        let gkd = train(&quick_config(ObjectiveKind::Gkd, steps)).unwrap();
        let mut aopd_pos = quick_config(ObjectiveKind::Aopd, steps);
        aopd_pos.objective.tau = 1.0;
        let aopd_pos = train(&aopd_pos).unwrap();
        assert_metric_bits_equal(&gkd.metrics, &aopd_pos.metrics);
    }

    pub(super) fn assert_metric_bits_equal(a: &[RunMetrics], b: &[RunMetrics]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits(), "step {}", x.step);
            assert_eq!(x.loss_pos.to_bits(), y.loss_pos.to_bits());
            assert_eq!(x.loss_guidance.to_bits(), y.loss_guidance.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
            assert_eq!(x.mean_entropy.to_bits(), y.mean_entropy.to_bits());
            assert_eq!(x.exact_rkl.to_bits(), y.exact_rkl.to_bits());
            assert_eq!(x.intervention_ratio.map(f64::to_bits), y.intervention_ratio.map(f64::to_bits));
        }
    }

    #[test]
    fn guidance_grad_norm_respects_the_algebraic_bound() {
        let config = quick_config(ObjectiveKind::Aopd, 10);
        let outcome = train(&config).unwrap();
        for m in &outcome.metrics {
            let bound = (2.0 * m.visited_contexts as f64).sqrt();
            assert!(
                m.guidance_grad_norm <= bound,
                "step {}: {} > {}",
                m.step,
                m.guidance_grad_norm,
                bound
            );
        }
    }

    #[test]
    fn line_scan_loss_decreases_on_a_fixed_batch() {
        // apply_gradient must reduce the loss it was computed from, for
        // small lr, on the same batch.
        let config = quick_config(ObjectiveKind::Aopd, 0);
        let teacher = make_random_teacher(1, 8, 0.3, 1).unwrap();
        let student = PolicyTable::zero_init(1, 8, Role::Student, 0).unwrap();
        let prompts = make_prompt_set(8, 1, 8, 4).unwrap();
        let rule = config.objective.mask_rule().unwrap();
        let trajs = rollout_student(&student, &teacher, &prompts, 8, &rule, 5).unwrap();
        let (before, grads) =
            batch_loss_grad(&trajs, &student, &teacher, &config.objective).unwrap();
        for lr in [1e-3, 1e-4] {
            let mut moved = student.clone();
            moved.apply_gradient(&grads.combined(), lr).unwrap();
            let (after, _) =
                batch_loss_grad(&trajs, &moved, &teacher, &config.objective).unwrap();
            assert!(
                after.total() < before.total(),
                "lr {lr}: {} -> {}",
                before.total(),
                after.total()
            );
        }
    }

    #[test]
    fn continual_zero_phase_b_has_exactly_zero_drop() {
        let config_a = quick_config(ObjectiveKind::Aopd, 10);
        let mut config_b = quick_config(ObjectiveKind::Aopd, 0);
        config_b.seeds.teacher = derive_seed(99, 1);
        config_b.seeds.prompt = derive_seed(99, 2);
        let outcome = continual_train(&config_a, &config_b).unwrap();
        assert_eq!(outcome.retention.drop(), 0.0);
    }

    #[test]
    fn continual_same_teacher_does_not_regress() {
        let config_a = quick_config(ObjectiveKind::Aopd, 15);
        let mut config_b = config_a.clone();
        config_b.run.steps = 15;
        config_b.seeds.rollout = derive_seed(7, 3);
        let outcome = continual_train(&config_a, &config_b).unwrap();
        assert!(
            outcome.retention.drop() <= 1e-6,
            "drop {}",
            outcome.retention.drop()
        );
    }

    #[test]
    fn continual_two_teachers_reports_per_phase_metrics() {
        let config_a = quick_config(ObjectiveKind::Aopd, 8);
        let mut config_b = quick_config(ObjectiveKind::Aopd, 8);
        config_b.seeds.teacher = derive_seed(1234, 1);
        config_b.seeds.prompt = derive_seed(1234, 2);
        let outcome = continual_train(&config_a, &config_b).unwrap();
        assert_eq!(outcome.metrics_a.len(), 8);
        assert_eq!(outcome.metrics_b.len(), 8);
        assert!(outcome.retention.rkl_to_teacher_a_before_b >= 0.0);
    }

    #[test]
    fn singleton_grid_matches_a_single_train_call() {
        let base = quick_config(ObjectiveKind::Aopd, 6);
        let rows = ablate(&base, AblationAxis::Beta, &[1.0]).unwrap();
        assert_eq!(rows.len(), 1);
        let direct = train(&base).unwrap();
        assert_metric_bits_equal(&rows[0].outcome.metrics, &direct.metrics);
    }

    #[test]
    fn tau_grid_minus_one_point_reproduces_opd() {
        let base = quick_config(ObjectiveKind::Aopd, 6);
        let rows = ablate(&base, AblationAxis::Tau, &[-1.0, 0.0]).unwrap();
        let opd = train(&quick_config(ObjectiveKind::Opd, 6)).unwrap();
        assert_metric_bits_equal(&rows[0].outcome.metrics, &opd.metrics);
        assert_eq!(rows[1].value, 0.0);
    }

    #[test]
    fn full_k_guidance_equals_untruncated_forward_kl_at_step_zero() {
        // K = V: the support is the whole vocabulary, so the guidance loss
        // at step 0 is the untruncated forward KL over masked tokens.
        let mut base = quick_config(ObjectiveKind::Gkd, 1);
        base.model.student_mode = StudentModeConfig::UniformInit;
        base.objective.fkl_variant = FklVariant::Normalized;
        let rows = ablate(&base, AblationAxis::TopK, &[4.0, 8.0]).unwrap();
        let full_k = &rows[1];
        // Recompute the step-0 guidance loss via full-vocabulary KL.
        let teacher = make_random_teacher(1, 8, 0.3, base.seeds.teacher).unwrap();
        let student = PolicyTable::zero_init(1, 8, Role::Student, 0).unwrap();
        let prompts =
            make_prompt_set(8, base.run.prompt_length, 8, base.seeds.prompt).unwrap();
        let rule = base.objective.mask_rule().unwrap();
        let trajs = rollout_student(
            &student,
            &teacher,
            &prompts,
            8,
            &rule,
            derive_seed(base.seeds.rollout, 0),
        )
        .unwrap();
        let mut expected = 0.0;
        for traj in &trajs {
            let mut traj_loss = 0.0;
            for rec in &traj.records {
                let p_t = teacher.conditional_dist(&rec.ctx);
                let p_s = student.conditional_dist(&rec.ctx);
                traj_loss += crate::simplex::kl_divergence(&p_t, &p_s).unwrap();
            }
            expected += traj_loss / traj.records.len() as f64;
        }
        expected /= trajs.len() as f64;
        assert!(
            (full_k.outcome.metrics[0].loss_guidance - expected).abs() <= 1e-9,
            "guidance {} vs untruncated {}",
            full_k.outcome.metrics[0].loss_guidance,
            expected
        );
    }

    #[test]
    fn illegal_ablation_values_are_rejected_before_running() {
        let base = quick_config(ObjectiveKind::Aopd, 4);
        assert!(ablate(&base, AblationAxis::Beta, &[0.5, 1.5]).is_err());
        assert!(ablate(&base, AblationAxis::Tau, &[-2.0]).is_err());
        assert!(ablate(&base, AblationAxis::TopK, &[2.5]).is_err());
        assert!(ablate(&base, AblationAxis::TopK, &[]).is_err());
    }

    #[test]
    fn config_validation_names_the_offence() {
        let mut config = quick_config(ObjectiveKind::Aopd, 1);
        config.objective.tau = 2.0;
        let err = train(&config).unwrap_err().to_string();
        assert!(err.contains("tau"), "{err}");

        let mut config = quick_config(ObjectiveKind::Aopd, 1);
        config.model.order = 5;
        config.model.vocab_size = 16;
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("enumeration"), "{err}");
    }

    #[test]
    fn non_finite_lr_is_rejected_up_front() {
        let mut config = quick_config(ObjectiveKind::Opd, 2);
        config.run.lr = f64::INFINITY;
        assert!(matches!(train(&config), Err(Error::Config(_))));
    }
}
