//! Token-level losses and their analytic logit gradients for the whole
//! objective family.
//!
//! All losses are functions of the student's logit row `z` for the current
//! context. Gradients follow the softmax Jacobian,
//! `d P_S(v) / d z_i = P_S(v) (1(v = i) - P_S(i))`, and every implemented
//! loss is shift invariant in `z`, so each gradient sums to zero.
//!
//! Sign convention: functions return `d loss / d z`; the optimizer subtracts.
//! The advantage `A_t` and the mask `G_t` are stop-gradient quantities,
//! fixed at rollout time; no gradient flows through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ContextKey, GradientTable, PolicyTable};
use crate::rollout::Trajectory;
use crate::simplex::{
    check_beta, restrict_normalize, softmax, support_softmax, topk_support, LogitVector,
    ProbVector, SupportSet, PROB_FLOOR,
};

/// Floor applied to the teacher probability of the sampled token when
/// computing the advantage. When it fires the token is flagged, not
/// silently clipped.
pub const ADVANTAGE_FLOOR: f64 = 1e-12;

fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Per-position annotation produced at rollout time.
///
/// The context key stores the last `max(student order, teacher order)`
/// tokens so both policies can recover their own conditional row from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub ctx: ContextKey,
    /// Sampled token `y_t`.
    pub token: u16,
    /// `ln P_T(y_t | c_t)`, floored at [`ADVANTAGE_FLOOR`] if flagged.
    pub logp_teacher: f64,
    /// `ln P_S(y_t | c_t)`.
    pub logp_student: f64,
    /// `A_t = ln P_T(y_t | c_t) - ln P_S(y_t | c_t)`, in nats, stop-gradient.
    pub advantage: f64,
    /// `P_T(y_t | c_t) - P_S(y_t | c_t)`, in [-1, 1].
    pub prob_gap: f64,
    /// Intervention mask `G_t` for the run's rule.
    pub mask: bool,
    /// Whether the advantage floor fired on this token.
    pub advantage_floored: bool,
}

impl TokenRecord {
    /// Annotates a sampled token from the two conditional rows, applying the
    /// run's mask rule. The advantage uses the diagnostic floor.
    pub fn from_rows(
        ctx: ContextKey,
        token: u16,
        p_teacher: &ProbVector,
        p_student: &ProbVector,
        rule: &MaskRule,
    ) -> Result<Self> {
        let (advantage, prob_gap, advantage_floored) =
            compute_advantage_floored(p_teacher, p_student, token as usize)?;
        // Recomputed with the same operations as the advantage, so the
        // identity A_t = logp_teacher - logp_student holds bit-exactly.
        let logp_student = ln_floored(p_student.get(token as usize));
        let logp_teacher = ln_floored(p_teacher.get(token as usize).max(ADVANTAGE_FLOOR));
        Ok(Self {
            ctx,
            token,
            logp_teacher,
            logp_student,
            advantage,
            prob_gap,
            mask: rule.applies(advantage, prob_gap),
            advantage_floored,
        })
    }
}

/// A scalar loss together with its gradient over the student's logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLossGrad {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
}

impl TokenLossGrad {
    pub fn grad_l2_norm(&self) -> f64 {
        self.grad_logits.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Which reading of the truncated forward-KL guidance loss to use.
///
/// `Literal` keeps the 1/K factor and the raw full-vocabulary conditionals
/// restricted to the support, differentiating through the full softmax.
/// `Normalized` renormalizes both distributions on the support and is the
/// default; its gradient is the bounded distribution gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FklVariant {
    Literal,
    #[default]
    Normalized,
}

impl std::fmt::Display for FklVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FklVariant::Literal => write!(f, "literal"),
            FklVariant::Normalized => write!(f, "normalized"),
        }
    }
}

/// When the guidance branch replaces the policy gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskRule {
    /// Intervene where `P_T(y) - P_S(y) <= tau`.
    Threshold(f64),
    /// Intervene only where `|A_t| <= epsilon` (the AOPD-Zero rule).
    ZeroAdvantage(f64),
}

impl MaskRule {
    pub fn applies(&self, advantage: f64, prob_gap: f64) -> bool {
        match *self {
            MaskRule::Threshold(tau) => prob_gap <= tau,
            MaskRule::ZeroAdvantage(eps) => advantage.abs() <= eps,
        }
    }
}

/// Advantage and probability gap of a sampled token, both stop-gradient.
///
/// Errors if the teacher probability is exactly zero; callers that want a
/// finite diagnostic value should use [`compute_advantage_floored`].
pub fn compute_advantage(
    p_teacher: &ProbVector,
    p_student: &ProbVector,
    token: usize,
) -> Result<(f64, f64)> {
    let ps = p_student.get(token);
    if ps == 0.0 {
        return Err(Error::ZeroStudentProbability { token });
    }
    let pt = p_teacher.get(token);
    if pt == 0.0 {
        return Err(Error::ZeroTeacherProbability { token });
    }
    Ok((ln_floored(pt) - ln_floored(ps), pt - ps))
}

/// Like [`compute_advantage`] but floors `P_T(y)` at [`ADVANTAGE_FLOOR`]
/// instead of erroring, returning whether the floor fired. The probability
/// gap always uses the raw teacher probability.
pub fn compute_advantage_floored(
    p_teacher: &ProbVector,
    p_student: &ProbVector,
    token: usize,
) -> Result<(f64, f64, bool)> {
    let ps = p_student.get(token);
    if ps == 0.0 {
        return Err(Error::ZeroStudentProbability { token });
    }
    let pt = p_teacher.get(token);
    let floored = pt < ADVANTAGE_FLOOR;
    let advantage = ln_floored(pt.max(ADVANTAGE_FLOOR)) - ln_floored(ps);
    Ok((advantage, pt - ps, floored))
}

/// Token-level intervention mask: 1 iff `prob_gap <= tau`.
pub fn mask_token(prob_gap: f64, tau: f64) -> bool {
    prob_gap <= tau
}

/// Advantage-weighted policy-gradient loss for one token:
/// `loss = -A_t ln P_S(y_t)`, `grad_i = -A_t (1(i = y_t) - P_S(i))`,
/// with `A_t` entering as a constant.
pub fn opd_token(rec: &TokenRecord, p_student: &ProbVector) -> TokenLossGrad {
    let a = rec.advantage;
    let y = rec.token as usize;
    let loss = -a * ln_floored(p_student.get(y));
    let grad_logits = p_student
        .values()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let indicator = if i == y { 1.0 } else { 0.0 };
            -a * (indicator - p)
        })
        .collect();
    TokenLossGrad { loss, grad_logits }
}

/// Token-level negative log likelihood, the SeqKD objective on
/// teacher-sampled tokens: `loss = -ln P_S(y)`, `grad_i = P_S(i) - 1(i = y)`.
pub fn nll_token(token: u16, p_student: &ProbVector) -> TokenLossGrad {
    let y = token as usize;
    let loss = -ln_floored(p_student.get(y));
    let grad_logits = p_student
        .values()
        .iter()
        .enumerate()
        .map(|(i, &p)| p - if i == y { 1.0 } else { 0.0 })
        .collect();
    TokenLossGrad { loss, grad_logits }
}

/// Truncated forward-KL guidance loss on the teacher support.
pub fn fkl_token(
    p_teacher: &ProbVector,
    z_student: &LogitVector,
    support: &SupportSet,
    variant: FklVariant,
) -> Result<TokenLossGrad> {
    if p_teacher.len() != z_student.len() {
        return Err(Error::VocabMismatch {
            left: p_teacher.len(),
            right: z_student.len(),
        });
    }
    match variant {
        FklVariant::Literal => fkl_literal(p_teacher, z_student, support),
        FklVariant::Normalized => fkl_normalized(p_teacher, z_student, support),
    }
}

/// Literal reading: `loss = (1/K) sum_{v in S} P_T(v) (ln P_T(v) - ln P_S(v))`
/// with raw full-vocabulary conditionals, differentiated through the full
/// softmax. The gradient is nonzero outside the support because off-support
/// logits shift the normalizer:
/// `grad_i = (1/K) (W P_S(i) - P_T(i) 1(i in S))` with `W = sum_{v in S} P_T(v)`.
fn fkl_literal(
    p_teacher: &ProbVector,
    z_student: &LogitVector,
    support: &SupportSet,
) -> Result<TokenLossGrad> {
    let p_student = softmax(z_student, 1.0)?;
    let k = support.k() as f64;
    let teacher_mass: f64 = support.token_ids().iter().map(|&v| p_teacher.get(v)).sum();
    if teacher_mass <= 0.0 {
        return Err(Error::ZeroSupportMass);
    }
    let mut loss = 0.0;
    for &v in support.token_ids() {
        let t = p_teacher.get(v);
        if t > 0.0 {
            loss += t * (ln_floored(t) - ln_floored(p_student.get(v)));
        }
    }
    loss /= k;
    let grad_logits = (0..p_teacher.len())
        .map(|i| {
            let on_support = if support.contains(i) { p_teacher.get(i) } else { 0.0 };
            (teacher_mass * p_student.get(i) - on_support) / k
        })
        .collect();
    Ok(TokenLossGrad { loss, grad_logits })
}

/// Normalized reading: both distributions renormalized on the support, the
/// student side as a softmax over the support's logits. The gradient is the
/// bounded distribution gap `grad_j = s~_j - t~_j` on the support and zero
/// outside, so every component lies in [-1, 1].
fn fkl_normalized(
    p_teacher: &ProbVector,
    z_student: &LogitVector,
    support: &SupportSet,
) -> Result<TokenLossGrad> {
    let t = restrict_normalize(p_teacher, support)?;
    let s = support_softmax(z_student, support);
    let mut loss = 0.0;
    for (&tv, &sv) in t.iter().zip(&s) {
        if tv > 0.0 {
            loss += tv * (ln_floored(tv) - ln_floored(sv));
        }
    }
    let mut grad_logits = vec![0.0; z_student.len()];
    for ((&id, &sv), &tv) in support.token_ids().iter().zip(&s).zip(&t) {
        grad_logits[id] = sv - tv;
    }
    Ok(TokenLossGrad { loss, grad_logits })
}

/// Interpolated Jensen-Shannon guidance loss on the support-normalized
/// distributions, with analytic gradient with respect to the student logits.
///
/// `beta = 1` delegates to the normalized forward-KL path so the endpoint
/// reduction is exact; `beta = 0` is reverse KL with the closed-form
/// gradient `grad_j = s~_j (ln(s~_j / t~_j) - KL(s~ || t~))`.
pub fn jsd_token(
    p_teacher: &ProbVector,
    z_student: &LogitVector,
    support: &SupportSet,
    beta: f64,
) -> Result<TokenLossGrad> {
    check_beta(beta)?;
    if beta == 1.0 {
        return fkl_normalized(p_teacher, z_student, support);
    }
    let t = restrict_normalize(p_teacher, support)?;
    let s = support_softmax(z_student, support);
    let ids = support.token_ids();

    if beta == 0.0 {
        // Reverse KL on the support.
        let mut kl = 0.0;
        for (pos, (&sv, &tv)) in s.iter().zip(&t).enumerate() {
            if sv > 0.0 {
                if tv == 0.0 {
                    return Err(Error::AbsoluteContinuity { token: ids[pos] });
                }
                kl += sv * (ln_floored(sv) - ln_floored(tv));
            }
        }
        let mut grad_logits = vec![0.0; z_student.len()];
        for ((&id, &sv), &tv) in ids.iter().zip(&s).zip(&t) {
            grad_logits[id] = sv * (ln_floored(sv) - ln_floored(tv) - kl);
        }
        return Ok(TokenLossGrad { loss: kl, grad_logits });
    }

    // Interior beta. Midpoint m = (1 - beta) t~ + beta s~ dominates both
    // arguments, so the loss is always finite.
    let m: Vec<f64> = t
        .iter()
        .zip(&s)
        .map(|(&tv, &sv)| (1.0 - beta) * tv + beta * sv)
        .collect();
    let mut loss = 0.0;
    for ((&tv, &sv), &mv) in t.iter().zip(&s).zip(&m) {
        if tv > 0.0 {
            loss += beta * tv * (ln_floored(tv) - ln_floored(mv));
        }
        if sv > 0.0 {
            loss += (1.0 - beta) * sv * (ln_floored(sv) - ln_floored(mv));
        }
    }
    // d loss / d s~_j, then the softmax Jacobian chain.
    let g: Vec<f64> = t
        .iter()
        .zip(&s)
        .zip(&m)
        .map(|((&tv, &sv), &mv)| {
            -(beta / mv) * (beta * tv + (1.0 - beta) * sv)
                + (1.0 - beta) * (ln_floored(sv) - ln_floored(mv) + 1.0)
        })
        .collect();
    let g_mean: f64 = s.iter().zip(&g).map(|(&sv, &gv)| sv * gv).sum();
    let mut grad_logits = vec![0.0; z_student.len()];
    for ((&id, &sv), &gv) in ids.iter().zip(&s).zip(&g) {
        grad_logits[id] = sv * (gv - g_mean);
    }
    Ok(TokenLossGrad { loss, grad_logits })
}

/// Guidance-branch parameters of the AOPD objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub beta: f64,
    pub fkl_variant: FklVariant,
}

/// One token of the generalized AOPD objective: the guidance branch where
/// the record's mask is set (forward KL when beta = 1, otherwise JSD-beta),
/// the policy-gradient branch elsewhere. Exactly one branch fires per token.
/// The mask is precomputed in the record and is stop-gradient.
pub fn aopd_token(
    rec: &TokenRecord,
    p_teacher: &ProbVector,
    z_student: &LogitVector,
    support: &SupportSet,
    guidance: &GuidanceConfig,
) -> Result<TokenLossGrad> {
    if rec.mask {
        if guidance.beta == 1.0 {
            fkl_token(p_teacher, z_student, support, guidance.fkl_variant)
        } else {
            jsd_token(p_teacher, z_student, support, guidance.beta)
        }
    } else {
        let p_student = softmax(z_student, 1.0)?;
        Ok(opd_token(rec, &p_student))
    }
}

/// The objective selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "OPD")]
    Opd,
    #[serde(rename = "AOPD")]
    Aopd,
    #[serde(rename = "AOPD-Zero")]
    AopdZero,
    #[serde(rename = "GKD")]
    Gkd,
    #[serde(rename = "SeqKD")]
    SeqKd,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ObjectiveKind::Opd => "OPD",
            ObjectiveKind::Aopd => "AOPD",
            ObjectiveKind::AopdZero => "AOPD-Zero",
            ObjectiveKind::Gkd => "GKD",
            ObjectiveKind::SeqKd => "SeqKD",
        };
        write!(f, "{s}")
    }
}

fn default_beta() -> f64 {
    1.0
}

fn default_zero_eps() -> f64 {
    1e-6
}

/// Full objective configuration shared by the trainer and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Intervention threshold on the probability gap, in [-1, 1].
    #[serde(default)]
    pub tau: f64,
    /// JSD interpolation parameter, in [0, 1]; 1 is forward KL.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Teacher support size; `None` resolves to `min(32, vocab)`.
    #[serde(default)]
    pub k_support: Option<usize>,
    #[serde(default)]
    pub fkl_variant: FklVariant,
    /// Float-equality guard for the AOPD-Zero mask, in nats.
    #[serde(default = "default_zero_eps")]
    pub zero_advantage_epsilon: f64,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            tau: 0.0,
            beta: 1.0,
            k_support: None,
            fkl_variant: FklVariant::Normalized,
            zero_advantage_epsilon: default_zero_eps(),
        }
    }

    /// Resolved teacher support size for a vocabulary.
    pub fn effective_k(&self, vocab: usize) -> usize {
        self.k_support.unwrap_or_else(|| vocab.min(32))
    }

    /// The mask rule driving the guidance branch; `None` for SeqKD, which
    /// has no intervention concept. OPD and GKD are the tau = -1 and
    /// tau = +1 reductions of the threshold rule.
    pub fn mask_rule(&self) -> Option<MaskRule> {
        match self.kind {
            ObjectiveKind::Opd => Some(MaskRule::Threshold(-1.0)),
            ObjectiveKind::Aopd => Some(MaskRule::Threshold(self.tau)),
            ObjectiveKind::AopdZero => {
                Some(MaskRule::ZeroAdvantage(self.zero_advantage_epsilon))
            }
            ObjectiveKind::Gkd => Some(MaskRule::Threshold(1.0)),
            ObjectiveKind::SeqKd => None,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau) || !self.tau.is_finite() {
            return Err(Error::OutOfRange {
                name: "tau",
                message: format!("{} not in [-1, 1]", self.tau),
            });
        }
        check_beta(self.beta)?;
        let k = self.effective_k(vocab);
        if k == 0 || k > vocab {
            return Err(Error::OutOfRange {
                name: "k_support",
                message: format!("{k} not in [1, {vocab}]"),
            });
        }
        if self.zero_advantage_epsilon.is_nan() || self.zero_advantage_epsilon < 0.0 {
            return Err(Error::OutOfRange {
                name: "zero_advantage_epsilon",
                message: format!("{} is negative", self.zero_advantage_epsilon),
            });
        }
        Ok(())
    }
}

/// Per-branch loss totals for a trajectory or a batch. The policy-gradient
/// branch is split by advantage sign so the positive/negative decomposition
/// of the OPD loss is exact by construction: `total` is literally the sum
/// of the three buckets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Policy-gradient branch, tokens with `A_t > 0`.
    pub policy_pos: f64,
    /// Policy-gradient branch, tokens with `A_t <= 0`.
    pub policy_neg: f64,
    /// Divergence-guidance branch (and the SeqKD NLL, which is supervised
    /// matching rather than a policy gradient).
    pub guidance: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        (self.policy_pos + self.policy_neg) + self.guidance
    }

    pub fn policy(&self) -> f64 {
        self.policy_pos + self.policy_neg
    }

    fn add_scaled(&mut self, other: &LossBreakdown, weight: f64) {
        self.policy_pos += weight * other.policy_pos;
        self.policy_neg += weight * other.policy_neg;
        self.guidance += weight * other.guidance;
    }
}

/// Gradients accumulated separately per branch; the optimizer consumes
/// their sum, while diagnostics read the guidance branch alone (its rows
/// obey the algebraic bound `||row||_2 <= sqrt(2)`).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGradients {
    pub policy: GradientTable,
    pub guidance: GradientTable,
}

impl BranchGradients {
    fn new(order: usize, vocab: usize) -> Self {
        Self {
            policy: GradientTable::new(order, vocab),
            guidance: GradientTable::new(order, vocab),
        }
    }

    pub fn combined(&self) -> GradientTable {
        self.policy.combined(&self.guidance)
    }
}

/// Loss and gradient of one trajectory: per-token values averaged with
/// uniform weight `1/|y|` and accumulated by context into gradient tables.
pub fn sequence_loss_grad(
    traj: &Trajectory,
    student: &PolicyTable,
    teacher: &PolicyTable,
    objective: &ObjectiveConfig,
) -> Result<(LossBreakdown, BranchGradients)> {
    if traj.records.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if student.vocab() != teacher.vocab() {
        return Err(Error::VocabMismatch {
            left: student.vocab(),
            right: teacher.vocab(),
        });
    }
    let vocab = student.vocab();
    let weight = 1.0 / traj.records.len() as f64;
    let mut losses = LossBreakdown::default();
    let mut grads = BranchGradients::new(student.order(), vocab);
    let guidance_cfg = GuidanceConfig {
        beta: objective.beta,
        fkl_variant: objective.fkl_variant,
    };
    let k = objective.effective_k(vocab);

    for rec in &traj.records {
        let student_row = student.row_index(&rec.ctx);
        let z_student = student.conditional_logits(&rec.ctx);
        match objective.kind {
            ObjectiveKind::SeqKd => {
                let p_student = softmax(&z_student, 1.0)?;
                let tlg = nll_token(rec.token, &p_student);
                losses.guidance += weight * tlg.loss;
                grads.guidance.accumulate(student_row, &tlg.grad_logits, weight);
            }
            _ if rec.mask => {
                let p_teacher = teacher.conditional_dist(&rec.ctx);
                let support = topk_support(&p_teacher, k)?;
                let tlg = aopd_token(rec, &p_teacher, &z_student, &support, &guidance_cfg)?;
                losses.guidance += weight * tlg.loss;
                grads.guidance.accumulate(student_row, &tlg.grad_logits, weight);
            }
            _ => {
                let p_student = softmax(&z_student, 1.0)?;
                let tlg = opd_token(rec, &p_student);
                if rec.advantage > 0.0 {
                    losses.policy_pos += weight * tlg.loss;
                } else {
                    losses.policy_neg += weight * tlg.loss;
                }
                grads.policy.accumulate(student_row, &tlg.grad_logits, weight);
            }
        }
    }
    Ok((losses, grads))
}

/// Batch loss and gradient: the mean over trajectories of
/// [`sequence_loss_grad`], matching the outer expectation of the objective.
pub fn batch_loss_grad(
    trajectories: &[Trajectory],
    student: &PolicyTable,
    teacher: &PolicyTable,
    objective: &ObjectiveConfig,
) -> Result<(LossBreakdown, BranchGradients)> {
    if trajectories.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let scale = 1.0 / trajectories.len() as f64;
    let mut losses = LossBreakdown::default();
    let mut grads = BranchGradients::new(student.order(), student.vocab());
    for traj in trajectories {
        let (traj_losses, traj_grads) = sequence_loss_grad(traj, student, teacher, objective)?;
        losses.add_scaled(&traj_losses, scale);
        grads.policy.merge(&traj_grads.policy, scale);
        grads.guidance.merge(&traj_grads.guidance, scale);
    }
    Ok((losses, grads))
}
