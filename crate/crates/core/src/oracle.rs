//! Independent brute-force verifiers.
//!
//! Everything here deliberately avoids the analytic code paths it checks:
//! gradients come from central finite differences, divergences from full
//! context enumeration, and the black-hole escape dynamics from actually
//! running single-row training. Enumeration is capped at V^m <= 65536;
//! larger configurations are rejected rather than approximated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::objectives::{
    aopd_token, GuidanceConfig, ObjectiveConfig, TokenRecord,
};
use crate::policy::{
    sample_from_dist, ContextKey, GradientTable, PolicyTable, Role, MAX_CONTEXTS,
};
use crate::simplex::{
    kl_divergence, restrict_normalize, support_softmax, topk_support, LogitVector, ProbVector,
};

/// Central finite differences of a scalar loss over logit coordinates:
/// `(L(z + h e_v) - L(z - h e_v)) / (2h)` per coordinate.
pub fn fd_gradient<F>(loss: F, z: &LogitVector, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&LogitVector) -> Result<f64>,
{
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::OutOfRange {
            name: "step",
            message: format!("{step} is not a positive finite real"),
        });
    }
    let mut grad = Vec::with_capacity(z.len());
    let mut probe = z.values().to_vec();
    for index in 0..z.len() {
        let base = probe[index];
        probe[index] = base + step;
        let plus = loss(&LogitVector::new(probe.clone())?)?;
        probe[index] = base - step;
        let minus = loss(&LogitVector::new(probe.clone())?)?;
        probe[index] = base;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteProbe { index });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// How expectations over contexts are weighted in exact divergences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextWeighting {
    /// Every enumerable context weighted 1 / V^m.
    Uniform,
    /// Contexts weighted by the stationary distribution of the student's
    /// context chain. This is the default reported metric.
    StudentStationary,
}

/// Stationary distribution of the context chain induced by `policy` over
/// windows of `window_order` tokens, computed by power iteration to an L1
/// fixed-point tolerance of 1e-13. The chain is irreducible and aperiodic
/// because softmax conditionals from finite logits have full support.
pub fn stationary_context_distribution(
    policy: &PolicyTable,
    window_order: usize,
) -> Result<Vec<f64>> {
    if window_order < policy.order() {
        return Err(Error::ShapeMismatch(format!(
            "window order {window_order} below policy order {}",
            policy.order()
        )));
    }
    let vocab = policy.vocab();
    let contexts = checked_pow(vocab, window_order)?;
    if contexts == 1 {
        return Ok(vec![1.0]);
    }
    // Conditional rows cache, one per policy context.
    let rows: Vec<ProbVector> = (0..policy.num_contexts())
        .map(|row| {
            policy.conditional_dist(&ContextKey::from_row_index(row, policy.order(), vocab))
        })
        .collect();
    let policy_contexts = policy.num_contexts();
    let tail = contexts / vocab;
    let suffix_of = |window: usize| window % policy_contexts;
    let shift = |window: usize, token: usize| (window % tail) * vocab + token;

    let mut pi = vec![1.0 / contexts as f64; contexts];
    let mut next = vec![0.0f64; contexts];
    for _ in 0..20_000 {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (window, &mass) in pi.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let row = &rows[suffix_of(window)];
            for (token, &p) in row.values().iter().enumerate() {
                if p > 0.0 {
                    next[shift(window, token)] += mass * p;
                }
            }
        }
        let delta: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if delta < 1e-13 {
            break;
        }
    }
    Ok(pi)
}

/// Exact reverse KL between two tabular policies:
/// `sum_ctx w(ctx) KL(P_S(.|ctx) || P_T(.|ctx))` over all enumerable
/// contexts of the larger order.
pub fn exact_reverse_kl(
    student: &PolicyTable,
    teacher: &PolicyTable,
    weighting: ContextWeighting,
) -> Result<f64> {
    if student.vocab() != teacher.vocab() {
        return Err(Error::VocabMismatch {
            left: student.vocab(),
            right: teacher.vocab(),
        });
    }
    let vocab = student.vocab();
    let window_order = student.order().max(teacher.order());
    let contexts = checked_pow(vocab, window_order)?;
    let weights: Vec<f64> = match weighting {
        ContextWeighting::Uniform => vec![1.0 / contexts as f64; contexts],
        ContextWeighting::StudentStationary => {
            stationary_context_distribution(student, window_order)?
        }
    };
    let mut total = 0.0;
    for (window, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let ctx = ContextKey::from_row_index(window, window_order, vocab);
        let p_s = student.conditional_dist(&ctx);
        let p_t = teacher.conditional_dist(&ctx);
        total += w * kl_divergence(&p_s, &p_t)?;
    }
    Ok(total)
}

/// Monte-Carlo estimate of reverse KL from sampled tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct K1Estimate {
    /// Mean of `ln P_S(y) - ln P_T(y)` over the sampled tokens.
    pub mean: f64,
    /// Standard error of the mean from 100 batch means, which absorbs the
    /// autocorrelation of the context chain.
    pub std_error: f64,
    pub samples: usize,
}

/// Runs the student's context chain and averages the sampled log-ratio, the
/// single-sample (K1) estimator of reverse KL. A burn-in prefix is discarded
/// so the average approximates the student-stationary weighting.
pub fn k1_estimate(
    student: &PolicyTable,
    teacher: &PolicyTable,
    samples: usize,
    burn_in: usize,
    seed: u64,
) -> Result<K1Estimate> {
    if student.vocab() != teacher.vocab() {
        return Err(Error::VocabMismatch {
            left: student.vocab(),
            right: teacher.vocab(),
        });
    }
    if samples < 100 {
        return Err(Error::OutOfRange {
            name: "samples",
            message: format!("{samples} must be >= 100"),
        });
    }
    let width = student.order().max(teacher.order());
    let mut window = vec![0u16; width];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let push = |window: &mut Vec<u16>, token: u16| {
        if !window.is_empty() {
            window.rotate_left(1);
            *window.last_mut().unwrap() = token;
        }
    };
    for _ in 0..burn_in {
        let ctx = ContextKey::new(window.clone());
        let token = student.sample_token(&ctx, &mut rng);
        push(&mut window, token);
    }
    let blocks = 100usize;
    let block_len = samples / blocks;
    let mut block_means = Vec::with_capacity(blocks);
    let mut drawn = 0usize;
    for _ in 0..blocks {
        let mut acc = 0.0;
        for _ in 0..block_len {
            let ctx = ContextKey::new(window.clone());
            let p_s = student.conditional_dist(&ctx);
            let p_t = teacher.conditional_dist(&ctx);
            let token = sample_from_dist(&p_s, &mut rng);
            acc += p_s.get(token as usize).ln() - p_t.get(token as usize).ln();
            push(&mut window, token);
            drawn += 1;
        }
        block_means.push(acc / block_len as f64);
    }
    let mean = block_means.iter().sum::<f64>() / blocks as f64;
    let var = block_means
        .iter()
        .map(|b| (b - mean) * (b - mean))
        .sum::<f64>()
        / (blocks - 1) as f64;
    Ok(K1Estimate {
        mean,
        std_error: (var / blocks as f64).sqrt(),
        samples: drawn,
    })
}

/// A single-context instance of the exploration black hole: the teacher
/// concentrates on an essential token that the student has almost entirely
/// suppressed.
#[derive(Debug, Clone, PartialEq)]
pub struct BlackHoleScenario {
    pub ctx: ContextKey,
    pub essential_token: usize,
    pub teacher_row: ProbVector,
    pub student_row: ProbVector,
}

/// Teacher probability placed on the essential token.
pub const BLACKHOLE_TEACHER_MASS: f64 = 0.9;
/// Student probability left on the essential token.
pub const BLACKHOLE_STUDENT_MASS: f64 = 1e-6;

/// Constructs the scenario: `P_T(v*) = 0.9`, `P_S(v*) = 1e-6`, remaining
/// mass spread over the other tokens with seeded random proportions.
pub fn make_blackhole(vocab: usize, seed: u64) -> Result<BlackHoleScenario> {
    if vocab < 3 {
        return Err(Error::OutOfRange {
            name: "vocab",
            message: format!("{vocab} must be >= 3"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let essential_token = rand::Rng::random_range(&mut rng, 0..vocab);
    let gamma = Gamma::new(1.0, 1.0).expect("unit gamma");
    let mut spread = |target: f64, hole: f64| -> ProbVector {
        let raw: Vec<f64> = (0..vocab - 1).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = raw.iter().sum();
        let mut values = Vec::with_capacity(vocab);
        let mut others = raw.iter().map(|&g| target * g / sum);
        for v in 0..vocab {
            if v == essential_token {
                values.push(hole);
            } else {
                values.push(others.next().unwrap());
            }
        }
        ProbVector::new(values).expect("constructed on the simplex")
    };
    let teacher_row = spread(1.0 - BLACKHOLE_TEACHER_MASS, BLACKHOLE_TEACHER_MASS);
    let student_row = spread(1.0 - BLACKHOLE_STUDENT_MASS, BLACKHOLE_STUDENT_MASS);
    Ok(BlackHoleScenario {
        ctx: ContextKey::empty(),
        essential_token,
        teacher_row,
        student_row,
    })
}

/// Per-step trace of a single-row escape run.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeTrace {
    /// `P_S(v*)` per step, including the initial value (length steps + 1).
    pub p_essential: Vec<f64>,
    /// Student logit of the essential token per step (length steps + 1).
    pub z_essential: Vec<f64>,
    /// Whether the guidance mask fired at each step (length steps).
    pub intervened: Vec<bool>,
    /// Whether, at intervention time, the support-normalized student mass at
    /// v* was below the teacher's (the regime where guidance must push the
    /// essential logit up). Length steps.
    pub guidance_pull_up: Vec<bool>,
}

impl EscapeTrace {
    pub fn final_p_essential(&self) -> f64 {
        *self.p_essential.last().unwrap()
    }
}

/// Trains the scenario's single row for `steps` on-policy steps under the
/// chosen objective, one sampled token per step, and traces `P_S(v*)`.
pub fn escape_experiment(
    scenario: &BlackHoleScenario,
    objective: &ObjectiveConfig,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<EscapeTrace> {
    let vocab = scenario.teacher_row.len();
    objective.validate(vocab)?;
    let rule = objective.mask_rule().ok_or_else(|| {
        Error::Config("escape experiment needs an objective with an intervention rule".into())
    })?;
    let teacher = PolicyTable::from_prob_rows(
        0,
        vocab,
        Role::Teacher,
        seed,
        std::slice::from_ref(&scenario.teacher_row),
    )?;
    let mut student = PolicyTable::from_prob_rows(
        0,
        vocab,
        Role::Student,
        seed,
        std::slice::from_ref(&scenario.student_row),
    )?;
    let guidance = GuidanceConfig {
        beta: objective.beta,
        fkl_variant: objective.fkl_variant,
    };
    let k = objective.effective_k(vocab);
    let ctx = ContextKey::empty();
    let v_star = scenario.essential_token;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut trace = EscapeTrace {
        p_essential: vec![student.conditional_dist(&ctx).get(v_star)],
        z_essential: vec![student.logits_row(0)[v_star]],
        intervened: Vec::with_capacity(steps),
        guidance_pull_up: Vec::with_capacity(steps),
    };
    let p_teacher = teacher.conditional_dist(&ctx);
    let support = topk_support(&p_teacher, k)?;
    let t_restricted = restrict_normalize(&p_teacher, &support)?;

    for _ in 0..steps {
        let p_student = student.conditional_dist(&ctx);
        let token = sample_from_dist(&p_student, &mut rng);
        let rec = TokenRecord::from_rows(ctx.clone(), token, &p_teacher, &p_student, &rule)?;
        let z = student.conditional_logits(&ctx);
        let pull_up = rec.mask
            && match support.position(v_star) {
                Some(pos) => support_softmax(&z, &support)[pos] < t_restricted[pos],
                None => false,
            };
        let tlg = aopd_token(&rec, &p_teacher, &z, &support, &guidance)?;
        let mut grads = GradientTable::new(0, vocab);
        grads.accumulate(0, &tlg.grad_logits, 1.0);
        student.apply_gradient(&grads, lr)?;
        trace.intervened.push(rec.mask);
        trace.guidance_pull_up.push(pull_up);
        trace.p_essential.push(student.conditional_dist(&ctx).get(v_star));
        trace.z_essential.push(student.logits_row(0)[v_star]);
    }
    Ok(trace)
}

fn checked_pow(vocab: usize, order: usize) -> Result<usize> {
    let mut out = 1usize;
    for _ in 0..order {
        out = out.saturating_mul(vocab);
        if out > MAX_CONTEXTS {
            return Err(Error::EnumerationTooLarge { size: out });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{opd_token, ObjectiveKind};
    use crate::policy::{make_random_teacher, make_weak_student, StudentMode};
    use crate::simplex::softmax;
    use approx::assert_relative_eq;

    #[test]
    fn fd_gradient_of_constant_is_zero() {
        let z = LogitVector::new(vec![0.3, -1.0, 2.0]).unwrap();
        let grad = fd_gradient(|_| Ok(4.2), &z, 1e-5).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fd_gradient_of_linear_recovers_coefficient() {
        let z = LogitVector::new(vec![0.3, -1.0, 2.0]).unwrap();
        let grad = fd_gradient(|z| Ok(3.5 * z.values()[1]), &z, 1e-5).unwrap();
        assert_relative_eq!(grad[1], 3.5, epsilon = 1e-8);
        assert!(grad[0].abs() < 1e-9 && grad[2].abs() < 1e-9);
    }

    #[test]
    fn fd_gradient_matches_opd_on_a_random_instance() {
        let z = LogitVector::new(vec![0.4, -0.7, 1.2, 0.1]).unwrap();
        let rec = TokenRecord {
            ctx: ContextKey::empty(),
            token: 2,
            logp_teacher: -1.0,
            logp_student: -0.5,
            advantage: -0.5,
            prob_gap: -0.2,
            mask: false,
            advantage_floored: false,
        };
        let analytic = opd_token(&rec, &softmax(&z, 1.0).unwrap());
        let fd = fd_gradient(
            |probe| Ok(opd_token(&rec, &softmax(probe, 1.0)?).loss),
            &z,
            1e-5,
        )
        .unwrap();
        for (a, f) in analytic.grad_logits.iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-8);
            assert!((a - f).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn exact_rkl_identity_is_zero() {
        let teacher = make_random_teacher(2, 8, 0.5, 1).unwrap();
        let student = make_weak_student(&teacher, StudentMode::Perturbed { sigma: 0.0 }, 2).unwrap();
        for weighting in [ContextWeighting::Uniform, ContextWeighting::StudentStationary] {
            assert_eq!(exact_reverse_kl(&student, &teacher, weighting).unwrap(), 0.0);
        }
    }

    #[test]
    fn exact_rkl_single_row_plug_in() {
        let student = PolicyTable::from_prob_rows(
            0,
            2,
            Role::Student,
            0,
            &[ProbVector::new(vec![0.5, 0.5]).unwrap()],
        )
        .unwrap();
        let teacher = PolicyTable::from_prob_rows(
            0,
            2,
            Role::Teacher,
            0,
            &[ProbVector::new(vec![0.75, 0.25]).unwrap()],
        )
        .unwrap();
        let got = exact_reverse_kl(&student, &teacher, ContextWeighting::Uniform).unwrap();
        let expected = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2.0f64.ln();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert_relative_eq!(got, 0.14384, epsilon = 1e-5);
    }

    #[test]
    fn exact_rkl_nonnegative_and_zero_only_at_equality() {
        let teacher = make_random_teacher(1, 8, 0.5, 3).unwrap();
        let student = make_weak_student(&teacher, StudentMode::Perturbed { sigma: 1.0 }, 4).unwrap();
        let v = exact_reverse_kl(&student, &teacher, ContextWeighting::StudentStationary).unwrap();
        assert!(v > 0.0);
    }

    #[test]
    fn stationary_distribution_of_uniform_policy_is_uniform() {
        let policy = PolicyTable::zero_init(2, 4, Role::Student, 0).unwrap();
        let pi = stationary_context_distribution(&policy, 2).unwrap();
        assert_eq!(pi.len(), 16);
        for &w in &pi {
            assert_relative_eq!(w, 1.0 / 16.0, epsilon = 1e-12);
        }
        let total: f64 = pi.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn stationary_distribution_is_a_fixed_point() {
        let policy = make_random_teacher(1, 6, 0.4, 9).unwrap();
        let pi = stationary_context_distribution(&policy, 1).unwrap();
        let mut pushed = vec![0.0f64; 6];
        for (window, &mass) in pi.iter().enumerate() {
            let row = policy.conditional_dist(&ContextKey::from_row_index(window, 1, 6));
            for (token, &p) in row.values().iter().enumerate() {
                pushed[token] += mass * p;
            }
        }
        for (a, b) in pi.iter().zip(&pushed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn k1_estimate_matches_exact_within_three_standard_errors() {
        let teacher = make_random_teacher(1, 8, 0.5, 11).unwrap();
        let student = make_weak_student(&teacher, StudentMode::Perturbed { sigma: 1.0 }, 12).unwrap();
        let exact =
            exact_reverse_kl(&student, &teacher, ContextWeighting::StudentStationary).unwrap();
        let est = k1_estimate(&student, &teacher, 100_000, 1_000, 13).unwrap();
        assert!(
            (est.mean - exact).abs() <= 3.0 * est.std_error,
            "k1 {} vs exact {exact}, se {}",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn blackhole_scenario_satisfies_its_invariants() {
        for seed in 0..5 {
            let s = make_blackhole(16, seed).unwrap();
            assert!(s.student_row.get(s.essential_token) <= 1e-6);
            assert!(s.teacher_row.get(s.essential_token) >= 0.5);
            let mass: f64 = s.teacher_row.values().iter().sum();
            assert_relative_eq!(mass, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn blackhole_opd_barely_promotes_the_essential_token() {
        let s = make_blackhole(16, 3).unwrap();
        // Sample a non-essential token with a negative advantage.
        let token = (0..16).find(|&v| v != s.essential_token).unwrap();
        let (a, gap) =
            crate::objectives::compute_advantage(&s.teacher_row, &s.student_row, token).unwrap();
        let rec = TokenRecord {
            ctx: ContextKey::empty(),
            token: token as u16,
            logp_teacher: 0.0,
            logp_student: 0.0,
            advantage: a,
            prob_gap: gap,
            mask: false,
            advantage_floored: false,
        };
        let tlg = opd_token(&rec, &s.student_row);
        assert!(tlg.grad_logits[s.essential_token].abs() <= a.abs() * 1e-6);
    }

    #[test]
    fn blackhole_guidance_strongly_promotes_the_essential_token() {
        let s = make_blackhole(16, 3).unwrap();
        let z = LogitVector::new(
            s.student_row
                .values()
                .iter()
                .map(|&p| p.max(1e-300).ln())
                .collect(),
        )
        .unwrap();
        let support = topk_support(&s.teacher_row, 16).unwrap();
        let tlg = crate::objectives::fkl_token(
            &s.teacher_row,
            &z,
            &support,
            crate::objectives::FklVariant::Normalized,
        )
        .unwrap();
        assert!(tlg.grad_logits[s.essential_token] <= -0.4);
    }

    #[test]
    fn blackhole_gradient_asymmetry_exceeds_four_orders() {
        // |aopd guidance grad at v*| / |opd grad at v*| >= 1e4 on the
        // constructed scenario, for a sampled non-essential token.
        let s = make_blackhole(16, 5).unwrap();
        let token = (0..16).find(|&v| v != s.essential_token).unwrap();
        let (a, gap) =
            crate::objectives::compute_advantage(&s.teacher_row, &s.student_row, token).unwrap();
        let rec = TokenRecord {
            ctx: ContextKey::empty(),
            token: token as u16,
            logp_teacher: 0.0,
            logp_student: 0.0,
            advantage: a,
            prob_gap: gap,
            mask: false,
            advantage_floored: false,
        };
        let opd_grad = opd_token(&rec, &s.student_row).grad_logits[s.essential_token].abs();
        let z = LogitVector::new(
            s.student_row
                .values()
                .iter()
                .map(|&p| p.max(1e-300).ln())
                .collect(),
        )
        .unwrap();
        let support = topk_support(&s.teacher_row, 16).unwrap();
        let guidance_grad = crate::objectives::fkl_token(
            &s.teacher_row,
            &z,
            &support,
            crate::objectives::FklVariant::Normalized,
        )
        .unwrap()
        .grad_logits[s.essential_token]
            .abs();
        assert!(
            guidance_grad / opd_grad >= 1e4,
            "ratio {}",
            guidance_grad / opd_grad
        );
    }

    #[test]
    fn escape_trace_has_expected_shape_and_determinism() {
        let s = make_blackhole(16, 1).unwrap();
        let aopd = ObjectiveConfig::new(ObjectiveKind::Aopd);
        let empty = escape_experiment(&s, &aopd, 0, 0.5, 7).unwrap();
        assert_eq!(empty.p_essential.len(), 1);
        let a = escape_experiment(&s, &aopd, 50, 0.5, 7).unwrap();
        let b = escape_experiment(&s, &aopd, 50, 0.5, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn escape_separates_aopd_from_opd() {
        let s = make_blackhole(16, 1).unwrap();
        let aopd = ObjectiveConfig::new(ObjectiveKind::Aopd);
        let opd = ObjectiveConfig::new(ObjectiveKind::Opd);
        let guided = escape_experiment(&s, &aopd, 200, 0.5, 7).unwrap();
        let unguided = escape_experiment(&s, &opd, 200, 0.5, 7).unwrap();
        assert!(guided.final_p_essential() > 0.5, "{}", guided.final_p_essential());
        assert!(unguided.final_p_essential() < 0.01, "{}", unguided.final_p_essential());
    }

    #[test]
    fn escape_essential_logit_rises_on_pull_up_steps() {
        let s = make_blackhole(16, 2).unwrap();
        let aopd = ObjectiveConfig::new(ObjectiveKind::Aopd);
        let trace = escape_experiment(&s, &aopd, 200, 0.5, 9).unwrap();
        for step in 0..200 {
            if trace.guidance_pull_up[step] {
                assert!(
                    trace.z_essential[step + 1] >= trace.z_essential[step],
                    "step {step}: z fell during an upward-guidance intervention"
                );
            }
        }
        assert!(trace.intervened.iter().any(|&i| i));
    }

    #[test]
    fn enumeration_cap_rejects_oversized_requests() {
        assert!(checked_pow(16, 4).is_ok());
        assert!(matches!(
            checked_pow(16, 5),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }
}
