//! The release-gate property battery: finite-difference gradient checks for
//! every objective, shift invariance, guidance boundedness, and the tau
//! endpoint reduction identities. Each category reports pass/fail counts
//! and reproduction seeds for failing instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::objectives::{
    aopd_token, compute_advantage_floored, fkl_token, jsd_token, opd_token, FklVariant,
    GuidanceConfig, ObjectiveKind, TokenLossGrad, TokenRecord,
};
use crate::oracle::fd_gradient;
use crate::policy::ContextKey;
use crate::simplex::{softmax, topk_support, LogitVector, ProbVector, SupportSet};
use crate::trainer::{train, TrainConfig};

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error gate for gradient agreement.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of one property category.
#[derive(Debug, Clone)]
pub struct CategoryResult {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    /// Up to five failing instances with reproduction seeds.
    pub failures: Vec<String>,
}

impl CategoryResult {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: 0,
            failed: 0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.failures.len() < 5 {
                self.failures.push(detail());
            }
        }
    }
}

/// Full battery report.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub categories: Vec<CategoryResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.categories.iter().all(|c| c.failed == 0)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.categories {
            let status = if c.failed == 0 { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{status:4} {:<38} passed {:>5}  failed {:>3}\n",
                c.name, c.passed, c.failed
            ));
            for f in &c.failures {
                out.push_str(&format!("       {f}\n"));
            }
        }
        let (p, f): (usize, usize) = self
            .categories
            .iter()
            .fold((0, 0), |(p, f), c| (p + c.passed, f + c.failed));
        out.push_str(&format!("total: {p} passed, {f} failed\n"));
        out
    }
}

/// One randomized gradient-check instance.
struct GradInstance {
    teacher: ProbVector,
    z: LogitVector,
    support: SupportSet,
    record: TokenRecord,
}

fn random_instance(rng: &mut ChaCha8Rng, tau: f64) -> GradInstance {
    let vocab = rng.random_range(3..=16usize);
    let gamma = Gamma::new(0.5f64, 1.0).expect("gamma");
    let normal = Normal::new(0.0f64, 2.0).expect("normal");
    let raw: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng).max(1e-9)).collect();
    let total: f64 = raw.iter().sum();
    let teacher = ProbVector::new(raw.iter().map(|g| g / total).collect()).expect("simplex");
    let z = LogitVector::new((0..vocab).map(|_| normal.sample(rng)).collect()).expect("finite");
    let k = rng.random_range(1..=vocab);
    let support = topk_support(&teacher, k).expect("k in range");
    let token = rng.random_range(0..vocab) as u16;
    let p_student = softmax(&z, 1.0).expect("softmax");
    let (advantage, prob_gap, advantage_floored) =
        compute_advantage_floored(&teacher, &p_student, token as usize).expect("positive student");
    let record = TokenRecord {
        ctx: ContextKey::empty(),
        token,
        logp_teacher: 0.0,
        logp_student: 0.0,
        advantage,
        prob_gap,
        mask: prob_gap <= tau,
        advantage_floored,
    };
    GradInstance {
        teacher,
        z,
        support,
        record,
    }
}

fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f) * (a - f))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
    diff / na.max(nf).max(1e-8)
}

/// Gradient families covered by the finite-difference suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradCase {
    Opd,
    Fkl(FklVariant),
    Jsd(f64),
    Aopd { tau: f64 },
}

impl GradCase {
    fn name(&self) -> String {
        match self {
            GradCase::Opd => "fd opd_token".into(),
            GradCase::Fkl(FklVariant::Literal) => "fd fkl_token (literal)".into(),
            GradCase::Fkl(FklVariant::Normalized) => "fd fkl_token (normalized)".into(),
            GradCase::Jsd(beta) => format!("fd jsd_token (beta={beta})"),
            GradCase::Aopd { tau } => format!("fd aopd_token (tau={tau})"),
        }
    }
}

/// Runs `n` randomized finite-difference checks for one gradient family.
pub fn fd_suite(case: GradCase, n: usize, seed: u64) -> CategoryResult {
    match case {
        GradCase::Opd => fd_suite_with_opd_impl(n, seed, &opd_token),
        _ => fd_suite_inner(case, n, seed, &opd_token),
    }
}

/// The OPD suite with a pluggable implementation, so a deliberately broken
/// gradient can be shown to fail the battery.
pub fn fd_suite_with_opd_impl(
    n: usize,
    seed: u64,
    opd_impl: &dyn Fn(&TokenRecord, &ProbVector) -> TokenLossGrad,
) -> CategoryResult {
    fd_suite_inner(GradCase::Opd, n, seed, opd_impl)
}

fn fd_suite_inner(
    case: GradCase,
    n: usize,
    seed: u64,
    opd_impl: &dyn Fn(&TokenRecord, &ProbVector) -> TokenLossGrad,
) -> CategoryResult {
    let mut result = CategoryResult::new(case.name());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let guidance = GuidanceConfig {
        beta: 1.0,
        fkl_variant: FklVariant::Normalized,
    };
    for i in 0..n {
        let tau = match case {
            GradCase::Aopd { tau } => tau,
            _ => 0.0,
        };
        let inst = random_instance(&mut rng, tau);
        let analytic: Vec<f64> = match case {
            GradCase::Opd => {
                opd_impl(&inst.record, &softmax(&inst.z, 1.0).unwrap()).grad_logits
            }
            GradCase::Fkl(variant) => fkl_token(&inst.teacher, &inst.z, &inst.support, variant)
                .expect("valid instance")
                .grad_logits,
            GradCase::Jsd(beta) => jsd_token(&inst.teacher, &inst.z, &inst.support, beta)
                .expect("valid instance")
                .grad_logits,
            GradCase::Aopd { .. } => {
                aopd_token(&inst.record, &inst.teacher, &inst.z, &inst.support, &guidance)
                    .expect("valid instance")
                    .grad_logits
            }
        };
        let fd = fd_gradient(
            |z| {
                Ok(match case {
                    GradCase::Opd => opd_impl(&inst.record, &softmax(z, 1.0)?).loss,
                    GradCase::Fkl(variant) => {
                        fkl_token(&inst.teacher, z, &inst.support, variant)?.loss
                    }
                    GradCase::Jsd(beta) => jsd_token(&inst.teacher, z, &inst.support, beta)?.loss,
                    GradCase::Aopd { .. } => {
                        aopd_token(&inst.record, &inst.teacher, z, &inst.support, &guidance)?.loss
                    }
                })
            },
            &inst.z,
            FD_STEP,
        )
        .expect("finite probes");
        let err = relative_error(&analytic, &fd);
        result.record(err < FD_TOLERANCE, || {
            format!("instance {i} (suite seed {seed}): rel err {err:.3e}")
        });
    }
    result
}

/// Shift invariance: adding a constant to all student logits moves no loss
/// by more than 1e-9, and every gradient sums to zero.
pub fn shift_invariance_suite(n: usize, seed: u64) -> CategoryResult {
    let mut result = CategoryResult::new("shift invariance");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let inst = random_instance(&mut rng, 0.0);
        let shift: f64 = rng.random_range(-10.0..10.0);
        let z_shifted =
            LogitVector::new(inst.z.values().iter().map(|v| v + shift).collect()).unwrap();
        let beta: f64 = rng.random_range(0.0..=1.0);
        let cases: Vec<(TokenLossGrad, TokenLossGrad)> = vec![
            (
                opd_token(&inst.record, &softmax(&inst.z, 1.0).unwrap()),
                opd_token(&inst.record, &softmax(&z_shifted, 1.0).unwrap()),
            ),
            (
                fkl_token(&inst.teacher, &inst.z, &inst.support, FklVariant::Literal).unwrap(),
                fkl_token(&inst.teacher, &z_shifted, &inst.support, FklVariant::Literal).unwrap(),
            ),
            (
                jsd_token(&inst.teacher, &inst.z, &inst.support, beta).unwrap(),
                jsd_token(&inst.teacher, &z_shifted, &inst.support, beta).unwrap(),
            ),
        ];
        let ok = cases.iter().all(|(base, shifted)| {
            (base.loss - shifted.loss).abs() <= 1e-9
                && base.grad_logits.iter().sum::<f64>().abs() <= 1e-9
        });
        result.record(ok, || format!("instance {i} (suite seed {seed})"));
    }
    result
}

/// Boundedness: normalized forward-KL guidance gradients lie in [-1, 1]
/// with zero tolerance, while an OPD witness with |A| > 9 exceeds 7.
pub fn boundedness_suite(n: usize, seed: u64) -> CategoryResult {
    let mut result = CategoryResult::new("guidance boundedness");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let inst = random_instance(&mut rng, 0.0);
        let tlg =
            fkl_token(&inst.teacher, &inst.z, &inst.support, FklVariant::Normalized).unwrap();
        let ok = tlg.grad_logits.iter().all(|g| (-1.0..=1.0).contains(g));
        result.record(ok, || format!("instance {i} (suite seed {seed})"));
    }
    // Unboundedness witness: P_S(y) = 1e-4 against P_T(y) = 0.9 puts
    // |A| = ln(0.9 / 1e-4) > 9 on the sampled token and the gradient
    // component there beyond 7.
    let vocab = 16;
    let mut teacher = vec![0.1 / 15.0; vocab];
    teacher[3] = 0.9;
    let teacher = ProbVector::new(teacher).unwrap();
    let mut student = vec![(1.0 - 1e-4) / 15.0; vocab];
    student[3] = 1e-4;
    let student = ProbVector::new(student).unwrap();
    let (advantage, prob_gap, _) = compute_advantage_floored(&teacher, &student, 3).unwrap();
    let rec = TokenRecord {
        ctx: ContextKey::empty(),
        token: 3,
        logp_teacher: 0.0,
        logp_student: 0.0,
        advantage,
        prob_gap,
        mask: false,
        advantage_floored: false,
    };
    let tlg = opd_token(&rec, &student);
    let max_component = tlg.grad_logits.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    result.record(advantage.abs() > 9.0 && max_component > 7.0, || {
        format!("opd witness: |A| = {:.4}, max |grad| = {max_component:.4}", advantage.abs())
    });
    result
}

/// Endpoint reductions over a short shared-seed training run: AOPD at
/// tau = -1 must reproduce OPD and AOPD at tau = +1 (beta = 1) must
/// reproduce GKD, bit for bit, step by step.
pub fn reduction_suite(steps: usize) -> CategoryResult {
    let mut result = CategoryResult::new("tau endpoint reductions");
    let mut small = TrainConfig::weak_student_default(ObjectiveKind::Opd);
    small.model.vocab_size = 8;
    small.model.order = 1;
    small.run.steps = steps;
    small.run.batch_trajectories = 8;
    small.run.horizon = 8;
    small.run.prompt_count = 8;

    let pairs = [
        (ObjectiveKind::Opd, -1.0),
        (ObjectiveKind::Gkd, 1.0),
    ];
    for (kind, tau) in pairs {
        let mut reference = small.clone();
        reference.objective.kind = kind;
        let mut aopd = small.clone();
        aopd.objective.kind = ObjectiveKind::Aopd;
        aopd.objective.tau = tau;
        match (train(&reference), train(&aopd)) {
            (Ok(a), Ok(b)) => {
                for (x, y) in a.metrics.iter().zip(&b.metrics) {
                    let ok = x.loss_total.to_bits() == y.loss_total.to_bits()
                        && x.loss_pos.to_bits() == y.loss_pos.to_bits()
                        && x.loss_guidance.to_bits() == y.loss_guidance.to_bits()
                        && x.grad_norm.to_bits() == y.grad_norm.to_bits()
                        && x.exact_rkl.to_bits() == y.exact_rkl.to_bits();
                    result.record(ok, || {
                        format!("{kind} vs AOPD(tau={tau}) differ at step {}", x.step)
                    });
                }
            }
            _ => result.record(false, || format!("{kind} reduction run failed")),
        }
    }
    result
}

/// Runs the whole battery.
pub fn run_full_verification(seed: u64, instances: usize) -> VerifyReport {
    let mut categories = Vec::new();
    categories.push(fd_suite(GradCase::Opd, instances, seed));
    categories.push(fd_suite(GradCase::Fkl(FklVariant::Literal), instances, seed.wrapping_add(1)));
    categories.push(fd_suite(
        GradCase::Fkl(FklVariant::Normalized),
        instances,
        seed.wrapping_add(2),
    ));
    for (i, beta) in [0.0, 0.25, 0.5, 0.75, 0.9, 1.0].iter().enumerate() {
        categories.push(fd_suite(
            GradCase::Jsd(*beta),
            instances,
            seed.wrapping_add(3 + i as u64),
        ));
    }
    for (i, tau) in [-1.0, -0.2, 0.0, 1.0].iter().enumerate() {
        categories.push(fd_suite(
            GradCase::Aopd { tau: *tau },
            instances,
            seed.wrapping_add(9 + i as u64),
        ));
    }
    categories.push(shift_invariance_suite(instances, seed.wrapping_add(13)));
    categories.push(boundedness_suite(instances, seed.wrapping_add(14)));
    categories.push(reduction_suite(20));
    VerifyReport { categories }
}

/// Trains a fresh AOPD default run and checks the guidance-branch gradient
/// norm bound sqrt(2 * visited contexts) on every step. Used by the CLI
/// battery; the acceptance suite runs a larger version.
pub fn guidance_norm_bound_check(steps: usize) -> CategoryResult {
    let mut result = CategoryResult::new("guidance norm bound");
    let mut config = TrainConfig::weak_student_default(ObjectiveKind::Aopd);
    config.run.steps = steps;
    match train(&config) {
        Ok(outcome) => {
            for m in &outcome.metrics {
                let bound = (2.0 * m.visited_contexts as f64).sqrt();
                result.record(m.guidance_grad_norm <= bound, || {
                    format!(
                        "step {}: guidance norm {} exceeds sqrt(2 * {})",
                        m.step, m.guidance_grad_norm, m.visited_contexts
                    )
                });
            }
        }
        Err(e) => result.record(false, || format!("run failed: {e}")),
    }
    result
}
