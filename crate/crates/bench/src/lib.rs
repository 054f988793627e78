//! Shared fixtures for the benchmark suite: the weak-student default
//! geometry (V = 16, order 2, concentration 0.3) at various stages.

use aopd_core::objectives::{MaskRule, ObjectiveKind};
use aopd_core::policy::{make_random_teacher, make_weak_student, PolicyTable};
use aopd_core::rollout::{make_prompt_set, rollout_student, Prompt, Trajectory};
use aopd_core::trainer::TrainConfig;
use aopd_core::ObjectiveConfig;

pub struct Fixture {
    pub teacher: PolicyTable,
    pub student: PolicyTable,
    pub prompts: Vec<Prompt>,
    pub objective: ObjectiveConfig,
    pub horizon: usize,
}

impl Fixture {
    /// The weak-student default at its initial state.
    pub fn weak_default() -> Self {
        let config = TrainConfig::weak_student_default(ObjectiveKind::Aopd).with_base_seed(1);
        let teacher = make_random_teacher(
            config.model.order,
            config.model.vocab_size,
            config.model.teacher_concentration,
            config.seeds.teacher,
        )
        .unwrap();
        let student = make_weak_student(
            &teacher,
            config.model.student_mode.to_mode(),
            config.seeds.student,
        )
        .unwrap();
        let prompts = make_prompt_set(
            config.run.batch_trajectories,
            config.run.prompt_length,
            config.model.vocab_size,
            config.seeds.prompt,
        )
        .unwrap();
        Self {
            teacher,
            student,
            prompts,
            objective: config.objective,
            horizon: config.run.horizon,
        }
    }

    pub fn rule(&self) -> MaskRule {
        self.objective.mask_rule().unwrap()
    }

    pub fn batch(&self, seed: u64) -> Vec<Trajectory> {
        rollout_student(
            &self.student,
            &self.teacher,
            &self.prompts,
            self.horizon,
            &self.rule(),
            seed,
        )
        .unwrap()
    }
}
