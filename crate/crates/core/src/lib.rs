//! Interactive teacher-student distillation for cooperative multi-agent RL.

pub mod dagger;
pub mod distill;
pub mod envs;
pub mod metrics;
pub mod numgrad;
pub mod orchestrator;
pub mod pseudorl;
pub mod student;
pub mod teacher;
