//! Planning by imagining each subgoal and reading actions off the frames.

mod idm;
mod updp;

pub use idm::{
    argmax_lowest, canonical_label, infer_actions, sample_transitions, train_idm, IdmConfig, InverseDynamics, Transition, IDM_ROLE,
};
pub use updp::{
    make_plan_task, plan_and_execute, waypoint_distance, ActionDecoder, ChunkGenerator, EnvGenerator, OracleDecoder,
    PlanOptions, PlanReport, PlanTask, Subgoal,
};
