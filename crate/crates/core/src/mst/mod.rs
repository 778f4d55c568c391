//! Magnification selection: an agent that moves, zooms and stops over a
//! slide pyramid, guided by fusion-network heatmaps and a decision backend.

mod action;
mod agent;
mod backend;
mod memory;
mod remote;
mod select;

use thiserror::Error;

pub use action::{parse_action, ActionKind, AgentAction, GRAMMAR};
pub use agent::{
    agent_run, agent_run_mcfn, msdm_decide, AgentLimits, Decision, HeatmapProvider, McfnHeatmaps, NavigationResult,
    PrecomputedHeatmaps, StopReason,
};
pub use backend::{
    plain_description, planner_instructions, BackendError, DecisionBackend, DecisionRequest, HeuristicBackend,
    RegionView, ScriptedBackend, ScriptedPolicy,
};
pub use memory::{MemoryBank, MemoryRecord, RegionKey, TraceHeader};
pub use remote::{redact, ChatTransport, HttpReply, MockTransport, RemoteBackend, RemoteConfig, UreqTransport};
pub use select::{select_top_regions, window_region, window_scores, Window};

#[derive(Debug, Error)]
pub enum MstError {
    #[error("memory bank consistency: {0}")]
    Consistency(String),
    #[error("region partition: {0}")]
    Partition(String),
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error("{0}")]
    Input(String),
    #[error("navigation aborted at step {step}: {reason}")]
    Aborted {
        step: usize,
        reason: String,
        partial: Box<MemoryBank>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
