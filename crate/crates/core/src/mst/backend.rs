//! Decision backends: the describe (vision) and decide (planner) roles.

use std::sync::Mutex;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pyramid::Region;

use super::action::{AgentAction, GRAMMAR};
use super::memory::MemoryBank;

#[derive(Debug, Error)]
pub enum BackendError {
    /// The backend could not be reached; the run is aborted.
    #[error("backend transport failed: {0}")]
    Transport(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// A region together with its pixels at the region's level.
#[derive(Debug, Clone)]
pub struct RegionView {
    pub region: Region,
    pub magnification: f64,
    pub image: RgbImage,
}

impl RegionView {
    pub fn mean_rgb(&self) -> [f64; 3] {
        let n = (self.image.width() * self.image.height()).max(1) as f64;
        let mut s = [0.0; 3];
        for p in self.image.pixels() {
            for c in 0..3 {
                s[c] += p.0[c] as f64;
            }
        }
        s.map(|v| v / n)
    }
}

/// Everything the planner sees when choosing the next action.
#[derive(Debug, Clone, Copy)]
pub struct DecisionRequest<'a> {
    pub descriptions: &'a [String],
    pub prompt: &'a str,
    pub memory: &'a MemoryBank,
    pub current_level: usize,
    pub num_levels: usize,
    pub default_n: usize,
    /// Set on the repair retry: why the previous reply was rejected.
    pub repair_hint: Option<&'a str>,
}

pub trait DecisionBackend: Send + Sync {
    fn name(&self) -> String;

    /// Free-text description of a region (vision role).
    fn describe(&self, view: &RegionView) -> Result<String, BackendError>;

    /// Raw reply expected to contain one `ACTION:` line (planner role).
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<String, BackendError>;

    /// Whether identical inputs always give identical replies.
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Deterministic description used by the offline backends.
pub fn plain_description(view: &RegionView) -> String {
    let r = &view.region;
    let [cr, cg, cb] = view.mean_rgb();
    format!(
        "{}x region at ({}, {}) size {}x{}: attention {:.4}, mean colour ({:.0}, {:.0}, {:.0})",
        view.magnification, r.x, r.y, r.w, r.h, r.score, cr, cg, cb
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedPolicy {
    /// Zoom one level at a time, stop at the top.
    ZoomAll,
    /// Two moves per level before zooming; stop after two moves at the top.
    MoveTwiceThenZoom,
    AlwaysMove,
    /// Never produces a parsable reply.
    Malformed,
    /// Garbage first, a valid zoom-all reply on the repair retry.
    MalformedOnce,
    /// Seeded mix of valid, invalid and unparsable replies.
    Random,
}

impl ScriptedPolicy {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "zoom_all" => Self::ZoomAll,
            "move_twice_then_zoom" => Self::MoveTwiceThenZoom,
            "always_move" => Self::AlwaysMove,
            "malformed" => Self::Malformed,
            "malformed_once" => Self::MalformedOnce,
            "random" => Self::Random,
            _ => return None,
        })
    }
}

pub struct ScriptedBackend {
    pub policy: ScriptedPolicy,
    rng: Mutex<ChaCha8Rng>,
}

impl ScriptedBackend {
    pub fn new(policy: ScriptedPolicy, seed: u64) -> Self {
        Self {
            policy,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

fn zoom_or_stop(req: &DecisionRequest<'_>) -> AgentAction {
    if req.current_level + 1 < req.num_levels {
        AgentAction::Zoom {
            level: req.current_level + 1,
            n: req.default_n,
        }
    } else {
        AgentAction::Stop
    }
}

fn moves_at_current_level(req: &DecisionRequest<'_>) -> usize {
    let mut count = 0;
    for r in req.memory.records.iter().rev() {
        match r.action {
            AgentAction::Move { .. } => count += 1,
            _ => break,
        }
    }
    count
}

impl DecisionBackend for ScriptedBackend {
    fn name(&self) -> String {
        format!("scripted:{:?}", self.policy)
    }

    fn describe(&self, view: &RegionView) -> Result<String, BackendError> {
        Ok(plain_description(view))
    }

    fn decide(&self, req: &DecisionRequest<'_>) -> Result<String, BackendError> {
        let n = req.default_n;
        let action = match self.policy {
            ScriptedPolicy::ZoomAll => zoom_or_stop(req),
            ScriptedPolicy::MoveTwiceThenZoom => {
                if moves_at_current_level(req) < 2 {
                    AgentAction::Move { n }
                } else {
                    zoom_or_stop(req)
                }
            }
            ScriptedPolicy::AlwaysMove => AgentAction::Move { n },
            ScriptedPolicy::Malformed => return Ok("I am not sure what to do next.".into()),
            ScriptedPolicy::MalformedOnce => {
                if req.repair_hint.is_none() {
                    return Ok("Let me look closer at the tissue".into());
                }
                zoom_or_stop(req)
            }
            ScriptedPolicy::Random => {
                let mut rng = self.rng.lock().expect("rng lock");
                match rng.random_range(0..8) {
                    0 => return Ok("ACTION: FLY n=2".into()),
                    1 => return Ok(String::new()),
                    2 => AgentAction::Zoom {
                        level: req.current_level,
                        n,
                    },
                    3 => AgentAction::Move { n: 0 },
                    4 => AgentAction::Stop,
                    5 => AgentAction::Zoom {
                        level: rng.random_range(0..req.num_levels + 2),
                        n: rng.random_range(1..6),
                    },
                    _ => AgentAction::Move {
                        n: rng.random_range(1..6),
                    },
                }
            }
        };
        Ok(action.to_string())
    }
}

/// Offline planner that reads region scores from memory: zoom while the
/// last regions look salient, otherwise keep moving, stop at the top once
/// `top_moves` moves have been spent there.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicBackend {
    pub zoom_threshold: f64,
    pub top_moves: usize,
    pub moves_per_level: usize,
}

impl Default for HeuristicBackend {
    fn default() -> Self {
        Self {
            zoom_threshold: 0.5,
            top_moves: 1,
            moves_per_level: 2,
        }
    }
}

impl DecisionBackend for HeuristicBackend {
    fn name(&self) -> String {
        "heuristic".into()
    }

    fn describe(&self, view: &RegionView) -> Result<String, BackendError> {
        Ok(plain_description(view))
    }

    fn decide(&self, req: &DecisionRequest<'_>) -> Result<String, BackendError> {
        let n = req.default_n;
        let moves = moves_at_current_level(req);
        let top = req.current_level + 1 >= req.num_levels;
        let last_best = req
            .memory
            .records
            .last()
            .and_then(|r| r.regions.iter().map(|g| g.score).reduce(f64::max));
        let action = if top {
            if moves >= self.top_moves {
                AgentAction::Stop
            } else {
                AgentAction::Move { n }
            }
        } else {
            match last_best {
                Some(s) if s < self.zoom_threshold && moves < self.moves_per_level => AgentAction::Move { n },
                _ => zoom_or_stop(req),
            }
        };
        Ok(format!("Reviewed {} description(s).\n{action}", req.descriptions.len()))
    }
}

/// Instruction block shared by language-model backends.
pub fn planner_instructions() -> String {
    format!(
        "You navigate a whole-slide image from low to high magnification. \
         After reviewing the region descriptions and the history, reply with exactly one line:\n{GRAMMAR}\n\
         MOVE selects more regions at the current level, ZOOM switches to a higher level, STOP ends the search."
    )
}
