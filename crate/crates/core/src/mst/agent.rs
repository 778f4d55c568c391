//! The decision operation and the navigation loop.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_pyramid, EncoderSpec, PatchEncoder, TokenGrid};
use crate::mcfn::{forward_level, Heatmap, McfnParams};
use crate::pyramid::{map_region, FloatMap, MagnificationPyramid, Region};

use super::action::{parse_action, AgentAction, GRAMMAR};
use super::backend::{BackendError, DecisionBackend, DecisionRequest, RegionView};
use super::memory::{MemoryBank, MemoryRecord, TraceHeader};
use super::select::select_top_regions;
use super::MstError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentLimits {
    pub max_steps: usize,
    /// Region count used by fallbacks and offered to backends as the default.
    pub default_n: usize,
    /// Side of a region window in heatmap pixels.
    pub region_cells: usize,
    /// Restrict zoom candidates to areas under the previous level's regions.
    pub zoom_within_parent: bool,
}

impl Default for AgentLimits {
    fn default() -> Self {
        Self {
            max_steps: 8,
            default_n: 4,
            region_cells: 16,
            zoom_within_parent: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BackendStop,
    MaxSteps,
    LevelExhausted,
}

#[derive(Debug, Clone)]
pub struct NavigationResult {
    pub regions: Vec<Region>,
    pub trace: MemoryBank,
    pub stop_reason: StopReason,
}

/// Source of per-level heatmaps for the agent.
pub trait HeatmapProvider: Sync {
    fn heatmap(&self, level: usize) -> Result<Heatmap, MstError>;
}

/// Fixed heatmaps, one per level.
pub struct PrecomputedHeatmaps(pub Vec<Heatmap>);

impl PrecomputedHeatmaps {
    /// Uses the slide's own navigation annotations as heatmaps.
    pub fn from_annotations(p: &MagnificationPyramid, size: usize) -> Result<Self, MstError> {
        (0..p.num_levels())
            .map(|m| {
                let nav = p
                    .nav(m)
                    .ok_or_else(|| MstError::Input(format!("slide `{}` has no annotation at level {m}", p.slide_id)))?;
                let mut map: FloatMap = nav.resample_area(size, size);
                map.max_normalize();
                Ok(Heatmap { level_index: m, map })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

impl HeatmapProvider for PrecomputedHeatmaps {
    fn heatmap(&self, level: usize) -> Result<Heatmap, MstError> {
        self.0
            .iter()
            .find(|h| h.level_index == level)
            .cloned()
            .ok_or_else(|| MstError::Input(format!("no heatmap for level {level}")))
    }
}

/// Runs the fusion network on demand, encoding the slide once.
pub struct McfnHeatmaps<'a> {
    pyramid: &'a MagnificationPyramid,
    params: &'a McfnParams,
    spec: &'a EncoderSpec,
    encoder: &'a dyn PatchEncoder,
    tokens: OnceLock<Vec<TokenGrid>>,
    cache: Mutex<HashMap<usize, Heatmap>>,
}

impl<'a> McfnHeatmaps<'a> {
    pub fn new(
        pyramid: &'a MagnificationPyramid,
        params: &'a McfnParams,
        spec: &'a EncoderSpec,
        encoder: &'a dyn PatchEncoder,
    ) -> Self {
        Self {
            pyramid,
            params,
            spec,
            encoder,
            tokens: OnceLock::new(),
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl HeatmapProvider for McfnHeatmaps<'_> {
    fn heatmap(&self, level: usize) -> Result<Heatmap, MstError> {
        if let Some(h) = self.cache.lock().unwrap().get(&level) {
            return Ok(h.clone());
        }
        let tokens = match self.tokens.get() {
            Some(t) => t,
            None => {
                let t = encode_pyramid(self.pyramid, self.spec, self.encoder).map_err(|e| MstError::Input(e.to_string()))?;
                self.tokens.get_or_init(|| t)
            }
        };
        let (h, _) = forward_level(self.params, tokens, level).map_err(|e| MstError::Input(e.to_string()))?;
        self.cache.lock().unwrap().insert(level, h.clone());
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: AgentAction,
    pub repaired: bool,
    pub descriptions: Vec<String>,
}

fn fallback(current_level: usize, num_levels: usize, n: usize) -> AgentAction {
    if current_level + 1 < num_levels {
        AgentAction::Zoom {
            level: current_level + 1,
            n,
        }
    } else {
        AgentAction::Stop
    }
}

/// Describes the previous step's regions (in parallel, kept in rank order),
/// asks the backend for an action, and repairs or replaces invalid replies.
pub fn msdm_decide(
    backend: &dyn DecisionBackend,
    views: &[RegionView],
    memory: &MemoryBank,
    current_level: usize,
    num_levels: usize,
    default_n: usize,
) -> Result<Decision, BackendError> {
    let descriptions: Vec<String> = views
        .par_iter()
        .map(|v| backend.describe(v))
        .collect::<Result<_, _>>()?;
    let mut req = DecisionRequest {
        descriptions: &descriptions,
        prompt: memory.prompt(),
        memory,
        current_level,
        num_levels,
        default_n,
        repair_hint: None,
    };
    let check = |reply: &str| parse_action(reply).and_then(|a| a.validate(current_level, num_levels).map(|_| a));
    let first = backend.decide(&req)?;
    let problem = match check(&first) {
        Ok(action) => {
            return Ok(Decision {
                action,
                repaired: false,
                descriptions,
            })
        }
        Err(e) => e,
    };
    log::info!("{} reply rejected ({problem}); asking for a repair", backend.name());
    let hint = format!("{problem}; expected `{GRAMMAR}`");
    req.repair_hint = Some(&hint);
    let second = backend.decide(&req)?;
    let action = match check(&second) {
        Ok(a) => a,
        Err(e) => {
            let fb = fallback(current_level, num_levels, default_n);
            log::warn!("repair also rejected ({e}); falling back to {fb}");
            fb
        }
    };
    Ok(Decision {
        action,
        repaired: true,
        descriptions,
    })
}

fn view_of(p: &MagnificationPyramid, r: &Region) -> Result<RegionView, MstError> {
    let raster = p.raster(r.level_index).map_err(|e| MstError::Input(e.to_string()))?;
    let image = image::imageops::crop_imm(raster, r.x, r.y, r.w, r.h).to_image();
    let magnification = p.levels[r.level_index].magnification;
    Ok(RegionView {
        region: *r,
        magnification,
        image,
    })
}

fn emit(sink: &mut Option<&mut dyn Write>, line: &str) -> Result<(), MstError> {
    if let Some(w) = sink.as_deref_mut() {
        writeln!(w, "{line}")?;
        w.flush()?;
    }
    Ok(())
}

/// Navigates from the thumbnail until the backend stops, the step budget is
/// spent, or the top level has no unselected window left. With a sink, the
/// trace is streamed line by line so a failed run leaves a partial trace.
pub fn agent_run(
    pyramid: &MagnificationPyramid,
    provider: &dyn HeatmapProvider,
    backend: &dyn DecisionBackend,
    limits: &AgentLimits,
    header: TraceHeader,
    mut sink: Option<&mut dyn Write>,
) -> Result<NavigationResult, MstError> {
    if limits.max_steps == 0 || limits.default_n == 0 {
        return Err(MstError::Input("max_steps and default_n must be at least 1".into()));
    }
    let num_levels = pyramid.num_levels();
    let top = num_levels - 1;
    let mut bank = MemoryBank::new(header);
    emit(&mut sink, &bank.header_line()?)?;

    let mut level = 0;
    let thumb_heat = provider.heatmap(0)?;
    let lvl0 = &pyramid.levels[0];
    let thumb = Region {
        level_index: 0,
        x: 0,
        y: 0,
        w: lvl0.width,
        h: lvl0.height,
        score: thumb_heat.map.mean(),
        step_selected: 0,
    };
    let mut views = vec![view_of(pyramid, &thumb)?];
    let mut stop_reason = StopReason::MaxSteps;

    for step in 0..limits.max_steps {
        let decision = match msdm_decide(backend, &views, &bank, level, num_levels, limits.default_n) {
            Ok(d) => d,
            Err(e) => {
                return Err(MstError::Aborted {
                    step,
                    reason: e.to_string(),
                    partial: Box::new(bank),
                })
            }
        };
        let parent_level = level;
        let regions = match decision.action {
            AgentAction::Stop => Vec::new(),
            AgentAction::Move { n } | AgentAction::Zoom { n, .. } => {
                if let AgentAction::Zoom { level: l, .. } = decision.action {
                    level = l;
                }
                let heat = provider.heatmap(level)?;
                let lvl = &pyramid.levels[level];
                let parents: Vec<Region> = if matches!(decision.action, AgentAction::Zoom { .. }) && limits.zoom_within_parent {
                    bank.regions()
                        .filter(|r| r.level_index == parent_level)
                        .map(|r| map_region(r, level, pyramid))
                        .collect::<Result<_, _>>()
                        .map_err(|e| MstError::Input(e.to_string()))?
                } else {
                    Vec::new()
                };
                let within = |r: &Region| {
                    parents
                        .iter()
                        .any(|p| r.x < p.x + p.w && p.x < r.x + r.w && r.y < p.y + p.h && p.y < r.y + r.h)
                };
                let allow: Option<&dyn Fn(&Region) -> bool> = if parents.is_empty() { None } else { Some(&within) };
                select_top_regions(&heat, n, bank.exclusion(), limits.region_cells, lvl, step, allow)?
            }
        };
        let record = MemoryRecord {
            step,
            action: decision.action,
            repaired: decision.repaired,
            regions,
            descriptions: decision.descriptions,
        };
        emit(&mut sink, &MemoryBank::record_line(&record)?)?;
        views = record
            .regions
            .iter()
            .map(|r| view_of(pyramid, r))
            .collect::<Result<_, _>>()?;
        bank.memory_append(record)?;

        if decision.action == AgentAction::Stop {
            stop_reason = StopReason::BackendStop;
            break;
        }
        if level == top {
            let heat = provider.heatmap(top)?;
            let left = select_top_regions(&heat, 1, bank.exclusion(), limits.region_cells, &pyramid.levels[top], step, None)?;
            if left.is_empty() {
                stop_reason = StopReason::LevelExhausted;
                break;
            }
        }
    }
    let regions = bank.regions().copied().collect();
    Ok(NavigationResult {
        regions,
        trace: bank,
        stop_reason,
    })
}

/// Runs the agent with heatmaps from the fusion network.
#[allow(clippy::too_many_arguments)]
pub fn agent_run_mcfn(
    pyramid: &MagnificationPyramid,
    params: &McfnParams,
    spec: &EncoderSpec,
    encoder: &dyn PatchEncoder,
    backend: &dyn DecisionBackend,
    limits: &AgentLimits,
    header: TraceHeader,
    sink: Option<&mut dyn Write>,
) -> Result<NavigationResult, MstError> {
    let provider = McfnHeatmaps::new(pyramid, params, spec, encoder);
    agent_run(pyramid, &provider, backend, limits, header, sink)
}
