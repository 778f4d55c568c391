//! Append-only memory bank and its JSON Lines trace form.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::pyramid::Region;

use super::action::{ActionKind, AgentAction};
use super::MstError;

pub type RegionKey = (usize, u32, u32, u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub step: usize,
    pub action: AgentAction,
    /// The reply needed a repair retry or was replaced by the fallback.
    pub repaired: bool,
    pub regions: Vec<Region>,
    /// Descriptions the decision for this step was based on.
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub slide_id: String,
    pub prompt: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryBank {
    pub header: Option<TraceHeader>,
    pub records: Vec<MemoryRecord>,
    keys: HashSet<RegionKey>,
}

#[derive(Serialize, Deserialize)]
struct TraceAction {
    kind: ActionKind,
    target_level: Option<usize>,
    n: Option<usize>,
    repaired: bool,
}

#[derive(Serialize, Deserialize)]
struct TraceRegion {
    level: usize,
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    step: usize,
    action: TraceAction,
    regions: Vec<TraceRegion>,
    descriptions: Vec<String>,
}

impl From<&MemoryRecord> for TraceRecord {
    fn from(r: &MemoryRecord) -> Self {
        TraceRecord {
            step: r.step,
            action: TraceAction {
                kind: r.action.kind(),
                target_level: r.action.target_level(),
                n: r.action.n_regions(),
                repaired: r.repaired,
            },
            regions: r
                .regions
                .iter()
                .map(|g| TraceRegion {
                    level: g.level_index,
                    x: g.x,
                    y: g.y,
                    w: g.w,
                    h: g.h,
                    score: g.score,
                })
                .collect(),
            descriptions: r.descriptions.clone(),
        }
    }
}

impl TryFrom<TraceRecord> for MemoryRecord {
    type Error = MstError;

    fn try_from(t: TraceRecord) -> Result<Self, MstError> {
        let bad = |m: &str| MstError::Trace(format!("step {}: {m}", t.step));
        let action = match (t.action.kind, t.action.target_level, t.action.n) {
            (ActionKind::Move, None, Some(n)) => AgentAction::Move { n },
            (ActionKind::Zoom, Some(level), Some(n)) => AgentAction::Zoom { level, n },
            (ActionKind::Stop, None, None) => AgentAction::Stop,
            _ => return Err(bad("action fields do not match its kind")),
        };
        let step = t.step;
        Ok(MemoryRecord {
            step,
            action,
            repaired: t.action.repaired,
            regions: t
                .regions
                .into_iter()
                .map(|g| Region {
                    level_index: g.level,
                    x: g.x,
                    y: g.y,
                    w: g.w,
                    h: g.h,
                    score: g.score,
                    step_selected: step,
                })
                .collect(),
            descriptions: t.descriptions,
        })
    }
}

impl MemoryBank {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header: Some(header),
            records: Vec::new(),
            keys: HashSet::new(),
        }
    }

    pub fn prompt(&self) -> &str {
        self.header.as_ref().map(|h| h.prompt.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, r: &Region) -> bool {
        self.keys.contains(&r.key())
    }

    pub fn exclusion(&self) -> &HashSet<RegionKey> {
        &self.keys
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.records.iter().flat_map(|r| r.regions.iter())
    }

    /// Level the agent is at after the last record.
    pub fn current_level(&self) -> usize {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.action.target_level())
            .unwrap_or(0)
    }

    /// Appends a record whose step follows the last one and whose regions
    /// are new. The bank is unchanged on error.
    pub fn memory_append(&mut self, record: MemoryRecord) -> Result<(), MstError> {
        let expected = self.records.len();
        if record.step != expected {
            return Err(MstError::Consistency(format!(
                "record step {} but next step is {expected}",
                record.step
            )));
        }
        let mut fresh = HashSet::new();
        for r in &record.regions {
            if self.keys.contains(&r.key()) || !fresh.insert(r.key()) {
                return Err(MstError::Consistency(format!(
                    "region level {} ({}, {}, {}x{}) is already in memory",
                    r.level_index, r.x, r.y, r.w, r.h
                )));
            }
        }
        self.keys.extend(fresh);
        self.records.push(record);
        Ok(())
    }

    pub fn header_line(&self) -> Result<String, MstError> {
        let h = self
            .header
            .as_ref()
            .ok_or_else(|| MstError::Trace("memory bank has no header".into()))?;
        Ok(serde_json::to_string(h)?)
    }

    pub fn record_line(record: &MemoryRecord) -> Result<String, MstError> {
        Ok(serde_json::to_string(&TraceRecord::from(record))?)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), MstError> {
        writeln!(out, "{}", self.header_line()?)?;
        for r in &self.records {
            writeln!(out, "{}", Self::record_line(r)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String, MstError> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
    }

    /// Rebuilds a bank from a trace, re-checking every invariant.
    pub fn from_jsonl(text: &str) -> Result<Self, MstError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TraceHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| MstError::Trace("empty trace".into()))?,
        )?;
        let mut bank = MemoryBank::new(header);
        for line in lines {
            let rec: TraceRecord = serde_json::from_str(line)?;
            bank.memory_append(rec.try_into()?)?;
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(level: usize, x: u32, step: usize) -> Region {
        Region {
            level_index: level,
            x,
            y: 2,
            w: 4,
            h: 4,
            score: 0.1 + x as f64 / 7.0,
            step_selected: step,
        }
    }

    fn bank() -> MemoryBank {
        MemoryBank::new(TraceHeader {
            slide_id: "s".into(),
            prompt: "find the tumor".into(),
            config_hash: "abc".into(),
        })
    }

    fn rec(step: usize, action: AgentAction, regions: Vec<Region>) -> MemoryRecord {
        MemoryRecord {
            step,
            action,
            repaired: false,
            regions,
            descriptions: vec![format!("d{step}")],
        }
    }

    #[test]
    fn append_and_reject() {
        let mut b = bank();
        b.memory_append(rec(0, AgentAction::Move { n: 1 }, vec![region(0, 0, 0)])).unwrap();
        assert_eq!(b.len(), 1);
        let dup = rec(1, AgentAction::Move { n: 1 }, vec![region(0, 0, 1)]);
        assert!(matches!(b.memory_append(dup), Err(MstError::Consistency(_))));
        let gap = rec(2, AgentAction::Stop, vec![]);
        assert!(matches!(b.memory_append(gap), Err(MstError::Consistency(_))));
        let twice = rec(1, AgentAction::Move { n: 2 }, vec![region(0, 8, 1), region(0, 8, 1)]);
        assert!(b.memory_append(twice).is_err());
        assert_eq!(b.len(), 1);
        assert_eq!(b.exclusion().len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut b = bank();
        b.memory_append(rec(0, AgentAction::Move { n: 2 }, vec![region(0, 0, 0), region(0, 4, 0)])).unwrap();
        b.memory_append(rec(1, AgentAction::Zoom { level: 2, n: 1 }, vec![region(2, 0, 1)])).unwrap();
        let mut last = rec(2, AgentAction::Stop, vec![]);
        last.repaired = true;
        b.memory_append(last).unwrap();
        let text = b.to_jsonl().unwrap();
        let back = MemoryBank::from_jsonl(&text).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_jsonl().unwrap(), text);
        assert_eq!(back.current_level(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(first["action"]["kind"], "move");
        assert!(first["action"]["target_level"].is_null());
        assert_eq!(first["regions"][1]["x"], 4);
    }

    #[test]
    fn bad_trace_rejected() {
        let mut b = bank();
        b.memory_append(rec(0, AgentAction::Stop, vec![])).unwrap();
        let text = b.to_jsonl().unwrap().replace("\"stop\"", "\"zoom\"");
        assert!(MemoryBank::from_jsonl(&text).is_err());
    }
}
