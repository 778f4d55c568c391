//! Agent actions and the one-line reply grammar
//! `ACTION: MOVE n=<k> | ZOOM level=<m> n=<k> | STOP`.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Move,
    Zoom,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentAction {
    /// Select `n` further regions at the current level.
    Move { n: usize },
    /// Switch to `level` (strictly higher) and select its top `n` regions.
    Zoom { level: usize, n: usize },
    Stop,
}

impl AgentAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            AgentAction::Move { .. } => ActionKind::Move,
            AgentAction::Zoom { .. } => ActionKind::Zoom,
            AgentAction::Stop => ActionKind::Stop,
        }
    }

    pub fn target_level(&self) -> Option<usize> {
        match self {
            AgentAction::Zoom { level, .. } => Some(*level),
            _ => None,
        }
    }

    pub fn n_regions(&self) -> Option<usize> {
        match self {
            AgentAction::Move { n } | AgentAction::Zoom { n, .. } => Some(*n),
            AgentAction::Stop => None,
        }
    }

    /// Checks the action against the agent's position in the pyramid.
    pub fn validate(&self, current_level: usize, num_levels: usize) -> Result<(), String> {
        match *self {
            AgentAction::Move { n } | AgentAction::Zoom { n, .. } if n == 0 => Err("n must be at least 1".into()),
            AgentAction::Zoom { level, .. } if level <= current_level => Err(format!(
                "zoom target {level} does not exceed current level {current_level}"
            )),
            AgentAction::Zoom { level, .. } if level >= num_levels => {
                Err(format!("zoom target {level} does not exist (levels 0..{})", num_levels - 1))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AgentAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentAction::Move { n } => write!(f, "ACTION: MOVE n={n}"),
            AgentAction::Zoom { level, n } => write!(f, "ACTION: ZOOM level={level} n={n}"),
            AgentAction::Stop => write!(f, "ACTION: STOP"),
        }
    }
}

pub const GRAMMAR: &str = "ACTION: MOVE n=<k> | ZOOM level=<m> n=<k> | STOP";

fn parse_kv(tok: &str, key: &str) -> Result<usize, String> {
    let (k, v) = tok
        .split_once('=')
        .ok_or_else(|| format!("expected {key}=<integer>, found `{tok}`"))?;
    if !k.eq_ignore_ascii_case(key) {
        return Err(format!("expected {key}=<integer>, found `{tok}`"));
    }
    v.parse::<usize>()
        .map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn parse_line(body: &str) -> Result<AgentAction, String> {
    let toks: Vec<&str> = body.split_whitespace().collect();
    let Some((verb, args)) = toks.split_first() else {
        return Err("empty action".into());
    };
    match (verb.to_ascii_uppercase().as_str(), args) {
        ("STOP", []) => Ok(AgentAction::Stop),
        ("MOVE", [n]) => Ok(AgentAction::Move { n: parse_kv(n, "n")? }),
        ("ZOOM", [l, n]) => Ok(AgentAction::Zoom {
            level: parse_kv(l, "level")?,
            n: parse_kv(n, "n")?,
        }),
        ("STOP" | "MOVE" | "ZOOM", _) => Err(format!("wrong arguments for {verb}")),
        _ => Err(format!("unknown action `{verb}`")),
    }
}

/// Extracts the single `ACTION:` line of a free-form reply.
pub fn parse_action(reply: &str) -> Result<AgentAction, String> {
    let lines: Vec<&str> = reply
        .lines()
        .map(|l| l.trim().trim_matches('`').trim())
        .filter(|l| l.get(..7).is_some_and(|p| p.eq_ignore_ascii_case("action:")))
        .collect();
    match lines.as_slice() {
        [] => Err(format!("no line of the form `{GRAMMAR}`")),
        [one] => parse_line(&one[7..]),
        _ => Err("more than one ACTION line".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_grammar() {
        assert_eq!(parse_action("ACTION: STOP"), Ok(AgentAction::Stop));
        assert_eq!(parse_action("thinking...\nACTION: MOVE n=3\n"), Ok(AgentAction::Move { n: 3 }));
        assert_eq!(
            parse_action("  action: zoom level=2 n=4"),
            Ok(AgentAction::Zoom { level: 2, n: 4 })
        );
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "I think we should zoom in",
            "ACTION: ZOOM n=4",
            "ACTION: MOVE",
            "ACTION: MOVE n=-1",
            "ACTION: JUMP n=2",
            "ACTION: STOP now",
            "ACTION: STOP\nACTION: MOVE n=1",
        ] {
            assert!(parse_action(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn validation() {
        assert!(AgentAction::Zoom { level: 2, n: 1 }.validate(2, 5).is_err());
        assert!(AgentAction::Zoom { level: 5, n: 1 }.validate(2, 5).is_err());
        assert!(AgentAction::Move { n: 0 }.validate(0, 5).is_err());
        assert!(AgentAction::Zoom { level: 4, n: 1 }.validate(1, 5).is_ok());
        assert!(AgentAction::Stop.validate(4, 5).is_ok());
    }

    proptest! {
        #[test]
        fn display_round_trips(kind in 0..3u8, level in 0usize..10, n in 1usize..50) {
            let a = match kind {
                0 => AgentAction::Move { n },
                1 => AgentAction::Zoom { level, n },
                _ => AgentAction::Stop,
            };
            prop_assert_eq!(parse_action(&a.to_string()), Ok(a));
        }

        #[test]
        fn never_panics(s in "\\PC{0,80}") {
            let _ = parse_action(&s);
        }
    }
}
