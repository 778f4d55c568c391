use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use mmnav::checkpoint::json_hash;
use mmnav::classify::{ClassifierConfig, Sampling};
use mmnav::encoder::EncoderSpec;
use mmnav::mcfn::McfnConfig;
use mmnav::mst::{AgentLimits, RemoteConfig};
use mmnav::ndsl::{LossConfig, TrainConfig};
use mmnav::pyramid::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// `scripted:<policy>`, `heuristic` or `remote`.
    pub selection: String,
    pub prompt: String,
    pub remote: RemoteConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            selection: "heuristic".into(),
            prompt: "Find the diagnostically relevant tumor regions.".into(),
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub num_slides: usize,
    pub synth: SynthConfig,
    pub encoder: EncoderSpec,
    pub mcfn: McfnConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub agent: AgentLimits,
    pub backend: BackendConfig,
    pub classifier: ClassifierConfig,
    pub budgets: Vec<f64>,
    pub sampling: Vec<Sampling>,
    /// Top fraction used by ranked precision and tumor recall.
    pub q: f64,
    /// Not part of the hash.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_slides: 8,
            synth: SynthConfig::default(),
            encoder: EncoderSpec::default(),
            mcfn: McfnConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            agent: AgentLimits::default(),
            backend: BackendConfig::default(),
            classifier: ClassifierConfig::default(),
            budgets: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            sampling: vec![Sampling::Random, Sampling::Topk],
            q: 0.1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            merge(&mut v, file);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        serde_json::from_value(v).context("config")
    }

    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        json_hash(&c)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.adam.validate().map_err(|e| anyhow!("train.adam: {e}"))?;
        self.classifier.adam.validate().map_err(|e| anyhow!("classifier.adam: {e}"))?;
        if self.mcfn.levels != self.synth.levels {
            bail!("mcfn.levels ({}) must equal synth.levels ({})", self.mcfn.levels, self.synth.levels);
        }
        if self.mcfn.dim != self.encoder.token_dim {
            bail!("mcfn.dim ({}) must equal encoder.token_dim ({})", self.mcfn.dim, self.encoder.token_dim);
        }
        let grid = self.encoder.grid_side();
        if self.mcfn.output_size == 0 || self.mcfn.output_size % (4 * grid) != 0 {
            bail!("mcfn.output_size ({}) must be a multiple of 4 x the token grid side ({grid})", self.mcfn.output_size);
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            bail!("q ({}) must lie in (0, 1]", self.q);
        }
        if let Some(b) = self.budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            bail!("budgets: {b} is outside (0, 1]");
        }
        if self.agent.max_steps == 0 || self.agent.default_n == 0 {
            bail!("agent.max_steps and agent.default_n must be at least 1");
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; non-object values replace.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("override `{path}`: `{}` is not an object", keys[..i].join(".")))?;
        if i + 1 == keys.len() {
            if !obj.contains_key(*k) {
                bail!("override `{path}`: unknown field `{k}`");
            }
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*k)
            .ok_or_else(|| anyhow!("override `{path}`: unknown field `{k}`"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win() {
        let c = RunConfig::load(None, &["train.steps=3".into(), "backend.selection=scripted:zoom_all".into()]).unwrap();
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.backend.selection, "scripted:zoom_all");
        assert!(RunConfig::load(None, &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn default_validates() {
        RunConfig::default().validate().unwrap();
    }
}
