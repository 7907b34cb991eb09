//! Run configuration: one TOML document, dotted-key overrides, strict keys.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tpr_synthlab::{ModelConfig, ReferenceMode, SynthConfig, TrainProtocol};

/// Bad or unreadable configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// The held-out clip set: the training generator with its own count and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSet {
    pub videos: usize,
    pub seed: u64,
    pub reference: ReferenceMode,
}

impl Default for EvalSet {
    fn default() -> Self {
        Self {
            videos: 50,
            seed: 1,
            reference: ReferenceMode::Refined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model init and training sampler.
    pub seed: u64,
    pub synth: SynthConfig,
    pub eval: EvalSet,
    pub model: ModelConfig,
    pub protocol: TrainProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            eval: EvalSet::default(),
            model: ModelConfig::default(),
            protocol: TrainProtocol::default(),
        }
    }
}

impl RunConfig {
    pub fn eval_synth(&self) -> SynthConfig {
        SynthConfig {
            videos: self.eval.videos,
            seed: self.eval.seed,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |r: tpr_core::Result<()>, what: &str| r.map_err(|e| bad(format!("invalid {what}: {e}")));
        check(self.synth.validate(), "synth")?;
        check(self.eval_synth().validate(), "eval")?;
        check(self.model.validate(), "model")?;
        check(self.protocol.validate(), "protocol")?;
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| bad(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (or starts from defaults), applies overrides and the seed,
/// and validates the result.
pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| bad(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| bad(format!("config {} is not valid TOML: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        doc.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| bad(format!("config rejected: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the resolved config written next to a checkpoint.
pub fn load_run(dir: &Path) -> anyhow::Result<RunConfig> {
    resolve(Some(&dir.join("config.toml")), &[], None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides() {
        let cfg = resolve(
            None,
            &[
                "protocol.steps=7".into(),
                "model.space.kind=full_align".into(),
                "protocol.loss.lambda_budget = 4.5".into(),
                "model.space.depths=[3,3,3,3]".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(cfg.protocol.steps, 7);
        assert_eq!(cfg.model.space.kind, tpr_core::cpr::SpaceKind::FullAlign);
        assert_eq!(cfg.protocol.loss.lambda_budget, 4.5);
        assert_eq!(cfg.model.space.depths, vec![3; 4]);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        for o in ["protocol.stepz=3", "bogus=1", "model.backbone.width=3"] {
            let e = resolve(None, &[o.into()], None).unwrap_err();
            assert!(e.downcast_ref::<ConfigError>().is_some(), "{o}: {e}");
        }
        let e = resolve(None, &["synth.height=90".into()], None).unwrap_err();
        assert!(e.to_string().contains("multiple of 8"), "{e}");
    }
}
