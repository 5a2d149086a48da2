//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known and may appear once; `model.preset` is applied before any other
//! model key regardless of its position.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ifh::ThetaEncoding;
use crate::model::{ModelConfig, PoseHeads};
use crate::pmm::STAGES;
use crate::synth::ScenarioClass;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub sequences: usize,
    pub frames: usize,
    pub classes: Vec<ScenarioClass>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sequences: 200,
            frames: 20,
            classes: vec![ScenarioClass::Easy, ScenarioClass::Turning, ScenarioClass::Occlusion, ScenarioClass::Sparse],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    /// History frames used when tracking.
    pub track_history: usize,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            track_history: 2,
            parallel: true,
        }
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "model.preset",
    "model.channels",
    "model.query_count",
    "model.heads",
    "model.layers",
    "model.pyramid_widths",
    "model.fused_channels",
    "model.grid_cells",
    "model.cell_size",
    "model.z_min",
    "model.z_max",
    "model.head_stride",
    "model.theta_encoding",
    "model.pose_heads",
    "model.init_seed",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.lr_floor",
    "train.weight_decay",
    "train.history",
    "train.jitter_xy",
    "train.jitter_yaw",
    "train.grad_clip",
    "train.seed",
    "loss.flow",
    "loss.motion",
    "loss.z",
    "loss.theta",
    "data.sequences",
    "data.frames",
    "data.classes",
    "data.seed",
    "track.history",
    "exec.parallel",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if let Some((first, _)) = entries.insert(k.to_string(), (i + 1, v.to_string())) {
                return Err(Error::Config(format!("line {}: `{k}` already set on line {first}", i + 1)));
            }
        }

        let mut cfg = RunConfig::default();
        if let Some((_, v)) = entries.remove("model.preset") {
            cfg.train.model = match v.as_str() {
                "desk" => ModelConfig::desk(),
                "tiny" => ModelConfig::tiny(),
                "full" => ModelConfig::default(),
                _ => return Err(Error::Config(format!("`model.preset`: unknown preset `{v}`"))),
            };
        }
        for (k, (_, v)) in &entries {
            cfg.set(k, v)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "model.channels" => t.model.channels = parse_num(key, v)?,
            "model.query_count" => t.model.query_count = parse_num(key, v)?,
            "model.heads" => t.model.heads = parse_num(key, v)?,
            "model.layers" => t.model.layers = parse_num(key, v)?,
            "model.pyramid_widths" => {
                let ws = v
                    .split(',')
                    .map(|s| parse_num::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                t.model.pyramid_widths = ws
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}` needs exactly {STAGES} widths")))?;
            }
            "model.fused_channels" => t.model.fused_channels = parse_num(key, v)?,
            "model.grid_cells" => t.model.grid_cells = parse_num(key, v)?,
            "model.cell_size" => t.model.cell_size = parse_num(key, v)?,
            "model.z_min" => t.model.z_range.0 = parse_num(key, v)?,
            "model.z_max" => t.model.z_range.1 = parse_num(key, v)?,
            "model.head_stride" => t.model.head_stride = parse_num(key, v)?,
            "model.theta_encoding" => {
                t.model.theta_encoding = match v {
                    "sincos" => ThetaEncoding::SinCos,
                    "raw" => ThetaEncoding::Raw,
                    _ => return Err(Error::Config(format!("`{key}`: expected sincos or raw"))),
                }
            }
            "model.pose_heads" => {
                t.model.pose_heads = match v {
                    "absolute" => PoseHeads::Absolute,
                    "residual" => PoseHeads::Residual,
                    _ => return Err(Error::Config(format!("`{key}`: expected absolute or residual"))),
                }
            }
            "model.init_seed" => t.model.init_seed = parse_num(key, v)?,
            "train.steps" => t.steps = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.lr_floor" => t.lr_floor = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.history" => t.history = parse_num(key, v)?,
            "train.jitter_xy" => t.jitter_xy = parse_num(key, v)?,
            "train.jitter_yaw" => t.jitter_yaw = parse_num(key, v)?,
            "train.grad_clip" => t.grad_clip = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "loss.flow" => t.loss.flow = parse_num(key, v)?,
            "loss.motion" => t.loss.motion = parse_num(key, v)?,
            "loss.z" => t.loss.z = parse_num(key, v)?,
            "loss.theta" => t.loss.theta = parse_num(key, v)?,
            "data.sequences" => self.data.sequences = parse_num(key, v)?,
            "data.frames" => self.data.frames = parse_num(key, v)?,
            "data.classes" => {
                self.data.classes = v
                    .split(',')
                    .map(|s| ScenarioClass::parse(s.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "data.seed" => self.data.seed = parse_num(key, v)?,
            "track.history" => self.track_history = parse_num(key, v)?,
            "exec.parallel" => self.parallel = parse_bool(key, v)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_key_has_a_setter() {
        let sample = |k: &str| match k {
            "model.preset" => "desk",
            "model.pyramid_widths" => "8,8,8",
            "model.theta_encoding" => "raw",
            "model.pose_heads" => "residual",
            "data.classes" => "easy,sparse",
            "exec.parallel" => "false",
            "model.z_min" => "-2",
            "model.z_max" => "2",
            "model.heads" | "model.channels" => "4",
            "model.grid_cells" => "32",
            "model.head_stride" => "8",
            _ => "1",
        };
        let text: String = KEYS.iter().map(|k| format!("{k} = {}\n", sample(k))).collect();
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.train.model.pose_heads, PoseHeads::Residual);
        assert_eq!(cfg.data.classes, vec![ScenarioClass::Easy, ScenarioClass::Sparse]);
        assert!(!cfg.parallel);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let e = RunConfig::parse("train.steps = 3\nmodel.colour = red\n").unwrap_err();
        assert!(e.to_string().contains("unknown key `model.colour`"), "{e}");
        let e = RunConfig::parse("train.steps = 3\ntrain.steps = 4\n").unwrap_err();
        assert!(e.to_string().contains("already set"), "{e}");
        assert!(RunConfig::parse("train.steps 3\n").is_err());
    }

    #[test]
    fn shipped_config_matches_defaults() {
        let cfg = RunConfig::parse(include_str!("../../../configs/desk.cfg")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn preset_applies_before_overrides() {
        let cfg = RunConfig::parse("model.channels = 8\n# comment\nmodel.preset = desk\n").unwrap();
        assert_eq!(cfg.train.model.channels, 8);
        assert_eq!(cfg.train.model.grid_cells, ModelConfig::desk().grid_cells);
    }
}
