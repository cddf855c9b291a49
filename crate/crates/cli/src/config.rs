//! Run configuration: one sectioned TOML file covering every subcommand,
//! with flag overrides applied on top. Every field has a default, so all
//! commands work without a config file; unknown keys are rejected so typos
//! fail loudly instead of silently running the defaults.

use std::path::Path;

use mergestream::stream::{Operator, RotationScope, StreamConfig, WindowConvention};
use mergestream::toybench::Split;
use mergestream::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Synthetic task and optimizer settings consumed by `train`, and the
/// evaluation dataset every other command reuses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub d_in: usize,
    pub classes: usize,
    /// Total samples drawn; a fixed fraction is held out.
    pub n: usize,
    pub hidden: Vec<usize>,
    pub eta: f64,
    pub steps: u64,
    pub snapshot_every: u64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            d_in: 16,
            classes: 4,
            n: 2048,
            hidden: vec![256],
            eta: 0.31,
            steps: 200,
            snapshot_every: 10,
            batch: 4,
            seed: 7,
        }
    }
}

/// Streaming schedule settings plus the input checkpoint paths shared by
/// `merge` and `stream` (first path is the merge reference).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub lambda: f64,
    pub window_n: usize,
    pub anchor_rounds: u64,
    pub max_iters: u64,
    pub cos_tol: f64,
    pub calib_batch_size: usize,
    pub operator: Operator,
    pub convention: WindowConvention,
    pub rotation_scope: RotationScope,
    pub ties_topk: f64,
    pub dare_drop: f64,
    pub seed: u64,
    pub inputs: Vec<String>,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection {
            lambda: 0.7,
            window_n: 2,
            anchor_rounds: 3,
            max_iters: 6,
            cos_tol: 1e-4,
            calib_batch_size: 64,
            operator: Operator::Arm,
            convention: WindowConvention::Appendix,
            rotation_scope: RotationScope::Hidden,
            ties_topk: 0.2,
            dare_drop: 0.9,
            seed: 7,
            inputs: Vec::new(),
        }
    }
}

/// Calibration dataset drawn independently of the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    pub n: usize,
    pub seed: u64,
    pub whitened: bool,
}

impl Default for CalibSection {
    fn default() -> Self {
        CalibSection { n: 128, seed: 777, whitened: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoint to score; the `eval` positional argument overrides this.
    pub checkpoint: String,
    /// Either "train" or "heldout".
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { checkpoint: String::new(), split: "heldout".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub out_dir: String,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection { out_dir: "out".into() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub stream: StreamSection,
    pub calib: CalibSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))
    }

    /// Layer widths of the configured model, input to logits.
    pub fn arch_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.train.hidden.len() + 2);
        widths.push(self.train.d_in);
        widths.extend_from_slice(&self.train.hidden);
        widths.push(self.train.classes);
        widths
    }

    pub fn stream_config(&self) -> StreamConfig {
        let s = &self.stream;
        StreamConfig {
            lambda: s.lambda,
            window_n: s.window_n,
            anchor_rounds: s.anchor_rounds,
            max_iters: s.max_iters,
            cos_tol: s.cos_tol,
            calib_batch_size: s.calib_batch_size,
            operator: s.operator,
            convention: s.convention,
            rotation_scope: s.rotation_scope,
            ties_topk: s.ties_topk,
            dare_drop: s.dare_drop,
            seed: s.seed,
        }
    }

    pub fn eval_split(&self) -> Result<Split> {
        match self.eval.split.as_str() {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(Error::Config(format!(
                "eval split must be \"train\" or \"heldout\", got {other:?}"
            ))),
        }
    }

    /// Hash of the canonical TOML form; recorded in every manifest so a
    /// replay can prove it ran the same settings.
    pub fn hash(&self) -> Result<String> {
        let canon = toml::to_string(self)
            .map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
        Ok(hex::encode(Sha256::digest(canon.as_bytes())))
    }
}

pub fn parse_operator(s: &str) -> Result<Operator> {
    match s {
        "ta" => Ok(Operator::Ta),
        "ties" => Ok(Operator::Ties),
        "dare" => Ok(Operator::Dare),
        "arm" => Ok(Operator::Arm),
        other => Err(Error::Config(format!(
            "operator must be one of ta, ties, dare, arm; got {other:?}"
        ))),
    }
}

pub fn parse_convention(s: &str) -> Result<WindowConvention> {
    match s {
        "eq1" => Ok(WindowConvention::PerEq1),
        "appendix" => Ok(WindowConvention::Appendix),
        other => Err(Error::Config(format!(
            "convention must be eq1 or appendix, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(toml::to_string(&back).unwrap(), text);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.hash().unwrap(), cfg.hash().unwrap());
        let mut other = RunConfig::default();
        other.stream.lambda = 0.5;
        assert_ne!(cfg.hash().unwrap(), other.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[stream]\nlambada = 0.7\n");
        assert!(err.is_err());
    }

    #[test]
    fn enums_parse_from_their_cli_names() {
        let cfg: RunConfig =
            toml::from_str("[stream]\noperator = \"ties\"\nconvention = \"eq1\"\nrotation_scope = \"all\"\n")
                .unwrap();
        assert_eq!(cfg.stream.operator, Operator::Ties);
        assert_eq!(cfg.stream.convention, WindowConvention::PerEq1);
        assert_eq!(cfg.stream.rotation_scope, RotationScope::All);
    }

    #[test]
    fn bad_split_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.eval.split = "validation".into();
        assert!(matches!(cfg.eval_split(), Err(Error::Config(_))));
    }
}
