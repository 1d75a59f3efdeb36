//! Run configuration: CLI flags override a JSON file, which overrides the
//! built-in defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use stsparse_core::arm::{ArmConfig, ADAPTIVE_CANDIDATES, DEFAULT_ALPHA, DEFAULT_BANDWIDTH, DEFAULT_TAU};
use stsparse_core::executor::{DEFAULT_BLOCK_SIZE, DEFAULT_DENSE_PREFIX};
use stsparse_core::{LatentShape, PatternKind};
use thiserror::Error;

pub const DEFAULT_TOTAL_STEPS: usize = 50;
pub const DEFAULT_D: usize = 64;
pub const DEFAULT_NOISE: f64 = 0.1;

/// Invalid user input; the CLI exits with status 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

/// `TxHxW`, e.g. `12x30x45`.
pub fn parse_shape(s: &str) -> Result<LatentShape, UsageError> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("shape `{s}` is not TxHxW")))?;
    match dims[..] {
        [t, h, w] => LatentShape::new(t, h, w).map_err(|e| usage(format!("shape `{s}`: {e}"))),
        _ => Err(usage(format!("shape `{s}` is not TxHxW"))),
    }
}

/// Which planted pattern `gen` writes. `Mixed` cycles temporal, spatial,
/// textural over the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenKind {
    Temporal,
    Spatial,
    Textural,
    Mixed,
}

impl GenKind {
    pub fn kind_of_head(self, head: usize) -> PatternKind {
        match self {
            GenKind::Temporal => PatternKind::Temporal,
            GenKind::Spatial => PatternKind::Spatial,
            GenKind::Textural => PatternKind::Textural,
            GenKind::Mixed => [PatternKind::Temporal, PatternKind::Spatial, PatternKind::Textural][head % 3],
        }
    }
}

impl FromStr for GenKind {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        match s.to_ascii_lowercase().as_str() {
            "temporal" => Ok(GenKind::Temporal),
            "spatial" => Ok(GenKind::Spatial),
            "textural" => Ok(GenKind::Textural),
            "mixed" => Ok(GenKind::Mixed),
            _ => Err(usage(format!("unknown kind `{s}` (temporal, spatial, textural, mixed)"))),
        }
    }
}

impl fmt::Display for GenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenKind::Temporal => "temporal",
            GenKind::Spatial => "spatial",
            GenKind::Textural => "textural",
            GenKind::Mixed => "mixed",
        })
    }
}

/// Every knob, all optional. Used both for the JSON file and for the
/// flags given on the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub shape: Option<String>,
    pub d: Option<usize>,
    pub num_heads: Option<usize>,
    pub kind: Option<GenKind>,
    pub noise: Option<f64>,
    pub locality_width: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub bandwidth: Option<f64>,
    pub tau: Option<usize>,
    pub omega: Option<usize>,
    pub block_size: Option<usize>,
    /// Per-head bandwidth selection over `candidates`.
    pub adaptive: Option<bool>,
    pub candidates: Option<Vec<f64>>,
    pub recall_target: Option<f64>,
    pub dense_prefix: Option<f64>,
    pub total_steps: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

macro_rules! overlay {
    ($self:ident, $other:ident, $($f:ident),*) => {
        RunConfig { $($f: $self.$f.or($other.$f)),* }
    };
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, UsageError> {
        serde_json::from_str(text).map_err(|e| usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    /// Fields set in `self` win over `other`.
    pub fn or(self, other: RunConfig) -> RunConfig {
        overlay!(
            self,
            other,
            shape,
            d,
            num_heads,
            kind,
            noise,
            locality_width,
            seed,
            alpha,
            bandwidth,
            tau,
            omega,
            block_size,
            adaptive,
            candidates,
            recall_target,
            dense_prefix,
            total_steps,
            out_dir
        )
    }

    /// Flags over the optional file.
    pub fn layered(flags: RunConfig, file: Option<&Path>) -> Result<RunConfig, UsageError> {
        Ok(match file {
            Some(p) => flags.or(RunConfig::load(p)?),
            None => flags,
        })
    }

    pub fn shape(&self) -> Result<Option<LatentShape>, UsageError> {
        self.shape.as_deref().map(parse_shape).transpose()
    }

    pub fn require_shape(&self) -> Result<LatentShape, UsageError> {
        self.shape()?.ok_or_else(|| usage("--shape is required (TxHxW)"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn d(&self) -> Result<usize, UsageError> {
        match self.d.unwrap_or(DEFAULT_D) {
            0 => Err(usage("d must be positive")),
            d => Ok(d),
        }
    }

    pub fn num_heads(&self) -> Result<usize, UsageError> {
        match self.num_heads.unwrap_or(1) {
            0 => Err(usage("num_heads must be positive")),
            n => Ok(n),
        }
    }

    pub fn noise(&self) -> Result<f64, UsageError> {
        let x = self.noise.unwrap_or(DEFAULT_NOISE);
        if !(x.is_finite() && x >= 0.0) {
            return Err(usage("noise must be a nonnegative number"));
        }
        Ok(x)
    }

    pub fn block_size(&self) -> Result<usize, UsageError> {
        let bs = self.block_size.unwrap_or(DEFAULT_BLOCK_SIZE);
        if !bs.is_power_of_two() {
            return Err(usage("block_size must be a power of two"));
        }
        Ok(bs)
    }

    pub fn dense_prefix(&self) -> Result<f64, UsageError> {
        let p = self.dense_prefix.unwrap_or(DEFAULT_DENSE_PREFIX);
        if !(0.0..=1.0).contains(&p) {
            return Err(usage("dense_prefix must lie in [0, 1]"));
        }
        Ok(p)
    }

    pub fn total_steps(&self) -> Result<usize, UsageError> {
        match self.total_steps.unwrap_or(DEFAULT_TOTAL_STEPS) {
            0 => Err(usage("total_steps must be positive")),
            n => Ok(n),
        }
    }

    /// On when requested, or implied by a candidate list.
    pub fn adaptive(&self) -> bool {
        self.adaptive.unwrap_or(self.candidates.is_some())
    }

    /// Recognition knobs, validated against `shape`.
    pub fn arm(&self, shape: LatentShape) -> Result<ArmConfig, UsageError> {
        let alpha = self.alpha.unwrap_or(DEFAULT_ALPHA);
        if !(0.0..=1.0).contains(&alpha) {
            return Err(usage("alpha must lie in [0, 1]"));
        }
        let bandwidth = self.bandwidth.unwrap_or(DEFAULT_BANDWIDTH);
        check_bandwidth(bandwidth)?;
        let tau = self.tau.unwrap_or(DEFAULT_TAU);
        if tau == 0 || tau > shape.h().min(shape.w()) {
            return Err(usage(format!(
                "tau must lie in 1..={} for frame {}x{}",
                shape.h().min(shape.w()),
                shape.h(),
                shape.w()
            )));
        }
        let interval = self.omega.unwrap_or(shape.t());
        if interval == 0 || interval > shape.n() {
            return Err(usage(format!("omega must lie in 1..={}", shape.n())));
        }
        let candidates = if self.adaptive() {
            let c = self.candidates.clone().unwrap_or_else(|| ADAPTIVE_CANDIDATES.to_vec());
            if c.is_empty() {
                return Err(usage("candidates must not be empty"));
            }
            for &b in &c {
                check_bandwidth(b)?;
            }
            Some(c)
        } else {
            None
        };
        let recall_target = self.recall_target.unwrap_or(alpha);
        if candidates.is_some() && !(recall_target > 0.0 && recall_target <= 1.0) {
            return Err(usage("recall_target must lie in (0, 1]"));
        }
        Ok(ArmConfig {
            alpha,
            bandwidth,
            interval: Some(interval),
            tau,
            candidates,
            recall_target,
        })
    }
}

fn check_bandwidth(b: f64) -> Result<(), UsageError> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(usage(format!("bandwidth {b} must lie in (0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("12x30x45").unwrap(), LatentShape::new(12, 30, 45).unwrap());
        for bad in ["12x30", "0x1x1", "axbxc", "1x2x3x4", ""] {
            assert!(parse_shape(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"alpha": 0.5}"#).is_ok());
        let e = RunConfig::from_json(r#"{"alpah": 0.5}"#).unwrap_err();
        assert!(e.0.contains("alpah"), "{e}");
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = RunConfig::from_json(r#"{"alpha": 0.5, "tau": 3, "shape": "4x6x6"}"#).unwrap();
        let flags = RunConfig {
            alpha: Some(0.7),
            ..RunConfig::default()
        };
        let cfg = flags.or(file);
        let arm = cfg.arm(cfg.require_shape().unwrap()).unwrap();
        assert_eq!(arm.alpha, 0.7);
        assert_eq!(arm.tau, 3);
        assert_eq!(arm.bandwidth, DEFAULT_BANDWIDTH);
        assert_eq!(arm.interval, Some(4));
        assert_eq!(arm.candidates, None);
        assert_eq!(cfg.dense_prefix().unwrap(), 0.1);
    }

    #[test]
    fn defaults_follow_the_reference_settings() {
        let shape = LatentShape::new(8, 4, 4).unwrap();
        let arm = RunConfig::default().arm(shape).unwrap();
        assert_eq!((arm.alpha, arm.bandwidth, arm.tau, arm.interval), (0.9, 0.25, 2, Some(8)));
        assert_eq!(RunConfig::default().block_size().unwrap(), 64);
    }

    #[test]
    fn adaptive_mode() {
        let shape = LatentShape::new(8, 4, 4).unwrap();
        let on = RunConfig {
            adaptive: Some(true),
            ..RunConfig::default()
        };
        assert_eq!(on.arm(shape).unwrap().candidates, Some(ADAPTIVE_CANDIDATES.to_vec()));
        let implied = RunConfig {
            candidates: Some(vec![0.5, 0.2]),
            ..RunConfig::default()
        };
        assert_eq!(implied.arm(shape).unwrap().candidates, Some(vec![0.5, 0.2]));
        let off = RunConfig {
            adaptive: Some(false),
            ..implied
        };
        assert_eq!(off.arm(shape).unwrap().candidates, None);
    }

    #[test]
    fn out_of_range_values_are_usage_errors() {
        let shape = LatentShape::new(8, 4, 4).unwrap();
        let bad = [
            RunConfig { alpha: Some(1.5), ..RunConfig::default() },
            RunConfig { bandwidth: Some(0.0), ..RunConfig::default() },
            RunConfig { tau: Some(5), ..RunConfig::default() },
            RunConfig { omega: Some(0), ..RunConfig::default() },
            RunConfig { candidates: Some(vec![]), ..RunConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.arm(shape).is_err(), "{cfg:?}");
        }
        assert!(RunConfig { block_size: Some(48), ..RunConfig::default() }.block_size().is_err());
        assert!(RunConfig { dense_prefix: Some(1.5), ..RunConfig::default() }.dense_prefix().is_err());
        assert!(RunConfig::default().arm(shape).is_ok());
        assert!(RunConfig { alpha: Some(0.0), ..RunConfig::default() }.arm(shape).is_ok());
    }
}
