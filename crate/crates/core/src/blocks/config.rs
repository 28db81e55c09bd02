use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pathways of the adaptive residual block are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbPaths {
    pub bottleneck: bool,
    pub adaptive: bool,
    pub residual: bool,
}

impl Default for ArbPaths {
    fn default() -> Self {
        ArbPaths {
            bottleneck: true,
            adaptive: true,
            residual: true,
        }
    }
}

/// Residual-connection toggles: local (inside each RCB), global (across the
/// residual module) and long-range skip (shallow features to the feature
/// module).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connections {
    pub lrc: bool,
    pub grc: bool,
    pub lrsc: bool,
}

impl Default for Connections {
    fn default() -> Self {
        Connections {
            lrc: true,
            grc: true,
            lrsc: true,
        }
    }
}

/// Position of the single ReLU on the bottleneck path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnActivation {
    /// `Dw -> Pw -> ReLU -> Dw -> TFAM -> Pw`
    #[default]
    AfterFirstPair,
    /// `Dw -> Pw -> Dw -> ReLU -> TFAM -> Pw`
    AfterSecondDw,
}

/// Every architectural hyperparameter of the network.
///
/// The default is the calibrated x4 configuration (see
/// [`crate::blocks::calibrate`]); `configs/mprnet_x4.json` holds the same
/// values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub n_rcb: usize,
    pub n_arb: usize,
    pub scale: usize,
    /// Channels where the two attention units meet; `width / 2` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tfam_mid: Option<usize>,
    #[serde(default = "default_pos_kernel")]
    pub pos_kernel: usize,
    #[serde(default = "default_pos_stride")]
    pub pos_stride: usize,
    #[serde(default)]
    pub paths: ArbPaths,
    #[serde(default)]
    pub connections: Connections,
    #[serde(default)]
    pub bn_activation: BnActivation,
}

fn default_pos_kernel() -> usize {
    7
}

fn default_pos_stride() -> usize {
    3
}

/// Calibrated width and depth (see `calibrate`).
pub const DEFAULT_WIDTH: usize = 48;
pub const DEFAULT_N_RCB: usize = 3;
pub const DEFAULT_N_ARB: usize = 3;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_scale(4)
    }
}

impl ModelConfig {
    pub fn with_scale(scale: usize) -> Self {
        ModelConfig {
            width: DEFAULT_WIDTH,
            n_rcb: DEFAULT_N_RCB,
            n_arb: DEFAULT_N_ARB,
            scale,
            tfam_mid: None,
            pos_kernel: default_pos_kernel(),
            pos_stride: default_pos_stride(),
            paths: ArbPaths::default(),
            connections: Connections::default(),
            bn_activation: BnActivation::default(),
        }
    }

    /// A small network for tests and desk-scale experiments.
    pub fn tiny(width: usize, n_rcb: usize, n_arb: usize, scale: usize) -> Self {
        ModelConfig {
            width,
            n_rcb,
            n_arb,
            ..ModelConfig::with_scale(scale)
        }
    }

    pub fn tfam_mid(&self) -> usize {
        self.tfam_mid.unwrap_or(self.width / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return fail(format!("width C must be even and positive, got {}", self.width));
        }
        if !(2..=4).contains(&self.scale) {
            return fail(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        if self.n_rcb == 0 || self.n_arb == 0 {
            return fail(format!(
                "n_rcb and n_arb must be at least 1, got {} and {}",
                self.n_rcb, self.n_arb
            ));
        }
        let mid = self.tfam_mid();
        if mid == 0 || !mid.is_multiple_of(2) {
            return fail(format!(
                "tfam_mid must be even and positive (two channel-unit halves), got {mid}"
            ));
        }
        if self.pos_stride == 0 || self.pos_kernel < self.pos_stride {
            return fail(format!(
                "pos_kernel ({}) must be at least pos_stride ({}) > 0 so pooling covers every pixel",
                self.pos_kernel, self.pos_stride
            ));
        }
        if !(self.paths.bottleneck || self.paths.adaptive || self.paths.residual) {
            return fail("at least one ARB pathway must be enabled".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named rows of the pathway and connection ablations.
pub mod ablation {
    use super::*;

    /// `(name, paths)` for the bottleneck-only, bottleneck+adaptive,
    /// bottleneck+residual and full blocks.
    pub fn arb_rows() -> Vec<(&'static str, ArbPaths)> {
        let p = |bottleneck, adaptive, residual| ArbPaths {
            bottleneck,
            adaptive,
            residual,
        };
        vec![
            ("ARB_B", p(true, false, false)),
            ("ARB_BA", p(true, true, false)),
            ("ARB_R", p(true, false, true)),
            ("ARB", p(true, true, true)),
        ]
    }

    /// All eight combinations of the three residual connections.
    pub fn connection_rows() -> Vec<(String, Connections)> {
        let mut rows = Vec::new();
        for bits in 0..8u8 {
            let c = Connections {
                lrc: bits & 1 != 0,
                grc: bits & 2 != 0,
                lrsc: bits & 4 != 0,
            };
            let mut parts = Vec::new();
            if c.lrc {
                parts.push("LRC");
            }
            if c.grc {
                parts.push("GRC");
            }
            if c.lrsc {
                parts.push("LRSC");
            }
            let name = if parts.is_empty() {
                "none".to_string()
            } else {
                parts.join("+")
            };
            rows.push((name, c));
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tfam_mid(), 24);
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let bad = |f: fn(&mut ModelConfig), needle: &str| {
            let mut c = ModelConfig::default();
            f(&mut c);
            let msg = c.validate().unwrap_err().to_string();
            assert!(msg.contains(needle), "{msg} lacks {needle}");
        };
        bad(|c| c.width = 7, "width");
        bad(|c| c.scale = 5, "scale");
        bad(|c| c.n_arb = 0, "n_arb");
        bad(|c| c.width = 6, "tfam_mid");
        bad(|c| c.pos_kernel = 2, "pos_kernel");
        bad(
            |c| {
                c.paths = ArbPaths {
                    bottleneck: false,
                    adaptive: false,
                    residual: false,
                }
            },
            "pathway",
        );
    }

    #[test]
    fn missing_optional_fields_take_defaults() {
        let cfg = ModelConfig::from_json(r#"{"width":16,"n_rcb":1,"n_arb":2,"scale":3}"#).unwrap();
        assert_eq!(cfg.pos_kernel, 7);
        assert_eq!(cfg.connections, Connections::default());
    }

    #[test]
    fn ablation_rows_are_complete() {
        assert_eq!(ablation::arb_rows().len(), 4);
        let rows = ablation::connection_rows();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].0, "none");
        assert_eq!(rows[7].0, "LRC+GRC+LRSC");
    }
}
