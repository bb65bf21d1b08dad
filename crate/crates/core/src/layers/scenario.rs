use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which generator stages are binarized, and how the input is encoded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub input_as_integer: bool,
    /// Input scale `A`; only meaningful when `input_as_integer` is set.
    pub a_value: Option<i32>,
    pub bfc: bool,
    pub bbna1: bool,
    pub bdeconv1: bool,
    pub bbna2: bool,
    pub bdeconv2: bool,
}

pub const PRESET_NAMES: [&str; 7] = ["S0", "S1-1", "S1-2", "S2-1", "S2-2", "S3-1", "S3-2"];

impl ScenarioConfig {
    /// One of the seven named presets.
    pub fn preset(name: &str) -> Result<Self> {
        // (input as integer, A, B-FC, B-BNA-1, B-Deconv-1, B-BNA-2, B-Deconv-2)
        let (int, a, fc, bna1, dc1, bna2, dc2) = match name {
            "S0" => (false, None, false, false, false, false, false),
            "S1-1" => (true, Some(1), true, false, false, false, false),
            "S1-2" => (true, Some(1), true, true, false, false, false),
            "S2-1" => (true, Some(127), true, true, false, false, false),
            "S2-2" => (true, Some(4095), true, true, false, false, false),
            "S3-1" => (true, Some(1), true, true, true, true, false),
            "S3-2" => (true, Some(1), true, true, true, true, true),
            _ => {
                return Err(Error::UnknownScenario {
                    name: name.to_string(),
                    valid: PRESET_NAMES.join(", "),
                })
            }
        };
        Ok(ScenarioConfig {
            name: name.to_string(),
            input_as_integer: int,
            a_value: a,
            bfc: fc,
            bbna1: bna1,
            bdeconv1: dc1,
            bbna2: bna2,
            bdeconv2: dc2,
        })
    }

    pub fn presets() -> Vec<ScenarioConfig> {
        PRESET_NAMES
            .iter()
            .map(|n| Self::preset(n).expect("preset"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        match (self.input_as_integer, self.a_value) {
            (true, Some(a)) if a >= 1 => Ok(()),
            (true, _) => Err(Error::InvalidScenario(format!(
                "{}: integer input needs an A value >= 1",
                self.name
            ))),
            (false, Some(_)) => Err(Error::InvalidScenario(format!(
                "{}: A value given but input is real-valued",
                self.name
            ))),
            (false, None) => Ok(()),
        }
    }

    pub fn any_binarized(&self) -> bool {
        self.bfc || self.bbna1 || self.bdeconv1 || self.bbna2 || self.bdeconv2
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
