//! Run configuration: a JSON document merged with command-line flags.

use std::path::Path;

use phenoctl_core::ide_sim::Scheme;
use phenoctl_core::model::{validate, ModelParams, Preset};
use phenoctl_core::ocp_direct::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Scalar parameters that may be overridden on top of a preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    #[serde(rename = "theta_HC", skip_serializing_if = "Option::is_none")]
    pub theta_hc: Option<f64>,
    #[serde(rename = "theta_H", skip_serializing_if = "Option::is_none")]
    pub theta_h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u1_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u2_max: Option<f64>,
    #[serde(rename = "alpha_H", skip_serializing_if = "Option::is_none")]
    pub alpha_h: Option<f64>,
    #[serde(rename = "alpha_C", skip_serializing_if = "Option::is_none")]
    pub alpha_c: Option<f64>,
    #[serde(rename = "a_HH", skip_serializing_if = "Option::is_none")]
    pub a_hh: Option<f64>,
    #[serde(rename = "a_HC", skip_serializing_if = "Option::is_none")]
    pub a_hc: Option<f64>,
    #[serde(rename = "a_CH", skip_serializing_if = "Option::is_none")]
    pub a_ch: Option<f64>,
    #[serde(rename = "a_CC", skip_serializing_if = "Option::is_none")]
    pub a_cc: Option<f64>,
}

impl ParamOverrides {
    pub fn apply(&self, p: &mut ModelParams) {
        let pairs: [(&mut f64, Option<f64>); 10] = [
            (&mut p.theta_hc, self.theta_hc),
            (&mut p.theta_h, self.theta_h),
            (&mut p.u1_max, self.u1_max),
            (&mut p.u2_max, self.u2_max),
            (&mut p.alpha_h, self.alpha_h),
            (&mut p.alpha_c, self.alpha_c),
            (&mut p.a_hh, self.a_hh),
            (&mut p.a_hc, self.a_hc),
            (&mut p.a_ch, self.a_ch),
            (&mut p.a_cc, self.a_cc),
        ];
        for (slot, v) in pairs {
            if let Some(v) = v {
                *slot = v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub nx: usize,
    pub dt: f64,
    pub seed: u64,
    pub snapshots: usize,
    pub scheme: Scheme,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            nx: 101,
            dt: 1e-3,
            seed: 0,
            snapshots: 20,
            scheme: Scheme::Explicit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    /// Complete parameter set replacing the preset's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ModelParams>,
    #[serde(default)]
    pub overrides: ParamOverrides,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_preset() -> Preset {
    Preset::Modified
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            params: None,
            overrides: ParamOverrides::default(),
            numerics: Numerics::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Flags that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub nx: Option<usize>,
    pub dt: Option<f64>,
    pub theta_hc: Option<f64>,
    pub theta_h: Option<f64>,
}

pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.inner()))
    })
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl RunConfig {
    pub fn with_flags(mut self, flags: &FlagOverrides) -> CliResult<Self> {
        if let Some(name) = &flags.preset {
            self.preset = Preset::from_name(name)?;
        }
        if let Some(s) = flags.seed {
            self.numerics.seed = s;
        }
        if let Some(n) = flags.nx {
            self.numerics.nx = n;
        }
        if let Some(dt) = flags.dt {
            self.numerics.dt = dt;
        }
        if flags.theta_hc.is_some() {
            self.overrides.theta_hc = flags.theta_hc;
        }
        if flags.theta_h.is_some() {
            self.overrides.theta_h = flags.theta_h;
        }
        self.optimizer.seed = self.numerics.seed;
        Ok(self)
    }

    /// Parameter set after preset selection and overrides, unchecked.
    pub fn raw_params(&self) -> ModelParams {
        let mut p = self.params.clone().unwrap_or_else(|| self.preset.params());
        self.overrides.apply(&mut p);
        p
    }

    /// Parameter set after preset selection and overrides, validated.
    pub fn params(&self) -> CliResult<ModelParams> {
        let p = self.raw_params();
        let report = validate(&p);
        if !report.passed() {
            let msgs: Vec<String> = report
                .failures()
                .map(|c| format!("{}: {}", c.id, c.detail))
                .collect();
            return Err(CliError::Config(format!("invalid parameters: {}", msgs.join("; "))));
        }
        Ok(p)
    }

    pub fn check_numerics(&self) -> CliResult<()> {
        let n = &self.numerics;
        if n.nx < 2 {
            return Err(CliError::Config(format!("numerics.nx must be at least 2, got {}", n.nx)));
        }
        if !(n.dt > 0.0 && n.dt.is_finite()) {
            return Err(CliError::Config(format!("numerics.dt must be positive, got {}", n.dt)));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}
