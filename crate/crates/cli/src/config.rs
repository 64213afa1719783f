//! Experiment descriptions in JSON.
//!
//! Every section keeps unrecognized keys in a side map so that validation can
//! report all of them together with range errors, instead of stopping at the
//! first problem.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;

use nalgebra::DMatrix;
use sdevl::evt::NoiseSpec;
use sdevl::sde::{DriftModel, Scheme};
use sdevl::spaces::GridSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

type Extra = BTreeMap<String, Value>;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(from = "String", into = "String")]
        pub enum $name {
            $($variant,)+
            /// Unrecognized name, rejected by validation.
            Unknown(String),
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$($text),+];

            pub fn as_str(&self) -> &str {
                match self {
                    $(Self::$variant => $text,)+
                    Self::Unknown(s) => s,
                }
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                match s.as_str() {
                    $($text => Self::$variant,)+
                    _ => Self::Unknown(s),
                }
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.as_str().to_string()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

named_enum!(
    /// Experiment kind, one per subcommand.
    Kind {
        Evl => "evl",
        Poisson => "poisson",
        Spectrum => "spectrum",
        Kl => "kl",
        LyFit => "ly_fit",
        Refine => "refine",
        Blocks => "blocks",
        Norms => "norms",
    }
);

named_enum!(
    ModelName {
        Ou => "ou",
        OuShift => "ou_shift",
        DoubleWell => "double_well",
        CustomLinear => "custom_linear",
    }
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Closed form for `N(0, I/2)`; OU only.
    Analytic,
    /// Sum of the grid invariant density over cells.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_model_name")]
    pub name: ModelName,
    #[serde(default = "one")]
    pub dim: usize,
    /// `ou_shift`: the constant `c` in `-x + c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<f64>>,
    /// `double_well`: box on which the Lipschitz constant is declared;
    /// defaults to the grid half width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_radius: Option<f64>,
    /// `custom_linear`: rows of `A` in `b(x) = A x`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(flatten, default, skip_serializing)]
    extra: Extra,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { name: ModelName::Ou, dim: 1, shift: None, box_radius: None, matrix: None, extra: Extra::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_cells")]
    pub m: usize,
    #[serde(flatten, default, skip_serializing)]
    extra: Extra,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { half_width: default_half_width(), m: default_cells(), extra: Extra::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the exact sampler for `ou` and Euler-Maruyama otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(flatten, default, skip_serializing)]
    extra: Extra,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            h: default_h(),
            n: default_n(),
            substeps: default_substeps(),
            trials: default_trials(),
            seed: 0,
            scheme: None,
            extra: Extra::new(),
        }
    }
}

/// Kind-specific parameters; each kind reads the ones it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    #[serde(default = "default_tau")]
    pub tau: Vec<f64>,
    /// Target point; defaults to the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Extra sampling steps for `evl`; all pairs are compared.
    #[serde(default)]
    pub h_list: Vec<f64>,
    #[serde(default)]
    pub radii: Vec<f64>,
    /// Twist parameters for `spectrum`, in `(0, 2π)`.
    #[serde(default)]
    pub s: Vec<f64>,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Refinement factors for `refine`.
    #[serde(default = "default_m_list")]
    pub m_list: Vec<usize>,
    #[serde(default = "default_noise")]
    pub noise: Vec<NoiseSpec>,
    /// Block length for `blocks`.
    #[serde(default = "default_block_m")]
    pub block_m: usize,
    /// `kl`: compare the surviving operator mass with Monte Carlo for a
    /// one-cell hole at `x0`.
    #[serde(default)]
    pub cross_check: bool,
    /// Defaults to analytic for `ou` and grid otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
    #[serde(flatten, default, skip_serializing)]
    extra: Extra,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            x0: None,
            h_list: Vec::new(),
            radii: Vec::new(),
            s: Vec::new(),
            k_max: default_k_max(),
            m_list: default_m_list(),
            noise: default_noise(),
            block_m: default_block_m(),
            cross_check: false,
            calibration: None,
            extra: Extra::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Names the output files, so it must be unique per output directory.
    pub experiment_id: String,
    pub kind: Kind,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub params: Params,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(flatten, default, skip_serializing)]
    extra: Extra,
}

fn one() -> usize {
    1
}
fn default_model_name() -> ModelName {
    ModelName::Ou
}
fn default_half_width() -> f64 {
    6.0
}
fn default_cells() -> usize {
    512
}
fn default_h() -> f64 {
    0.5
}
fn default_n() -> usize {
    2000
}
fn default_substeps() -> usize {
    sdevl::sde::DEFAULT_SUBSTEPS
}
fn default_trials() -> usize {
    20_000
}
fn default_tau() -> Vec<f64> {
    vec![1.0]
}
fn default_k_max() -> usize {
    20
}
fn default_m_list() -> Vec<usize> {
    vec![1, 2, 4]
}
fn default_noise() -> Vec<NoiseSpec> {
    vec![NoiseSpec::Delta, NoiseSpec::Gaussian { sigma: 1.0 }]
}
fn default_block_m() -> usize {
    4
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// All problems found in a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem{}):", self.0.len(), if self.0.len() == 1 { "" } else { "s" })?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Parses and validates a JSON configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError(vec![e.to_string()]))?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    /// Config with every optional field at its default.
    pub fn new(experiment_id: &str, kind: Kind) -> Self {
        Self {
            experiment_id: experiment_id.to_string(),
            kind,
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            sampling: SamplingConfig::default(),
            params: Params::default(),
            output: default_output(),
            extra: Extra::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut unknown = |section: &str, extra: &Extra| {
            for key in extra.keys() {
                let at = if section.is_empty() { String::new() } else { format!(" in `{section}`") };
                errs.push(format!("unknown key `{key}`{at}"));
            }
        };
        unknown("", &self.extra);
        unknown("model", &self.model.extra);
        unknown("grid", &self.grid.extra);
        unknown("sampling", &self.sampling.extra);
        unknown("params", &self.params.extra);

        if self.experiment_id.is_empty()
            || !self.experiment_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            errs.push(format!(
                "experiment_id: `{}` must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.experiment_id
            ));
        }
        if let Kind::Unknown(k) = &self.kind {
            errs.push(format!("kind: unknown kind `{k}`; available: {}", Kind::NAMES.join(", ")));
        }

        let m = &self.model;
        if let ModelName::Unknown(name) = &m.name {
            errs.push(format!("model.name: unknown model `{name}`; available: {}", ModelName::NAMES.join(", ")));
        }
        if m.dim == 0 {
            errs.push("model.dim: must be >= 1".into());
        }
        match m.name {
            ModelName::OuShift => match &m.shift {
                None => errs.push("model.shift: required for ou_shift".into()),
                Some(s) if s.len() != m.dim => {
                    errs.push(format!("model.shift: has {} entries but model.dim is {}", s.len(), m.dim))
                }
                Some(s) if s.iter().any(|v| !v.is_finite()) => errs.push("model.shift: entries must be finite".into()),
                _ => {}
            },
            ModelName::CustomLinear => match &m.matrix {
                None => errs.push("model.matrix: required for custom_linear".into()),
                Some(rows) if rows.len() != m.dim || rows.iter().any(|r| r.len() != m.dim) => {
                    errs.push(format!("model.matrix: must be {0} x {0}", m.dim))
                }
                _ => {}
            },
            _ => {}
        }
        if let Some(r) = m.box_radius {
            if !(r > 0.0 && r.is_finite()) {
                errs.push(format!("model.box_radius: must be > 0, got {r}"));
            }
        }

        let g = &self.grid;
        if !(g.half_width > 0.0 && g.half_width.is_finite()) {
            errs.push(format!("grid.half_width: must be > 0, got {}", g.half_width));
        }
        if g.m < 2 {
            errs.push(format!("grid.m: must be >= 2, got {}", g.m));
        } else if m.dim >= 1 && (g.m as f64).powi(m.dim as i32) > 1.6e4 {
            errs.push(format!("grid.m: {}^{} cells is too many for dense transfer matrices", g.m, m.dim));
        }

        let s = &self.sampling;
        if !(s.h > 0.0 && s.h.is_finite()) {
            errs.push(format!("sampling.h: must be > 0, got {}", s.h));
        }
        if s.n == 0 {
            errs.push("sampling.n: must be >= 1".into());
        }
        if s.substeps == 0 {
            errs.push("sampling.substeps: must be >= 1".into());
        }
        if s.trials < sdevl::evt::MIN_TRIALS {
            errs.push(format!("sampling.trials: must be >= {}, got {}", sdevl::evt::MIN_TRIALS, s.trials));
        }
        if s.scheme == Some(Scheme::ExactOu) && m.name != ModelName::Ou {
            errs.push(format!("sampling.scheme: exact_ou needs model `ou`, got `{}`", m.name));
        }

        let p = &self.params;
        if p.tau.is_empty() {
            errs.push("params.tau: must not be empty".into());
        }
        for (i, t) in p.tau.iter().enumerate() {
            if !(*t > 0.0 && t.is_finite()) {
                errs.push(format!("params.tau[{i}]: must be > 0, got {t}"));
            }
        }
        if let Some(x0) = &p.x0 {
            if x0.len() != m.dim {
                errs.push(format!("params.x0: has {} entries but model.dim is {}", x0.len(), m.dim));
            } else if !x0.iter().all(|v| v.abs() < g.half_width) {
                errs.push(format!("params.x0: must lie inside the grid box (-{0}, {0})^d", g.half_width));
            }
        }
        for (i, h) in p.h_list.iter().enumerate() {
            if !(*h > 0.0 && h.is_finite()) {
                errs.push(format!("params.h_list[{i}]: must be > 0, got {h}"));
            }
        }
        for (i, r) in p.radii.iter().enumerate() {
            if !(*r > 0.0 && r.is_finite()) {
                errs.push(format!("params.radii[{i}]: must be > 0, got {r}"));
            }
        }
        for (i, v) in p.s.iter().enumerate() {
            if !(*v > 0.0 && *v < 2.0 * PI) {
                errs.push(format!("params.s[{i}]: must lie in (0, 2π), got {v}"));
            }
        }
        if p.k_max == 0 {
            errs.push("params.k_max: must be >= 1".into());
        }
        if p.m_list.is_empty() {
            errs.push("params.m_list: must not be empty".into());
        }
        for (i, v) in p.m_list.iter().enumerate() {
            if *v == 0 {
                errs.push(format!("params.m_list[{i}]: must be >= 1"));
            }
        }
        for (i, nz) in p.noise.iter().enumerate() {
            if let Err(e) = nz.validate() {
                errs.push(format!("params.noise[{i}]: {e}"));
            }
        }
        if p.block_m == 0 {
            errs.push("params.block_m: must be >= 1".into());
        }
        if p.calibration == Some(Calibration::Analytic) && m.name != ModelName::Ou {
            errs.push(format!("params.calibration: analytic needs model `ou`, got `{}`", m.name));
        }
        if p.calibration != Some(Calibration::Grid)
            && m.name == ModelName::Ou
            && m.dim > 1
            && p.x0.as_ref().is_some_and(|x| x.iter().any(|v| *v != 0.0))
        {
            errs.push("params.x0: analytic calibration in d > 1 needs x0 at the origin; use calibration = grid".into());
        }
        match self.kind {
            Kind::Kl if p.radii.is_empty() && !p.cross_check => {
                errs.push("params.radii: kind `kl` needs a hole radius or cross_check = true".into());
            }
            Kind::Blocks if p.noise.is_empty() => errs.push("params.noise: must not be empty".into()),
            _ => {}
        }

        if errs.is_empty() { Ok(()) } else { Err(ConfigError(errs)) }
    }

    pub fn build_model(&self) -> anyhow::Result<DriftModel> {
        let m = &self.model;
        let model = match m.name {
            ModelName::Ou => DriftModel::ou(m.dim)?,
            ModelName::OuShift => DriftModel::ou_shift(m.shift.clone().unwrap_or_default())?,
            ModelName::DoubleWell => DriftModel::double_well(m.dim, m.box_radius.unwrap_or(self.grid.half_width))?,
            ModelName::CustomLinear => {
                let rows = m.matrix.clone().unwrap_or_default();
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                DriftModel::custom_linear(DMatrix::from_row_slice(m.dim, m.dim, &flat))?
            }
            ModelName::Unknown(ref name) => anyhow::bail!("unknown model `{name}`"),
        };
        Ok(model)
    }

    pub fn build_grid(&self) -> anyhow::Result<GridSpec> {
        Ok(GridSpec::new(self.model.dim, self.grid.half_width, self.grid.m)?)
    }

    pub fn scheme(&self) -> Scheme {
        self.sampling.scheme.unwrap_or(if self.model.name == ModelName::Ou {
            Scheme::ExactOu
        } else {
            Scheme::EulerMaruyama
        })
    }

    pub fn calibration(&self) -> Calibration {
        self.params.calibration.unwrap_or(if self.model.name == ModelName::Ou {
            Calibration::Analytic
        } else {
            Calibration::Grid
        })
    }

    pub fn x0(&self) -> Vec<f64> {
        self.params.x0.clone().unwrap_or_else(|| vec![0.0; self.model.dim])
    }
}
