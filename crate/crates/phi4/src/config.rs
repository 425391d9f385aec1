//! Run configuration: TOML files, `KEY=VALUE` command-line overrides, and
//! validation. A [`RunConfig`] pins everything a simulation needs so that a
//! run is reproducible from its manifest alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, TorusGrid};
use crate::solver::SolverOptions;
use crate::spectral::{DuhamelScheme, PicardOptions, ProductRule};
use crate::trees::{Mollifier, MollifierFamily};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid override {0:?}: expected KEY=VALUE")]
    BadOverride(String),
    #[error("unknown override key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Full description of one simulation run.
///
/// Every field has a default, so a config file only needs to list what it
/// changes; unknown keys are rejected to catch typos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Spatial dimension (1, 2, or 3).
    pub dimension: usize,
    /// Modes per axis; power of two, at least 4.
    pub resolution: usize,
    /// Final time.
    pub t_end: f64,
    /// Time step of the outer solve.
    pub dt: f64,
    /// Fine noise substeps per outer step (exact dt-nesting of the driving
    /// noise uses powers of two here).
    pub substeps: usize,
    /// Mollification scale δ.
    pub delta: f64,
    /// Mollifier family.
    pub family: MollifierFamily,
    /// Master seed for the noise streams.
    pub seed: u64,
    /// In-time quadrature order for Duhamel integrals and ETD steps.
    pub scheme: DuhamelScheme,
    /// Pointwise-product truncation policy.
    pub product_rule: ProductRule,
    /// Inner Picard tolerance for the implicit ETD endpoint.
    pub picard_tol: f64,
    /// Inner Picard iteration cap.
    pub picard_max_iter: usize,
    /// Sup-norm threshold past which a run is declared blown up.
    pub blowup_threshold: f64,
    /// Record norms / snapshots every this many steps.
    pub save_stride: usize,
    /// Hölder exponent used for the recorded Besov norm of u.
    pub besov_alpha: f64,
    /// Scale factor applied to the built-in smooth initial profile.
    pub initial_magnitude: f64,
    /// Also run the direct renormalized solve in lockstep for comparison.
    pub with_direct: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dimension: 3,
            resolution: 16,
            t_end: 0.25,
            dt: 2e-3,
            substeps: 1,
            delta: 0.25,
            family: MollifierFamily::Sharp,
            seed: 1,
            scheme: DuhamelScheme::PiecewiseLinear,
            product_rule: ProductRule::Dealiased,
            picard_tol: 1e-10,
            picard_max_iter: 8,
            blowup_threshold: 1e6,
            save_stride: 10,
            besov_alpha: 1.45,
            initial_magnitude: 1.0,
            with_direct: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialized form; hashed into the run manifest.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    /// Apply one `KEY=VALUE` override, using the TOML field names as keys.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::BadOverride(spec.to_string()));
        }
        // A failed validation must not leave a half-applied override behind.
        let saved = self.clone();
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "dimension" => self.dimension = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "t_end" => self.t_end = parse(key, value)?,
            "dt" => self.dt = parse(key, value)?,
            "substeps" => self.substeps = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "family" => {
                self.family = match value {
                    "sharp" => MollifierFamily::Sharp,
                    "gaussian" => MollifierFamily::Gaussian,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            reason: "expected sharp or gaussian".to_string(),
                        })
                    }
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "scheme" => {
                self.scheme = match value {
                    "piecewise_constant" => DuhamelScheme::PiecewiseConstant,
                    "piecewise_linear" => DuhamelScheme::PiecewiseLinear,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            reason: "expected piecewise_constant or piecewise_linear".to_string(),
                        })
                    }
                }
            }
            "product_rule" => {
                self.product_rule = match value {
                    "plain" => ProductRule::Plain,
                    "dealiased" => ProductRule::Dealiased,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            reason: "expected plain or dealiased".to_string(),
                        })
                    }
                }
            }
            "picard_tol" => self.picard_tol = parse(key, value)?,
            "picard_max_iter" => self.picard_max_iter = parse(key, value)?,
            "blowup_threshold" => self.blowup_threshold = parse(key, value)?,
            "save_stride" => self.save_stride = parse(key, value)?,
            "besov_alpha" => self.besov_alpha = parse(key, value)?,
            "initial_magnitude" => self.initial_magnitude = parse(key, value)?,
            "with_direct" => self.with_direct = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        if let Err(e) = self.validate() {
            *self = saved;
            return Err(e);
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, specs: &[S]) -> Result<(), ConfigError> {
        for s in specs {
            self.apply_override(s.as_ref())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        // Grid construction enforces the dimension / power-of-two rules.
        TorusGrid::new(self.dimension, self.resolution)?;
        let positive: [(&str, f64); 5] = [
            ("t_end", self.t_end),
            ("dt", self.dt),
            ("delta", self.delta),
            ("picard_tol", self.picard_tol),
            ("blowup_threshold", self.blowup_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.dt > self.t_end {
            return Err(ConfigError::Invalid("dt must not exceed t_end".to_string()));
        }
        if self.substeps == 0 || self.save_stride == 0 || self.picard_max_iter == 0 {
            return Err(ConfigError::Invalid(
                "substeps, save_stride, and picard_max_iter must be at least 1".to_string(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> TorusGrid {
        TorusGrid::new(self.dimension, self.resolution).expect("validated config")
    }

    pub fn mollifier(&self) -> Mollifier {
        Mollifier::new(self.family, self.delta)
    }

    pub fn solver_options(&self) -> SolverOptions {
        let mut opts = SolverOptions::new(self.t_end, self.dt);
        opts.substeps = self.substeps;
        opts.scheme = self.scheme;
        opts.rule = self.product_rule;
        opts.picard = PicardOptions {
            tol: self.picard_tol,
            max_iter: self.picard_max_iter,
        };
        opts.blowup_threshold = self.blowup_threshold;
        opts.save_stride = self.save_stride;
        opts.besov_alpha = self.besov_alpha;
        opts
    }

    /// Heuristic step-size advisory: the inner Picard loop contracts at rate
    /// roughly dt/2 times the local Lipschitz constant of the nonlinearity,
    /// so large dt relative to field amplitude tends to fail. Advisory only.
    pub fn dt_stability_warning(&self) -> Option<String> {
        let scale = 3.0 * self.initial_magnitude.max(1.0).powi(2);
        let contraction = 0.5 * self.dt * scale;
        if contraction > 0.25 {
            Some(format!(
                "dt = {} may be too large for the inner Picard loop \
                 (estimated contraction factor {:.2}); consider reducing it",
                self.dt, contraction
            ))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let cfg = RunConfig::from_toml_str("resolution = 32\nseed = 7\n").unwrap();
        assert_eq!(cfg.resolution, 32);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dimension, RunConfig::default().dimension);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::from_toml_str("resolutoin = 32\n").is_err());
    }

    #[test]
    fn overrides_parse_and_validate() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "resolution=32",
            "delta=0.125",
            "family=gaussian",
            "product_rule=plain",
            "dt = 0.0005",
        ])
        .unwrap();
        assert_eq!(cfg.resolution, 32);
        assert_eq!(cfg.family, MollifierFamily::Gaussian);
        assert_eq!(cfg.product_rule, ProductRule::Plain);
        assert_eq!(cfg.dt, 5e-4);

        assert!(cfg.apply_override("nope=3").is_err());
        assert!(cfg.apply_override("dt").is_err());
        assert!(cfg.apply_override("dt=-1").is_err());
        assert!(cfg.apply_override("resolution=33").is_err());
        assert!(cfg.apply_override("family=boxcar").is_err());
    }

    #[test]
    fn stability_advisory_fires_for_coarse_dt() {
        let mut cfg = RunConfig::default();
        assert!(cfg.dt_stability_warning().is_none());
        cfg.dt = 0.2;
        cfg.initial_magnitude = 10.0;
        assert!(cfg.dt_stability_warning().is_some());
    }
}
