use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::InvalidArgument(format!(
                "{name}: [{}, {}] is not a valid range",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range { lo: v[0], hi: v[1] }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticConfig {
    /// Control-point spacing in mm.
    pub spacing_mm: f64,
    /// Standard deviation of control-point displacements in mm.
    pub std_mm: f64,
}

/// Parameter ranges of the generative model. Every field can be overridden
/// from JSON; missing fields keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Cases generated per input label map.
    pub replication: usize,
    /// Rotation about each axis, degrees.
    pub rotation_range: Range,
    pub scale_range: Range,
    pub shear_range: Range,
    /// Translation along each axis, mm.
    pub translation_range: Range,
    pub elastic: ElasticConfig,
    pub gmm_mean_range: Range,
    pub gmm_std_range: Range,
    /// Bias-field control-point spacing, mm.
    pub bias_scale: f64,
    /// Std of the log bias field.
    pub bias_std: f64,
    /// Std of log(gamma).
    pub gamma_std: f64,
    /// Simulated acquisition spacing, mm.
    pub resolution_range: Range,
    /// Off: label-only cases (spatial augmentation only).
    pub intensity_synthesis: bool,
    pub bias: bool,
    pub gamma: bool,
    pub resolution: bool,
    /// Attempts at drawing a transform with positive Jacobian everywhere.
    pub max_spatial_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            replication: 1,
            rotation_range: Range::new(-15.0, 15.0),
            scale_range: Range::new(0.85, 1.15),
            shear_range: Range::new(-0.012, 0.012),
            translation_range: Range::new(-15.0, 15.0),
            elastic: ElasticConfig { spacing_mm: 24.0, std_mm: 2.0 },
            gmm_mean_range: Range::new(0.0, 255.0),
            gmm_std_range: Range::new(0.0, 35.0),
            bias_scale: 40.0,
            bias_std: 0.5,
            gamma_std: 0.25,
            resolution_range: Range::new(0.6, 3.0),
            intensity_synthesis: true,
            bias: true,
            gamma: true,
            resolution: true,
            max_spatial_retries: 10,
        }
    }
}

impl SynthConfig {
    /// Configuration whose spatial stage is the identity.
    pub fn identity_spatial(mut self) -> Self {
        self.rotation_range = Range::point(0.0);
        self.scale_range = Range::point(1.0);
        self.shear_range = Range::point(0.0);
        self.translation_range = Range::point(0.0);
        self.elastic.std_mm = 0.0;
        self
    }

    /// Label-only mode: intensity synthesis and all its stages off.
    pub fn labels_only(mut self) -> Self {
        self.intensity_synthesis = false;
        self
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.replication < 1 {
            return Err(Error::InvalidArgument("replication must be at least 1".into()));
        }
        self.rotation_range.validate("rotation_range")?;
        self.scale_range.validate("scale_range")?;
        self.shear_range.validate("shear_range")?;
        self.translation_range.validate("translation_range")?;
        self.gmm_mean_range.validate("gmm_mean_range")?;
        self.gmm_std_range.validate("gmm_std_range")?;
        self.resolution_range.validate("resolution_range")?;
        if self.scale_range.lo <= 0.0 {
            return Err(Error::InvalidArgument("scale_range must be positive".into()));
        }
        if self.gmm_std_range.lo < 0.0 {
            return Err(Error::InvalidArgument("gmm_std_range must be non-negative".into()));
        }
        if self.resolution_range.lo <= 0.0 {
            return Err(Error::InvalidArgument("resolution_range must be positive".into()));
        }
        if !(self.bias_scale > 0.0) {
            return Err(Error::InvalidArgument("bias_scale must be positive".into()));
        }
        if !(self.elastic.spacing_mm > 0.0) {
            return Err(Error::InvalidArgument("elastic.spacing_mm must be positive".into()));
        }
        for (name, v) in [("bias_std", self.bias_std), ("gamma_std", self.gamma_std), ("elastic.std_mm", self.elastic.std_mm)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative")));
            }
        }
        if self.max_spatial_retries == 0 {
            return Err(Error::InvalidArgument("max_spatial_retries must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_overrides_and_defaults() {
        let cfg = SynthConfig::from_json(r#"{"seed": 7, "replication": 2, "rotation_range": [-5, 5]}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.replication, 2);
        assert_eq!(cfg.rotation_range, Range::new(-5.0, 5.0));
        assert_eq!(cfg.scale_range, Range::new(0.85, 1.15));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(SynthConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig::from_json(r#"{"replication": 0}"#).is_err());
        assert!(SynthConfig::from_json(r#"{"rotation_range": [5, -5]}"#).is_err());
        assert!(SynthConfig::from_json(r#"{"bias_scale": 0}"#).is_err());
        assert!(SynthConfig::from_json(r#"{"unknown_field": 1}"#).is_err());
    }
}
