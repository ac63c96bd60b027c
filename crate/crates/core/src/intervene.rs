//! Activation-space interventions.
//!
//! An [`InterventionPlan`] tells the forward pass which units to clamp to a
//! fixed value and/or what variance-scaled Gaussian noise to inject. All
//! interventions apply to post-nonlinearity activations; for conv layers a
//! "unit" is an entire feature map. Plans are plain data and carry no mutable
//! state, so one plan can be shared across concurrent evaluations.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unit: a dense neuron or a conv feature-map channel, addressed by the
/// index of the activation (ReLU) layer it lives at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitRef {
    pub layer: usize,
    pub unit: usize,
}

/// What a clamped unit is held at: zero, or its empirical mean over a
/// reference dataset (per spatial element for conv maps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    Zero,
    Mean,
}

impl std::fmt::Display for ClampMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClampMode::Zero => write!(f, "zero"),
            ClampMode::Mean => write!(f, "mean"),
        }
    }
}

impl std::str::FromStr for ClampMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ClampMode::Zero),
            "mean" => Ok(ClampMode::Mean),
            other => Err(Error::Config(format!(
                "unknown clamp mode '{other}' (expected 'zero' or 'mean')"
            ))),
        }
    }
}

/// Empirical statistics for the units of one activation layer, computed in
/// eval mode with no intervention.
///
/// For conv maps the scalar mean/variance pool over examples and spatial
/// elements; `elem_means` additionally keeps the per-element means used by
/// mean-clamping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUnitStats {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// `elem_means[unit][element]`; `None` for dense layers.
    pub elem_means: Option<Vec<Vec<f64>>>,
}

/// Per-layer unit statistics over a reference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub layers: BTreeMap<usize, LayerUnitStats>,
    pub example_count: usize,
}

impl UnitStats {
    pub fn layer(&self, layer: usize) -> Result<&LayerUnitStats> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Plan(format!("no unit statistics for layer {layer}")))
    }

    pub fn mean(&self, unit: UnitRef) -> Result<f64> {
        let stats = self.layer(unit.layer)?;
        stats
            .means
            .get(unit.unit)
            .copied()
            .ok_or_else(|| Error::Plan(format!("no statistics for unit {unit:?}")))
    }
}

/// Additive Gaussian noise on every in-scope unit, with per-unit variance
/// `scale * var(unit)`. Fresh noise is drawn per example, derived from
/// `seed` and the example's index so results do not depend on batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub scale: f64,
    pub seed: u64,
}

/// A set of clamps plus optional noise, applied during the forward pass.
#[derive(Debug, Clone, Default)]
pub struct InterventionPlan {
    pub clamps: Vec<(UnitRef, ClampMode)>,
    /// Required when any clamp uses [`ClampMode::Mean`] or when noise is set.
    pub stats: Option<Arc<UnitStats>>,
    pub noise: Option<NoiseSpec>,
}

impl InterventionPlan {
    pub fn clamp_all(units: impl IntoIterator<Item = UnitRef>, mode: ClampMode) -> Self {
        InterventionPlan {
            clamps: units.into_iter().map(|u| (u, mode)).collect(),
            stats: None,
            noise: None,
        }
    }

    pub fn with_stats(mut self, stats: Arc<UnitStats>) -> Self {
        self.stats = Some(stats);
        self
    }

    pub fn noise_only(scale: f64, seed: u64, stats: Arc<UnitStats>) -> Self {
        InterventionPlan {
            clamps: Vec::new(),
            stats: Some(stats),
            noise: Some(NoiseSpec { scale, seed }),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.clamps.is_empty() && self.noise.is_none()
    }

    /// Internal consistency: no unit clamped twice, mean clamps and noise
    /// backed by statistics, noise scale non-negative.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (unit, mode) in &self.clamps {
            if !seen.insert(*unit) {
                return Err(Error::Plan(format!(
                    "unit {unit:?} appears more than once in the clamp set"
                )));
            }
            if *mode == ClampMode::Mean && self.stats.is_none() {
                return Err(Error::Plan(
                    "mean clamping requires unit statistics".into(),
                ));
            }
        }
        if let Some(noise) = &self.noise {
            if noise.scale < 0.0 || !noise.scale.is_finite() {
                return Err(Error::Plan(format!(
                    "noise scale must be finite and >= 0, got {}",
                    noise.scale
                )));
            }
            if self.stats.is_none() {
                return Err(Error::Plan("noise injection requires unit statistics".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_clamp_rejected() {
        let u = UnitRef { layer: 1, unit: 3 };
        let plan = InterventionPlan::clamp_all([u, u], ClampMode::Zero);
        assert!(matches!(plan.validate(), Err(Error::Plan(_))));
    }

    #[test]
    fn mean_clamp_requires_stats() {
        let plan =
            InterventionPlan::clamp_all([UnitRef { layer: 1, unit: 0 }], ClampMode::Mean);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn clamp_mode_parses() {
        assert_eq!("zero".parse::<ClampMode>().unwrap(), ClampMode::Zero);
        assert_eq!("mean".parse::<ClampMode>().unwrap(), ClampMode::Mean);
        assert!("avg".parse::<ClampMode>().is_err());
    }
}
