use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DelayDistribution {
    Constant { mean_ms: f64 },
    Normal { mean_ms: f64, std_ms: f64 },
    /// Parameters of the underlying normal, in log-milliseconds.
    Lognormal { mu: f64, sigma: f64 },
}

impl DelayDistribution {
    pub fn mean_ms(&self) -> f64 {
        match *self {
            DelayDistribution::Constant { mean_ms } | DelayDistribution::Normal { mean_ms, .. } => mean_ms,
            DelayDistribution::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
        }
    }
}

/// One-way delay model for a simulated link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    #[serde(flatten)]
    pub distribution: DelayDistribution,
    #[serde(default, rename = "reorder_p")]
    pub reorder_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

impl LatencyModel {
    pub fn constant(mean_ms: f64) -> Self {
        Self { distribution: DelayDistribution::Constant { mean_ms }, reorder_probability: 0.0, seed: 0 }
    }

    pub fn normal(mean_ms: f64, std_ms: f64, seed: u64) -> Self {
        Self { distribution: DelayDistribution::Normal { mean_ms, std_ms }, reorder_probability: 0.0, seed }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Model(m.to_string()));
        if !(0.0..1.0).contains(&self.reorder_probability) {
            return bad("reorder_p must lie in [0, 1)");
        }
        match self.distribution {
            DelayDistribution::Constant { mean_ms } if !(mean_ms.is_finite() && mean_ms >= 0.0) => {
                bad("mean_ms must be finite and non-negative")
            }
            DelayDistribution::Normal { mean_ms, std_ms }
                if !(mean_ms.is_finite() && std_ms.is_finite() && std_ms >= 0.0) =>
            {
                bad("normal model needs finite mean_ms and std_ms >= 0")
            }
            DelayDistribution::Lognormal { mu, sigma } if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) => {
                bad("lognormal model needs finite mu and sigma >= 0")
            }
            _ => Ok(()),
        }
    }

    /// Sampler for one link; `stream` separates links sharing a seed.
    pub fn sampler(&self, stream: u64) -> Result<LatencySampler, NetError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Ok(LatencySampler { model: *self, rng })
    }
}

#[derive(Debug, Clone)]
pub struct LatencySampler {
    model: LatencyModel,
    rng: ChaCha8Rng,
}

impl LatencySampler {
    /// Next one-way delay in microseconds, clamped at zero.
    pub fn sample_us(&mut self) -> u64 {
        let ms = match self.model.distribution {
            DelayDistribution::Constant { mean_ms } => mean_ms,
            DelayDistribution::Normal { mean_ms, std_ms } => {
                Normal::new(mean_ms, std_ms).expect("validated").sample(&mut self.rng)
            }
            DelayDistribution::Lognormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated").sample(&mut self.rng)
            }
        };
        (ms.max(0.0) * 1000.0).round() as u64
    }

    pub fn reorder(&mut self) -> bool {
        self.model.reorder_probability > 0.0 && self.rng.gen::<f64>() < self.model.reorder_probability
    }
}
