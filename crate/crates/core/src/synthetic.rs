//! Seeded synthetic series with known periodic structure.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::params::rng_for;
use crate::tensor::Tensor;

/// Daily profile shared by all channels, evaluated at `u ∈ [0, 1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Sine,
    /// Sharp morning peak with a flat night; far from a single harmonic.
    Peaked,
}

impl Profile {
    pub fn value(self, u: f64) -> f64 {
        let angle = 2.0 * std::f64::consts::PI * u;
        match self {
            Profile::Sine => angle.sin(),
            Profile::Peaked => {
                let d = (u - 0.3).rem_euclid(1.0).min((0.3 - u).rem_euclid(1.0));
                2.5 * (-(d * d) / 0.004).exp() + 0.6 * (2.0 * angle).sin() - 0.5
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseOffsetSpec {
    pub channels: usize,
    pub period: usize,
    pub days: usize,
    pub profile: Profile,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

/// Channel `i` follows the profile shifted by `i·P/C` steps, scaled by
/// `1 + i/C`, plus independent noise.
pub fn phase_offset_series(spec: &PhaseOffsetSpec) -> Result<TimeSeriesDataset> {
    let PhaseOffsetSpec { channels, period, days, profile, noise, seed } = *spec;
    if channels == 0 || period == 0 || days == 0 {
        return Err(Error::config("synthetic", "channels, period and days must be positive"));
    }
    let dist = Normal::new(0.0, noise).map_err(|e| Error::config("noise", e.to_string()))?;
    let mut rng = rng_for(seed, 7);
    let steps = period * days;
    let mut values = Vec::with_capacity(steps * channels);
    for t in 0..steps {
        for i in 0..channels {
            let offset = i * period / channels;
            let u = ((t + offset) % period) as f64 / period as f64;
            let amp = 1.0 + i as f64 / channels as f64;
            values.push(amp * profile.value(u) + dist.sample(&mut rng));
        }
    }
    let mut ds = TimeSeriesDataset::new("synthetic", Tensor::new(&[steps, channels], values)?, period)?;
    ds.channel_names = (0..channels).map(|i| format!("ch{i}")).collect();
    Ok(ds)
}
