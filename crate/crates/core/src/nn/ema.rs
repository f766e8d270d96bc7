use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Exponential moving average of parameters with a half-life measured in images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: ParamSet,
    pub half_life_images: f64,
    pub images_seen: u64,
}

/// Per-update decay after `batch_images` images: `0.5^(batch / half_life)`.
pub fn ema_decay(batch_images: u64, half_life_images: f64) -> Result<f64> {
    if !(half_life_images > 0.0) {
        return Err(Error::config(format!(
            "EMA half-life must be positive, got {half_life_images}"
        )));
    }
    Ok(0.5f64.powf(batch_images as f64 / half_life_images))
}

impl EmaState {
    pub fn new(params: &ParamSet, half_life_images: f64) -> Result<Self> {
        ema_decay(1, half_life_images)?;
        Ok(Self {
            shadow: params.clone(),
            half_life_images,
            images_seen: 0,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`; returns the decay used.
    pub fn update(&mut self, params: &ParamSet, batch_images: u64) -> Result<f64> {
        self.shadow.ensure_congruent(params, "ema_update")?;
        let decay = ema_decay(batch_images, self.half_life_images)?;
        for i in 0..params.len() {
            ndarray::Zip::from(self.shadow.get_mut(i))
                .and(params.get(i))
                .for_each(|s, &p| *s = decay * *s + (1.0 - decay) * p);
        }
        self.images_seen += batch_images;
        Ok(decay)
    }
}
