//! Dense conditional MLPs with hand-written reverse mode, plus Adam and EMA.

mod adam;
mod checkpoint;
mod ema;
mod embedding;
mod mlp;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_net, load_net_checked, save_net, CheckpointHeader, Counters, FORMAT_VERSION};
pub use ema::{ema_decay, EmaState};
pub use embedding::time_embedding;
pub use mlp::{net_grad, Arch, Backward, DenoiserNet, ForwardCache, GradMode, NetGrad};
pub use params::{Param, ParamSet};

/// `EmaState::update` under the free-function name used throughout the crate.
pub fn ema_update(ema: &mut EmaState, params: &ParamSet, batch_images: u64) -> crate::Result<f64> {
    ema.update(params, batch_images)
}
