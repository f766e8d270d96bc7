use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mlp::{Arch, DenoiserNet};
use super::params::{Param, ParamSet};
use crate::diffusion::ScheduleFingerprint;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counters {
    pub step: u64,
    pub images_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub role: String,
    pub arch: Arch,
    pub schedule: ScheduleFingerprint,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    header: CheckpointHeader,
    tensors: Vec<TensorRecord>,
}

fn record(p: &Param) -> TensorRecord {
    let shape = p.value.shape();
    TensorRecord {
        name: p.name.clone(),
        shape: [shape[0], shape[1]],
        data: p.value.iter().copied().collect(),
    }
}

fn records_to_params(records: Vec<TensorRecord>) -> Result<ParamSet> {
    let entries = records
        .into_iter()
        .map(|r| {
            let value = Array2::from_shape_vec((r.shape[0], r.shape[1]), r.data).map_err(|e| {
                Error::Checkpoint(format!("tensor `{}` has inconsistent shape: {e}", r.name))
            })?;
            Ok(Param { name: r.name, value })
        })
        .collect::<Result<Vec<_>>>()?;
    ParamSet::new(entries)
}

/// Writes a JSON checkpoint. Floats use the shortest representation that
/// round-trips, so reading back reproduces every bit.
pub fn save_net(
    path: &Path,
    net: &DenoiserNet,
    role: &str,
    schedule: &ScheduleFingerprint,
    counters: Counters,
) -> Result<()> {
    let file = CheckpointFile {
        header: CheckpointHeader {
            format_version: FORMAT_VERSION,
            role: role.to_string(),
            arch: net.arch.clone(),
            schedule: schedule.clone(),
            counters,
        },
        tensors: net.params.iter().map(record).collect(),
    };
    let mut text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<(DenoiserNet, CheckpointHeader)> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            file.header.format_version
        )));
    }
    let params = records_to_params(file.tensors)?;
    let net = DenoiserNet::from_params(file.header.arch.clone(), params)?;
    Ok((net, file.header))
}

/// Loads a checkpoint and rejects it unless its schedule matches `expected`.
pub fn load_net_checked(
    path: &Path,
    expected: &ScheduleFingerprint,
) -> Result<(DenoiserNet, CheckpointHeader)> {
    let (net, header) = load_net(path)?;
    if &header.schedule != expected {
        return Err(Error::config(format!(
            "checkpoint {} was written under schedule {:?}, config uses {:?}",
            path.display(),
            header.schedule,
            expected
        )));
    }
    Ok((net, header))
}
