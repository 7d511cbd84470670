//! Checkpoint files: a JSON container with the config, every parameter
//! tensor (row-major), the optimizer moments and the step count.
//!
//! serde_json prints each f64 with just enough digits to parse back to the
//! same bits, so a save/load cycle is lossless. Non-finite values cannot
//! appear: parameters are finite by invariant and a load rejects anything
//! else.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::Parameters;
use crate::model::train::AdamState;
use crate::model::ModelConfig;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentData {
    m: BTreeMap<String, TensorData>,
    v: BTreeMap<String, TensorData>,
    t: u64,
}

/// The on-disk layout. `groups` maps parameter group names (as reported by
/// the parameter walk) to row-major tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub step: u64,
    groups: BTreeMap<String, TensorData>,
    adam: Option<MomentData>,
}

fn tensor_map(params: &Parameters) -> BTreeMap<String, TensorData> {
    let shapes: BTreeMap<String, Vec<usize>> = params.group_shapes().into_iter().collect();
    params
        .groups()
        .into_iter()
        .map(|(name, data)| {
            let shape = shapes[&name].clone();
            (
                name,
                TensorData {
                    shape,
                    data: data.to_vec(),
                },
            )
        })
        .collect()
}

fn fill_params(
    config: &ModelConfig,
    groups: &BTreeMap<String, TensorData>,
    what: &str,
) -> Result<Parameters> {
    let mut params = Parameters::zeros(config)?;
    let expected: BTreeMap<String, Vec<usize>> = params.group_shapes().into_iter().collect();
    let mut seen = 0usize;
    for (name, slot) in params.groups_mut() {
        let tensor = groups.get(&name).ok_or_else(|| Error::BadCheckpoint {
            reason: format!("{what} is missing group {name:?}"),
        })?;
        if tensor.shape != expected[&name] || tensor.data.len() != slot.len() {
            return Err(Error::BadCheckpoint {
                reason: format!(
                    "{what} group {name:?} has shape {:?} ({} values), expected {:?}",
                    tensor.shape,
                    tensor.data.len(),
                    expected[&name]
                ),
            });
        }
        slot.copy_from_slice(&tensor.data);
        seen += 1;
    }
    if seen != groups.len() {
        let known: Vec<&String> = groups
            .keys()
            .filter(|k| !params.groups().iter().any(|(n, _)| n == *k))
            .collect();
        return Err(Error::BadCheckpoint {
            reason: format!("{what} has unknown groups {known:?}"),
        });
    }
    Ok(params)
}

/// Writes a checkpoint. Pass the optimizer state to make the file
/// resumable; `None` stores parameters only.
pub fn save_checkpoint(
    path: &Path,
    params: &Parameters,
    step: u64,
    adam: Option<&AdamState>,
) -> Result<()> {
    if !params.all_finite() {
        return Err(Error::BadCheckpoint {
            reason: "refusing to save non-finite parameters".to_string(),
        });
    }
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        step,
        groups: tensor_map(params),
        adam: adam.map(|state| MomentData {
            m: tensor_map(&state.m),
            v: tensor_map(&state.v),
            t: state.t,
        }),
    };
    fs::write(path, serde_json::to_string(&checkpoint)?)?;
    Ok(())
}

/// Reads a checkpoint back into parameters, the saved step count, and the
/// optimizer state when the file carries one.
pub fn load_checkpoint(path: &Path) -> Result<(Parameters, u64, Option<AdamState>)> {
    let text = fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint {
            reason: format!(
                "version {} (this build reads version {})",
                checkpoint.version, CHECKPOINT_VERSION
            ),
        });
    }
    let params = fill_params(&checkpoint.config, &checkpoint.groups, "checkpoint")?;
    if !params.all_finite() {
        return Err(Error::BadCheckpoint {
            reason: "checkpoint holds non-finite parameter values".to_string(),
        });
    }
    let adam = match checkpoint.adam {
        Some(data) => Some(AdamState {
            m: fill_params(&checkpoint.config, &data.m, "optimizer m")?,
            v: fill_params(&checkpoint.config, &data.v, "optimizer v")?,
            t: data.t,
        }),
        None => None,
    };
    Ok((params, checkpoint.step, adam))
}
