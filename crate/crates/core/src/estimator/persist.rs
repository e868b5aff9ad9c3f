use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, EstimatorError, ModelWeights, Provenance, Result, KERNEL};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvRecord {
    /// `[out][in][3][3]`
    weights: Vec<Vec<Vec<Vec<f64>>>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseRecord {
    /// `[out][in]`
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format_version: u32,
    architecture: ArchitectureSpec,
    architecture_hash: String,
    provenance: Provenance,
    conv: Vec<ConvRecord>,
    dense: Vec<DenseRecord>,
}

fn to_file(w: &ModelWeights) -> WeightsFile {
    let maps = w.architecture().feature_maps();
    let conv = (0..w.layout().conv.len())
        .map(|i| {
            let c_in = maps[i].0;
            let flat = w.conv_weights(i);
            let per_out = c_in * KERNEL * KERNEL;
            ConvRecord {
                weights: flat
                    .chunks(per_out)
                    .map(|o| o.chunks(KERNEL * KERNEL).map(|c| c.chunks(KERNEL).map(<[f64]>::to_vec).collect()).collect())
                    .collect(),
                bias: w.conv_bias(i).to_vec(),
            }
        })
        .collect();
    let dense = w
        .layout()
        .fc_dims
        .iter()
        .enumerate()
        .map(|(i, &(n_in, _))| DenseRecord {
            weights: w.fc_weights(i).chunks(n_in).map(<[f64]>::to_vec).collect(),
            bias: w.fc_bias(i).to_vec(),
        })
        .collect();
    WeightsFile {
        format_version: WEIGHTS_FORMAT_VERSION,
        architecture: w.architecture().clone(),
        architecture_hash: w.architecture_hash(),
        provenance: w.provenance.clone(),
        conv,
        dense,
    }
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(&to_file(weights)).expect("weights serialize");
    fs::write(path, json).map_err(|source| EstimatorError::Io { path: path.display().to_string(), source })
}

/// Reads a weight file, checking the format version and that the stored
/// hash matches the stored architecture.
pub fn read_weights(path: &Path) -> Result<ModelWeights> {
    let shown = path.display().to_string();
    let corrupt = |reason: String| EstimatorError::Corrupt { path: shown.clone(), reason };
    let bytes = fs::read(path).map_err(|source| EstimatorError::Io { path: shown.clone(), source })?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("missing format_version".into()))?;
    if version != u64::from(WEIGHTS_FORMAT_VERSION) {
        return Err(EstimatorError::Version { expected: WEIGHTS_FORMAT_VERSION, found: version });
    }
    let file: WeightsFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let actual = file.architecture.hash();
    if file.architecture_hash != actual {
        return Err(EstimatorError::HashMismatch { expected: actual, found: file.architecture_hash });
    }
    file.architecture.validate().map_err(|e| corrupt(e.to_string()))?;

    let maps = file.architecture.feature_maps();
    let mut params = Vec::new();
    if file.conv.len() != file.architecture.conv.len() || file.dense.len() != 3 {
        return Err(corrupt("layer count does not match the architecture".into()));
    }
    for (i, (rec, block)) in file.conv.iter().zip(&file.architecture.conv).enumerate() {
        let c_in = maps[i].0;
        let shape_ok = rec.weights.len() == block.out_channels
            && rec.weights.iter().all(|o| {
                o.len() == c_in && o.iter().all(|k| k.len() == KERNEL && k.iter().all(|r| r.len() == KERNEL))
            })
            && rec.bias.len() == block.out_channels;
        if !shape_ok {
            return Err(corrupt(format!("conv{i} tensor shape does not match the architecture")));
        }
        params.extend(rec.weights.iter().flatten().flatten().flatten());
        params.extend(&rec.bias);
    }
    let layout = super::Layout::new(&file.architecture);
    for (i, (rec, &(n_in, n_out))) in file.dense.iter().zip(&layout.fc_dims).enumerate() {
        if rec.weights.len() != n_out || rec.weights.iter().any(|r| r.len() != n_in) || rec.bias.len() != n_out {
            return Err(corrupt(format!("fc{i} tensor shape does not match the architecture")));
        }
        params.extend(rec.weights.iter().flatten());
        params.extend(&rec.bias);
    }
    ModelWeights::from_params(file.architecture, params, file.provenance).map_err(|e| corrupt(e.to_string()))
}

/// [`read_weights`] plus a check against the architecture the caller expects.
pub fn load_weights(path: &Path, expected: &ArchitectureSpec) -> Result<ModelWeights> {
    let w = read_weights(path)?;
    let want = expected.hash();
    if w.architecture_hash() != want {
        return Err(EstimatorError::HashMismatch { expected: want, found: w.architecture_hash() });
    }
    Ok(w)
}
