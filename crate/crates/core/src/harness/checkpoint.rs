//! Model checkpoints: one NPY file per tensor plus `model.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LinearModel, ModelState, ParamLayout, ParamVector, PdnetLayer, PdnetParams};
use crate::npy::{read_npy, write_npy};
use crate::tensor::Tensor;

pub const LAYOUT_VERSION: u32 = 1;
const MANIFEST: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model_kind: String,
    /// PDNet depth K; 0 for the linear model.
    pub layers: usize,
    /// File name and shape of every stored tensor.
    pub tensors: Vec<(String, Vec<usize>)>,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
    pub layout_version: u32,
}

fn tensor_file(k: usize) -> String {
    format!("weights_{k:03}.npy")
}

pub fn save_checkpoint(dir: &Path, params: &ParamVector) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut tensors = Vec::new();
    let mut put = |name: String, t: &Tensor| -> Result<()> {
        write_npy(&dir.join(&name), t)?;
        tensors.push((name, t.shape().to_vec()));
        Ok(())
    };
    let manifest = match ModelState::from_params(params)? {
        ModelState::Linear(m) => {
            put("theta.npy".into(), &m.theta)?;
            CheckpointManifest {
                model_kind: "linear".into(),
                layers: 0,
                tensors,
                tau: None,
                gamma: None,
                layout_version: LAYOUT_VERSION,
            }
        }
        ModelState::Pdnet(p) => {
            for (k, l) in p.layers.iter().enumerate() {
                put(tensor_file(k), &l.weights)?;
            }
            // log-thresholds keep the round trip exact
            let logs: Vec<f64> = p.layers.iter().map(|l| l.log_lambda).collect();
            put("log_lambda.npy".into(), &Tensor::from_slice(&logs))?;
            CheckpointManifest {
                model_kind: "pdnet".into(),
                layers: p.depth(),
                tensors,
                tau: Some(p.tau),
                gamma: Some(p.gamma),
                layout_version: LAYOUT_VERSION,
            }
        }
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST), text).map_err(|source| Error::File {
        path: dir.join(MANIFEST),
        source,
    })?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamVector> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|source| Error::File { path, source })?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.layout_version != LAYOUT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint layout version {} is not supported (expected {LAYOUT_VERSION})",
            m.layout_version
        )));
    }
    let load = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = read_npy(&dir.join(name))?;
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "checkpoint tensor {name} has shape {:?}, manifest says {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    match m.model_kind.as_str() {
        "linear" => {
            let [(name, shape)] = &m.tensors[..] else {
                return Err(Error::Config("linear checkpoint must hold exactly theta".into()));
            };
            Ok(LinearModel::new(load(name, shape)?)?.to_params())
        }
        "pdnet" => {
            if m.tensors.len() != m.layers + 1 {
                return Err(Error::Config("pdnet checkpoint: tensor count does not match K".into()));
            }
            let (lname, lshape) = &m.tensors[m.layers];
            let logs = load(lname, lshape)?;
            if logs.len() != m.layers {
                return Err(Error::Config(
                    "pdnet checkpoint: one threshold per layer expected".into(),
                ));
            }
            let layers = m.tensors[..m.layers]
                .iter()
                .zip(logs.data())
                .map(|((name, shape), &log_lambda)| {
                    Ok(PdnetLayer {
                        weights: load(name, shape)?,
                        log_lambda,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (Some(tau), Some(gamma)) = (m.tau, m.gamma) else {
                return Err(Error::Config("pdnet checkpoint lacks tau/gamma".into()));
            };
            let p = PdnetParams { layers, tau, gamma };
            p.validate()?;
            Ok(p.to_params())
        }
        other => Err(Error::Config(format!("unknown model kind {other:?} in checkpoint"))),
    }
}

/// Errors unless `params` has the trainable shapes of `expected`.
pub fn ensure_layout(params: &ParamVector, expected: &ParamLayout) -> Result<()> {
    if params.layout().compatible(expected) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint model {:?} does not match the configured model {expected:?}",
            params.layout()
        )))
    }
}
