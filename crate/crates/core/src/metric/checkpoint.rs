//! JSON checkpoint container with a content checksum.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{hex, MetricModel, NetConfig};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tensors {
    params: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Body {
    version: u32,
    config: NetConfig,
    tensors: Tensors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Container {
    #[serde(flatten)]
    body: Body,
    checksum: String,
}

fn body_checksum(body: &Body) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(body)?)))
}

pub fn checkpoint_json<S: Scalar>(model: &MetricModel<S>) -> Result<String> {
    let conv = |v: &[S]| v.iter().map(|x| x.f64()).collect::<Vec<f64>>();
    let body = Body {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        tensors: Tensors {
            params: conv(&model.params),
            running_mean: model.running_mean.iter().map(|v| conv(v)).collect(),
            running_var: model.running_var.iter().map(|v| conv(v)).collect(),
        },
    };
    let checksum = body_checksum(&body)?;
    Ok(serde_json::to_string(&Container { body, checksum })?)
}

pub fn model_from_json<S: Scalar>(text: &str) -> Result<MetricModel<S>> {
    let c: Container = serde_json::from_str(text)?;
    if c.body.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            c.body.version
        )));
    }
    if body_checksum(&c.body)? != c.checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let conv = |v: Vec<f64>| v.into_iter().map(S::of).collect::<Vec<S>>();
    let t = c.body.tensors;
    MetricModel::from_parts(
        c.body.config,
        conv(t.params),
        t.running_mean.into_iter().map(conv).collect(),
        t.running_var.into_iter().map(conv).collect(),
    )
}

pub fn save_checkpoint<S: Scalar>(model: &MetricModel<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<MetricModel<S>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}
