//! JSON files holding simulated or real observations.
//!
//! ```json
//! {"version": 1, "model": "GRE",
//!  "x": {"shape": [M, ...], "data": [...]},
//!  "theta": {"mu": {"shape": [M, 2], "data": [...]}, ...}}
//! ```
//!
//! `theta` is optional. Every tensor shares the leading example axis.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::Descriptors;
use crate::tensor::{Tensor, TensorRecord};
use crate::train::Dataset;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    version: u32,
    model: String,
    x: TensorRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<BTreeMap<String, TensorRecord>>,
}

fn schema(path: &str, msg: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        msg: msg.into(),
    }
}

fn tensor(path: &str, r: TensorRecord) -> Result<Tensor> {
    if let Some(i) = r.data.iter().position(|v| !v.is_finite()) {
        return Err(schema(path, format!("value {i} is not finite")));
    }
    Tensor::try_from(r).map_err(|e| schema(path, e.to_string()))
}

/// A parsed dataset with the model name it was written for.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub model: String,
    pub data: Dataset,
}

pub fn parse_dataset(text: &str) -> Result<LabeledDataset> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: DatasetFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        msg: e.into_inner().to_string(),
    })?;
    if file.version != DATASET_VERSION {
        return Err(schema(
            "version",
            format!("unsupported version {} (expected {DATASET_VERSION})", file.version),
        ));
    }
    let x = tensor("x", file.x)?;
    if x.shape().is_empty() || x.shape()[0] == 0 {
        return Err(schema("x.shape", "needs a non-empty leading example axis"));
    }
    let m = x.shape()[0];
    let theta = file
        .theta
        .map(|t| {
            t.into_iter()
                .map(|(k, r)| {
                    let path = format!("theta.{k}");
                    let v = tensor(&path, r)?;
                    if v.shape().first() != Some(&m) {
                        return Err(schema(&path, format!("leading axis must be {m}")));
                    }
                    Ok((k, v))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .transpose()?;
    Ok(LabeledDataset {
        model: file.model,
        data: Dataset { x, theta },
    })
}

pub fn dataset_to_json(model: &str, data: &Dataset) -> Result<String> {
    let file = DatasetFile {
        version: DATASET_VERSION,
        model: model.to_string(),
        x: (&data.x).into(),
        theta: data
            .theta
            .as_ref()
            .map(|t| t.iter().map(|(k, v)| (k.clone(), v.into())).collect()),
    };
    serde_json::to_string(&file).map_err(|e| Error::config(e.to_string()))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn save_dataset(path: &Path, model: &str, data: &Dataset) -> Result<()> {
    Ok(std::fs::write(path, dataset_to_json(model, data)?)?)
}

/// Checks every tensor against the shapes a model implies.
pub fn check_shapes(data: &Dataset, desc: &Descriptors) -> Result<()> {
    let m = data.len();
    let expect = |rv: &str| {
        let mut s = vec![m];
        s.extend(desc.full_shape(rv));
        s
    };
    let want = expect(&desc.observed);
    if data.x.shape() != want {
        return Err(Error::config(format!(
            "observations have shape {:?}, the model expects {want:?}",
            data.x.shape()
        )));
    }
    if let Some(theta) = &data.theta {
        for rv in desc.latents() {
            let v = theta
                .get(rv)
                .ok_or_else(|| Error::config(format!("dataset parameters lack `{rv}`")))?;
            if v.shape() != expect(rv) {
                return Err(Error::config(format!(
                    "parameters `{rv}` have shape {:?}, the model expects {:?}",
                    v.shape(),
                    expect(rv)
                )));
            }
        }
        if let Some(extra) = theta.keys().find(|k| !desc.latents().any(|l| l == *k)) {
            return Err(Error::config(format!("dataset has unknown parameters `{extra}`")));
        }
    }
    Ok(())
}
