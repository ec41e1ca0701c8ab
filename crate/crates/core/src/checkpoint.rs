//! Versioned JSON checkpoint: architecture descriptor, flat parameter
//! arrays per named group, batch-norm buffers, and the input transform.
//!
//! Floats are written with shortest round-trip formatting so save/load is
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::diffnet::Tensor;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};

pub const FORMAT: &str = "adaodm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroupArrays {
    pub group: String,
    pub arrays: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnBuffers {
    pub layer: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    /// Groups: `extractor_dense` (affine weights/biases),
    /// `extractor_bn_affine`, then `head_<d>`.
    pub groups: Vec<ParamGroupArrays>,
    pub buffers: Vec<BnBuffers>,
    pub input_transform: Option<Standardizer>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, input_transform: Option<Standardizer>) -> Self {
        let mut groups: Vec<ParamGroupArrays> = Vec::new();
        for key in model.param_keys() {
            let name = key.partition();
            let array = NamedArray {
                name: key.to_string(),
                shape: model.param_shape(key),
                data: model.param(key).to_vec(),
            };
            match groups.iter_mut().find(|g| g.group == name) {
                Some(g) => g.arrays.push(array),
                None => groups.push(ParamGroupArrays {
                    group: name,
                    arrays: vec![array],
                }),
            }
        }
        let buffers = model
            .extractor
            .layers
            .iter()
            .enumerate()
            .map(|(layer, l)| BnBuffers {
                layer,
                running_mean: l.bn.running_mean.clone(),
                running_var: l.bn.running_var.clone(),
                momentum: l.bn.momentum,
                eps: l.bn.eps,
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            architecture: model.arch.clone(),
            groups,
            buffers,
            input_transform,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = Model::new(self.architecture.clone(), 0)?;
        let arrays: Vec<&NamedArray> = self.groups.iter().flat_map(|g| g.arrays.iter()).collect();
        for key in model.param_keys() {
            let name = key.to_string();
            let a = arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Input(format!("checkpoint is missing `{name}`")))?;
            let shape = model.param_shape(key);
            if a.shape != shape || a.data.len() != model.param(key).len() {
                return Err(Error::Dimension {
                    op: "checkpoint",
                    left: shape,
                    right: a.shape.clone(),
                });
            }
            model.param_mut(key).copy_from_slice(&a.data);
        }
        if self.buffers.len() != model.extractor.layers.len() {
            return Err(Error::Input("checkpoint buffer count mismatch".into()));
        }
        for b in &self.buffers {
            let layer = model
                .extractor
                .layers
                .get_mut(b.layer)
                .ok_or_else(|| Error::Input(format!("buffer for unknown layer {}", b.layer)))?;
            let w = layer.bn.width();
            if b.running_mean.len() != w || b.running_var.len() != w {
                return Err(Error::Input(format!(
                    "buffer width mismatch at layer {}",
                    b.layer
                )));
            }
            layer.bn.running_mean.clone_from(&b.running_mean);
            layer.bn.running_var.clone_from(&b.running_var);
            layer.bn.momentum = b.momentum;
            layer.bn.eps = b.eps;
        }
        Ok(model)
    }
}

pub fn save(path: &Path, model: &Model, input_transform: Option<&Standardizer>) -> Result<()> {
    let ckpt = Checkpoint::from_model(model, input_transform.cloned());
    let text = serde_json::to_string(&ckpt).expect("checkpoint serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Option<Standardizer>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt.input_transform))
}

/// Flattened copy of every parameter, for quick equality checks.
pub fn flat_params(model: &Model) -> Vec<Tensor> {
    model
        .param_keys()
        .into_iter()
        .map(|k| Tensor::new(model.param_shape(k), model.param(k).to_vec()).expect("shape"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::BatchStats;
    use crate::model::build_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = build_model(2, &[16, 8], 4, 3, 3, 5).unwrap();
        m.update_running_stats(&[
            BatchStats {
                mean: (0..16).map(|i| 0.1 * i as f64 + 1e-17).collect(),
                var: vec![std::f64::consts::PI; 16],
                batch_size: 7,
            },
            BatchStats {
                mean: vec![1.0 / 3.0; 8],
                var: vec![2.0; 8],
                batch_size: 7,
            },
            BatchStats {
                mean: vec![-0.7; 4],
                var: vec![0.3; 4],
                batch_size: 7,
            },
        ]);
        let st = Standardizer {
            mean: vec![0.1, 0.2],
            std: vec![1.0 / 7.0, 3.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save(&p, &m, Some(&st)).unwrap();
        let (back, st2) = load(&p).unwrap();
        assert_eq!(st2.unwrap(), st);
        assert!(m.bitwise_diff_keys(&back).unwrap().is_empty());
        for (a, b) in m.extractor.layers.iter().zip(&back.extractor.layers) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.bn.running_mean), bits(&b.bn.running_mean));
            assert_eq!(bits(&a.bn.running_var), bits(&b.bn.running_var));
        }
        assert_eq!(back, m);
    }

    #[test]
    fn groups_are_named() {
        let m = build_model(2, &[4], 3, 2, 2, 0).unwrap();
        let c = Checkpoint::from_model(&m, None);
        let names: Vec<&str> = c.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(
            names,
            ["extractor_dense", "extractor_bn_affine", "head_0", "head_1"]
        );
    }

    #[test]
    fn corrupted_shape_is_rejected() {
        let m = build_model(2, &[4], 3, 2, 2, 0).unwrap();
        let mut c = Checkpoint::from_model(&m, None);
        c.groups[0].arrays[0].data.pop();
        assert!(c.to_model().is_err());
    }
}
