//! Named parameter tensors and their safetensors representation.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use super::layers::Conv2d;
use super::BN_EPS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParameterTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterMap {
    tensors: BTreeMap<String, ParameterTensor>,
}

impl ParameterMap {
    pub fn insert(&mut self, name: impl Into<String>, t: ParameterTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&ParameterTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParameterTensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    fn require(&self, name: &str) -> Result<&ParameterTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    /// Build a convolution from `{name}.weight` (and `{name}.bias` if
    /// present), folding in the batch norm `{bn}.*` when given.
    pub(crate) fn conv(&self, name: &str, bn: Option<&str>, stride: usize, pad: usize) -> Result<Conv2d> {
        let w = self.require(&format!("{name}.weight"))?;
        let [out_c, in_c, kh, kw] = w.shape[..] else {
            return Err(Error::Config(format!("'{name}.weight' must be 4-D, got {:?}", w.shape)));
        };
        if kh != kw {
            return Err(Error::Config(format!("'{name}' has a non-square kernel {kh}x{kw}")));
        }
        let mut weight = w.data.clone();
        let mut bias = match self.get(&format!("{name}.bias")) {
            Some(b) if b.data.len() == out_c => b.data.clone(),
            Some(b) => {
                return Err(Error::Config(format!("'{name}.bias' has {} entries, expected {out_c}", b.data.len())))
            }
            None => vec![0.0; out_c],
        };
        if let Some(bn) = bn {
            let get = |field: &str| -> Result<&[f64]> {
                let t = self.require(&format!("{bn}.{field}"))?;
                if t.data.len() != out_c {
                    return Err(Error::Config(format!("'{bn}.{field}' has {} entries, expected {out_c}", t.data.len())));
                }
                Ok(&t.data)
            };
            let (gamma, beta, mean, var) = (get("weight")?, get("bias")?, get("running_mean")?, get("running_var")?);
            let per = in_c * kh * kw;
            for o in 0..out_c {
                let scale = gamma[o] / (var[o] + BN_EPS).sqrt();
                weight[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= scale);
                bias[o] = (bias[o] - mean[o]) * scale + beta[o];
            }
        }
        Ok(Conv2d {
            in_c,
            out_c,
            k: kh,
            stride,
            pad,
            weight,
            bias,
        })
    }

    /// SHA-256 over names, shapes and values; identifies a weight set.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn read_safetensors(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("weights file {} not found", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e))?;
        let mut map = ParameterMap::default();
        for (name, view) in st.tensors() {
            let raw = view.data();
            let data: Vec<f64> = match view.dtype() {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                // counters such as `num_batches_tracked` are not parameters
                Dtype::I64 | Dtype::I32 => continue,
                other => return Err(Error::format(path, format!("tensor '{name}' has unsupported dtype {other:?}"))),
            };
            map.insert(name, ParameterTensor::new(view.shape().to_vec(), data));
        }
        Ok(map)
    }

    /// Write all tensors as little-endian `f32`.
    pub fn write_safetensors(&self, path: &Path) -> Result<()> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let bytes = t.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
                (n.clone(), t.shape.clone(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::format(path, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes = safetensors::serialize(views, &None).map_err(|e| Error::format(path, e))?;
        crate::persist::write_atomic(path, &bytes)
    }

    /// Round every value through `f32`, matching what a file round-trip gives.
    pub fn quantized_f32(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }
}
