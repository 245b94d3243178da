//! Checkpoint file layout:
//!
//! ```text
//! 8 bytes   magic "SSRVCKPT"
//! 8 bytes   header length L, unsigned little-endian
//! L bytes   UTF-8 JSON header (see `CheckpointHeader`)
//! ...       parameter tensors in header order, each as little-endian f64
//! ...       if `adam` is present: all first moments, then all second moments,
//!           same order and sizes as the parameters
//! ```
//!
//! The header lists every tensor's name and shape, so the payload can be
//! sliced without knowing the network code.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{NetworkSpec, SiameseModel};
use super::optim::AdamState;
use super::tape::ParamStore;
use super::tensor::Tensor;
use super::train::{EpochMetrics, TrainConfig};
use super::TensorError;

pub const MAGIC: &[u8; 8] = b"SSRVCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: NetworkSpec,
    /// Completed training epochs.
    pub epoch: usize,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
    /// Adam step counter when moments follow the parameters.
    pub adam_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SiameseModel,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    pub train_config: Option<TrainConfig>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: SiameseModel, seed: u64) -> Self {
        Checkpoint { model, epoch: 0, seed, metrics: Vec::new(), train_config: None, adam: None }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        let p = &self.model.params;
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            spec: self.model.spec.clone(),
            epoch: self.epoch,
            seed: self.seed,
            metrics: self.metrics.clone(),
            train_config: self.train_config.clone(),
            tensors: p.names.iter().zip(&p.tensors).map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
            adam_step: self.adam.as_ref().map(|a| a.step),
        };
        let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut put = |data: &[f64]| -> std::io::Result<()> {
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes)
        };
        for t in &p.tensors {
            put(&t.data)?;
        }
        if let Some(a) = &self.adam {
            for m in a.m.iter().chain(&a.v) {
                put(m)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let bad = |m: &str| TensorError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(bad("header length out of range"));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let h: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        if h.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", h.format_version)));
        }
        let mut take = |n: usize| -> Result<Vec<f64>, TensorError> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
        };
        let mut params = ParamStore::default();
        for e in &h.tensors {
            let n = e.shape.iter().product();
            params.push(e.name.clone(), Tensor { shape: e.shape.clone(), data: take(n)? });
        }
        let adam = match h.adam_step {
            Some(step) => {
                let sizes: Vec<usize> = params.tensors.iter().map(Tensor::len).collect();
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let model = SiameseModel::from_params(h.spec, params)?;
        Ok(Checkpoint { model, epoch: h.epoch, seed: h.seed, metrics: h.metrics, train_config: h.train_config, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut bytes = Vec::new();
        self.write(&mut bytes)?;
        crate::write_atomic(path, &bytes).map_err(|e| TensorError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let f = std::fs::File::open(path).map_err(|e| TensorError::Io { path: path.to_path_buf(), source: e })?;
        Checkpoint::read(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::model::LayerSpec;

    fn tiny() -> SiameseModel {
        let spec = NetworkSpec {
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            extractor: vec![LayerSpec::conv(2, 3, 1), LayerSpec::Relu, LayerSpec::MaxPool { window: 2 }],
            reduction: vec![LayerSpec::conv(1, 1, 1)],
            classifier: vec![LayerSpec::linear(5), LayerSpec::Relu, LayerSpec::linear(7)],
            input_norm: Some(crate::tensornet::InputNorm { mean: 0.5, std: 0.25 }),
            output_scale: None,
        };
        SiameseModel::new(spec, 9).unwrap()
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let model = tiny();
        let mut adam = AdamState::new(&model.params);
        adam.step = 3;
        adam.m[0][1] = 0.5;
        adam.v[2][0] = 1e-9;
        let ck = Checkpoint { model, epoch: 2, seed: 11, metrics: vec![], train_config: Some(TrainConfig::default()), adam: Some(adam) };
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::read(&bytes[..]).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::new(tiny(), 1);
        let mut bytes = Vec::new();
        ck.write(&mut bytes).unwrap();
        assert!(Checkpoint::read(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read(&extra[..]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::read(&bytes[..]).is_err());
    }
}
