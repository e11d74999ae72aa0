//! Parameter storage with seeded initialization and safetensors checkpoints.
//!
//! candle's own `VarMap` draws initial values from the device RNG, which cannot
//! be seeded on CPU. Every model here is built through a [`ParamStore`] instead,
//! so two builds with the same seed hold bitwise-identical weights.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.len())
            .finish()
    }
}

struct SeededBackend {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

fn init_values(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..up)).collect()
    };
    match init {
        Init::Const(v) => vec![v; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = match fan {
                FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
            };
            let std = non_linearity.gain() / (fan.max(1) as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
                NormalOrUniform::Normal => normal(rng, 0.0, std),
            }
        }
    }
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            let t = var.as_tensor();
            if t.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", t.shape(), s);
            }
            return t.to_dtype(dtype);
        }
        let values = {
            let mut rng = self.rng.lock().unwrap();
            init_values(h, &s, &mut rng)
        };
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.varmap.data().lock().unwrap().get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("no tensor named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().unwrap().contains_key(name)
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        let backend = SeededBackend {
            varmap: self.varmap.clone(),
            rng: self.rng.clone(),
        };
        VarBuilder::from_backend(Box::new(backend), dtype, device.clone())
    }

    pub fn len(&self) -> usize {
        self.varmap.data().lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().unwrap().get(name).cloned()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and values, in name order.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.named_vars() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for x in flat {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrite every variable under `dst_prefix` with the value of the
    /// matching variable under `src_prefix` in `src`.
    pub fn copy_from(&self, src: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in self.named_vars() {
            let Some(rest) = name.strip_prefix(dst_prefix) else {
                continue;
            };
            let src_name = format!("{src_prefix}{rest}");
            let Some(src_var) = src.get(&src_name) else {
                return Err(Error::shape(format!("no source parameter {src_name}")));
            };
            var.set(src_var.as_tensor())?;
            copied += 1;
        }
        Ok(copied)
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().clone()))
            .collect()
    }

    /// Set every variable from `tensors[prefix + name]`; all must be present.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>, prefix: &str, path: &Path) -> Result<()> {
        for (name, var) in self.named_vars() {
            let key = format!("{prefix}{name}");
            let t = tensors.get(&key).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("missing tensor {key}"),
            })?;
            if t.shape() != var.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("tensor {key} has shape {:?}, expected {:?}", t.shape(), var.shape()),
                });
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Checkpoint header: a flat JSON object stored in the safetensors metadata,
/// one metadata entry per field with a JSON-encoded value.
pub type Header = BTreeMap<String, serde_json::Value>;

pub fn save_checkpoint(path: &Path, tensors: Vec<(String, Tensor)>, header: &Header) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let metadata: HashMap<String, String> = header
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect();
    let tensors: Vec<(String, Tensor)> = tensors
        .into_iter()
        .map(|(k, t)| Ok((k, t.contiguous()?)))
        .collect::<candle_core::Result<_>>()?;
    safetensors::serialize_to_file(tensors, Some(metadata), path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(Header, HashMap<String, Tensor>)> {
    let ck_err = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = std::fs::read(path).map_err(|e| ck_err(e.to_string()))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(e.to_string()))?;
    let mut header = Header::new();
    if let Some(m) = meta.metadata() {
        for (k, v) in m {
            let value = serde_json::from_str(v).map_err(|e| ck_err(format!("header field {k}: {e}")))?;
            header.insert(k.clone(), value);
        }
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok((header, tensors))
}

/// Read a required header field.
pub fn header_field<T: serde::de::DeserializeOwned>(header: &Header, key: &str, path: &Path) -> Result<T> {
    let v = header.get(key).ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("header lacks `{key}`"),
    })?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("header field {key}: {e}"),
    })
}
