//! Named, seeded parameters and the two layer types built on them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ModelError, Result};

const METADATA_KEY: &str = "tubeshift";

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn,
    Normal(f32),
    Zeros,
}

/// All trainable arrays of a model, keyed by module path (`sf.conv0.weight`).
///
/// Initialization draws from one ChaCha stream in creation order, so a seed
/// and a fixed architecture give bit-identical parameters.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::FanIn => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0f32, std).map_err(|e| ModelError::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Parameters whose path starts with `prefix`, in path order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Flattened copy of every parameter, for equality checks.
    pub fn snapshot(&self, prefix: &str) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_vec1::<f32>()?)))
            .collect()
    }

    /// Writes every parameter plus string metadata into one safetensors file.
    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        // A multi-key header map would be written in hash order; one key
        // holding sorted JSON keeps checkpoint bytes reproducible.
        let sorted: BTreeMap<String, String> = metadata.into_iter().collect();
        let header = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&sorted)?)]);
        safetensors::serialize_to_file(tensors, Some(header), path).map_err(|e| {
            ModelError::Checkpoint {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        })
    }

    /// Reads a checkpoint's metadata without touching the parameters.
    pub fn read_metadata(path: &Path) -> Result<HashMap<String, String>> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| {
            ModelError::Checkpoint {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        })?;
        let header = meta.metadata().clone().unwrap_or_default();
        match header.get(METADATA_KEY) {
            Some(json) => Ok(serde_json::from_str(json)?),
            None => Ok(header),
        }
    }

    /// Overwrites every parameter from `path`. Names and shapes must match
    /// exactly.
    pub fn load(&self, path: &Path) -> Result<()> {
        let err = |message: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &self.device)?;
        if tensors.len() != self.vars.len() {
            return Err(err(format!(
                "holds {} arrays, model has {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| err(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(err(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.create(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            init,
        )?;
        let bias_init = match init {
            Init::FanIn => Init::FanIn,
            _ => Init::Zeros,
        };
        let bias = store.create(&format!("{name}.bias"), &[out_channels], fan_in, bias_init)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, init: Init) -> Result<Self> {
        let weight = store.create(&format!("{name}.weight"), &[output, input], input, init)?;
        let bias_init = match init {
            Init::FanIn => Init::FanIn,
            _ => Init::Zeros,
        };
        let bias = store.create(&format!("{name}.bias"), &[output], input, bias_init)?;
        Ok(Self { weight, bias })
    }

    /// `[n, input] -> [n, output]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}
