//! Named parameter sets, seeded initialization and the MWTS container.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layout::{Init, Layout, TensorSpec};
use crate::mten::{self, AnyTensor};
use crate::nn::RunningStats;
use crate::tensor::{Real, Tensor};

pub const MWTS_MAGIC: &[u8; 4] = b"MWTS";
pub const MWTS_VERSION: u8 = 1;
/// Container entry holding the JSON-encoded [`ModelConfig`] as bytes.
pub const CONFIG_ENTRY: &str = "__config__";

/// Learnable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<S: Real = f32> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<S>>,
    /// Running statistics; saved with the weights, never optimized.
    pub buffers: BTreeMap<String, Tensor<S>>,
}

fn fill<S: Real>(spec: &TensorSpec, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
    let n: usize = spec.shape.iter().product();
    let data: Vec<f64> = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal { fan_in, gain } => {
            let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::StateLog => {
            let d = *spec.shape.last().expect("rank ≥ 1");
            (0..n).map(|i| ((i % d + 1) as f64).ln()).collect()
        }
        Init::StepBias => (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(0.001f64.ln()..0.1f64.ln());
                // softplus⁻¹(s) = ln(eˢ − 1)
                u.exp().exp_m1().ln()
            })
            .collect(),
    };
    Tensor::from_vec(&spec.shape, data.into_iter().map(S::from_f64).collect())
}

impl<S: Real> ModelWeights<S> {
    /// Seeded initialization; tensors are drawn in name order so the result
    /// depends only on the configuration.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::of(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = BTreeMap::new();
        for spec in &layout.params {
            params.insert(spec.name.clone(), fill(spec, &mut rng)?);
        }
        let mut buffers = BTreeMap::new();
        for spec in &layout.buffers {
            buffers.insert(spec.name.clone(), fill(spec, &mut rng)?);
        }
        Ok(Self {
            config: cfg.clone(),
            params,
            buffers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<T: Real>(&self) -> ModelWeights<T> {
        ModelWeights {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> BTreeMap<String, Var<'t, S>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
            .collect()
    }

    /// Stores running statistics produced by a train-mode forward pass.
    pub fn apply_stats(&mut self, updates: BTreeMap<String, RunningStats<S>>) {
        for (layer, stats) in updates {
            self.buffers.insert(format!("{layer}.running_mean"), stats.mean);
            self.buffers.insert(format!("{layer}.running_var"), stats.var);
        }
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = Layout::of(cfg);
        check_set(&self.params, &layout.params)?;
        check_set(&self.buffers, &layout.buffers)
    }

    /// Writes the MWTS container: every parameter and buffer plus the
    /// configuration, sorted by name.
    pub fn save<W: Write>(&self, sink: &mut W) -> Result<()> {
        let mut blobs: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
        let json = serde_json::to_vec(&self.config)?;
        let mut cfg_blob = Vec::new();
        mten::write_u8(&[json.len()], &json, &mut cfg_blob)?;
        blobs.insert(CONFIG_ENTRY, cfg_blob);
        for (name, t) in self.params.iter().chain(&self.buffers) {
            let mut blob = Vec::new();
            mten::write(t, &mut blob)?;
            if blobs.insert(name, blob).is_some() {
                return Err(Error::Corrupt(format!("duplicate entry {name}")));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MWTS_MAGIC);
        out.push(MWTS_VERSION);
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, blob) in blobs {
            let len = u16::try_from(name.len()).map_err(|_| Error::Corrupt(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&blob);
        }
        sink.write_all(&out)?;
        Ok(())
    }

    /// Reads an MWTS container. With `expected` the embedded configuration
    /// must agree with it; without, the embedded one is used. Every tensor is
    /// validated against the configuration's layout.
    pub fn load<R: Read>(source: &mut R, expected: Option<&ModelConfig>) -> Result<Self> {
        let entries = read_container(source)?;
        let mut config: Option<ModelConfig> = None;
        let mut tensors = BTreeMap::new();
        for (name, t) in entries {
            if name == CONFIG_ENTRY {
                let AnyTensor::U8 { data, .. } = t else {
                    return Err(Error::Corrupt("configuration entry is not bytes".into()));
                };
                config = Some(serde_json::from_slice(&data)?);
            } else {
                tensors.insert(name, t.into_real::<S>()?);
            }
        }
        let config = match (config, expected) {
            (Some(found), Some(want)) if &found != want => {
                return Err(Error::Config(format!(
                    "container configuration {found:?} differs from {want:?}"
                )))
            }
            (Some(found), _) => found,
            (None, Some(want)) => want.clone(),
            (None, None) => return Err(Error::MissingParam(CONFIG_ENTRY.into())),
        };
        config.validate()?;
        let layout = Layout::of(&config);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for spec in &layout.params {
            if let Some(t) = tensors.remove(&spec.name) {
                params.insert(spec.name.clone(), t);
            }
        }
        for spec in &layout.buffers {
            if let Some(t) = tensors.remove(&spec.name) {
                buffers.insert(spec.name.clone(), t);
            }
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::UnknownParam(name.clone()));
        }
        let w = Self {
            config,
            params,
            buffers,
        };
        w.validate(&w.config)?;
        Ok(w)
    }
}

fn check_set<S: Real>(have: &BTreeMap<String, Tensor<S>>, specs: &[TensorSpec]) -> Result<()> {
    for spec in specs {
        let t = have
            .get(&spec.name)
            .ok_or_else(|| Error::MissingParam(spec.name.clone()))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::ParamShape {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    if have.len() != specs.len() {
        let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        if let Some(extra) = have.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::UnknownParam(extra.clone()));
        }
    }
    Ok(())
}

/// Raw MWTS entries in file order. Entries must be strictly sorted.
pub fn read_container<R: Read>(source: &mut R) -> Result<Vec<(String, AnyTensor)>> {
    let mut head = [0u8; 9];
    source.read_exact(&mut head).map_err(|_| Error::Truncated("MWTS header".into()))?;
    if &head[..4] != MWTS_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MWTS_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&head[..4]).into_owned(),
        });
    }
    if head[4] != MWTS_VERSION {
        return Err(Error::UnsupportedVersion(head[4]));
    }
    let count = u32::from_le_bytes(head[5..9].try_into().expect("4 bytes")) as usize;
    let mut entries: Vec<(String, AnyTensor)> = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut len = [0u8; 2];
        source.read_exact(&mut len).map_err(|_| Error::Truncated("MWTS entry name".into()))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        source.read_exact(&mut name).map_err(|_| Error::Truncated("MWTS entry name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Corrupt("entry name is not UTF-8".into()))?;
        if let Some((prev, _)) = entries.last() {
            if prev.as_str() >= name.as_str() {
                return Err(Error::Corrupt(format!("entries out of order at {name}")));
            }
        }
        let t = mten::read_any(source)?;
        entries.push((name, t));
    }
    Ok(entries)
}
