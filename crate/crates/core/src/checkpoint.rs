//! Named parameter sets and their on-disk checkpoint format.
//!
//! A checkpoint directory holds `manifest.json` plus one tensor dump per
//! parameter, named `<param name>.eft`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::fusion::Dims;
use crate::numcore::dump;
use crate::{GraphF64, TensorF64, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, TensorF64>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: TensorF64) {
        self.entries.insert(name.into(), t.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&TensorF64> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorF64> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorF64> {
        self.frozen.remove(name);
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorF64)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn freeze(&mut self, name: &str) {
        if self.entries.contains_key(name) {
            self.frozen.insert(name.to_string());
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<_> = self.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
        self.frozen.extend(names);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| !self.frozen.contains(*n))
    }

    /// Element count over parameters whose name satisfies `pred`.
    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| pred(n)).map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names and values of parameters selected by `pred`.
    pub fn checksum_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| pred(n)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Inserts every parameter into `g`; frozen ones enter as constants.
    pub fn bind(&self, g: &mut GraphF64) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if self.frozen.contains(name) {
                    g.constant(t.clone())
                } else {
                    g.param(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings(vars)
    }

    /// Inserts every parameter as an untracked constant, for inference.
    pub fn bind_constants(&self, g: &mut GraphF64) -> Bindings {
        Bindings(self.entries.iter().map(|(name, t)| (name.clone(), g.constant(t.clone()))).collect())
    }

    /// Gradient-descent update from the gradients recorded in `g`, with the
    /// global gradient norm clipped to `clip`. Returns the unclipped norm.
    pub fn sgd_step(&mut self, g: &GraphF64, vars: &Bindings, lr: f64, clip: f64) -> Result<f64> {
        let mut grads = Vec::new();
        let mut sq = 0.0;
        for name in self.trainable() {
            if let Some(grad) = g.grad(vars.get(name)?) {
                sq += grad.iter().map(|v| v * v).sum::<f64>();
                grads.push((name.to_string(), grad.to_vec()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm} (lr {lr})")));
        }
        let scale = if norm > clip { clip / norm } else { 1.0 };
        for (name, grad) in grads {
            let t = self.get_mut(&name)?;
            for (w, gv) in t.data_mut().iter_mut().zip(grad) {
                *w -= lr * scale * gv;
            }
        }
        Ok(norm)
    }
}

/// Graph nodes standing for the parameters of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings(BTreeMap<String, Var>);

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} is not bound")))
    }

    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.0.insert(name.into(), v);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub config_hash: String,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    pub encoders: Vec<EncoderSpec>,
    pub dims: Dims,
    /// Prediction source; set on stage-2 checkpoints.
    pub source: Option<String>,
    pub pred_bias: bool,
    pub params: ParamStore,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    stage: u8,
    config_hash: String,
    step: usize,
    metrics: BTreeMap<String, f64>,
    encoders: Vec<EncoderSpec>,
    dims: Dims,
    source: Option<String>,
    #[serde(default)]
    pred_bias: bool,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut params = Vec::new();
        for (name, t) in self.params.iter() {
            let file = format!("{name}.eft");
            dump::save(&dir.join(&file), t)?;
            params.push(ParamEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
                frozen: self.params.is_frozen(name),
            });
        }
        let manifest = Manifest {
            stage: self.stage,
            config_hash: self.config_hash.clone(),
            step: self.step,
            metrics: self.metrics.clone(),
            encoders: self.encoders.clone(),
            dims: self.dims,
            source: self.source.clone(),
            pred_bias: self.pred_bias,
            params,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut params = ParamStore::new();
        for p in &m.params {
            let t: TensorF64 = dump::load(&dir.join(&p.file))?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, manifest says {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
            params.insert(p.name.clone(), t);
            if p.frozen {
                params.freeze(&p.name);
            }
        }
        Ok(Self {
            stage: m.stage,
            config_hash: m.config_hash,
            step: m.step,
            metrics: m.metrics,
            encoders: m.encoders,
            dims: m.dims,
            source: m.source,
            pred_bias: m.pred_bias,
            params,
        })
    }
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable config");
    hex::encode(Sha256::digest(&json))
}
