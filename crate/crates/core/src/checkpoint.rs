//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SINVCKPT"
//! version      u32      container version
//! header_len   u64      length of the JSON header in bytes
//! header       JSON     component, config hash, step, dtype, metadata,
//!                       and a tensor table {name, shape, offset, nbytes}
//! data         bytes    tensors back to back, row-major, little-endian
//! checksum     32 bytes SHA-256 of everything above
//! ```
//!
//! The header is serialised from ordered maps, so saving the same content
//! twice gives identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::field_core::RenderConfig;
use crate::generator::{GeneratorConfig, GeneratorParams};
use crate::losses::{EmbedderConfig, IdentityEmbedder};
use crate::nn::ParamStore;
use crate::real::{Dtype, Real};

pub const MAGIC: &[u8; 8] = b"SINVCKPT";
pub const CONTAINER_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Generator,
    Encoder,
    EmbedderTrain,
    EmbedderEval,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Generator => "generator",
            Component::Encoder => "encoder",
            Component::EmbedderTrain => "embedder_train",
            Component::EmbedderEval => "embedder_eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    component: Component,
    config_hash: String,
    step: u64,
    dtype: Dtype,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus metadata, independent of the consuming component.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: Component,
    pub config_hash: String,
    pub step: u64,
    pub dtype: Dtype,
    pub meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<(String, Vec<usize>, Vec<u8>)>,
}

/// SHA-256 of the canonical JSON form of a configuration value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_value(value).expect("config serialises");
    hex::encode(Sha256::digest(json.to_string().as_bytes()))
}

/// SHA-256 of a byte string, hex encoded.
pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(component: Component, config_hash: String, step: u64, dtype: Dtype) -> Self {
        Checkpoint { component, config_hash, step, dtype, meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) {
        self.meta.insert(key.to_string(), serde_json::to_value(value).expect("metadata serialises"));
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("metadata {key}: {e}")))
    }

    /// Appends every tensor of `store`, prefixing names with `prefix`.
    pub fn insert_store<F: Real>(&mut self, prefix: &str, store: &ParamStore<F>) -> Result<()> {
        if F::DTYPE != self.dtype {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, store is {}",
                self.dtype.as_str(),
                F::DTYPE.as_str()
            )));
        }
        for (name, t) in store.iter() {
            let mut data = Vec::with_capacity(t.len() * self.dtype.size_bytes());
            for v in t.iter() {
                v.write_le(&mut data);
            }
            self.tensors.push((format!("{prefix}{name}"), t.shape().to_vec(), data));
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn store<F: Real>(&self, prefix: &str) -> Result<ParamStore<F>> {
        if F::DTYPE != self.dtype {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, requested {}",
                self.dtype.as_str(),
                F::DTYPE.as_str()
            )));
        }
        let size = self.dtype.size_bytes();
        let mut store = ParamStore::new();
        for (name, shape, data) in &self.tensors {
            let Some(short) = name.strip_prefix(prefix) else { continue };
            let values: Vec<F> = data.chunks_exact(size).map(F::read_le).collect();
            let t = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), values)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            store.add(short, t);
        }
        Ok(store)
    }

    pub fn expect_component(&self, component: Component) -> Result<()> {
        if self.component != component {
            return Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                component.as_str(),
                self.component.as_str()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry { name: name.clone(), shape: shape.clone(), offset, nbytes: data.len() as u64 };
                offset += data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            schema_version: SCHEMA_VERSION,
            component: self.component,
            config_hash: self.config_hash.clone(),
            step: self.step,
            dtype: self.dtype,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(json.len() + offset as usize + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &self.tensors {
            out.extend_from_slice(data);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Checkpoint(format!("corrupt checkpoint: {msg}"));
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(corrupt(format!("only {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch (truncated or modified file)".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize.checked_add(header_len).filter(|e| *e <= body.len()).ok_or_else(|| corrupt("header overruns file".into()))?;
        let header: Header =
            serde_json::from_slice(&body[20..data_start]).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("unsupported schema version {}", header.schema_version)));
        }
        let data = &body[data_start..];
        let size = header.dtype.size_bytes() as u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let expected = e.shape.iter().product::<usize>() as u64 * size;
            let end = e.offset.checked_add(e.nbytes).filter(|end| *end <= data.len() as u64);
            match end {
                Some(end) if e.nbytes == expected => {
                    tensors.push((e.name.clone(), e.shape.clone(), data[e.offset as usize..end as usize].to_vec()));
                }
                _ => return Err(corrupt(format!("tensor {} has inconsistent size or offset", e.name))),
            }
        }
        Ok(Checkpoint {
            component: header.component,
            config_hash: header.config_hash,
            step: header.step,
            dtype: header.dtype,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize)]
struct GeneratorIdentity<'a> {
    config: &'a GeneratorConfig,
    pos_freqs: usize,
    dir_freqs: usize,
    seed: u64,
}

pub fn generator_checkpoint<F: Real>(g: &GeneratorParams<F>) -> Result<Checkpoint> {
    let (pos_freqs, dir_freqs) = g.frequency_counts();
    let ident = GeneratorIdentity { config: g.config(), pos_freqs, dir_freqs, seed: g.seed() };
    let mut ck = Checkpoint::new(Component::Generator, config_hash(&ident), 0, F::DTYPE);
    ck.set_meta("generator_config", g.config());
    ck.set_meta("freq_count_position", &pos_freqs);
    ck.set_meta("freq_count_direction", &dir_freqs);
    ck.set_meta("seed", &g.seed());
    ck.insert_store("", g.store())?;
    Ok(ck)
}

/// Rebuilds a frozen generator.
pub fn generator_from_checkpoint<F: Real>(ck: &Checkpoint) -> Result<GeneratorParams<F>> {
    ck.expect_component(Component::Generator)?;
    GeneratorParams::from_store(
        ck.meta("generator_config")?,
        ck.meta("freq_count_position")?,
        ck.meta("freq_count_direction")?,
        ck.meta("seed")?,
        ck.store("")?,
    )
}

pub const PARAM_PREFIX: &str = "param/";
pub const OPTIMIZER_PREFIX: &str = "optim/";

/// Encoder weights under [`PARAM_PREFIX`]; callers may add optimizer state.
pub fn encoder_checkpoint<F: Real>(e: &EncoderParams<F>, render: &RenderConfig, config_hash: String) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(Component::Encoder, config_hash, e.trained_steps(), F::DTYPE);
    ck.set_meta("encoder_config", e.config());
    ck.set_meta("latent_dim", &e.latent_dim());
    ck.set_meta("num_layers", &e.num_layers());
    ck.set_meta("render_config", render);
    ck.insert_store(PARAM_PREFIX, e.store())?;
    Ok(ck)
}

pub fn encoder_from_checkpoint<F: Real>(ck: &Checkpoint) -> Result<(EncoderParams<F>, RenderConfig)> {
    ck.expect_component(Component::Encoder)?;
    let render: RenderConfig = ck.meta("render_config")?;
    let config: EncoderConfig = ck.meta("encoder_config")?;
    let enc = EncoderParams::from_store(
        config,
        ck.meta("latent_dim")?,
        ck.meta("num_layers")?,
        &render,
        ck.store(PARAM_PREFIX)?,
        ck.step,
    )?;
    Ok((enc, render))
}

pub fn embedder_checkpoint<F: Real>(e: &IdentityEmbedder<F>, component: Component, seed: u64) -> Result<Checkpoint> {
    if !matches!(component, Component::EmbedderTrain | Component::EmbedderEval) {
        return Err(Error::Checkpoint(format!("{} is not an embedder component", component.as_str())));
    }
    let mut ck = Checkpoint::new(component, config_hash(&(e.config(), seed)), 0, F::DTYPE);
    ck.set_meta("embedder_config", e.config());
    ck.set_meta("seed", &seed);
    ck.insert_store("", e.store())?;
    Ok(ck)
}

pub fn embedder_from_checkpoint<F: Real>(ck: &Checkpoint, component: Component) -> Result<IdentityEmbedder<F>> {
    ck.expect_component(component)?;
    let config: EmbedderConfig = ck.meta("embedder_config")?;
    IdentityEmbedder::from_store(config, ck.store("")?)
}
