//! `MFNW` weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"MFNW"
//! version  u32 (= 1)
//! count    u32
//! count x { name_len u16, name utf-8, rank u8, dims u32 x rank, f32 x prod(dims) }
//! ```
//!
//! Metadata rides along as entries whose name starts with `@meta/`, holding
//! `key=value` in the name and an empty payload (rank 1, dim 0). Running
//! batch-norm statistics are stored like any other parameter.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{read_exact, read_u32, Shape, Tensor};

pub const MFNW_MAGIC: &[u8; 4] = b"MFNW";
pub const MFNW_VERSION: u32 = 1;
pub const META_PREFIX: &str = "@meta/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub meta: BTreeMap<String, String>,
}

fn write_name<W: Write>(out: &mut W, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Format(format!("entry name longer than 65535 bytes: {}...", &name[..32])))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    Ok(())
}

impl Checkpoint {
    /// Snapshot of every parameter of `net` plus its config.
    pub fn from_network(net: &Network) -> Self {
        let tensors = net
            .params()
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("format_version".to_string(), MFNW_VERSION.to_string());
        meta.insert("config_name".to_string(), net.config().name.clone());
        meta.insert("config".to_string(), net.config().to_text());
        Checkpoint { tensors, meta }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MFNW_MAGIC)?;
        out.write_all(&MFNW_VERSION.to_le_bytes())?;
        let count = u32::try_from(self.tensors.len() + self.meta.len())
            .map_err(|_| Error::Format("too many entries".into()))?;
        out.write_all(&count.to_le_bytes())?;
        for (k, v) in &self.meta {
            write_name(&mut out, &format!("{META_PREFIX}{k}={v}"))?;
            out.write_all(&[1u8])?;
            out.write_all(&0u32.to_le_bytes())?;
        }
        for (name, t) in &self.tensors {
            write_name(&mut out, name)?;
            out.write_all(&[4u8])?;
            for d in t.shape().dims() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "magic")?;
        if &magic != MFNW_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut input, "version")?;
        if version != MFNW_VERSION {
            return Err(Error::Version {
                expected: MFNW_VERSION,
                found: version,
            });
        }
        let count = read_u32(&mut input, "entry count")?;
        let mut ckpt = Checkpoint::default();
        for i in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut input, &mut len, &format!("entry {i} name length"))?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut input, &mut name, &format!("entry {i} name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format(format!("entry {i} name is not utf-8")))?;
            let mut rank = [0u8; 1];
            read_exact(&mut input, &mut rank, &format!("{name} rank"))?;
            let rank = rank[0] as usize;
            if rank > 4 {
                return Err(Error::Format(format!("{name}: rank {rank} exceeds 4")));
            }
            let mut dims = [1usize; 4];
            for d in dims[4 - rank..].iter_mut() {
                *d = read_u32(&mut input, &format!("{name} dims"))? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let mut raw = vec![0u8; shape.numel() * 4];
            read_exact(&mut input, &mut raw, &format!("{name} payload"))?;
            if let Some(kv) = name.strip_prefix(META_PREFIX) {
                let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
                ckpt.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if ckpt.tensors.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate entry {name}")));
            }
        }
        let mut extra = [0u8; 1];
        if input.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Number of stored floats, metadata excluded.
    pub fn float_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn config(&self) -> Result<NetworkConfig> {
        let text = self
            .meta
            .get("config")
            .ok_or_else(|| Error::Format("checkpoint carries no config".into()))?;
        NetworkConfig::from_text(text)
    }
}

impl Network {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_network(self).save(path)
    }

    /// Rebuilds the network from the embedded config, then loads weights.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
        let ckpt = Checkpoint::load(path)?;
        let mut net = Network::build(ckpt.config()?, 0)?;
        net.load_weights(&ckpt)?;
        Ok(net)
    }

    /// Copies every tensor of `ckpt` into this network. Nothing is written
    /// unless all names and shapes match.
    pub fn load_weights(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let store = self.params();
        let mut missing = Vec::new();
        let mut reshaped = Vec::new();
        for e in store.entries() {
            match ckpt.tensors.get(&e.name) {
                None => missing.push(e.name.clone()),
                Some(t) if t.shape() != e.tensor.shape() => {
                    reshaped.push(format!("{} ({} vs {})", e.name, t.shape(), e.tensor.shape()))
                }
                Some(_) => {}
            }
        }
        let extra: Vec<String> = ckpt
            .tensors
            .keys()
            .filter(|k| store.id(k).is_none())
            .cloned()
            .collect();
        if !(missing.is_empty() && extra.is_empty() && reshaped.is_empty()) {
            return Err(Error::CheckpointMismatch {
                missing,
                extra,
                reshaped,
            });
        }
        let store = self.params_mut();
        for (name, t) in &ckpt.tensors {
            *store.by_name_mut(name).expect("checked above") = t.clone();
        }
        Ok(())
    }
}
