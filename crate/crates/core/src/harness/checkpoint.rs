//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `REPLCKPT`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then the payload of little-endian IEEE-754
//! values in manifest order. Offsets are relative to the payload start and
//! contiguous.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::builder::{build_network, Network, NetworkSpec};
use crate::deploy::{Array, DeployModel};
use crate::error::{ReplError, Result};
use crate::kernels::Scalar;
use crate::tensor::{ParamId, Tensor};
use crate::trainer::{OptimState, Optimizer};

pub const MAGIC: &[u8; 8] = b"REPLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Dynamic,
    Deploy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub flavor: Flavor,
    pub manifest: Vec<ManifestEntry>,
    pub payload_bytes: u64,
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimMeta {
    optimizer: Optimizer,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicMeta {
    spec: NetworkSpec,
    seed: u64,
    /// Completed epochs.
    epoch: usize,
    optimizer: Option<OptimMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeployMeta<T> {
    dtype: Dtype,
    #[serde(bound = "")]
    model: DeployModel<T>,
}

/// Training state restored from a dynamic checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub net: Network,
    pub optim: Option<OptimState>,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Dynamic(TrainingState),
    /// Inference-only; cannot be trained or re-exported.
    Deploy64(DeployModel<f64>),
    Deploy32(DeployModel<f32>),
}

/// Element types with a fixed little-endian encoding.
pub trait Element: Scalar {
    const DTYPE: Dtype;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().expect("8 bytes"))
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().expect("4 bytes"))
    }
}

struct Writer {
    manifest: Vec<ManifestEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer {
            manifest: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn push<T: Element>(&mut self, name: String, shape: &[usize], data: &[T]) {
        self.manifest.push(ManifestEntry {
            name,
            shape: shape.to_vec(),
            dtype: T::DTYPE,
            offset: self.payload.len() as u64,
        });
        for &v in data {
            v.put(&mut self.payload);
        }
    }

    fn finish(self, flavor: Flavor, meta: serde_json::Value) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            flavor,
            manifest: self.manifest,
            payload_bytes: self.payload.len() as u64,
            meta,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

fn corrupt(detail: impl Into<String>) -> ReplError {
    ReplError::Checkpoint(detail.into())
}

/// Parsed header plus the payload slice, after every structural check.
fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() - 16 < hlen {
        return Err(corrupt(format!("header of {hlen} bytes is truncated")));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[16 + hlen..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(corrupt(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut expect = 0u64;
    for m in &header.manifest {
        if m.offset != expect {
            return Err(corrupt(format!("tensor `{}` at offset {} breaks contiguity (expected {expect})", m.name, m.offset)));
        }
        expect += (m.shape.iter().product::<usize>() * m.dtype.size()) as u64;
    }
    if expect != header.payload_bytes {
        return Err(corrupt(format!("manifest covers {expect} bytes, payload has {}", header.payload_bytes)));
    }
    Ok((header, payload))
}

struct Reader<'a> {
    entries: std::slice::Iter<'a, ManifestEntry>,
    payload: &'a [u8],
}

impl<'a> Reader<'a> {
    fn next<T: Element>(&mut self, name: &str) -> Result<(&'a ManifestEntry, Vec<T>)> {
        let m = self.entries.next().ok_or_else(|| corrupt(format!("manifest ends before `{name}`")))?;
        if m.name != name {
            return Err(corrupt(format!("expected tensor `{name}`, found `{}`", m.name)));
        }
        if m.dtype != T::DTYPE {
            return Err(corrupt(format!("tensor `{name}` has dtype {:?}", m.dtype)));
        }
        let n: usize = m.shape.iter().product();
        let start = m.offset as usize;
        let bytes = &self.payload[start..start + n * T::DTYPE.size()];
        Ok((m, bytes.chunks(T::DTYPE.size()).map(T::get).collect()))
    }

    fn done(mut self) -> Result<()> {
        match self.entries.next() {
            Some(m) => Err(corrupt(format!("unexpected extra tensor `{}`", m.name))),
            None => Ok(()),
        }
    }
}

fn from_meta<T: DeserializeOwned>(meta: serde_json::Value) -> Result<T> {
    serde_json::from_value(meta).map_err(|e| corrupt(format!("bad metadata: {e}")))
}

pub fn encode_dynamic(net: &Network, optim: Option<&OptimState>, epoch: usize) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    for (id, e) in net.store.iter() {
        w.push(format!("param/{id}"), e.value.shape(), e.value.data());
    }
    if let Some(o) = optim {
        for (id, slots) in &o.slots {
            for (i, t) in slots.iter().enumerate() {
                w.push(format!("slot/{id}/{i}"), t.shape(), t.data());
            }
        }
    }
    let meta = DynamicMeta {
        spec: net.spec.clone(),
        seed: net.seed,
        epoch,
        optimizer: optim.map(|o| OptimMeta {
            optimizer: o.optimizer,
            step: o.step,
        }),
    };
    w.finish(Flavor::Dynamic, serde_json::to_value(meta)?)
}

pub fn encode_deploy<T: Element>(model: &DeployModel<T>) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    let mut m = model.clone();
    let mut i = 0;
    m.visit_arrays_mut(&mut |a: &mut Array<T>| {
        w.push(format!("deploy/{i}"), &a.shape, &a.data);
        i += 1;
    });
    let meta = DeployMeta { dtype: T::DTYPE, model: m };
    w.finish(Flavor::Deploy, serde_json::to_value(meta)?)
}

fn decode_deploy<T: Element>(meta: serde_json::Value, mut r: Reader) -> Result<DeployModel<T>> {
    let mut model: DeployMeta<T> = from_meta(meta)?;
    let mut i = 0;
    let mut err = None;
    model.model.visit_arrays_mut(&mut |a: &mut Array<T>| {
        if err.is_some() {
            return;
        }
        match r.next::<T>(&format!("deploy/{i}")) {
            Ok((m, data)) if m.shape == a.shape => a.data = data,
            Ok((m, _)) => err = Some(corrupt(format!("deploy/{i}: shape {:?} vs skeleton {:?}", m.shape, a.shape))),
            Err(e) => err = Some(e),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    r.done()?;
    Ok(model.model)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = split(bytes)?;
    let mut r = Reader {
        entries: header.manifest.iter(),
        payload,
    };
    match header.flavor {
        Flavor::Dynamic => {
            let meta: DynamicMeta = from_meta(header.meta.clone())?;
            let mut net = build_network(&meta.spec, meta.seed)?;
            let ids: Vec<ParamId> = net.store.iter().map(|(id, _)| id.clone()).collect();
            let mut values = BTreeMap::new();
            for id in ids {
                let (m, data) = r.next::<f64>(&format!("param/{id}"))?;
                values.insert(id, Tensor::new(m.shape.clone(), data)?);
            }
            net.load_values(values)?;
            let optim = match meta.optimizer {
                Some(om) => {
                    let mut o = OptimState::new(om.optimizer, &net.store)?;
                    o.step = om.step;
                    for (id, slots) in o.slots.iter_mut() {
                        for (i, t) in slots.iter_mut().enumerate() {
                            let (m, data) = r.next::<f64>(&format!("slot/{id}/{i}"))?;
                            if m.shape != t.shape() {
                                return Err(corrupt(format!("slot {id}/{i} has shape {:?}", m.shape)));
                            }
                            *t = Tensor::new(m.shape.clone(), data)?;
                        }
                    }
                    Some(o)
                }
                None => None,
            };
            r.done()?;
            Ok(Checkpoint::Dynamic(TrainingState {
                net,
                optim,
                epoch: meta.epoch,
            }))
        }
        Flavor::Deploy => {
            let dtype = header.meta.get("dtype").cloned().ok_or_else(|| corrupt("deploy metadata lacks a dtype"))?;
            match from_meta::<Dtype>(dtype)? {
                Dtype::F64 => Ok(Checkpoint::Deploy64(decode_deploy(header.meta, r)?)),
                Dtype::F32 => Ok(Checkpoint::Deploy32(decode_deploy(header.meta, r)?)),
            }
        }
    }
}

/// Writes `bytes` through a temporary sibling and a rename, so a crash never
/// leaves a partial checkpoint behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ReplError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| ReplError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| ReplError::io(path, e))
}

pub fn save_dynamic(path: &Path, net: &Network, optim: Option<&OptimState>, epoch: usize) -> Result<()> {
    write_atomic(path, &encode_dynamic(net, optim, epoch)?)
}

pub fn save_deploy<T: Element>(path: &Path, model: &DeployModel<T>) -> Result<()> {
    write_atomic(path, &encode_deploy(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| ReplError::io(path, e))?;
    decode(&bytes)
}
