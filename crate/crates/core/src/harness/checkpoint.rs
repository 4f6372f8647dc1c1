use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sf_nn::{Module, Tensor};

use crate::error::{Error, Result};
use crate::harness::config::DefenseConfig;
use crate::splitmodels::{build_backbone, build_siftfunnel_edge, split_at, BackboneConfig, SplitModel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const PARAMS_MAGIC: &[u8; 4] = b"SFP1";

/// Metrics recorded when the checkpoint was written.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub test_acc: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub backbone: BackboneConfig,
    pub split_point: String,
    pub seed: u64,
    pub defense: DefenseConfig,
    pub dataset: String,
    pub metrics: MetricSnapshot,
}

/// Writes the manifest and every parameter and buffer, keyed by layer path.
pub fn save_checkpoint(dir: &Path, model: &SplitModel, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    let mut entries = Vec::new();
    model.visit("", &mut |name, p| entries.push((name.to_string(), p.value.clone())));
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(dir.join(PARAMS_FILE))?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("parameter file is truncated".into()));
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_params(path: &Path) -> Result<HashMap<String, Tensor>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != PARAMS_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a parameter file", path.display())));
    }
    let count = c.u32()?;
    let mut out = HashMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| c.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

/// Rebuilds the architecture named by a manifest.
pub fn build_from_manifest(m: &Manifest) -> Result<SplitModel> {
    let base = split_at(build_backbone(&m.backbone)?, &m.split_point)?;
    match m.defense.spec() {
        Some(spec) => build_siftfunnel_edge(base, spec),
        None => Ok(base),
    }
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<(SplitModel, Manifest)> {
    let manifest = load_manifest(dir)?;
    let mut model = build_from_manifest(&manifest)?;
    let mut params = read_params(&dir.join(PARAMS_FILE))?;
    let mut problem = None;
    model.visit_mut("", &mut |name, p| match params.remove(name) {
        Some(t) if t.shape() == p.value.shape() => p.value = t,
        Some(t) => {
            problem.get_or_insert(format!("{name}: stored shape {:?}, expected {:?}", t.shape(), p.value.shape()));
        }
        None => {
            problem.get_or_insert(format!("{name} missing from checkpoint"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok((model, manifest))
}
