//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TDRM" | version u32 | config_hash u64
//! n_meta u32 | (key str, value str)*
//! n_sections u32 | (kind str, n_arrays u32, (name str, dtype u8, ndim u32, dims u64*, offset u64)*)*
//! data: raw arrays, offsets relative to the start of this block
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Each section carries a
//! kind tag ("tssm", "rssm", "agent", ...) and the arrays of one component,
//! optimizer moments included.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::agent::Agent;
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::optim::AdamW;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TDRM";
pub const FORMAT_VERSION: u32 = 1;
pub const AGENT_KIND: &str = "agent";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    U64 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F64(_) => DType::F64,
            Self::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub kind: String,
    pub arrays: Vec<Array>,
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::Incompatible(msg.into())
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Section {
    pub fn new(kind: impl Into<String>) -> Self {
        Self { kind: kind.into(), arrays: Vec::new() }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push(Array {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F64(t.data().to_vec()),
        });
    }

    pub fn put_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        self.arrays.push(Array { name: name.into(), shape: vec![values.len()], data: ArrayData::U64(values.to_vec()) });
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| incompatible(format!("section {} has no array {name}", self.kind)))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) => Ok(Tensor::new(a.shape.clone(), v.clone())),
            ArrayData::U64(_) => Err(incompatible(format!("array {name} is u64, expected f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Ok(v),
            ArrayData::F64(_) => Err(incompatible(format!("array {name} is f64, expected u64"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            v => Err(incompatible(format!("array {name} has {} values, expected 1", v.len()))),
        }
    }

    /// Every array of `params` under `prefix`.
    pub fn put_params(&mut self, prefix: &str, params: &ParamSet) {
        for id in params.ids() {
            self.put_tensor(format!("{prefix}{}", params.name(id)), params.get(id));
        }
    }

    /// Overwrite `params` from the arrays under `prefix`. Missing arrays,
    /// extra arrays or differing shapes refuse the whole load.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let stored = self.arrays.iter().filter(|a| a.name.starts_with(prefix) && !a.name[prefix.len()..].contains('/'));
        let expected: Vec<&str> = params.names().iter().map(|s| s.as_str()).collect();
        let extra: Vec<&str> = stored.map(|a| &a.name[prefix.len()..]).filter(|n| !expected.contains(n)).collect();
        if !extra.is_empty() {
            return Err(incompatible(format!("{} checkpoint has unknown parameters {extra:?}", self.kind)));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for id in params.ids() {
            let name = params.name(id);
            let t = self.tensor(&format!("{prefix}{name}"))?;
            if t.shape() != params.get(id).shape() {
                return Err(incompatible(format!(
                    "{} parameter {name} is stored as {:?} but the model expects {:?}",
                    self.kind,
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            loaded.push((name.to_string(), t));
        }
        for (name, t) in loaded {
            params.assign(&name, t)?;
        }
        Ok(())
    }

    pub fn put_optimizer(&mut self, prefix: &str, params: &ParamSet, opt: &AdamW) {
        let (step, m, v) = opt.state();
        self.put_u64(format!("{prefix}step"), &[step]);
        for id in params.ids() {
            let name = params.name(id);
            self.put_tensor(format!("{prefix}m/{name}"), &m[id.index()]);
            self.put_tensor(format!("{prefix}v/{name}"), &v[id.index()]);
        }
    }

    pub fn load_optimizer(&self, prefix: &str, params: &ParamSet, opt: &mut AdamW) -> Result<()> {
        let step = self.u64(&format!("{prefix}step"))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in params.ids() {
            let name = params.name(id);
            m.push(self.tensor(&format!("{prefix}m/{name}"))?);
            v.push(self.tensor(&format!("{prefix}v/{name}"))?);
        }
        opt.restore(step, m, v).map_err(|e| incompatible(format!("{} optimizer state: {e}", self.kind)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Digest of the configuration that produced the checkpoint.
    pub config_hash: u64,
    pub meta: Vec<(String, String)>,
    pub sections: Vec<Section>,
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| format_err(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    /// A count that must fit in what remains of a sane file.
    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > 1 << 24 {
            return Err(format_err(format!("implausible {what} count {n}")));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.count("string byte")?;
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(|e| format_err(format!("truncated checkpoint: {e}")))?;
        String::from_utf8(b).map_err(|_| format_err("string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(config_hash: u64) -> Self {
        Self { config_hash, meta: Vec::new(), sections: Vec::new() }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn section(&self, kind: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| incompatible(format!("checkpoint has no {kind} section")))
    }

    /// Refuse a checkpoint written under a different configuration.
    pub fn expect_config(&self, hash: u64) -> Result<()> {
        if self.config_hash != hash {
            return Err(incompatible(format!(
                "checkpoint was written for config {:016x}, current config is {hash:016x}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            put_str(w, k)?;
            put_str(w, v)?;
        }
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for s in &self.sections {
            put_str(w, &s.kind)?;
            w.write_all(&(s.arrays.len() as u32).to_le_bytes())?;
            for a in &s.arrays {
                if a.shape.iter().product::<usize>() != a.data.len() {
                    return Err(Error::Contract(format!("array {} shape does not match its data", a.name)));
                }
                put_str(w, &a.name)?;
                w.write_all(&[a.data.dtype() as u8])?;
                w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
                for &d in &a.shape {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                w.write_all(&offset.to_le_bytes())?;
                offset += 8 * a.data.len() as u64;
            }
        }
        for a in self.sections.iter().flat_map(|s| &s.arrays) {
            match &a.data {
                ArrayData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                ArrayData::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader { inner: r };
        if &r.bytes::<4>()? != MAGIC {
            return Err(format_err("not a checkpoint: bad magic bytes"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(incompatible(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let config_hash = r.u64()?;
        let n_meta = r.count("metadata")?;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        struct Entry {
            section: usize,
            name: String,
            dtype: u8,
            shape: Vec<usize>,
            offset: u64,
        }
        let n_sections = r.count("section")?;
        let mut sections = Vec::with_capacity(n_sections);
        let mut entries = Vec::new();
        for si in 0..n_sections {
            sections.push(Section::new(r.string()?));
            for _ in 0..r.count("array")? {
                let name = r.string()?;
                let dtype = r.u8()?;
                let ndim = r.count("dimension")?;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let offset = r.u64()?;
                entries.push(Entry { section: si, name, dtype, shape, offset });
            }
        }
        let mut pos = 0u64;
        for e in entries {
            if e.offset != pos {
                return Err(format_err(format!("array {} at offset {}, expected {pos}", e.name, e.offset)));
            }
            let n = e.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.filter(|&n| n <= 1 << 32).ok_or_else(|| format_err(format!("array {} is too large", e.name)))?;
            let data = match e.dtype {
                0 => ArrayData::F64((0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?),
                1 => ArrayData::U64((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
                d => return Err(format_err(format!("array {} has unknown dtype {d}", e.name))),
            };
            pos += 8 * n as u64;
            sections[e.section].arrays.push(Array { name: e.name, shape: e.shape, data });
        }
        let mut rest = [0u8; 1];
        if r.inner.read(&mut rest)? != 0 {
            return Err(format_err("trailing bytes after the last array"));
        }
        Ok(Self { config_hash, meta, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// World-model parameters and optimizer state, tagged with the model kind.
pub fn world_model_section(wm: &WorldModel, opt: Option<&AdamW>) -> Section {
    let mut s = Section::new(wm.kind().as_str());
    s.put_params("param/", wm.params());
    if let Some(opt) = opt {
        s.put_optimizer("adam/", wm.params(), opt);
    }
    s
}

pub fn restore_world_model(ckpt: &Checkpoint, wm: &mut WorldModel, opt: Option<&mut AdamW>) -> Result<()> {
    let s = ckpt.section(wm.kind().as_str())?;
    let mut params = wm.params().clone();
    s.load_params("param/", &mut params)?;
    if let Some(opt) = opt {
        s.load_optimizer("adam/", &params, opt)?;
    }
    wm.params_mut().copy_from(&params)
}

pub fn agent_section(agent: &Agent) -> Section {
    let mut s = Section::new(AGENT_KIND);
    s.put_params("actor/", &agent.actor_params);
    s.put_params("critic/", &agent.critic_params);
    s.put_params("slow_critic/", &agent.slow_critic_params);
    s.put_optimizer("actor_adam/", &agent.actor_params, &agent.actor_opt);
    s.put_optimizer("critic_adam/", &agent.critic_params, &agent.critic_opt);
    s.put_u64("counters", &[agent.updates, agent.epsilon_calls()]);
    s
}

pub fn restore_agent(ckpt: &Checkpoint, agent: &mut Agent) -> Result<()> {
    let s = ckpt.section(AGENT_KIND)?;
    let mut actor = agent.actor_params.clone();
    let mut critic = agent.critic_params.clone();
    let mut slow = agent.slow_critic_params.clone();
    s.load_params("actor/", &mut actor)?;
    s.load_params("critic/", &mut critic)?;
    s.load_params("slow_critic/", &mut slow)?;
    let mut actor_opt = agent.actor_opt.clone();
    let mut critic_opt = agent.critic_opt.clone();
    s.load_optimizer("actor_adam/", &actor, &mut actor_opt)?;
    s.load_optimizer("critic_adam/", &critic, &mut critic_opt)?;
    let counters = s.u64s("counters")?;
    let [updates, eps_calls] = counters else {
        return Err(incompatible("agent counters must hold 2 values"));
    };
    agent.actor_params.copy_from(&actor)?;
    agent.critic_params.copy_from(&critic)?;
    agent.slow_critic_params.copy_from(&slow)?;
    agent.actor_opt = actor_opt;
    agent.critic_opt = critic_opt;
    agent.updates = *updates;
    agent.set_epsilon_calls(*eps_calls);
    Ok(())
}
