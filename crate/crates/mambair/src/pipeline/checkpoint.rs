//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!   magic "MIRC" | u32 version=1 | u32 param count
//!   per entry: u16 name length | name UTF-8 | u8 rank | u32 dims[rank]
//!              | f32 payload
//!   optimizer section: u32 count | entries in the same encoding
//!                      (names "adam.m.<param>" / "adam.v.<param>")
//!   u64 step counter | u32 config-echo length | config text UTF-8
//!
//! Values round-trip at f32 precision; save(load(save(x))) is
//! byte-identical.

use std::fs;
use std::path::Path;

use crate::blocks::ModelState;
use crate::error::{MirError, Result};
use crate::pipeline::adam::AdamState;

pub const MAGIC: &[u8; 4] = b"MIRC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub params: Vec<Entry>,
    pub optimizer: Vec<Entry>,
    pub step: u64,
    pub config_echo: String,
}

fn push_entry(out: &mut Vec<u8>, e: &Entry) {
    let name = e.name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.push(e.dims.len() as u8);
    for &d in &e.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &e.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MirError::Format("truncated checkpoint".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn entry(&mut self) -> Result<Entry> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| MirError::Format("checkpoint entry name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()?);
        }
        let count = dims.iter().product::<u32>() as usize;
        let raw = self.take(count * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Entry { name, dims, values })
    }
}

/// Rounds the live training state (parameters and Adam moments) to f32
/// precision in place. Saving always goes through this, which makes the
/// f32 checkpoint the canonical state: a resumed run and an
/// uninterrupted run pass through identical values at every checkpoint
/// boundary, so their trajectories match bit for bit.
pub fn quantize_state_to_f32(params: &ModelState, adam: Option<&mut AdamState>) {
    for (_, t) in params.iter() {
        for v in t.data_mut().iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    if let Some(adam) = adam {
        for buf in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            for v in buf.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in &self.params {
            push_entry(&mut out, e);
        }
        out.extend_from_slice(&(self.optimizer.len() as u32).to_le_bytes());
        for e in &self.optimizer {
            push_entry(&mut out, e);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let echo = self.config_echo.as_bytes();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(MirError::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MirError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(r.entry()?);
        }
        let n_opt = r.u32()? as usize;
        let mut optimizer = Vec::with_capacity(n_opt);
        for _ in 0..n_opt {
            optimizer.push(r.entry()?);
        }
        let step = r.u64()?;
        let echo_len = r.u32()? as usize;
        let config_echo = std::str::from_utf8(r.take(echo_len)?)
            .map_err(|_| MirError::Format("config echo is not UTF-8".into()))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(MirError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            step,
            config_echo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Snapshot of a parameter store and optional optimizer moments.
    pub fn capture(
        params: &ModelState,
        adam: Option<&AdamState>,
        step: u64,
        config_echo: &str,
    ) -> Checkpoint {
        let entry_of = |name: String, dims: Vec<u32>, data: &[f64]| Entry {
            name,
            dims,
            values: data.iter().map(|&v| v as f32).collect(),
        };
        let param_entries: Vec<Entry> = params
            .iter()
            .map(|(name, t)| {
                entry_of(
                    name.to_string(),
                    t.shape().iter().map(|&d| d as u32).collect(),
                    &t.data(),
                )
            })
            .collect();
        let mut optimizer = Vec::new();
        if let Some(adam) = adam {
            for (i, (name, t)) in params.iter().enumerate() {
                let dims: Vec<u32> = t.shape().iter().map(|&d| d as u32).collect();
                optimizer.push(entry_of(format!("adam.m.{name}"), dims.clone(), &adam.m[i]));
                optimizer.push(entry_of(format!("adam.v.{name}"), dims, &adam.v[i]));
            }
        }
        Checkpoint {
            params: param_entries,
            optimizer,
            step,
            config_echo: config_echo.to_string(),
        }
    }

    /// Copies parameter values into a model state; names and shapes must
    /// match exactly.
    pub fn restore_params(&self, params: &ModelState) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(MirError::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        for (entry, (name, tensor)) in self.params.iter().zip(params.iter()) {
            if entry.name != name {
                return Err(MirError::Format(format!(
                    "parameter order mismatch: checkpoint '{}' vs model '{name}'",
                    entry.name
                )));
            }
            let dims: Vec<u32> = tensor.shape().iter().map(|&d| d as u32).collect();
            if entry.dims != dims {
                return Err(MirError::Format(format!(
                    "shape mismatch for '{name}': {:?} vs {dims:?}",
                    entry.dims
                )));
            }
            let mut data = tensor.data_mut();
            for (dst, &src) in data.iter_mut().zip(&entry.values) {
                *dst = src as f64;
            }
        }
        Ok(())
    }

    /// Copies optimizer moments back; the section must have been captured
    /// from an identically shaped store.
    pub fn restore_optimizer(&self, params: &ModelState, adam: &mut AdamState) -> Result<()> {
        if self.optimizer.len() != 2 * params.len() {
            return Err(MirError::Format(format!(
                "optimizer section has {} entries, expected {}",
                self.optimizer.len(),
                2 * params.len()
            )));
        }
        for (i, (name, _)) in params.iter().enumerate() {
            let m_entry = &self.optimizer[2 * i];
            let v_entry = &self.optimizer[2 * i + 1];
            if m_entry.name != format!("adam.m.{name}") || v_entry.name != format!("adam.v.{name}")
            {
                return Err(MirError::Format(format!(
                    "optimizer entry order mismatch at '{name}'"
                )));
            }
            adam.m[i] = m_entry.values.iter().map(|&v| v as f64).collect();
            adam.v[i] = v_entry.values.iter().map(|&v| v as f64).collect();
        }
        adam.step = self.step;
        Ok(())
    }
}
