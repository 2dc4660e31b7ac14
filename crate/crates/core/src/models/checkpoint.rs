//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE version, `u64` LE header length, the
//! header as `key=value` lines in key order, then each section as
//! `u64` LE name length, name bytes, `u64` LE value count and the values as
//! `f64` LE.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Denoiser, Generator, ModelConfig};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDLABCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: u64 = 1 << 16;
const MAX_HEADER_LEN: u64 = 1 << 24;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    header: BTreeMap<String, String>,
    sections: Vec<(String, Vec<f64>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated checkpoint"))?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn header(&self) -> &BTreeMap<String, String> {
        &self.header
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if key.is_empty() || key.contains(['=', '\n']) || value.contains(['\n', '\r']) {
            return Err(bad(format!("header entry {key:?} is not representable")));
        }
        self.header.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| bad(format!("missing header key {key}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?
            .parse()
            .map_err(|_| bad(format!("header key {key} does not parse")))
    }

    pub fn push_section(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if self.sections.iter().any(|(n, _)| n == name) {
            return Err(bad(format!("duplicate section {name}")));
        }
        self.sections.push((name.to_string(), values));
        Ok(())
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| bad(format!("missing section {name}")))
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn set_model_config(&mut self, cfg: &ModelConfig) -> Result<()> {
        for (k, v) in cfg.to_kv() {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&self.header)
    }

    /// A checkpoint holding one denoiser under section `params`.
    pub fn from_denoiser(kind: &str, model: &Denoiser) -> Result<Self> {
        let mut ck = Self::new();
        ck.set("kind", kind)?;
        ck.set_model_config(model.config())?;
        ck.push_section("params", model.params().values().to_vec())?;
        Ok(ck)
    }

    pub fn to_denoiser(&self) -> Result<Denoiser> {
        let cfg = self.model_config()?;
        Denoiser::from_parts(cfg.clone(), self.store_for(&cfg, "params")?)
    }

    /// Parameters from `section` laid out for `cfg`.
    pub fn store_for(&self, cfg: &ModelConfig, section: &str) -> Result<ParamStore> {
        let layout = super::expected_layout(cfg)?;
        ParamStore::from_parts(layout, self.section(section)?.to_vec())
            .map_err(|e| bad(format!("section {section}: {e}")))
    }

    pub fn generator_from(&self, cfg: &ModelConfig, section: &str) -> Result<Generator> {
        Generator::from_parts(cfg.clone(), self.store_for(cfg, section)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, values) in &self.sections {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated checkpoint"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut vb = [0u8; 4];
        r.read_exact(&mut vb).map_err(|_| bad("truncated checkpoint"))?;
        let version = u32::from_le_bytes(vb);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u64(&mut r)?;
        if hlen > MAX_HEADER_LEN || hlen as usize > r.len() {
            return Err(bad("header length out of range"));
        }
        let (htext, mut r) = r.split_at(hlen as usize);
        let htext = std::str::from_utf8(htext).map_err(|_| bad("header is not UTF-8"))?;
        let mut ck = Self::new();
        for line in htext.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            ck.set(k, v)?;
        }
        while !r.is_empty() {
            let nlen = read_u64(&mut r)?;
            if nlen > MAX_NAME_LEN || nlen as usize > r.len() {
                return Err(bad("section name length out of range"));
            }
            let (name, rest) = r.split_at(nlen as usize);
            r = rest;
            let name = std::str::from_utf8(name)
                .map_err(|_| bad("section name is not UTF-8"))?
                .to_string();
            let count = read_u64(&mut r)?;
            if count.checked_mul(8).is_none_or(|n| n > r.len() as u64) {
                return Err(bad(format!("section {name} is truncated")));
            }
            let (body, rest) = r.split_at(count as usize * 8);
            r = rest;
            let values = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.push_section(&name, values)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionProcess;
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn model() -> Denoiser {
        let cfg = ModelConfig::for_process(&DiffusionProcess::masked(3), 4);
        Denoiser::new(cfg, &mut RngState::new(11)).unwrap()
    }

    #[test]
    fn denoiser_round_trip_is_bit_exact() {
        let m = model();
        let ck = Checkpoint::from_denoiser("teacher", &m).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let m2 = back.to_denoiser().unwrap();
        assert_eq!(m2.config(), m.config());
        let a: Vec<u64> = m.params().values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = m2.params().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = Checkpoint::from_denoiser("teacher", &model()).unwrap().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut ck = Checkpoint::from_denoiser("teacher", &model()).unwrap();
        ck.set("model.hidden_width", 7).unwrap();
        assert!(ck.to_denoiser().is_err());
    }

    #[test]
    fn header_values_cannot_break_lines() {
        let mut ck = Checkpoint::new();
        assert!(ck.set("a", "x\ny").is_err());
        assert!(ck.set("a=b", "x").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_sections_round_trip(
            bits in proptest::collection::vec(any::<u64>(), 0..64),
            key in "[a-z.]{1,12}",
            value in "[ -~]{0,20}",
        ) {
            let mut ck = Checkpoint::new();
            ck.set(&key, &value).unwrap();
            ck.push_section("s", bits.iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let got: Vec<u64> = back.section("s").unwrap().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
            prop_assert_eq!(back.get(&key), Some(value.as_str()));
        }
    }
}
