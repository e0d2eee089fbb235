//! Single-file parameter archive with an embedded JSON config record.
//!
//! Layout (little endian): magic `CSLUCKPT`, u32 version, u64 config length,
//! config JSON, u32 tensor count, then per tensor: u32 name length, name,
//! u32 rows, u32 cols, rows*cols f32 values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Mat, Parameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSLUCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub tensors: BTreeMap<String, Mat>,
}

impl Checkpoint {
    pub fn from_model(config: Value, model: &impl Parameters) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.w.clone()))
            .collect();
        Self { config, tensors }
    }

    /// Copies stored tensors into `model`; every parameter must be present
    /// with a matching shape.
    pub fn load_into(&self, model: &mut impl Parameters) -> Result<()> {
        for (name, p) in model.params_mut() {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != p.w.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` is {:?} in checkpoint but {:?} in model",
                    t.shape(),
                    p.w.shape()
                )));
            }
            p.w.data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.write_u64::<LittleEndian>(cfg.len() as u64).unwrap();
        out.extend_from_slice(&cfg);
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.rows as u32).unwrap();
            out.write_u32::<LittleEndian>(t.cols as u32).unwrap();
            for &v in &t.data {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != MAGIC {
            return Err("bad checkpoint magic".into());
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = r.read_u64::<LittleEndian>().map_err(|e| e.to_string())? as usize;
        if len > r.len() {
            return Err("truncated config record".into());
        }
        let config = serde_json::from_slice(&r[..len]).map_err(|e| e.to_string())?;
        r = &r[len..];
        let count = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
            if n > r.len() {
                return Err("truncated tensor name".into());
            }
            let name = String::from_utf8(r[..n].to_vec()).map_err(|e| e.to_string())?;
            r = &r[n..];
            let rows = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
            let mut data = vec![0f32; rows * cols];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|e| e.to_string())?;
            tensors.insert(name, Mat::from_vec(rows, cols, data));
        }
        Ok(Self { config, tensors })
    }
}
