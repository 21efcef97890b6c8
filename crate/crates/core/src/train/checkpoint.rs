//! `"SAPC" | u32 version | u32 count | count × (u32 name length | name | tensor record)`.

use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered named tensors. Order is preserved so equal contents serialize to
/// identical bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no record {name:?}")))
    }

    pub fn push_text(&mut self, name: &str, text: &str) {
        let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
        let t = if bytes.is_empty() {
            Tensor::zeros(&[1])
        } else {
            Tensor::from_vec(bytes)
        };
        self.push(name, t);
        self.push(format!("{name}.len"), Tensor::scalar(text.len() as f64));
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let len = self.require(&format!("{name}.len"))?.data()[0] as usize;
        let bytes: Vec<u8> = self.require(name)?.data()[..len]
            .iter()
            .map(|&b| b as u8)
            .collect();
        String::from_utf8(bytes).map_err(|_| Error::Config(format!("record {name:?} is not UTF-8")))
    }

    /// Stores a `u64` exactly as two 32-bit halves.
    pub fn push_u64(&mut self, name: &str, v: u64) {
        self.push(
            name,
            Tensor::from_vec(vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]),
        );
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let d = self.require(name)?.data();
        if d.len() != 2 {
            return Err(Error::Config(format!("record {name:?} is not a u64")));
        }
        Ok(((d[0] as u64) << 32) | d[1] as u64)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t, DType::F64)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Self> {
        let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        let version = u32::from_le_bytes(b);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut b)?;
        let count = u32::from_le_bytes(b);
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            r.read_exact(&mut b)?;
            let mut name = vec![0u8; u32::from_le_bytes(b) as usize];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| bad("record name is not UTF-8".into()))?;
            records.push((name, read_tensor(r)?));
        }
        Ok(Self { records })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut Cursor::new(bytes)).map_err(|e| Error::data(path, e.to_string()))
    }
}
