//! Named parameter collections and their on-disk container.
//!
//! The binary container is little-endian and bit-exact:
//!
//! ```text
//! magic "MDPS" | u32 format | u64 header_len | header JSON
//! u64 count | { u64 name_len | name | u64 rows | u64 cols | f64 * rows*cols }*
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::ValueMap;
use crate::error::{Error, Result};
use crate::knowledge_base::KbArchitecture;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MDPS";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Descriptor {
    Kb(KbArchitecture),
    /// Anything that is not a knowledge base, e.g. test surrogates.
    Custom(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub descriptor: Descriptor,
    pub version: u64,
    pub arrays: ValueMap,
}

impl ParamSet {
    pub fn new(descriptor: Descriptor, arrays: ValueMap) -> Self {
        ParamSet {
            descriptor,
            version: 0,
            arrays,
        }
    }

    /// Deep copy; `Tensor` owns its buffer so nothing is shared.
    pub fn snapshot(&self) -> ParamSet {
        self.clone()
    }

    pub fn kb_arch(&self) -> Result<&KbArchitecture> {
        match &self.descriptor {
            Descriptor::Kb(a) => Ok(a),
            Descriptor::Custom(name) => Err(Error::invalid(format!(
                "parameter set `{name}` is not a knowledge base"
            ))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    /// Largest absolute elementwise difference over shared arrays.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.arrays
            .iter()
            .filter_map(|(k, a)| other.arrays.get(k).map(|b| a.max_abs_diff(b)))
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Header<'a> {
            descriptor: &'a Descriptor,
            version: u64,
        }
        encode_container(
            &Header {
                descriptor: &self.descriptor,
                version: self.version,
            },
            &self.arrays,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            descriptor: Descriptor,
            version: u64,
        }
        let (header, arrays): (Header, ValueMap) = decode_container(bytes)?;
        Ok(ParamSet {
            descriptor: header.descriptor,
            version: header.version,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub(crate) fn encode_container<H: Serialize>(header: &H, arrays: &ValueMap) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(64 + header.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::invalid(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::invalid("length overflow"))
    }
}

pub(crate) fn decode_container<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, ValueMap)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("not a parameter container"));
    }
    let format = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if format != FORMAT {
        return Err(Error::invalid(format!(
            "unsupported container format {format}"
        )));
    }
    let hlen = r.len()?;
    let header: H = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.len()?;
    let mut arrays = ValueMap::new();
    for _ in 0..count {
        let nlen = r.len()?;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::invalid("array name is not UTF-8"))?;
        let rows = r.len()?;
        let cols = r.len()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::invalid("array size overflow"))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::invalid("array size overflow"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.insert(name, Tensor::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes after container"));
    }
    Ok((header, arrays))
}
