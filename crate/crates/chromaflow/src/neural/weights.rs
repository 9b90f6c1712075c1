use std::io::{Read, Write};
use std::path::Path;

use crate::neural::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CWF1";
const VERSION: u32 = 1;

/// An ordered set of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkWeights {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl NetworkWeights {
    pub fn new() -> Self {
        NetworkWeights::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidParameter(format!(
                "duplicate weight name {name}"
            )));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(&self.tensors)
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.zero_grad());
    }

    /// Architecture fingerprint: FNV-1a hash over the ordered names and
    /// shapes. Two weight sets from the same constructor always agree.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for (name, tensor) in self.entries() {
            feed(name.as_bytes());
            feed(&[0xff]);
            for &d in tensor.shape() {
                feed(&(d as u32).to_le_bytes());
            }
            feed(&[0xfe]);
        }
        format!("{hash:016x}")
    }
}

/// Writes weights in the `CWF1` binary format.
///
/// Layout: magic "CWF1", version u32 LE, entry count u32 LE, then per entry:
/// name length u16 LE + UTF-8 name, rank u8, dims u32 LE each, payload as
/// 32-bit LE IEEE-754. Round trips are bit-exact.
pub fn save_weights(weights: &NetworkWeights, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, tensor) in weights.entries() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::InvalidWeights(format!("name too long: {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Reads a `CWF1` weight file and verifies the architecture fingerprint.
pub fn load_weights(path: &Path, expected_fingerprint: &str) -> Result<NetworkWeights> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::InvalidWeights(format!(
                "{}: truncated at byte {}",
                path.display(),
                *cur
            )));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != MAGIC {
        return Err(Error::InvalidWeights(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::InvalidWeights(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    let mut weights = NetworkWeights::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::InvalidWeights(format!("{}: bad name", path.display())))?;
        let rank = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = take(&mut cur, numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.insert(&name, Tensor::new(shape, data)?)?;
    }
    if cur != bytes.len() {
        return Err(Error::InvalidWeights(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - cur
        )));
    }
    let fp = weights.fingerprint();
    if fp != expected_fingerprint {
        return Err(Error::InvalidWeights(format!(
            "{}: fingerprint {fp} does not match expected {expected_fingerprint}",
            path.display()
        )));
    }
    Ok(weights)
}
