use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Anything that exposes an ordered list of named tensors.
///
/// The visiting order is the canonical order used for serialization,
/// optimizer state and FedAvg.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.data().len());
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor2,
}

impl Parameters for Vec<NamedTensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        for p in self {
            f(&p.name, &p.value);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        for p in self {
            f(&p.name, &mut p.value);
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradSet {
    grads: BTreeMap<String, Tensor2>,
}

impl GradSet {
    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: &str, grad: Tensor2) {
        self.grads.insert(name.to_string(), grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: Tensor2) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(existing) => existing.add_scaled(&grad, 1.0),
            None => {
                self.grads.insert(name.to_string(), grad);
                Ok(())
            }
        }
    }
}

const MAGIC: &[u8; 4] = b"FHF1";
const VERSION: u16 = 1;

/// Serializes parameters as `FHF1`, version (u16), then per parameter:
/// name length (u16), UTF-8 name, rows and cols (u32), row-major f64 values.
/// All integers and floats are little-endian.
pub fn encode_params<P: Parameters + ?Sized>(params: &P) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    params.visit(&mut |name, t| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Codec(format!(
                "truncated at offset {}: need {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Codec("bad magic, expected FHF1".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Codec(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u16()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Codec(format!("parameter name at offset {} is not UTF-8", r.pos - len)))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::Codec(format!("parameter `{name}` is too large")))?;
        let raw = r.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            name,
            value: Tensor2::new(rows, cols, data)?,
        });
    }
    Ok(out)
}

/// Decodes `bytes` into an existing parameter container; names, order and
/// shapes must match exactly.
pub fn load_params<P: Parameters + ?Sized>(target: &mut P, bytes: &[u8]) -> Result<()> {
    let decoded = decode_params(bytes)?;
    let mut iter = decoded.into_iter();
    let mut err = None;
    target.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match iter.next() {
            Some(nt) if nt.name == name && nt.value.same_shape(t) => *t = nt.value,
            _ => err = Some(Error::ParamMismatch(name.to_string())),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = iter.next() {
        return Err(Error::ParamMismatch(extra.name));
    }
    Ok(())
}
