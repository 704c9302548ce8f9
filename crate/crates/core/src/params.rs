//! Named tensor stores: trainable parameters, batch-norm buffers, and the
//! archive format that serializes them.

use crate::arch::ModelSpec;
use crate::{Error, Result};
use indexmap::IndexMap;
use pgan_noise::{seed_mix, RngKind, RngState};
use pgan_tensor::Tensor;
use std::io::{Read, Write};

/// Ordered map from parameter path to tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Model(format!("duplicate parameter path {path:?}")));
        }
        self.entries.insert(path, t);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> u64 {
        self.entries.values().map(|t| t.len() as u64).sum()
    }

    /// Zero tensors with the same paths and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Parameters for `spec`, weights drawn from `N(0, 2 / fan_in)` and biases zero.
    ///
    /// Parameter `i` draws from its own MT19937 stream seeded by
    /// `seed_mix(seed, INIT_DOMAIN, i)`, so adding a layer never shifts the
    /// values of the layers before it.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut store = Self::new();
        for (i, decl) in spec.params().into_iter().enumerate() {
            let t = if decl.fan_in == 0 {
                Tensor::zeros(&decl.shape)
            } else {
                let mut rng = RngState::seeded(RngKind::Mt19937, seed_mix(seed, INIT_DOMAIN, i as u32));
                let sd = (2.0 / decl.fan_in as f64).sqrt();
                let n = decl.shape.iter().product();
                let data = rng.normals(n).into_iter().map(|z| z * sd).collect();
                Tensor::new(decl.shape.clone(), data).expect("declared shape")
            };
            store.insert(decl.path, t).expect("spec paths are unique");
        }
        store
    }

    /// Check that paths and shapes match what `spec` declares.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let decls = spec.params();
        if decls.len() != self.len() {
            return Err(Error::Model(format!(
                "{} declares {} parameter tensors, store holds {}",
                spec.name,
                decls.len(),
                self.len()
            )));
        }
        for (d, (path, t)) in decls.iter().zip(self.iter()) {
            if d.path != path || d.shape != t.shape() {
                return Err(Error::Model(format!(
                    "expected {} {:?}, found {path} {:?}",
                    d.path,
                    d.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_archive(w, self.iter())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut s = Self::new();
        for (k, v) in read_archive(r)? {
            s.insert(k, v)?;
        }
        Ok(s)
    }
}

/// Seed domain for parameter initialization streams.
pub const INIT_DOMAIN: u32 = 0x1417;

/// Batch-norm running statistics, keyed `<norm path>.running_mean` / `.running_var`.
pub type Buffers = ParamStore;

/// Fresh buffers for `spec`: means zero, variances one.
pub fn init_buffers(spec: &ModelSpec) -> Buffers {
    let mut b = Buffers::new();
    for (path, c) in spec.norms() {
        b.insert(format!("{path}.running_mean"), Tensor::zeros(&[c]))
            .expect("unique norm paths");
        b.insert(format!("{path}.running_var"), Tensor::ones(&[c]))
            .expect("unique norm paths");
    }
    b
}

/// Archive layout: `u32` entry count, then per entry a `u32` name length,
/// UTF-8 name bytes and one PTNS tensor block. All integers little-endian.
pub fn write_archive<'a, W: Write>(
    w: &mut W,
    entries: impl Iterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let entries: Vec<_> = entries.collect();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_ptns(w)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let n = read_u32(r)?;
    let mut out = Vec::with_capacity(n.min(1 << 16) as usize);
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Checkpoint(format!("entry name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let t = Tensor::read_ptns(r)?;
        out.push((name, t));
    }
    Ok(out)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
