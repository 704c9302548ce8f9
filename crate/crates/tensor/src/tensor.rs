use std::fmt;
use std::io::{Read, Write};

use crate::{Error, Result};

/// Magic bytes at the start of every serialized tensor.
pub const PTNS_MAGIC: &[u8; 4] = b"PTNS";
/// Current version of the tensor wire format.
pub const PTNS_VERSION: u16 = 1;

/// Dense row-major tensor of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor holding `values`.
    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ElementCount {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise operands {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading extent, treated as the batch dimension by the batched kernels.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Copy of samples `start..start + count` along the leading axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let n = self.batch();
        if self.rank() == 0 || start + count > n {
            return Err(Error::Shape(format!(
                "batch slice {start}..{} of {:?}",
                start + count,
                self.shape
            )));
        }
        let per = self.data.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack operands {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenate along the leading axis.
    pub fn concat_batch(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.rank() == 0 || t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "concat operands {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }

    /// Serialize as `PTNS`, version, rank, u64 extents, then raw f64 values, all little-endian.
    pub fn write_ptns<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(PTNS_MAGIC)?;
        w.write_all(&PTNS_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u16).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_ptns_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_ptns(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_ptns<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PTNS_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != PTNS_VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor version {version}"
            )));
        }
        r.read_exact(&mut b2)?;
        let rank = u16::from_le_bytes(b2) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| {
                Error::Format("tensor extent does not fit in usize".into())
            })?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor element count overflows".into()))?;
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_must_match_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::ElementCount { .. })
        ));
    }

    #[test]
    fn ptns_layout_is_little_endian() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_ptns_bytes();
        assert_eq!(&bytes[..4], b"PTNS");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[1, 0]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[24..32], &(-2.5f64).to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn ptns_rejects_bad_magic_and_truncation() {
        let mut bytes = Tensor::ones(&[3]).to_ptns_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Tensor::read_ptns(&mut bytes.as_slice()).is_err());
        let mut bad = Tensor::ones(&[3]).to_ptns_bytes();
        bad[0] = b'X';
        assert!(matches!(
            Tensor::read_ptns(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn batch_helpers() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f64);
        let s = t.slice_batch(1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0]);
        let c = Tensor::concat_batch(&[s.clone(), t.slice_batch(0, 1).unwrap()]).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0, 4.0, 5.0, 0.0, 1.0]);
        let st = Tensor::stack(&[Tensor::vector(&[1.0]), Tensor::vector(&[2.0])]).unwrap();
        assert_eq!(st.shape(), &[2, 1]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ptns_roundtrip_is_bit_exact(
                shape in proptest::collection::vec(0usize..4, 0..4),
                seed in any::<u64>(),
            ) {
                let len: usize = shape.iter().product();
                let data: Vec<f64> = (0..len)
                    .map(|i| f64::from_bits(seed.rotate_left(i as u32) ^ (i as u64).wrapping_mul(0x9E37_79B9)))
                    .collect();
                let t = Tensor::new(shape, data).unwrap();
                let back = Tensor::read_ptns(&mut t.to_ptns_bytes().as_slice()).unwrap();
                prop_assert!(t.bit_eq(&back));
            }
        }
    }
}
