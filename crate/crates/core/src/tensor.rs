//! Dense row-major `f64` tensors.
//!
//! The batch is always the leading dimension. Every layer kernel in
//! [`crate::layers`] consumes and produces [`Tensor`]s in this layout, and
//! the checkpoint format serializes them verbatim.

use std::io::{Read, Write};

use crate::codec::{self, OffsetReader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ELFT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::config(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without validating that the shape is positive.
    /// Only for internal kernels whose shapes are already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// A `1 x n` tensor holding one row.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Gathers the given batch items into a new tensor, in order.
    pub fn select(&self, items: &[usize]) -> Self {
        let n = self.item_len();
        let mut data = Vec::with_capacity(items.len() * n);
        for &b in items {
            data.extend_from_slice(self.item(b));
        }
        let mut shape = self.shape.clone();
        shape[0] = items.len();
        Self { shape, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Serializes with the `ELFT` layout: magic, version, rank, dims (u32 each),
    /// then the payload as little-endian f64 in row-major order.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.shape.len() + 8 * self.data.len());
        self.encode(&mut buf)?;
        out.write_all(&buf)?;
        Ok(())
    }

    pub(crate) fn encode(&self, buf: &mut Vec<u8>) -> Result<()> {
        buf.extend_from_slice(MAGIC);
        codec::put_u32(buf, VERSION);
        codec::put_u32(buf, codec::to_u32(self.shape.len(), "rank")?);
        for &d in &self.shape {
            codec::put_u32(buf, codec::to_u32(d, "dimension")?);
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut reader = OffsetReader::new(input);
        Self::decode(&mut reader)
    }

    pub(crate) fn decode<R: Read>(reader: &mut OffsetReader<R>) -> Result<Self> {
        reader.magic(MAGIC)?;
        reader.version(VERSION)?;
        let at = reader.offset();
        let rank = reader.u32("rank")? as usize;
        if rank == 0 {
            return Err(Error::format(at, "tensor rank must be at least 1"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = reader.offset();
            let d = reader.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero tensor dimension"));
            }
            shape.push(d);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(at, "tensor size overflows"))?;
        let data = reader.f64s(len, "tensor payload")?;
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"ELFT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[20..28].try_into().unwrap()), 1.5);
        assert_eq!(buf.len(), 36);
        assert_eq!(Tensor::read_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match Tensor::read_from(&buf[..]).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 16 + 21),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let err = Tensor::read_from(&b"NOPE\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }
}
