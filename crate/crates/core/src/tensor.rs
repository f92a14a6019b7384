//! Dense row-major `f32` arrays and the `PFT1` binary tensor format.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic bytes opening every `PFT1` tensor.
pub const PFT_MAGIC: &[u8; 4] = b"PFT1";

/// An n-dimensional row-major array of finite `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "tensor",
                detail: format!("non-finite value {} at flat index {i}", data[i]),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
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

    /// Dimension `i`, or 1 past the rank.
    pub fn dim(&self, i: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(1)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f32 {
        pairwise_sum(&self.data)
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f32 {
        let sq: Vec<f32> = self.data.iter().map(|v| v * v).collect();
        pairwise_sum(&sq).sqrt()
    }

    pub fn write_pft<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(PFT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_pft_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + 4 * self.len());
        self.write_pft(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one tensor from `r`. Truncation, bad magic and non-finite
    /// payloads are format errors.
    pub fn read_pft<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != PFT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected PFT1")));
        }
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 30))
            .ok_or_else(|| Error::Format(format!("implausible shape {shape:?}")))?;
        let mut bytes = vec![0u8; n * 4];
        read_exact(&mut r, &mut bytes, "payload")?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated PFT1 stream while reading {what}"))
        } else {
            Error::Format(format!("reading {what}: {e}"))
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Pairwise (cascade) summation; rounding error grows as O(log n).
pub fn pairwise_sum(xs: &[f32]) -> f32 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        let mut acc = 0.0f32;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Pairwise sum of the entries selected by `mask`.
pub fn pairwise_masked_sum(xs: &[f32], mask: &[bool]) -> f32 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        let mut acc = 0.0f32;
        for (&x, &m) in xs.iter().zip(mask) {
            if m {
                acc += x;
            }
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_masked_sum(&xs[..mid], &mask[..mid])
            + pairwise_masked_sum(&xs[mid..], &mask[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn new_rejects_nan() {
        assert!(Tensor::new(vec![2], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn pft_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_pft_bytes();
        let mut expected = b"PFT1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_pft_is_format_error() {
        let t = Tensor::full(&[3, 4], 0.25);
        let bytes = t.to_pft_bytes();
        for cut in [0, 3, 7, 11, bytes.len() - 1] {
            let err = Tensor::read_pft(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = Tensor::scalar(1.0).to_pft_bytes();
        bytes[3] = b'2';
        assert!(matches!(Tensor::read_pft(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn pairwise_sum_matches_exact_small_integers() {
        let xs: Vec<f32> = (0..1000).map(|i| i as f32).collect();
        assert_eq!(pairwise_sum(&xs), 499500.0);
    }

    proptest! {
        #[test]
        fn pft_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::read_pft(&t.to_pft_bytes()[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
