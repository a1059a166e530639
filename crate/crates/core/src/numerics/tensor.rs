use std::fmt;

use crate::error::{dim_err, Result};
use crate::numerics::Real;

/// Dense row-major array of [`Real`] values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<Real>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[Real]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> Result<Real> {
        if self.data.len() != 1 {
            return Err(dim_err(format!(
                "item() needs a single value, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Real> {
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max))
    }

    /// Copy of the leading box `extents` (one extent per dimension).
    pub fn prefix_box(&self, extents: &[usize]) -> Result<Tensor> {
        if extents.len() != self.shape.len()
            || extents
                .iter()
                .zip(&self.shape)
                .any(|(&e, &s)| e == 0 || e > s)
        {
            return Err(dim_err(format!(
                "prefix box {extents:?} does not fit in {:?}",
                self.shape
            )));
        }
        let mut out = Vec::with_capacity(extents.iter().product());
        copy_box(&self.data, &self.shape, extents, &mut |chunk| {
            out.extend_from_slice(chunk)
        });
        Tensor::new(extents.to_vec(), out)
    }

    /// Flat indices of the leading box `extents`, in row-major order.
    pub fn prefix_box_indices(shape: &[usize], extents: &[usize]) -> Vec<usize> {
        let mut idx = Vec::new();
        visit_box(shape, extents, 0, 0, &mut |start, len| {
            idx.extend(start..start + len)
        });
        idx
    }
}

fn copy_box(data: &[Real], shape: &[usize], extents: &[usize], sink: &mut dyn FnMut(&[Real])) {
    visit_box(shape, extents, 0, 0, &mut |start, len| {
        sink(&data[start..start + len])
    });
}

fn visit_box(
    shape: &[usize],
    extents: &[usize],
    dim: usize,
    offset: usize,
    f: &mut dyn FnMut(usize, usize),
) {
    let stride: usize = shape[dim + 1..].iter().product();
    if dim + 1 == shape.len() {
        f(offset, extents[dim]);
        return;
    }
    for i in 0..extents[dim] {
        visit_box(shape, extents, dim + 1, offset + i * stride, f);
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn prefix_box_copies_leading_block() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.prefix_box(&[2, 2]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(
            Tensor::prefix_box_indices(&[2, 3], &[2, 2]),
            vec![0, 1, 3, 4]
        );
        assert!(t.prefix_box(&[3, 1]).is_err());
    }
}
