use crate::error::{shape_err, Result, TensorError};
use crate::rng::GaussianRng;

/// Dense row-major array of `f64` with shape metadata.
///
/// Invariants: every extent is at least 1 and `data.len()` equals the
/// product of the extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: vec![],
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Panics on an invalid shape; for shapes built from validated config.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn randn(shape: &[usize], rng: &mut GaussianRng) -> Self {
        let mut t = Self::zeros(shape);
        rng.fill_normal(&mut t.data);
        t
    }

    pub fn randn_scaled(shape: &[usize], std: f64, rng: &mut GaussianRng) -> Self {
        let mut t = Self::randn(shape, rng);
        t.data.iter_mut().for_each(|v| *v *= std);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err("zip_map", &self.shape, &other.shape);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", &self.shape, &other.shape);
        }
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element `[b, ...]` slab of the leading axis, as a new tensor with
    /// the leading extent set to 1.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Stack tensors of identical shape `[1, ...]` or `[...]` along a new or
    /// existing leading batch axis. Inputs with leading extent 1 are joined
    /// along that axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| TensorError::Contract("stack_batch of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return shape_err("stack_batch", &first.shape, &t.shape);
            }
            data.extend_from_slice(&t.data);
        }
        let shape: Vec<usize> = if first.shape[0] == 1 && first.rank() > 1 {
            let mut s = first.shape.clone();
            s[0] = items.len();
            s
        } else {
            std::iter::once(items.len()).chain(first.shape.iter().copied()).collect()
        };
        Tensor::new(&shape, data)
    }

    /// Join `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        if first.rank() != 4 {
            return shape_err("concat_channels", &first.shape, &[0, 0, 0, 0]);
        }
        let (b, h, w) = (first.shape[0], first.shape[2], first.shape[3]);
        for p in parts {
            if p.rank() != 4 || p.shape[0] != b || p.shape[2] != h || p.shape[3] != w {
                return shape_err("concat_channels", &first.shape, &p.shape);
            }
        }
        let total_c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total_c * hw);
        for bi in 0..b {
            for p in parts {
                let per = p.shape[1] * hw;
                data.extend_from_slice(&p.data[bi * per..(bi + 1) * per]);
            }
        }
        Tensor::new(&[b, total_c, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if self.rank() != 4 || sizes.iter().sum::<usize>() != self.shape[1] {
            return Err(TensorError::Contract(format!("cannot split {:?} into channel groups {:?}", self.shape, sizes)));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice_channels(start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() != 4 || len == 0 || start + len > self.shape[1] {
            return Err(TensorError::Contract(format!(
                "channel slice {start}..{} out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Tensor::new(&[b, len, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn concat_then_split_is_bit_exact(
            b in 1usize..3, c1 in 1usize..4, c2 in 1usize..4, h in 1usize..4, w in 1usize..4, seed in 0u64..1000
        ) {
            let mut rng = GaussianRng::new(seed);
            let x = Tensor::randn(&[b, c1, h, w], &mut rng);
            let y = Tensor::randn(&[b, c2, h, w], &mut rng);
            let joined = Tensor::concat_channels(&[&x, &y]).unwrap();
            let parts = joined.split_channels(&[c1, c2]).unwrap();
            prop_assert_eq!(&parts[0], &x);
            prop_assert_eq!(&parts[1], &y);
        }
    }
}
