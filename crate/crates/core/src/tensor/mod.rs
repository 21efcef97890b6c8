//! Dense row-major `f64` tensors and the numerical kernels built on them.
//!
//! Rank-3 feature maps are laid out `(channels, height, width)`, so element
//! `(c, y, x)` lives at `data[(c * H + y) * W + x]`.

mod io;
mod ops;

/// Neumaier-compensated sum. Reductions feeding a scalar loss use it so
/// central differences at small `ε` are not swamped by accumulation error.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + carry
}

pub use io::{read_tensor, write_tensor, DType, TENSOR_MAGIC, TENSOR_VERSION};
pub use ops::{
    avg_pool2d, avg_pool2d_backward, batch_norm, conv2d, conv2d_backward, fully_connected, linear,
    max_pool2d, max_pool2d_with_argmax, resize_bilinear, resize_bilinear_backward, softmax_axis0,
    softmax_flat, BatchNormStats, Conv2dGrads, NormMode, BN_EPS, BN_MOMENTUM,
};

pub(crate) use ops::{batch_norm_forward, max_pool2d_backward};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: window {k} does not fit a {h}x{w} map")]
    WindowTooLarge {
        op: &'static str,
        k: usize,
        h: usize,
        w: usize,
    },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("extents must be positive")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("vector must be non-empty")
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect()).expect("extents must be positive")
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// `(C, H, W)` of a rank-3 feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(mismatch(
                "dims3",
                format!("expected rank 3, got {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(mismatch(
                "dims2",
                format!("expected rank 2, got {:?}", self.shape),
            )),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(mismatch(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        compensated_sum(self.data.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Sum over the leading axis: `[A, rest..] -> [rest..]`.
    pub fn sum_axis0(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(mismatch("sum_axis0", "needs rank >= 2"));
        }
        let inner = self.data.len() / self.shape[0];
        let mut out = vec![0.0; inner];
        for row in self.data.chunks_exact(inner) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::new(&self.shape[1..], out)
    }

    /// Mean over the two trailing spatial axes of a `C×H×W` map, giving `[C]`.
    pub fn spatial_mean(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let n = (h * w) as f64;
        Ok(Tensor::from_vec(
            self.data
                .chunks_exact(h * w)
                .map(|plane| compensated_sum(plane.iter().copied()) / n)
                .take(c)
                .collect(),
        ))
    }

    /// Concatenate tensors along axis 0. Trailing extents must agree.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(mismatch(
                    "concat",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(&shape, data)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("stack", "no inputs"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(mismatch(
                    "stack",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    /// Slice `index` out of the leading axis.
    pub fn index0(&self, index: usize) -> Result<Tensor> {
        if self.rank() < 2 || index >= self.shape[0] {
            return Err(mismatch(
                "index0",
                format!("index {index} out of range for {:?}", self.shape),
            ));
        }
        let inner = self.data.len() / self.shape[0];
        Tensor::new(
            &self.shape[1..],
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[], vec![1.0]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at3(1, 2, 3), ((3 + 2) * 4 + 3) as f64);
    }

    #[test]
    fn concat_and_stack() {
        let a = Tensor::ones(&[1, 2, 2]);
        let b = Tensor::zeros(&[2, 2, 2]);
        let c = Tensor::concat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c.sum(), 4.0);
        let s = Tensor::stack(&[&a, &a]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.index0(1).unwrap(), a);
        assert!(Tensor::concat(&[&a, &Tensor::ones(&[1, 3, 2])]).is_err());
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(20.0) - 1.0).abs() < 1e-8);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn sum_axis0_and_spatial_mean() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.sum_axis0().unwrap().data(), &[4.0, 6.0]);
        let m = Tensor::new(&[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(m.spatial_mean().unwrap().data(), &[2.0, 6.0]);
    }
}
