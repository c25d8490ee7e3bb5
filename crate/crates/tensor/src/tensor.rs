//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// An owned, contiguous, row-major array of `f64` values.
///
/// Four-dimensional tensors follow the `[N, C, H, W]` convention throughout
/// the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor from raw data.
    ///
    /// Panics if `data.len()` does not equal the product of `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Samples i.i.d. zero-mean normal values with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Samples i.i.d. values uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Returns `(n, c, h, w)`; panics unless the tensor is 4-D.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, self.data)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Contiguous slab of one leading-axis entry, e.g. sample `n` of `[N, ...]`.
    pub fn slab(&self, index: usize) -> &[f64] {
        let inner = self.data.len() / self.shape[0];
        &self.data[index * inner..(index + 1) * inner]
    }

    /// Selects entries along the leading axis, in the given order.
    pub fn select_leading(&self, indices: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < self.shape[0], "index {} out of range {}", i, self.shape[0]);
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let inner = parts[0].shape.clone();
        let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
        for p in parts {
            assert_eq!(p.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Tensor { shape, data }
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_leading(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tail = &parts[0].shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "concat_leading shape mismatch");
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = lead;
        Tensor { shape, data }
    }

    /// Entries `start..start + len` of the leading axis.
    pub fn narrow_leading(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape[0], "narrow_leading out of range");
        let inner = self.data.len() / self.shape[0].max(1);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        }
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let (n, _, h, w) = parts[0].dims4();
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            assert!(
                pn == n && ph == h && pw == w,
                "concat_channels shape mismatch: {:?} vs {:?}",
                p.shape,
                parts[0].shape
            );
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for p in parts {
                let c = p.shape[1];
                data.extend_from_slice(&p.data[s * c * hw..(s + 1) * c * hw]);
            }
        }
        Tensor {
            shape: vec![n, total_c, h, w],
            data,
        }
    }

    /// Channels `start..start + len` of a 4-D tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(start + len <= c, "narrow_channels out of range");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = (s * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Tensor {
            shape: vec![n, len, h, w],
            data,
        }
    }

    /// Bilinear resize of a 4-D tensor with half-pixel centres
    /// (`align_corners = false`).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        if h == out_h && w == out_w {
            return self.clone();
        }
        let axis = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
            let scale = in_len as f64 / out_len as f64;
            (0..out_len)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(in_len - 1);
                    let i1 = (i0 + 1).min(in_len - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ys = axis(h, out_h);
        let xs = axis(w, out_w);
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
