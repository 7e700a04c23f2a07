//! Element-wise activation, global pooling, the fully connected head and the loss.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`] given its *output*.
pub fn relu_backward<T: Element>(output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.expect_shape(output.shape(), "relu_backward upstream")?;
    let data = output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// Per-channel spatial mean, `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let area = T::from_f64_lossy(s.plane() as f64);
    let data = x.data().chunks(s.plane()).map(|p| p.iter().copied().sum::<T>() / area).collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("one value per plane")
}

pub fn global_avg_pool_backward<T: Element>(input_shape: Shape, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.expect_shape(Shape::new(input_shape.n, input_shape.c, 1, 1), "global_avg_pool_backward upstream")?;
    let area = T::from_f64_lossy(input_shape.plane() as f64);
    let mut dx = Vec::with_capacity(input_shape.numel());
    for &g in upstream.data() {
        dx.extend(std::iter::repeat_n(g / area, input_shape.plane()));
    }
    Tensor::from_vec(input_shape, dx)
}

/// Fully connected layer parameters: `weight` is `(out, in, 1, 1)`, `bias` is `(out, 1, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LinearParams<T> {
    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T: Element = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// `y = x W^T + b` with each sample of `x` flattened to a row.
pub fn fully_connected<T: Element>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (k, d) = (p.out_features(), p.in_features());
    if p.bias.len() != k {
        return Err(Error::dim("fully_connected bias", "n", k, p.bias.len()));
    }
    if s.sample_len() != d {
        return Err(Error::dim("fully_connected input features", "c", d, s.sample_len()));
    }
    let mut y = Vec::with_capacity(s.n * k);
    for _ in 0..s.n {
        y.extend_from_slice(p.bias.data());
    }
    T::gemm(s.n, d, k, T::one(), x.data(), false, p.weight.data(), true, T::one(), &mut y);
    Tensor::from_vec(Shape::new(s.n, k, 1, 1), y)
}

pub fn fully_connected_backward<T: Element>(x: &Tensor<T>, p: &LinearParams<T>, upstream: &Tensor<T>) -> Result<LinearGrads<T>> {
    let s = x.shape();
    let (k, d) = (p.out_features(), p.in_features());
    upstream.expect_shape(Shape::new(s.n, k, 1, 1), "fully_connected_backward upstream")?;
    let mut dx = vec![T::zero(); s.n * d];
    T::gemm(s.n, k, d, T::one(), upstream.data(), false, p.weight.data(), false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); k * d];
    T::gemm(k, s.n, d, T::one(), upstream.data(), true, x.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); k];
    for row in upstream.data().chunks(k) {
        for (a, &b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(s, dx)?,
        weight: Tensor::from_vec(p.weight.shape(), dw)?,
        bias: db,
    })
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let k = s.sample_len();
    if labels.len() != s.n {
        return Err(Error::dim("softmax_cross_entropy labels", "n", s.n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = T::one() / T::from_f64_lossy(s.n as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(s.numel());
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        loss += (z.ln() + max - row[label]) * inv_n;
        for (j, e) in exps.into_iter().enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((e / z - target) * inv_n);
        }
    }
    Ok((loss, Tensor::from_vec(s, grad)?))
}
