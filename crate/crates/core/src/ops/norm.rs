//! Per-channel batch normalization over (n, h, w).

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values saved by the forward pass for [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache<T: Element = f32> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T: Element = f32> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn channel_values<T: Element>(x: &Tensor<T>, c: usize) -> impl Iterator<Item = T> + '_ {
    let s = x.shape();
    let plane = s.plane();
    (0..s.n).flat_map(move |n| {
        let o = (n * s.c + c) * plane;
        x.data()[o..o + plane].iter().copied()
    })
}

/// Normalizes `x` per channel and applies `gamma * xhat + beta`.
///
/// Train mode uses biased batch statistics and folds them into the running
/// averages with momentum [`BN_MOMENTUM`] (variance stored unbiased). Eval mode
/// normalizes with the running averages and never modifies them.
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = x.shape();
    for (what, len) in [("gamma", gamma.len()), ("beta", beta.len()), ("running_mean", running_mean.len()), ("running_var", running_var.len())] {
        if len != s.c {
            return Err(Error::dim(format!("batch_norm {what}"), "c", s.c, len));
        }
    }
    let count = s.n * s.plane();
    let eps = T::from_f64_lossy(BN_EPS);
    let m = T::from_f64_lossy(count as f64);

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => (0..s.c)
            .map(|c| {
                let mu = channel_values(x, c).sum::<T>() / m;
                let var = channel_values(x, c).map(|v| (v - mu) * (v - mu)).sum::<T>() / m;
                (mu, var)
            })
            .unzip(),
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            for i in o..o + plane {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[c] * h + beta[c];
            }
        }
    }

    if mode == Mode::Train {
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        let unbias = if count > 1 { m / (m - T::one()) } else { T::one() };
        for c in 0..s.c {
            running_mean[c] = (T::one() - mom) * running_mean[c] + mom * mean[c];
            running_var[c] = (T::one() - mom) * running_var[c] + mom * var[c] * unbias;
        }
    }

    Ok((y, BnCache { xhat, inv_std, mode }))
}

pub fn batch_norm_backward<T: Element>(cache: &BnCache<T>, gamma: &[T], upstream: &Tensor<T>) -> Result<BnGrads<T>> {
    let s = cache.xhat.shape();
    upstream.expect_shape(s, "batch_norm_backward upstream")?;
    let plane = s.plane();
    let m = T::from_f64_lossy((s.n * plane) as f64);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            for i in o..o + plane {
                let g = upstream.data()[i];
                dgamma[c] += g * cache.xhat.data()[i];
                dbeta[c] += g;
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            let k = gamma[c] * cache.inv_std[c];
            for i in o..o + plane {
                let g = upstream.data()[i];
                dx.data_mut()[i] = match cache.mode {
                    Mode::Eval => k * g,
                    Mode::Train => k * (g - dbeta[c] / m - cache.xhat.data()[i] * dgamma[c] / m),
                };
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}
