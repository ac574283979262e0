//! Batch-normalization kernels over NCHW buffers.

use crate::tensor::Scalar;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel mean and biased variance over the N, H, W axes.
pub fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let m = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            s = s + x[off..off + hw].iter().copied().sum();
        }
        let mu = s / m;
        let mut v = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            v = v + x[off..off + hw].iter().map(|&a| (a - mu) * (a - mu)).sum();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Normalizes with the given statistics and applies the affine transform.
/// Returns `(y, xhat)`.
#[allow(clippy::too_many_arguments)]
pub fn normalize<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                let h = (x[j] - mean[ch]) * inv_std[ch];
                xhat[j] = h;
                y[j] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

pub fn inv_std<T: Scalar>(var: &[T]) -> Vec<T> {
    let eps = T::of(BN_EPS);
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

/// `running = (1 - momentum) * running + momentum * batch`.
pub fn ema_update<T: Scalar>(running: &mut [T], batch: &[T]) {
    let mom = T::of(BN_MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (T::one() - mom) * *r + mom * b;
    }
}

/// Returns `(dgamma, dbeta)` summed over N, H, W.
pub fn affine_grads<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                dgamma[ch] = dgamma[ch] + dy[j] * xhat[j];
                dbeta[ch] = dbeta[ch] + dy[j];
            }
        }
    }
    (dgamma, dbeta)
}

/// Input gradient when the statistics came from the batch itself.
#[allow(clippy::too_many_arguments)]
pub fn batch_input_grad<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    gamma: &[T],
    inv_std: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<T> {
    let m = T::of((n * hw) as f64);
    let (dgamma, dbeta) = affine_grads(dy, xhat, n, c, hw);
    let mut dx = vec![T::zero(); dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let k = gamma[ch] * inv_std[ch] / m;
            for j in off..off + hw {
                dx[j] = k * (m * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
            }
        }
    }
    dx
}
