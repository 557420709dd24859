use crate::scalar::Scalar;

/// Per-channel batch statistics saved by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<f64>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<f64>,
    pub inv_std: Vec<T>,
    pub xhat: Vec<T>,
}

/// Walks `[B, C, S]` data channel by channel.
fn for_channel<T: Copy>(x: &[T], batch: usize, channels: usize, spatial: usize, c: usize, mut f: impl FnMut(usize, T)) {
    for b in 0..batch {
        let start = (b * channels + c) * spatial;
        for (i, &v) in x[start..start + spatial].iter().enumerate() {
            f(start + i, v);
        }
    }
}

/// Train-mode normalization over batch and spatial axes.
pub fn batch_norm_train<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, BatchStats<T>) {
    let count = (batch * spatial) as f64;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = 0.0;
        for_channel(x, batch, channels, spatial, c, |_, v| s += v.as_f64());
        let m = s / count;
        let mut ss = 0.0;
        for_channel(x, batch, channels, spatial, c, |_, v| {
            let d = v.as_f64() - m;
            ss += d * d;
        });
        let v = ss / count;
        let is = 1.0 / (v + eps).sqrt();
        mean[c] = m;
        var[c] = v;
        inv_std[c] = T::lit(is);
        let (gc, bc) = (gamma[c].as_f64(), beta[c].as_f64());
        for_channel(x, batch, channels, spatial, c, |i, v| {
            let xh = (v.as_f64() - m) * is;
            xhat[i] = T::lit(xh);
            y[i] = T::lit(gc * xh + bc);
        });
    }
    (y, BatchStats { mean, var, inv_std, xhat })
}

/// Backward of [`batch_norm_train`]: returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    stats: &BatchStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = (batch * spatial) as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for_channel(dy, batch, channels, spatial, c, |i, g| {
            sum_dy += g.as_f64();
            sum_dy_xhat += g.as_f64() * stats.xhat[i].as_f64();
        });
        dgamma[c] = T::lit(sum_dy_xhat);
        dbeta[c] = T::lit(sum_dy);
        let k = gamma[c].as_f64() * stats.inv_std[c].as_f64() / count;
        for_channel(dy, batch, channels, spatial, c, |i, g| {
            let v = count * g.as_f64() - sum_dy - stats.xhat[i].as_f64() * sum_dy_xhat;
            dx[i] = T::lit(k * v);
        });
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode normalization with fixed statistics. Returns `(y, xhat)`.
pub fn batch_norm_eval<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for c in 0..channels {
        let is = 1.0 / (var[c].as_f64() + eps).sqrt();
        let m = mean[c].as_f64();
        let (gc, bc) = (gamma[c].as_f64(), beta[c].as_f64());
        for_channel(x, batch, channels, spatial, c, |i, v| {
            let xh = (v.as_f64() - m) * is;
            xhat[i] = T::lit(xh);
            y[i] = T::lit(gc * xh + bc);
        });
    }
    (y, xhat)
}
