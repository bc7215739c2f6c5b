//! Batch normalization over `(n, c, h, w)` with explicit statistics access.
//!
//! The adaptation losses need two things ordinary batch-norm layers hide:
//! the batch statistics of the layer *input* (measurable even when the
//! layer normalizes by its running statistics) and a way to inject a
//! gradient on those measured statistics during backward.

use super::Param;
use ndarray::{Array1, Array4, Axis, Ix1};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
}

/// Gradient of a loss with respect to the measured batch mean and variance.
#[derive(Debug, Clone)]
pub struct StatGrad {
    pub d_mean: Array1<f32>,
    pub d_var: Array1<f32>,
}

#[derive(Debug)]
pub struct BnCache {
    /// Layer input; kept when the backward pass needs it (batch-stat
    /// normalization or stat-gradient injection).
    x: Option<Array4<f32>>,
    /// Measured batch statistics of the input, when requested.
    pub batch_mean: Option<Array1<f32>>,
    pub batch_var: Option<Array1<f32>>,
    /// Whether the forward normalized by batch statistics.
    train_norm: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Channel-wise mean and (biased) variance of `x` over `(n, h, w)`.
    pub fn batch_stats(x: &Array4<f32>) -> (Array1<f32>, Array1<f32>) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut mean = Array1::<f32>::zeros(c);
        let mut var = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let mut sum = 0f64;
            for b in 0..n {
                let plane = x.index_axis(Axis(0), b);
                let plane = plane.index_axis(Axis(0), ci);
                for &v in plane.iter() {
                    sum += v as f64;
                }
            }
            let mu = sum / m;
            let mut sq = 0f64;
            for b in 0..n {
                let plane = x.index_axis(Axis(0), b);
                let plane = plane.index_axis(Axis(0), ci);
                for &v in plane.iter() {
                    let d = v as f64 - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu as f32;
            var[ci] = (sq / m) as f32;
        }
        (mean, var)
    }

    pub fn forward(
        &self,
        x: &Array4<f32>,
        train_norm: bool,
        collect_stats: bool,
    ) -> (Array4<f32>, BnCache) {
        let need_stats = train_norm || collect_stats;
        let (batch_mean, batch_var) = if need_stats {
            let (m, v) = Self::batch_stats(x);
            (Some(m), Some(v))
        } else {
            (None, None)
        };

        let (mean, var) = if train_norm {
            (batch_mean.as_ref().unwrap(), batch_var.as_ref().unwrap())
        } else {
            (&self.running_mean, &self.running_var)
        };
        let y = self.affine(x, mean, var);

        let cache = BnCache {
            x: (train_norm || collect_stats).then(|| x.clone()),
            batch_mean,
            batch_var,
            train_norm,
        };
        (y, cache)
    }

    /// Inference path: running statistics, no cache.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        self.affine(x, &self.running_mean, &self.running_var)
    }

    /// Fold the momentum update of the running statistics. Split from
    /// `forward` so callers decide when a measurement becomes an update.
    pub fn update_running(&mut self, batch_mean: &Array1<f32>, batch_var: &Array1<f32>) {
        let m = BN_MOMENTUM;
        self.running_mean
            .zip_mut_with(batch_mean, |r, &b| *r = (1.0 - m) * *r + m * b);
        self.running_var
            .zip_mut_with(batch_var, |r, &b| *r = (1.0 - m) * *r + m * b);
    }

    fn affine(&self, x: &Array4<f32>, mean: &Array1<f32>, var: &Array1<f32>) -> Array4<f32> {
        let (_, c, _, _) = x.dim();
        let mut y = x.clone();
        for ci in 0..c {
            let scale = self.gamma.value[ci] / (var[ci] + BN_EPS).sqrt();
            let shift = self.beta.value[ci] - mean[ci] * scale;
            for mut plane in y.axis_iter_mut(Axis(0)) {
                let mut ch = plane.index_axis_mut(Axis(0), ci);
                ch.mapv_inplace(|v| v * scale + shift);
            }
        }
        y
    }

    /// Backward pass. `stat_grad`, when present, is the gradient of the
    /// loss with respect to the measured batch mean/variance of the input
    /// and is folded into the input gradient regardless of normalization
    /// mode. Parameter gradients accumulate only if `want_param_grads`.
    pub fn backward(
        &mut self,
        gy: &Array4<f32>,
        cache: &BnCache,
        stat_grad: Option<&StatGrad>,
        want_param_grads: bool,
    ) -> Array4<f32> {
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f32;
        let mut gx = Array4::<f32>::zeros((n, c, h, w));

        for ci in 0..c {
            let gamma = self.gamma.value[ci];
            let (mean, var) = if cache.train_norm {
                (
                    cache.batch_mean.as_ref().unwrap()[ci],
                    cache.batch_var.as_ref().unwrap()[ci],
                )
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let inv_std = 1.0 / (var + BN_EPS).sqrt();

            // Channel reductions.
            let mut sum_gy = 0f64;
            let mut sum_gy_xhat = 0f64;
            if cache.train_norm || want_param_grads {
                let x = cache.x.as_ref().expect("bn input cached");
                for b in 0..n {
                    let gyp = gy.index_axis(Axis(0), b);
                    let gyc = gyp.index_axis(Axis(0), ci);
                    let xp = x.index_axis(Axis(0), b);
                    let xc = xp.index_axis(Axis(0), ci);
                    for (&g, &xv) in gyc.iter().zip(xc.iter()) {
                        sum_gy += g as f64;
                        sum_gy_xhat += g as f64 * ((xv - mean) * inv_std) as f64;
                    }
                }
            }
            if want_param_grads {
                self.gamma.grad[ci] += sum_gy_xhat as f32;
                self.beta.grad[ci] += sum_gy as f32;
            }

            let (inj_mean, inj_var) = match stat_grad {
                Some(sg) => (sg.d_mean[ci], sg.d_var[ci]),
                None => (0.0, 0.0),
            };

            if cache.train_norm {
                let x = cache.x.as_ref().unwrap();
                let mean_gy = (sum_gy / m as f64) as f32;
                let mean_gy_xhat = (sum_gy_xhat / m as f64) as f32;
                for b in 0..n {
                    let gyp = gy.index_axis(Axis(0), b);
                    let gyc = gyp.index_axis(Axis(0), ci);
                    let xp = x.index_axis(Axis(0), b);
                    let xc = xp.index_axis(Axis(0), ci);
                    let mut gxp = gx.index_axis_mut(Axis(0), b);
                    let mut gxc = gxp.index_axis_mut(Axis(0), ci);
                    for ((g, &xv), o) in gyc.iter().zip(xc.iter()).zip(gxc.iter_mut()) {
                        let xhat = (xv - mean) * inv_std;
                        let mut v = gamma * inv_std * (g - mean_gy - xhat * mean_gy_xhat);
                        v += inj_mean / m + inj_var * 2.0 * (xv - mean) / m;
                        *o = v;
                    }
                }
            } else {
                let scale = gamma * inv_std;
                // Injection needs the measured batch mean of the input,
                // not the running mean used for normalization.
                let inj_mu = cache.batch_mean.as_ref().map(|bm| bm[ci]);
                for b in 0..n {
                    let gyp = gy.index_axis(Axis(0), b);
                    let gyc = gyp.index_axis(Axis(0), ci);
                    let mut gxp = gx.index_axis_mut(Axis(0), b);
                    let mut gxc = gxp.index_axis_mut(Axis(0), ci);
                    if inj_mean != 0.0 || inj_var != 0.0 {
                        let x = cache.x.as_ref().expect("bn input cached for injection");
                        let xp = x.index_axis(Axis(0), b);
                        let xc = xp.index_axis(Axis(0), ci);
                        let mu = inj_mu.expect("batch stats measured for injection");
                        for ((g, &xv), o) in gyc.iter().zip(xc.iter()).zip(gxc.iter_mut()) {
                            *o = g * scale + inj_mean / m + inj_var * 2.0 * (xv - mu) / m;
                        }
                    } else {
                        for (g, o) in gyc.iter().zip(gxc.iter_mut()) {
                            *o = g * scale;
                        }
                    }
                }
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn fresh_layer_has_identity_running_stats() {
        let bn = BatchNorm2d::new(3);
        assert!(bn.running_mean.iter().all(|&v| v == 0.0));
        assert!(bn.running_var.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_signal_has_zero_batch_variance() {
        let x = Array4::from_elem((4, 2, 3, 3), 0.7f32);
        let (mean, var) = BatchNorm2d::batch_stats(&x);
        assert!(mean.iter().all(|&v| (v - 0.7).abs() < 1e-7));
        assert!(var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_normalization_whitens_the_batch() {
        let x = Array::from_shape_fn((3, 2, 4, 4), |(a, b, c, d)| {
            (a as f32) * 0.5 + (b as f32) - 0.3 * (c as f32) + 0.1 * (d as f32)
        });
        let bn = BatchNorm2d::new(2);
        let (y, _) = bn.forward(&x, true, false);
        let (mean, var) = BatchNorm2d::batch_stats(&y);
        for &m in mean.iter() {
            assert!(m.abs() < 1e-5);
        }
        for &v in var.iter() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_normalization_is_an_affine_map() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        bn.gamma.value[0] = 3.0;
        bn.beta.value[0] = 1.0;
        let x = Array4::from_elem((1, 1, 1, 2), 4.0f32);
        let y = bn.forward_eval(&x);
        // 3 * (4 - 2) / sqrt(4 + eps) + 1
        assert!((y[(0, 0, 0, 0)] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let x = Array::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| {
            ((a * 7 + b * 3 + c * 5 + d) as f32 * 0.31).sin()
        });
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value[0] = 1.3;
        bn.gamma.value[1] = 0.7;
        bn.beta.value[0] = 0.2;

        let loss = |bn: &BatchNorm2d, x: &Array4<f32>| -> f64 {
            let (y, _) = bn.forward(x, true, false);
            y.iter().map(|&v| (v as f64).powi(2)).sum()
        };
        let (y, cache) = bn.forward(&x, true, false);
        let gy = y.mapv(|v| 2.0 * v);
        let gx = bn.backward(&gy, &cache, None, true);

        let h = 1e-3f32;
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h as f64);
            let an = gx[idx] as f64;
            assert!((fd - an).abs() <= 2e-3 * (1.0 + an.abs()), "{fd} vs {an}");
        }
        // Gamma gradient.
        let mut bp = bn.clone();
        bp.gamma.value[1] += h;
        let mut bm = bn.clone();
        bm.gamma.value[1] -= h;
        let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h as f64);
        assert!((fd - bn.gamma.grad[1] as f64).abs() <= 2e-3 * (1.0 + fd.abs()));
    }

    #[test]
    fn stat_injection_matches_finite_differences() {
        // Loss touches the measured stats only: L = sum(mean^2) + sum(var^2).
        let x = Array::from_shape_fn((2, 1, 3, 3), |(a, _, c, d)| {
            ((a * 5 + c * 2 + d) as f32 * 0.41).cos()
        });
        let mut bn = BatchNorm2d::new(1);
        let loss = |x: &Array4<f32>| -> f64 {
            let (m, v) = BatchNorm2d::batch_stats(x);
            (m[0] as f64).powi(2) + (v[0] as f64).powi(2)
        };
        // Forward in eval-normalization mode with stats collection, like a
        // frozen backend layer under the feature-statistics loss.
        let (_, cache) = bn.forward(&x, false, true);
        let sg = StatGrad {
            d_mean: Array1::from_elem(1, 2.0 * cache.batch_mean.as_ref().unwrap()[0]),
            d_var: Array1::from_elem(1, 2.0 * cache.batch_var.as_ref().unwrap()[0]),
        };
        let zero_gy = Array4::<f32>::zeros(x.raw_dim());
        let gx = bn.backward(&zero_gy, &cache, Some(&sg), false);

        let h = 1e-3f32;
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (1, 0, 2, 2), (0, 0, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = gx[idx] as f64;
            assert!((fd - an).abs() <= 1e-4 + 1e-3 * an.abs(), "{fd} vs {an}");
        }
    }
}
