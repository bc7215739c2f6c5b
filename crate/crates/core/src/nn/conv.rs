//! 2D convolution (stride 1, same padding) via im2col + GEMM.

use super::Param;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, Ix1, Ix4};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out_channels, in_channels, kh, kw)`
    pub weight: Param<Ix4>,
    pub bias: Param<Ix1>,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(weight: Array4<f32>, bias: Array1<f32>) -> Self {
        let k = weight.dim().2;
        assert_eq!(weight.dim().2, weight.dim().3, "square kernels only");
        assert_eq!(weight.dim().0, bias.len());
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(bias),
            pad: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim().1
    }

    fn kernel(&self) -> usize {
        self.weight.value.dim().2
    }

    /// Weight viewed as a `(oc, ic*k*k)` matrix.
    fn weight_mat(&self) -> Array2<f32> {
        let (oc, ic, kh, kw) = self.weight.value.dim();
        self.weight
            .value
            .view()
            .into_shape((oc, ic * kh * kw))
            .expect("weight is standard layout")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, ic, h, w) = x.dim();
        assert_eq!(ic, self.in_channels(), "input channel mismatch");
        let oc = self.out_channels();
        let wmat = self.weight_mat();
        let outs: Vec<Array3<f32>> = x
            .outer_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|xi| {
                let col = im2col(&xi, self.kernel(), self.pad);
                let mut y = wmat.dot(&col);
                for (c, mut row) in y.outer_iter_mut().enumerate() {
                    row += self.bias.value[c];
                }
                y.into_shape((oc, h, w)).unwrap()
            })
            .collect();
        assemble(outs, n, oc, h, w)
    }

    /// Gradient with respect to the input only (frozen layers).
    pub fn backward_input_only(&self, gy: &Array4<f32>) -> Array4<f32> {
        let (n, _oc, h, w) = gy.dim();
        let ic = self.in_channels();
        let wmat = self.weight_mat();
        let wt = wmat.t().to_owned();
        let gxs: Vec<Array3<f32>> = gy
            .outer_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|gyi| {
                let gy2 = gyi.into_shape((gyi.dim().0, h * w)).unwrap();
                let gcol = wt.dot(&gy2);
                col2im(&gcol, ic, h, w, self.kernel(), self.pad)
            })
            .collect();
        assemble(gxs, n, ic, h, w)
    }

    /// Full backward. Accumulates weight/bias gradients into the params
    /// when `want_param_grads` is set and returns the input gradient.
    pub fn backward(
        &mut self,
        x: &Array4<f32>,
        gy: &Array4<f32>,
        want_param_grads: bool,
    ) -> Array4<f32> {
        if !want_param_grads {
            return self.backward_input_only(gy);
        }
        let (n, ic, h, w) = x.dim();
        let oc = self.out_channels();
        let k = self.kernel();
        let wmat = self.weight_mat();
        let wt = wmat.t().to_owned();
        let per_item: Vec<(Array3<f32>, Array2<f32>, Array1<f32>)> = x
            .outer_iter()
            .zip(gy.outer_iter())
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(xi, gyi)| {
                let col = im2col(&xi, k, self.pad);
                let gy2 = gyi.into_shape((oc, h * w)).unwrap().to_owned();
                let gw = gy2.dot(&col.t());
                let gb = gy2.sum_axis(Axis(1));
                let gcol = wt.dot(&gy2);
                let gx = col2im(&gcol, ic, h, w, k, self.pad);
                (gx, gw, gb)
            })
            .collect();

        let mut gx = Array4::zeros((n, ic, h, w));
        let mut gw_sum = Array2::<f32>::zeros((oc, ic * k * k));
        let mut gb_sum = Array1::<f32>::zeros(oc);
        for (i, (gxi, gw, gb)) in per_item.into_iter().enumerate() {
            gx.index_axis_mut(Axis(0), i).assign(&gxi);
            gw_sum += &gw;
            gb_sum += &gb;
        }
        let gw4 = gw_sum.into_shape((oc, ic, k, k)).unwrap();
        self.weight.grad += &gw4;
        self.bias.grad += &gb_sum;
        gx
    }
}

fn assemble(items: Vec<Array3<f32>>, n: usize, c: usize, h: usize, w: usize) -> Array4<f32> {
    let mut out = Array4::zeros((n, c, h, w));
    for (i, item) in items.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&item);
    }
    out
}

/// Unfold `(c, h, w)` into a `(c*k*k, h*w)` matrix with zero padding.
fn im2col(x: &ArrayView3<f32>, k: usize, pad: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("contiguous input");
    let mut col = Array2::<f32>::zeros((c * k * k, h * w));
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            for kx in 0..k {
                let dx = kx as isize - pad as isize;
                let row = ((ci * k + ky) * k + kx) * (h * w);
                let j0 = (-dx).max(0) as usize;
                let j1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if j0 >= j1 {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + si as usize * w;
                    let dst = row + i * w;
                    let s0 = (j0 as isize + dx) as usize;
                    let s1 = (j1 as isize + dx) as usize;
                    cs[dst + j0..dst + j1].copy_from_slice(&xs[src + s0..src + s1]);
                }
            }
        }
    }
    col
}

/// Fold a `(c*k*k, h*w)` column gradient back onto `(c, h, w)`.
fn col2im(gcol: &Array2<f32>, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<f32> {
    let gs = gcol.as_slice().expect("contiguous gcol");
    let mut gx = Array3::<f32>::zeros((c, h, w));
    let xs = gx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            for kx in 0..k {
                let dx = kx as isize - pad as isize;
                let row = ((ci * k + ky) * k + kx) * (h * w);
                let j0 = (-dx).max(0) as usize;
                let j1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if j0 >= j1 {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + si as usize * w;
                    let src = row + i * w;
                    let s0 = (j0 as isize + dx) as usize;
                    for j in j0..j1 {
                        xs[dst + s0 + (j - j0)] += gs[src + j];
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn toy_conv(oc: usize, ic: usize, k: usize) -> Conv2d {
        let n = oc * ic * k * k;
        let weight = Array::from_shape_fn((oc, ic, k, k), |(a, b, c, d)| {
            let i = ((a * ic + b) * k + c) * k + d;
            (i as f32 / n as f32) - 0.41
        });
        let bias = Array1::from_shape_fn(oc, |i| 0.1 * i as f32 - 0.05);
        Conv2d::new(weight, bias)
    }

    /// Direct nested-loop convolution as an oracle for the im2col path.
    fn naive_forward(conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
        let (n, ic, h, w) = x.dim();
        let (oc, _, kh, kw) = conv.weight.value.dim();
        let pad = conv.pad as isize;
        let mut y = Array4::<f32>::zeros((n, oc, h, w));
        for b in 0..n {
            for o in 0..oc {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = conv.bias.value[o];
                        for c in 0..ic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let si = i as isize + ky as isize - pad;
                                    let sj = j as isize + kx as isize - pad;
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                        continue;
                                    }
                                    acc += conv.weight.value[(o, c, ky, kx)]
                                        * x[(b, c, si as usize, sj as usize)];
                                }
                            }
                        }
                        y[(b, o, i, j)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let conv = toy_conv(3, 2, 3);
        let x = Array::from_shape_fn((2, 2, 5, 4), |(a, b, c, d)| {
            ((a + 2 * b + 3 * c + 5 * d) as f32 * 0.37).sin()
        });
        let fast = conv.forward(&x);
        let naive = naive_forward(&conv, &x);
        for (f, n) in fast.iter().zip(naive.iter()) {
            assert!((f - n).abs() < 1e-5, "{f} vs {n}");
        }
    }

    #[test]
    fn one_by_one_kernel_has_no_padding() {
        let conv = toy_conv(4, 3, 1);
        assert_eq!(conv.pad, 0);
        let x = Array::from_shape_fn((1, 3, 4, 4), |(_, b, c, d)| (b + c * d) as f32 * 0.1);
        let fast = conv.forward(&x);
        let naive = naive_forward(&conv, &x);
        for (f, n) in fast.iter().zip(naive.iter()) {
            assert!((f - n).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut conv = toy_conv(2, 2, 3);
        let x = Array::from_shape_fn((1, 2, 4, 4), |(a, b, c, d)| {
            ((a + b + 3 * c + 7 * d) as f32 * 0.29).cos() * 0.5
        });
        // Loss: sum of squares of the output.
        let y = conv.forward(&x);
        let gy = y.mapv(|v| 2.0 * v);
        let gx = conv.backward(&x, &gy, true);

        let loss = |conv: &Conv2d, x: &Array4<f32>| -> f64 {
            conv.forward(x).iter().map(|&v| (v as f64).powi(2)).sum()
        };
        let h = 1e-3f32;

        // Input gradient.
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (0, 1, 2, 3), (0, 0, 3, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
            let an = gx[idx] as f64;
            assert!((fd - an).abs() <= 1e-3 * (1.0 + an.abs()), "{fd} vs {an}");
        }
        // Weight gradient.
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let mut cp = conv.clone();
            cp.weight.value[idx] += h;
            let mut cm = conv.clone();
            cm.weight.value[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h as f64);
            let an = conv.weight.grad[idx] as f64;
            assert!((fd - an).abs() <= 1e-3 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }
}
