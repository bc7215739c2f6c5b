//! Stateless network operations and their backward passes.

use ndarray::{Array4, Axis, Zip};

pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

/// `y` is the relu output; the mask `y > 0` reproduces `x > 0`.
pub fn relu_backward(gy: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(y).for_each(|g, &yv| {
        if yv <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn sigmoid(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(gy: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(y).for_each(|g, &yv| *g *= yv * (1.0 - yv));
    gx
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the winner
/// index (0..4, row-major within each window) for the backward scatter.
pub fn maxpool2(x: &Array4<f32>) -> (Array4<f32>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((n, c, oh, ow));
    let mut idx = Array4::<u8>::zeros((n, c, oh, ow));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0u8;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = x[(b, ci, 2 * i + di, 2 * j + dj)];
                            if v > best {
                                best = v;
                                arg = (di * 2 + dj) as u8;
                            }
                        }
                    }
                    y[(b, ci, i, j)] = best;
                    idx[(b, ci, i, j)] = arg;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(gy: &Array4<f32>, idx: &Array4<u8>) -> Array4<f32> {
    let (n, c, oh, ow) = gy.dim();
    let mut gx = Array4::<f32>::zeros((n, c, oh * 2, ow * 2));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let a = idx[(b, ci, i, j)] as usize;
                    gx[(b, ci, 2 * i + a / 2, 2 * j + a % 2)] = gy[(b, ci, i, j)];
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((n, c, h * 2, w * 2));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(b, ci, i, j)];
                    y[(b, ci, 2 * i, 2 * j)] = v;
                    y[(b, ci, 2 * i, 2 * j + 1)] = v;
                    y[(b, ci, 2 * i + 1, 2 * j)] = v;
                    y[(b, ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[(b, ci, i, j)] = gy[(b, ci, 2 * i, 2 * j)]
                        + gy[(b, ci, 2 * i, 2 * j + 1)]
                        + gy[(b, ci, 2 * i + 1, 2 * j)]
                        + gy[(b, ci, 2 * i + 1, 2 * j + 1)];
                }
            }
        }
    }
    gx
}

/// Concatenate along the channel axis: `[a; b]`.
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching dims")
}

/// Split a channel gradient back into the two concatenated parts.
pub fn split_channels(g: &Array4<f32>, ca: usize) -> (Array4<f32>, Array4<f32>) {
    let ga = g.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
    let gb = g.slice(ndarray::s![.., ca.., .., ..]).to_owned();
    (ga, gb)
}

/// Numerically stable softmax over the channel axis.
pub fn softmax_channels(logits: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = logits.dim();
    let mut y = logits.clone();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut mx = f32::NEG_INFINITY;
                for ci in 0..c {
                    mx = mx.max(y[(b, ci, i, j)]);
                }
                let mut sum = 0.0f32;
                for ci in 0..c {
                    let e = (y[(b, ci, i, j)] - mx).exp();
                    y[(b, ci, i, j)] = e;
                    sum += e;
                }
                for ci in 0..c {
                    y[(b, ci, i, j)] /= sum;
                }
            }
        }
    }
    y
}

/// Gradient through softmax given the output `probs` and `d loss / d probs`.
pub fn softmax_backward(probs: &Array4<f32>, gprobs: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = probs.dim();
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut dot = 0.0f32;
                for ci in 0..c {
                    dot += gprobs[(b, ci, i, j)] * probs[(b, ci, i, j)];
                }
                for ci in 0..c {
                    gx[(b, ci, i, j)] = probs[(b, ci, i, j)] * (gprobs[(b, ci, i, j)] - dot);
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

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Array::from_shape_fn((2, 4, 3, 3), |(a, b, c, d)| {
            ((a + 3 * b + c + 2 * d) as f32 * 0.7).sin() * 4.0
        });
        let y = softmax_channels(&x);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let s: f32 = (0..4).map(|c| y[(b, c, i, j)]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn pool_then_backward_routes_to_the_winner() {
        let mut x = Array4::<f32>::zeros((1, 1, 2, 2));
        x[(0, 0, 1, 0)] = 5.0;
        let (y, idx) = maxpool2(&x);
        assert_eq!(y[(0, 0, 0, 0)], 5.0);
        let gy = Array4::from_elem((1, 1, 1, 1), 2.0f32);
        let gx = maxpool2_backward(&gy, &idx);
        assert_eq!(gx[(0, 0, 1, 0)], 2.0);
        assert_eq!(gx[(0, 0, 0, 0)], 0.0);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Array::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (2 * i + j) as f32);
        let y = upsample2(&x);
        assert_eq!(y.dim(), (1, 1, 4, 4));
        assert_eq!(y[(0, 0, 3, 3)], 3.0);
        let gx = upsample2_backward(&y);
        assert_eq!(gx[(0, 0, 0, 0)], 0.0);
        assert_eq!(gx[(0, 0, 1, 1)], 12.0);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Array4::from_elem((1, 2, 2, 2), 1.0f32);
        let b = Array4::from_elem((1, 3, 2, 2), 2.0f32);
        let y = concat_channels(&a, &b);
        assert_eq!(y.dim(), (1, 5, 2, 2));
        let (ga, gb) = split_channels(&y, 2);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }
}
