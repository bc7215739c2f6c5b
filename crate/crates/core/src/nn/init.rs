//! Deterministic weight initialization.

use super::Conv2d;
use ndarray::{Array1, Array4};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// Kaiming fan-in normal init for a convolution: `std = sqrt(2 / fan_in)`,
/// zero bias. Draws are consumed in row-major order so the same stream
/// always produces the same weights.
pub fn kaiming_conv(rng: &mut ChaCha20Rng, oc: usize, ic: usize, k: usize) -> Conv2d {
    let fan_in = (ic * k * k) as f32;
    let std = (2.0 / fan_in).sqrt();
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let mut weight = Array4::<f32>::zeros((oc, ic, k, k));
    for v in weight.iter_mut() {
        *v = normal.sample(rng);
    }
    Conv2d::new(weight, Array1::zeros(oc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn same_stream_same_weights() {
        let a = kaiming_conv(&mut stream(1, Purpose::Init, 0), 4, 3, 3);
        let b = kaiming_conv(&mut stream(1, Purpose::Init, 0), 4, 3, 3);
        assert_eq!(a.weight.value, b.weight.value);
        let c = kaiming_conv(&mut stream(2, Purpose::Init, 0), 4, 3, 3);
        assert_ne!(a.weight.value, c.weight.value);
    }
}
