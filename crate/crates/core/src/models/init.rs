use rand::Rng;

use crate::tensor::Tensor;

/// Glorot-uniform weight matrix `[fan_in × fan_out]`.
pub(crate) fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

pub(crate) fn dense_segments<R: Rng + ?Sized>(
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> [(String, Tensor); 2] {
    [
        (format!("{prefix}.weight"), glorot(rng, fan_in, fan_out)),
        (format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
    ]
}
