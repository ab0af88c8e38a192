pub mod reference;

use tamir_core::tensor::{Scalar, Tensor};

pub fn max_abs_diff(a: &[Scalar], b: &[Scalar]) -> Scalar {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Scalar::max)
}

pub fn random_image(rng: &mut impl rand::Rng, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(vec![c, h, w], data).expect("finite")
}
