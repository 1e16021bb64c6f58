use rand::Rng;

use crate::tensor::Tensor;

/// Glorot-uniform over `[-l, l]`, `l = √(6 / (fan_in + fan_out))`.
///
/// For a `[k, k, cin, cout]` kernel the receptive field counts toward both
/// fans; for a `[fin, fout]` matrix the fans are the two extents.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [k1, k2, cin, cout] => (k1 * k2 * cin, k1 * k2 * cout),
        [fin, fout] => (*fin, *fout),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}
