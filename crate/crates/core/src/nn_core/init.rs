use rand::Rng;

use crate::nn_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
    Zeros,
}

/// Initializes a parameter. Matrices are `[fan_out, fan_in]`; a vector of
/// length `n` counts as `fan_in = n`, `fan_out = 1`.
pub fn init_param<R: Rng + ?Sized>(shape: &[usize], scheme: InitScheme, rng: &mut R) -> Tensor {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::GlorotUniform => {
            let (fan_out, fan_in) = match shape {
                [n] => (1, *n),
                [rows, cols] => (*rows, *cols),
                _ => panic!("unsupported init shape {shape:?}"),
            };
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let numel = shape.iter().product();
            let data = (0..numel).map(|_| rng.gen_range(-s..s)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bias_init_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = init_param(&[7], InitScheme::Zeros, &mut rng);
        assert!(b.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = init_param(&[4, 5], InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_param(&[4, 5], InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn values_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = init_param(&[10, 20], InitScheme::GlorotUniform, &mut rng);
        let s = (6.0f64 / 30.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() < s));
    }

    #[test]
    fn empirical_mean_near_zero() {
        // Uniform(-s, s) has variance s²/3, so the mean of n draws has sd s/sqrt(3n).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, cols) = (100, 1000);
        let w = init_param(&[rows, cols], InitScheme::GlorotUniform, &mut rng);
        let n = (rows * cols) as f64;
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let mean = w.sum() / n;
        let sigma = s / (3.0 * n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    }
}
