use super::Tensor;
use crate::rng::StreamRng;
use crate::{Error, Result, Scalar};

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("non-positive dimension {rows}x{cols}")));
    }
    Ok(())
}

fn uniform<T: Scalar>(rows: usize, cols: usize, bound: f64, rng_seed: u64) -> Tensor<T> {
    let mut rng = StreamRng::new(rng_seed);
    let values = (0..rows * cols)
        .map(|_| T::lit(bound * (2.0 * rng.unit_f64() - 1.0)))
        .collect();
    Tensor::new(vec![rows, cols], values).expect("shape matches by construction")
}

/// Xavier/Glorot uniform: `U(-a, a)` with `a = gain * sqrt(6 / (rows + cols))`.
pub fn xavier_uniform_init<T: Scalar>(rows: usize, cols: usize, gain: f64, rng_seed: u64) -> Result<Tensor<T>> {
    check_dims(rows, cols)?;
    if !(gain >= 0.0) || !gain.is_finite() {
        return Err(Error::invalid(format!("xavier gain must be finite and >= 0, got {gain}")));
    }
    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
    Ok(uniform(rows, cols, bound, rng_seed))
}

/// Fan-in scaled uniform `U(-1/sqrt(cols), 1/sqrt(cols))`, the default
/// initialization of a freshly constructed linear layer.
pub fn fan_in_uniform_init<T: Scalar>(rows: usize, cols: usize, rng_seed: u64) -> Result<Tensor<T>> {
    check_dims(rows, cols)?;
    Ok(uniform(rows, cols, 1.0 / (cols as f64).sqrt(), rng_seed))
}

pub fn constant_init<T: Scalar>(shape: Vec<usize>, value: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, vec![T::lit(value); n]).expect("shape matches by construction")
}
