use crate::tensor::{Scalar, Tensor};

use super::ModelError;

/// Sinusoid rows for relative distances. Column `2i` holds
/// `sin(k / 10000^(2i/d))` and column `2i + 1` the matching cosine.
pub fn sinusoid_rows<T: Scalar>(distances: &[i64], d: usize) -> Result<Tensor<T>, ModelError> {
    if d == 0 || d % 2 != 0 {
        return Err(ModelError::Config(format!("sinusoid dimension {d} must be even")));
    }
    let inv_freq: Vec<f64> = (0..d / 2)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64))
        .collect();
    let mut data = Vec::with_capacity(distances.len() * d);
    for &k in distances {
        for &f in &inv_freq {
            let angle = k as f64 * f;
            data.push(T::from_f64_lossy(angle.sin()));
            data.push(T::from_f64_lossy(angle.cos()));
        }
    }
    Ok(Tensor::new(vec![distances.len(), d], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_distance_alternates() {
        let r = sinusoid_rows::<f64>(&[0], 8).unwrap();
        assert_eq!(r.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn negation_flips_sines_only() {
        let r = sinusoid_rows::<f64>(&[5, -5], 16).unwrap();
        for i in 0..8 {
            assert_eq!(r.at(0, 2 * i), -r.at(1, 2 * i));
            assert_eq!(r.at(0, 2 * i + 1), r.at(1, 2 * i + 1));
        }
    }

    #[test]
    fn matches_direct_evaluation() {
        let d = 12;
        let r = sinusoid_rows::<f32>(&[0, 1, 7, 300], d).unwrap();
        for (row, k) in [0.0f64, 1.0, 7.0, 300.0].iter().enumerate() {
            for i in 0..d / 2 {
                let w = k / 10000f64.powf((2 * i) as f64 / d as f64);
                assert!((f64::from(r.at(row, 2 * i)) - w.sin()).abs() < 1e-6);
                assert!((f64::from(r.at(row, 2 * i + 1)) - w.cos()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn odd_dimension_is_config_error() {
        assert!(matches!(sinusoid_rows::<f32>(&[0], 7), Err(ModelError::Config(_))));
    }
}
