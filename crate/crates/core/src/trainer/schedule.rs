use crate::error::{Error, Result};

/// Polynomial decay `base * (1 - i / max_iter)^power`.
pub fn poly_lr(base_lr: f64, i: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    if i > max_iter {
        return Err(Error::InvalidArgument(format!("iteration {i} beyond max_iter {max_iter}")));
    }
    Ok(base_lr * (1.0 - i as f64 / max_iter as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(poly_lr(2.5e-4, 0, 100, 0.9).unwrap(), 2.5e-4);
        assert_eq!(poly_lr(2.5e-4, 100, 100, 0.9).unwrap(), 0.0);
        let mid = poly_lr(2.5e-4, 50, 100, 0.9).unwrap();
        assert!((mid - 1.3397168281703665e-4).abs() < 1e-16);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(poly_lr(1.0, 101, 100, 0.9).is_err());
        assert!(poly_lr(1.0, 0, 0, 0.9).is_err());
    }

    #[test]
    fn monotone_nonincreasing() {
        let lrs: Vec<f64> = (0..=40).map(|i| poly_lr(0.01, i, 40, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
