//! μ-law range compression, shared by latent encoding and evaluation.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MU: f64 = 5000.0;

/// `log(1 + mu x) / log(1 + mu)` for a single normalised value.
#[inline]
pub fn mu_law(x: f64, mu: f64) -> f64 {
    (mu * x).ln_1p() / mu.ln_1p()
}

/// Exact inverse of [`mu_law`]: `((1 + mu)^y - 1) / mu`.
#[inline]
pub fn inverse_mu_law(y: f64, mu: f64) -> f64 {
    (y * mu.ln_1p()).exp_m1() / mu
}

/// Tonemaps normalised radiance in `[0, 1]`.
pub fn tonemap_mu(x: &Tensor, mu: f64) -> Result<Tensor> {
    check_mu(mu)?;
    if let Some(v) = x.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(invalid!("tonemap input {v} is negative or NaN"));
    }
    Ok(x.map(|v| mu_law(v, mu)))
}

pub fn inverse_tonemap_mu(y: &Tensor, mu: f64) -> Result<Tensor> {
    check_mu(mu)?;
    if let Some(v) = y.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid!("inverse tonemap input {v} outside [0, 1]"));
    }
    Ok(y.map(|v| inverse_mu_law(v, mu)))
}

/// Divides by `peak`, clips to `[0, 1]` and tonemaps.
pub fn tonemap_normalized(hdr: &Tensor, peak: f64, mu: f64) -> Result<Tensor> {
    if !(peak > 0.0) {
        return Err(invalid!("peak radiance must be positive, got {peak}"));
    }
    tonemap_mu(&hdr.map(|v| (v / peak).clamp(0.0, 1.0)), mu)
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(invalid!("mu must be positive, got {mu}"))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(mu_law(0.0, DEFAULT_MU), 0.0);
        assert!((mu_law(1.0, DEFAULT_MU) - 1.0).abs() < 1e-15);
        assert_eq!(inverse_mu_law(0.0, DEFAULT_MU), 0.0);
        assert!((inverse_mu_law(1.0, DEFAULT_MU) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(tonemap_mu(&Tensor::full([1], -0.1), DEFAULT_MU).is_err());
        assert!(inverse_tonemap_mu(&Tensor::full([1], 1.1), DEFAULT_MU).is_err());
        assert!(tonemap_mu(&Tensor::full([1], 0.1), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(x in 0.0f64..=1.0, mu in 1.0f64..10000.0) {
            prop_assert!((inverse_mu_law(mu_law(x, mu), mu) - x).abs() < 1e-9);
        }

        #[test]
        fn strictly_increasing(a in 0.0f64..1.0, d in 1e-9f64..1.0) {
            let b = (a + d).min(1.0);
            prop_assume!(b > a);
            prop_assert!(mu_law(b, DEFAULT_MU) > mu_law(a, DEFAULT_MU));
        }
    }
}
