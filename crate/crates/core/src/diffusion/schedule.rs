use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous-time variance-preserving noise schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl VpSchedule {
    pub fn log_alpha(&self, t: f64) -> f64 {
        -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
    }

    /// `(alpha_t, sigma_t)` with `alpha_t^2 + sigma_t^2 = 1`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("diffusion time {t} outside [0, 1]")));
        }
        let la = self.log_alpha(t);
        // expm1 keeps sigma accurate for small t.
        Ok((la.exp(), (-(2.0 * la).exp_m1()).sqrt()))
    }
}

/// `alpha_t * a + sigma_t * eps`.
pub fn perturb(schedule: &VpSchedule, a: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if a.len() != eps.len() {
        return Err(Error::shape(format!(
            "action has {} entries but noise has {}",
            a.len(),
            eps.len()
        )));
    }
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(a.iter().zip(eps).map(|(x, e)| alpha * x + sigma * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = VpSchedule::default();
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        let (a1, _) = s.alpha_sigma(1.0).unwrap();
        assert!((a1 - (-5.025f64).exp()).abs() < 1e-15);
        assert!((a1 - 6.56e-3).abs() < 2e-5);
        assert!(matches!(s.alpha_sigma(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.alpha_sigma(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn identity_and_monotonicity() {
        let s = VpSchedule::default();
        let mut prev = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..1000 {
            let t = k as f64 / 999.0;
            let (a, sg) = s.alpha_sigma(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() <= 1e-12);
            assert!(a < prev.0 && sg > prev.1);
            prev = (a, sg);
        }
    }

    #[test]
    fn perturb_edge_cases() {
        let s = VpSchedule::default();
        assert_eq!(perturb(&s, &[0.3, -0.2], 0.0, &[1.0, 2.0]).unwrap(), vec![0.3, -0.2]);
        let (a, _) = s.alpha_sigma(0.4).unwrap();
        assert_eq!(perturb(&s, &[0.5], 0.4, &[0.0]).unwrap(), vec![a * 0.5]);
        assert!(matches!(perturb(&s, &[0.5], 0.4, &[0.0, 1.0]), Err(Error::Shape(_))));
    }
}
