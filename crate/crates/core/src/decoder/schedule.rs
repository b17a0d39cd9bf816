use serde::{Deserialize, Serialize};

use super::DecoderError;

/// Linear variance schedule. Step indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<(), DecoderError> {
        if t == 0 || t > self.steps {
            return Err(DecoderError::Config(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, beta_lo: f64, beta_hi: f64) -> Result<DiffusionSchedule, DecoderError> {
    if steps == 0 {
        return Err(DecoderError::Config("schedule needs at least one step".into()));
    }
    if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
        return Err(DecoderError::Config(format!(
            "beta range ({beta_lo}, {beta_hi}) must satisfy 0 < lo <= hi < 1"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_lo
            } else {
                beta_lo + (beta_hi - beta_lo) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule { steps, beta, alpha, alpha_bar })
}

/// `x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`
pub fn forward_diffuse(
    x0: &[f32],
    t: usize,
    eps: &[f32],
    sched: &DiffusionSchedule,
) -> Result<Vec<f32>, DecoderError> {
    sched.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(DecoderError::Shape(format!(
            "x0 has {} values, eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar, vec![0.9]);
    }

    #[test]
    fn long_schedule_matches_direct_product() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let last = s.alpha_bar(1000);
        assert!(last > 0.0 && last < 0.01);
        for t in 1..=1000 {
            let direct: f64 = (1..=t)
                .map(|k| 1.0 - (1e-4 + (0.02 - 1e-4) * (k - 1) as f64 / 999.0))
                .product();
            assert!((s.alpha_bar(t) - direct).abs() <= 1e-12 * direct.max(1e-300) + 1e-15);
        }
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.beta.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_schedule(10, 0.0, 0.5).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn closed_form_edges() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = [1.0f32, -2.0, 0.5];
        let zero = [0.0f32; 3];
        let xt = forward_diffuse(&x0, 40, &zero, &s).unwrap();
        for (a, b) in xt.iter().zip(&x0) {
            assert_eq!(*a, (s.alpha_bar(40).sqrt() * *b as f64) as f32);
        }
        let eps = [0.3f32, 0.1, -1.0];
        let xt = forward_diffuse(&zero, 7, &eps, &s).unwrap();
        for (a, e) in xt.iter().zip(&eps) {
            assert_eq!(*a, ((1.0 - s.alpha_bar(7)).sqrt() * *e as f64) as f32);
        }
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 101, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 1, &eps[..2], &s).is_err());
    }
}
