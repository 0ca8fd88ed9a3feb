use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Variance schedule of the forward noising process. Steps are 1-based:
/// `beta(t)` for `t` in `1..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("diffusion schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Size(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Betas linearly spaced from `beta_start` to `beta_end`, endpoints included.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion steps must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    DiffusionSchedule::from_betas(beta)
}

/// Closed-form marginal `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_sample(
    x0: &PointCloud,
    t: usize,
    noise: &[Vec3],
    sched: &DiffusionSchedule,
) -> Result<PointCloud> {
    sched.check_step(t)?;
    if noise.len() != x0.len() {
        return Err(Error::Shape(format!(
            "{} noise vectors for {} points",
            noise.len(),
            x0.len()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    PointCloud::new(x0.iter().zip(noise).map(|(x, e)| x * a + e * b).collect())
}
