//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::params::ParamStore;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so gradients that are zero up
/// to rounding do not dominate the report.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over `probes` randomly chosen parameter scalars.
pub fn grad_check<F>(
    params: &ParamStore,
    loss: F,
    analytic: &ParamStore,
    probes: usize,
    rng: &mut impl Rng,
) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let index: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    if index.is_empty() {
        return 0.0;
    }
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (name, i) = &index[rng.gen_range(0..index.len())];
        let orig = work.tensor(name).data[*i];
        work.tensor_mut(name).data[*i] = orig + FD_STEP;
        let up = loss(&work);
        work.tensor_mut(name).data[*i] = orig - FD_STEP;
        let down = loss(&work);
        work.tensor_mut(name).data[*i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get(name).map_or(0.0, |t| t.data[*i]);
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}

/// Same as [`grad_check`] over a flat input vector.
pub fn grad_check_input<F>(
    input: &[f64],
    loss: F,
    analytic: &[f64],
    probes: usize,
    rng: &mut impl Rng,
) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    if input.is_empty() {
        return 0.0;
    }
    let mut work = input.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..input.len());
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let up = loss(&work);
        work[i] = orig - FD_STEP;
        let down = loss(&work);
        work[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}
