//! Model-free counterfactual by quantile matching: the observed outcome's
//! conditional CDF level under the factual action is carried over to the
//! alternative action. For a model strictly monotone in scalar noise this
//! equals abduction followed by prediction, whatever the parametrization.

use ndarray::Array2;

use super::StructuralModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::rng::Rng64;

/// Fewer draws than this make the empirical quantile meaningless.
pub const MIN_QUANTILE_SAMPLES: usize = 100;
/// Width of [`QuantileEstimate::band`] in standard errors.
pub const BAND_SIGMAS: f64 = 4.0;

/// Anything that can draw from `P(S' | s, a, [theta])`.
pub trait ConditionalSampler {
    fn state_dim(&self) -> usize;

    /// `n x state_dim` draws of the next state.
    fn sample_next(&self, state: &[f64], action: f64, theta: Option<&[f64]>, n: usize, rng: &mut Rng64) -> Result<Tensor2>;
}

/// Samples an SCM by pushing prior noise through its mechanism.
pub struct ModelSampler<'a>(pub &'a dyn StructuralModel);

impl ConditionalSampler for ModelSampler<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn sample_next(&self, state: &[f64], action: f64, theta: Option<&[f64]>, n: usize, rng: &mut Rng64) -> Result<Tensor2> {
        let d = state.len();
        let s = Array2::from_shape_fn((n, d), |(_, j)| state[j]);
        let a = Array2::from_elem((n, 1), action);
        let t = theta.map(|t| Array2::from_shape_fn((n, t.len()), |(_, j)| t[j]));
        let u = self.0.sample_noise(n, rng);
        self.0.mechanism(&s, &a, t.as_ref(), &u)
    }
}

/// Per-dimension result of [`quantile_counterfactual`].
#[derive(Clone, Debug)]
pub struct QuantileEstimate {
    pub value: Vec<f64>,
    /// CDF level of the observed outcome under the factual action.
    pub alpha: Vec<f64>,
    /// Half-width of the Monte-Carlo band: `BAND_SIGMAS` standard errors of
    /// the estimate, combining the error in `alpha` and in the quantile.
    pub band: Vec<f64>,
}

/// Mid-rank empirical CDF of `y` over sorted draws.
pub fn empirical_cdf(sorted: &[f64], y: f64) -> f64 {
    let below = sorted.partition_point(|&x| x < y);
    let at_or_below = sorted.partition_point(|&x| x <= y);
    (below as f64 + 0.5 * (at_or_below - below) as f64) / sorted.len() as f64
}

/// Empirical quantile consistent with [`empirical_cdf`]: the `i`-th order
/// statistic sits at level `(i + 0.5) / n`, linear in between.
pub fn empirical_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    let pos = (alpha * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

fn sorted_column(x: &Tensor2, j: usize) -> Vec<f64> {
    let mut v = x.column(j).to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[allow(clippy::too_many_arguments)]
pub fn quantile_counterfactual(
    sampler: &dyn ConditionalSampler,
    state: &[f64],
    action: f64,
    theta: Option<&[f64]>,
    next_state: &[f64],
    cf_action: f64,
    n_samples: usize,
    rng: &mut Rng64,
) -> Result<QuantileEstimate> {
    if n_samples < MIN_QUANTILE_SAMPLES {
        return Err(Error::TooFewSamples { min: MIN_QUANTILE_SAMPLES, got: n_samples });
    }
    let d = sampler.state_dim();
    if state.len() != d || next_state.len() != d {
        return Err(Error::Dimension(format!("expected {d}-dim states")));
    }
    let factual = sampler.sample_next(state, action, theta, n_samples, rng)?;
    let alternative = sampler.sample_next(state, cf_action, theta, n_samples, rng)?;
    let n = n_samples as f64;
    let h = (2.0 / n.sqrt()).max(0.01);

    let mut est = QuantileEstimate { value: Vec::with_capacity(d), alpha: Vec::with_capacity(d), band: Vec::with_capacity(d) };
    for j in 0..d {
        let f = sorted_column(&factual, j);
        let g = sorted_column(&alternative, j);
        let alpha = empirical_cdf(&f, next_state[j]);
        let value = empirical_quantile(&g, alpha);
        // dq/dalpha by a central difference of the empirical quantile function.
        let (a_lo, a_hi) = ((alpha - h).max(0.5 / n), (alpha + h).min(1.0 - 0.5 / n));
        let slope = if a_hi > a_lo { (empirical_quantile(&g, a_hi) - empirical_quantile(&g, a_lo)) / (a_hi - a_lo) } else { 0.0 };
        let var_level = (alpha * (1.0 - alpha)).max(0.5 / n) / n;
        est.band.push(BAND_SIGMAS * (2.0 * var_level).sqrt() * slope);
        est.alpha.push(alpha);
        est.value.push(value);
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::super::synthetic::Additive;
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn too_few_samples_rejected() {
        let m = Additive::new(1);
        let err = quantile_counterfactual(&ModelSampler(&m), &[0.0], 0.0, None, &[0.0], 1.0, 99, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::TooFewSamples { min: 100, got: 99 }));
    }

    #[test]
    fn median_maps_to_median() {
        let m = Additive::new(1);
        // s + a is the conditional median of s + a + N(0,1).
        let est = quantile_counterfactual(&ModelSampler(&m), &[1.0], 0.2, None, &[1.2], 0.9, 20_000, &mut seeded(4)).unwrap();
        assert!((est.alpha[0] - 0.5).abs() < 0.02);
        assert!((est.value[0] - 1.9).abs() <= est.band[0], "{est:?}");
    }

    #[test]
    fn cdf_and_quantile_are_consistent() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        for (i, &x) in xs.iter().enumerate() {
            let a = empirical_cdf(&xs, x);
            assert!((a - (i as f64 + 0.5) / 10.0).abs() < 1e-12);
            assert!((empirical_quantile(&xs, a) - x).abs() < 1e-12);
        }
        assert_eq!(empirical_quantile(&xs, 0.0), 0.0);
        assert_eq!(empirical_quantile(&xs, 1.0), 9.0);
    }
}
