//! KL and GJM losses on label distributions, their gradients with respect to
//! the predicted distribution, mini-batch risks, and sampling estimators for
//! the Lipschitz constant and maximum value of a loss.

use rand::Rng;

use crate::data::Sample;
use crate::error::{usage, Error, Result};
use crate::exec::Exec;
use crate::math::{norm, softmax};
use crate::models::{ModelSpec, ParamVector};
use crate::rng::RngStream;

pub const DEFAULT_KL_CLAMP: f64 = 1e-10;
pub const DEFAULT_GJM_ALPHA: f64 = 0.5;
pub const DEFAULT_LOGIT_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// `Σ y log(y / max(ŷ, clamp_min))`
    Kl { clamp_min: f64 },
    /// `Σ y |1 − (ŷ/y)^α|^(1/α)`
    Gjm { alpha: f64 },
}

impl LossSpec {
    pub fn kl(clamp_min: f64) -> Result<Self> {
        let spec = LossSpec::Kl { clamp_min };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gjm(alpha: f64) -> Result<Self> {
        let spec = LossSpec::Gjm { alpha };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Kl { clamp_min } if !(clamp_min > 0.0 && clamp_min.is_finite()) => {
                Err(Error::Config(format!("KL clamp_min must be > 0, got {clamp_min}")))
            }
            LossSpec::Gjm { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(Error::Config(format!("GJM alpha must lie in (0, 1], got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Kl { .. } => "kl",
            LossSpec::Gjm { .. } => "gjm",
        }
    }

    pub fn value(&self, yhat: &[f64], y: &[f64]) -> Result<f64> {
        match *self {
            LossSpec::Kl { clamp_min } => kl_loss(yhat, y, clamp_min),
            LossSpec::Gjm { alpha } => gjm_loss(yhat, y, alpha),
        }
    }

    /// Gradient with respect to `yhat`.
    pub fn grad(&self, yhat: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        match *self {
            LossSpec::Kl { clamp_min } => kl_grad(yhat, y, clamp_min),
            LossSpec::Gjm { alpha } => gjm_grad(yhat, y, alpha),
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::Kl { clamp_min: DEFAULT_KL_CLAMP }
    }
}

fn check_dims(yhat: &[f64], y: &[f64]) -> Result<()> {
    if yhat.len() != y.len() || y.is_empty() {
        return Err(usage!("prediction has {} classes, target has {}", yhat.len(), y.len()));
    }
    Ok(())
}

pub fn kl_loss(yhat: &[f64], y: &[f64], clamp_min: f64) -> Result<f64> {
    check_dims(yhat, y)?;
    if !(clamp_min > 0.0) {
        return Err(usage!("clamp_min must be positive"));
    }
    Ok(yhat
        .iter()
        .zip(y)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| t * (t / p.max(clamp_min)).ln())
        .sum())
}

/// `−y/ŷ` per coordinate; zero where `ŷ ≤ clamp_min` (the loss is flat there).
pub fn kl_grad(yhat: &[f64], y: &[f64], clamp_min: f64) -> Result<Vec<f64>> {
    check_dims(yhat, y)?;
    if !(clamp_min > 0.0) {
        return Err(usage!("clamp_min must be positive"));
    }
    Ok(yhat.iter().zip(y).map(|(&p, &t)| if p > clamp_min { -t / p } else { 0.0 }).collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(usage!("GJM alpha must lie in (0, 1], got {alpha}"));
    }
    Ok(())
}

pub fn gjm_loss(yhat: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    check_dims(yhat, y)?;
    check_alpha(alpha)?;
    if y.iter().any(|&t| t <= 0.0) {
        return Err(usage!("GJM needs a strictly positive target"));
    }
    let inv = 1.0 / alpha;
    Ok(yhat
        .iter()
        .zip(y)
        .map(|(&p, &t)| t * (1.0 - (p / t).powf(alpha)).abs().powf(inv))
        .sum())
}

/// For `r = ŷ/y` and `u = 1 − r^α` the coordinate derivative is
/// `−sign(u)·|u|^(1/α − 1)·r^(α − 1)`; at `α = 1/2` this is `1 − √(y/ŷ)`.
pub fn gjm_grad(yhat: &[f64], y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_dims(yhat, y)?;
    check_alpha(alpha)?;
    if y.iter().any(|&t| t <= 0.0) {
        return Err(usage!("GJM needs a strictly positive target"));
    }
    if yhat.iter().any(|&p| p <= 0.0) {
        return Err(Error::Domain("GJM gradient undefined at a zero prediction".into()));
    }
    let expo = 1.0 / alpha - 1.0;
    Ok(yhat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let r = p / t;
            let u = 1.0 - r.powf(alpha);
            if u == 0.0 {
                return 0.0;
            }
            -u.signum() * u.abs().powf(expo) * r.powf(alpha - 1.0)
        })
        .collect())
}

/// Mean pointwise loss of the model over a mini-batch.
pub fn batch_loss<'a, I>(model: &ModelSpec, theta: &ParamVector, batch: I, spec: &LossSpec) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for s in batch {
        let yhat = model.forward(theta, &s.x)?;
        total += spec.value(yhat.probs(), s.y.probs())?;
        count += 1;
    }
    if count == 0 {
        return Err(usage!("empty batch"));
    }
    Ok(total / count as f64)
}

/// `(1/b)(Σ ℓ + (λ/2)‖θ‖²)`.
pub fn regularized_batch_loss<'a, I>(model: &ModelSpec, theta: &ParamVector, batch: I, spec: &LossSpec, lambda: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sample>,
{
    if !(lambda >= 0.0) {
        return Err(usage!("lambda must be >= 0, got {lambda}"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in batch {
        let yhat = model.forward(theta, &s.x)?;
        total += spec.value(yhat.probs(), s.y.probs())?;
        count += 1;
    }
    if count == 0 {
        return Err(usage!("empty batch"));
    }
    let sq: f64 = theta.as_slice().iter().map(|v| v * v).sum();
    Ok((total + 0.5 * lambda * sq) / count as f64)
}

/// Estimated constants of a loss on a bounded-logit domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossProfile {
    pub spec: LossSpec,
    pub gamma_hat: f64,
    pub l_hat: f64,
    pub classes: usize,
    pub logit_bound: f64,
    pub n_samples: usize,
}

/// A point `softmax(z)` with `z ∈ [−bound, bound]^classes`. Each logit is
/// uniform on `[−bound, bound]` half of the time and pinned to one of the two
/// faces otherwise, so sampling reaches the corners where gradients peak.
pub fn sample_bounded_simplex<R: Rng>(classes: usize, bound: f64, rng: &mut R) -> Vec<f64> {
    let logits: Vec<f64> = (0..classes)
        .map(|_| match rng.random_range(0..4u8) {
            0 => -bound,
            1 => bound,
            _ => rng.random_range(-bound..=bound),
        })
        .collect();
    softmax(&logits)
}

fn check_domain(classes: usize, logit_bound: f64, n_samples: usize) -> Result<()> {
    if classes < 1 || n_samples < 1 || !(logit_bound > 0.0) {
        return Err(usage!("profile domain needs classes >= 1, n_samples >= 1 and logit_bound > 0"));
    }
    Ok(())
}

const PROFILE_BLOCK: usize = 8192;

/// Runs `eval` over `n_samples` sampled `(ŷ, y)` pairs and keeps the running
/// maxima of both outputs. Pairs are drawn sequentially from the stream and
/// evaluated block-wise, so the result does not depend on `exec`.
fn max_over_pairs<F>(classes: usize, logit_bound: f64, n_samples: usize, rng: &RngStream, exec: Exec, eval: F) -> Result<(f64, f64)>
where
    F: Fn(&[f64], &[f64]) -> Result<(f64, f64)> + Sync + Send,
{
    check_domain(classes, logit_bound, n_samples)?;
    let mut r = rng.rng();
    let mut best = (0.0f64, 0.0f64);
    let mut remaining = n_samples;
    while remaining > 0 {
        let n = remaining.min(PROFILE_BLOCK);
        remaining -= n;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .map(|_| {
                let yhat = sample_bounded_simplex(classes, logit_bound, &mut r);
                let y = sample_bounded_simplex(classes, logit_bound, &mut r);
                (yhat, y)
            })
            .collect();
        for v in exec.map_slice(&pairs, |(yhat, y)| eval(yhat, y)) {
            let (a, b) = v?;
            best = (best.0.max(a), best.1.max(b));
        }
    }
    Ok(best)
}

/// Largest sampled `‖∇_ŷ ℓ(ŷ, y)‖`.
pub fn estimate_lipschitz(spec: &LossSpec, classes: usize, logit_bound: f64, n_samples: usize, rng: &RngStream) -> Result<f64> {
    let (g, _) = max_over_pairs(classes, logit_bound, n_samples, rng, Exec::default(), |yhat, y| Ok((norm(&spec.grad(yhat, y)?), 0.0)))?;
    Ok(g)
}

/// Largest sampled `ℓ(ŷ, y)`.
pub fn estimate_max_value(spec: &LossSpec, classes: usize, logit_bound: f64, n_samples: usize, rng: &RngStream) -> Result<f64> {
    let (_, l) = max_over_pairs(classes, logit_bound, n_samples, rng, Exec::default(), |yhat, y| Ok((0.0, spec.value(yhat, y)?)))?;
    Ok(l)
}

/// Both estimates from one pass over the same sampled pairs.
pub fn profile_loss(spec: &LossSpec, classes: usize, logit_bound: f64, n_samples: usize, rng: &RngStream, exec: Exec) -> Result<LossProfile> {
    spec.validate()?;
    let (gamma_hat, l_hat) = max_over_pairs(classes, logit_bound, n_samples, rng, exec, |yhat, y| {
        Ok((norm(&spec.grad(yhat, y)?), spec.value(yhat, y)?))
    })?;
    Ok(LossProfile { spec: *spec, gamma_hat, l_hat, classes, logit_bound, n_samples })
}

/// Largest `‖∇_ŷ ℓ‖` over explicitly supplied pairs.
pub fn max_grad_norm<'a, I>(spec: &LossSpec, pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut best = 0.0f64;
    for (yhat, y) in pairs {
        best = best.max(norm(&spec.grad(yhat, y)?));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_grad, relative_error};
    use proptest::prelude::*;

    const KL: LossSpec = LossSpec::Kl { clamp_min: 1e-10 };
    const GJM: LossSpec = LossSpec::Gjm { alpha: 0.5 };

    fn hellinger(yhat: &[f64], y: &[f64]) -> f64 {
        yhat.iter().zip(y).map(|(p, t)| (t.sqrt() - p.sqrt()).powi(2)).sum()
    }

    #[test]
    fn kl_reference_values() {
        let y = [0.5, 0.5];
        assert_eq!(kl_loss(&y, &y, 1e-10).unwrap(), 0.0);
        // 0.5 ln 2 + 0.5 ln(2/3), 40-digit evaluation
        let v = kl_loss(&[0.25, 0.75], &y, 1e-10).unwrap();
        assert!((v - 0.143_841_036_225_890_45).abs() < 1e-15);
    }

    #[test]
    fn kl_clamps_zero_prediction() {
        let v = kl_loss(&[0.0, 1.0], &[0.5, 0.5], 1e-10).unwrap();
        let want = 0.5 * (0.5f64 / 1e-10).ln() + 0.5 * 0.5f64.ln();
        assert!(v.is_finite());
        assert!((v - want).abs() < 1e-12);
        let g = kl_grad(&[0.0, 1.0], &[0.5, 0.5], 1e-10).unwrap();
        assert_eq!(g, vec![0.0, -0.5]);
    }

    #[test]
    fn kl_grad_at_target_is_minus_one() {
        let y = [0.2, 0.3, 0.5];
        assert_eq!(kl_grad(&y, &y, 1e-10).unwrap(), vec![-1.0; 3]);
    }

    #[test]
    fn dimension_mismatch_is_usage() {
        assert!(matches!(kl_loss(&[0.5, 0.5], &[1.0], 1e-10), Err(Error::Usage(_))));
        assert!(matches!(gjm_loss(&[0.5, 0.5], &[1.0], 0.5), Err(Error::Usage(_))));
        assert!(matches!(gjm_grad(&[1.0], &[0.5, 0.5], 0.5), Err(Error::Usage(_))));
        assert!(matches!(gjm_loss(&[0.5, 0.5], &[1.0, 0.0], 0.5), Err(Error::Usage(_))));
        assert!(matches!(gjm_grad(&[0.0, 1.0], &[0.5, 0.5], 0.5), Err(Error::Domain(_))));
        assert!(LossSpec::gjm(0.0).is_err());
        assert!(LossSpec::gjm(1.5).is_err());
        assert!(LossSpec::kl(0.0).is_err());
    }

    #[test]
    fn gjm_reference_values() {
        let y = [0.5, 0.5];
        assert_eq!(gjm_loss(&y, &y, 0.5).unwrap(), 0.0);
        let v = gjm_loss(&[0.25, 0.75], &y, 0.5).unwrap();
        assert!((v - 0.068_148_347_421_863_43).abs() < 1e-15);
        assert!((v - hellinger(&[0.25, 0.75], &y)).abs() < 1e-15);
        let g = gjm_grad(&[0.125, 0.875], &y, 0.5).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-15);
        assert!((g[1] - 0.244_071_053_981_545_55).abs() < 1e-15);
        assert_eq!(gjm_grad(&y, &y, 0.5).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn estimators_zero_at_tied_pairs() {
        let y = vec![0.1, 0.2, 0.7];
        let pairs = [(y.as_slice(), y.as_slice()); 4];
        assert_eq!(max_grad_norm(&GJM, pairs).unwrap(), 0.0);
    }

    #[test]
    fn estimators_order_and_caps() {
        let rng = RngStream::new(5, "profile");
        let kl = profile_loss(&KL, 10, 10.0, 20_000, &rng, Exec::Sequential).unwrap();
        let gjm = profile_loss(&GJM, 10, 10.0, 20_000, &rng, Exec::Parallel).unwrap();
        assert!(gjm.gamma_hat < kl.gamma_hat);
        assert!(gjm.l_hat < kl.l_hat);
        assert!(gjm.l_hat <= 2.0);
        assert!(kl.l_hat <= (1e10f64).ln());
        assert_eq!(estimate_lipschitz(&KL, 10, 10.0, 20_000, &rng).unwrap(), kl.gamma_hat);
        assert_eq!(estimate_max_value(&GJM, 10, 10.0, 20_000, &rng).unwrap(), gjm.l_hat);
    }

    #[test]
    fn lipschitz_estimate_is_monotone_in_samples() {
        let rng = RngStream::new(8, "mono");
        let mut last = 0.0;
        for n in [1, 10, 100, 1000, 5000, 20_000] {
            let g = estimate_lipschitz(&KL, 6, 4.0, n, &rng).unwrap();
            assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn lipschitz_two_classes_matches_grid_oracle() {
        // For M = 2 the domain is parameterized by the logit gaps
        // a, c ∈ [−2B, 2B] of ŷ and y; maximize on a dense grid.
        let bound = 3.0;
        let steps = 600;
        for spec in [KL, GJM] {
            let mut oracle = 0.0f64;
            for i in 0..=steps {
                let a = -2.0 * bound + 4.0 * bound * i as f64 / steps as f64;
                let yhat = softmax(&[a, 0.0]);
                for j in 0..=steps {
                    let c = -2.0 * bound + 4.0 * bound * j as f64 / steps as f64;
                    let y = softmax(&[c, 0.0]);
                    oracle = oracle.max(norm(&spec.grad(&yhat, &y).unwrap()));
                }
            }
            let est = estimate_lipschitz(&spec, 2, bound, 100_000, &RngStream::new(1, "grid")).unwrap();
            assert!(((est - oracle) / oracle).abs() < 0.05, "{}: {est} vs {oracle}", spec.name());
        }
    }

    fn simplex_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|m| {
            (prop::collection::vec(-3f64..3.0, m), prop::collection::vec(-3f64..3.0, m))
                .prop_map(|(a, b)| (softmax(&a), softmax(&b)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn losses_nonnegative((yhat, y) in simplex_pair()) {
            prop_assert!(KL.value(&yhat, &y).unwrap() >= -1e-15);
            prop_assert!(GJM.value(&yhat, &y).unwrap() >= 0.0);
            prop_assert!(KL.value(&y, &y).unwrap().abs() < 1e-15);
            prop_assert_eq!(GJM.value(&y, &y).unwrap(), 0.0);
        }

        #[test]
        fn gjm_half_is_hellinger((yhat, y) in simplex_pair()) {
            prop_assert!((GJM.value(&yhat, &y).unwrap() - hellinger(&yhat, &y)).abs() < 1e-12);
        }

        #[test]
        fn gradients_match_finite_differences((yhat, y) in simplex_pair(), alpha in 0.2f64..1.0) {
            // GJM with α ≠ 1/2 has a kink at ŷ = y.
            let off_kink = yhat.iter().zip(&y).all(|(a, b)| (a / b - 1.0).abs() > 1e-3);
            let specs = if off_kink { vec![KL, GJM, LossSpec::Gjm { alpha }] } else { vec![KL, GJM] };
            for spec in specs {
                let analytic = spec.grad(&yhat, &y).unwrap();
                let numeric = finite_diff_grad(|p| spec.value(p, &y).unwrap(), &yhat, 1e-7).unwrap();
                let err = relative_error(&analytic, &numeric, 1e-12);
                prop_assert!(err < 1e-6, "{:?}: {err}", spec);
            }
        }

        #[test]
        fn losses_convex_along_segments((a, y) in simplex_pair(), seed in any::<u64>(), t in 0.01f64..0.99) {
            let mut r = RngStream::new(seed, "b").rng();
            let b = sample_bounded_simplex(a.len(), 3.0, &mut r);
            let mix: Vec<f64> = a.iter().zip(&b).map(|(p, q)| t * p + (1.0 - t) * q).collect();
            for spec in [KL, GJM] {
                let lhs = spec.value(&mix, &y).unwrap();
                let rhs = t * spec.value(&a, &y).unwrap() + (1.0 - t) * spec.value(&b, &y).unwrap();
                prop_assert!(lhs <= rhs + 1e-10);
            }
        }
    }
}
