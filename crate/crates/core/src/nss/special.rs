//! Gamma margins: CDF, density, and maximum-likelihood fitting, plus the
//! standard normal quantile used to form Gaussian scores.

use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{contract, degenerate, numeric, Result};

const SERIES_EPS: f64 = 1e-16;
const MAX_TERMS: usize = 100_000;
const TINY: f64 = 1e-300;

/// Minimum number of samples accepted by [`fit_gamma_mle`].
pub const MIN_GAMMA_SAMPLES: usize = 50;

/// Gamma distribution with scale `a` and shape `b`:
/// `f(x) = x^(b−1) e^(−x/a) / (a^b Γ(b))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaMargin {
    pub a: f64,
    pub b: f64,
}

impl GammaMargin {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let m = Self { a, b };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite() {
            Ok(())
        } else {
            Err(contract(format!("invalid gamma margin a={}, b={}", self.a, self.b)))
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        (self.b - 1.0) * x.ln() - x / self.a - self.b * self.a.ln() - ln_gamma(self.b)
    }
}

/// `P(b, x/a)`, the regularized lower incomplete gamma function.
///
/// Power series below `b + 1`, modified-Lentz continued fraction for the
/// upper tail above it.
pub fn gamma_cdf(x: f64, margin: GammaMargin) -> Result<f64> {
    margin.validate()?;
    if !(x >= 0.0) {
        return Err(contract(format!("gamma_cdf needs x >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let (s, z) = (margin.b, x / margin.a);
    let log_prefix = s * z.ln() - z - ln_gamma(s);
    if z < s + 1.0 {
        let (mut denom, mut term) = (s, 1.0 / s);
        let mut sum = term;
        for _ in 0..MAX_TERMS {
            denom += 1.0;
            term *= z / denom;
            sum += term;
            if term.abs() < sum.abs() * SERIES_EPS {
                return Ok((sum.ln() + log_prefix).exp().min(1.0));
            }
        }
    } else {
        let mut bn = z + 1.0 - s;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / bn;
        let mut h = d;
        for i in 1..MAX_TERMS {
            let an = -(i as f64) * (i as f64 - s);
            bn += 2.0;
            d = an * d + bn;
            if d.abs() < TINY {
                d = TINY;
            }
            c = bn + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < SERIES_EPS {
                return Ok((1.0 - (log_prefix.exp() * h)).max(0.0));
            }
        }
    }
    Err(numeric(format!("incomplete gamma did not converge for b={s}, z={z}")))
}

/// `Φ⁻¹(u)` for the standard normal distribution.
pub fn normal_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(contract(format!("normal_quantile needs 0 < u < 1, got {u}")));
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * u))
}

/// `ψ'(x)` for `x > 0`: recurrence up to 10, then the asymptotic series.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    let tail = r2 * r * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 * (1.0 / 30.0 - r2 * 5.0 / 66.0))));
    acc + r + 0.5 * r2 + tail
}

/// Maximum-likelihood Gamma fit.
///
/// The shape solves `ln b − ψ(b) = ln(mean) − mean(ln x)` by Newton's method
/// from the usual closed-form starting point; the scale is `mean / b`.
/// Sums run over sorted values so the result depends only on the multiset
/// of samples, not their order.
pub fn fit_gamma_mle(samples: &[f64]) -> Result<GammaMargin> {
    if samples.len() < MIN_GAMMA_SAMPLES {
        return Err(contract(format!(
            "gamma fit needs at least {MIN_GAMMA_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(v) = samples.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(contract(format!("gamma fit needs positive finite samples, got {v}")));
    }
    let n = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Err(degenerate(format!("samples are near-constant (variance {var:e})")));
    }
    let mean_log = sorted.iter().map(|v| v.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_log;
    if !(s > 0.0) {
        return Err(degenerate(format!("log-mean gap {s:e} is not positive")));
    }
    let mut b = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..100 {
        let f = b.ln() - digamma(b) - s;
        let slope = 1.0 / b - trigamma(b);
        let mut next = b - f / slope;
        if !(next > 0.0) {
            next = 0.5 * b;
        }
        if (next - b).abs() <= 1e-10 * b.max(1.0) {
            return GammaMargin::new(mean / next, next);
        }
        b = next;
    }
    Err(numeric(format!("gamma shape iteration did not converge (s = {s:e})")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    /// Adaptive Simpson with a Richardson-corrected stopping rule.
    fn adaptive(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64, depth: u32) -> f64 {
        let whole = simpson(f, lo, hi, 2);
        let mid = 0.5 * (lo + hi);
        let (l, r) = (simpson(f, lo, mid, 2), simpson(f, mid, hi, 2));
        if depth == 0 || (l + r - whole).abs() <= 15.0 * tol {
            return l + r + (l + r - whole) / 15.0;
        }
        adaptive(f, lo, mid, tol / 2.0, depth - 1) + adaptive(f, mid, hi, tol / 2.0, depth - 1)
    }

    fn normal_cdf(x: f64) -> f64 {
        0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
    }

    #[test]
    fn cdf_closed_forms() {
        let unit = GammaMargin::new(1.0, 1.0).unwrap();
        assert_eq!(gamma_cdf(0.0, GammaMargin::new(3.0, 0.5).unwrap()).unwrap(), 0.0);
        assert!((gamma_cdf(2f64.ln(), unit).unwrap() - 0.5).abs() < 1e-14);
        for x in [0.01, 0.3, 1.0, 2.5, 7.0, 30.0] {
            assert!((gamma_cdf(x, unit).unwrap() - (1.0 - (-x).exp())).abs() < 1e-14, "{x}");
        }
    }

    #[test]
    fn cdf_matches_quadrature_of_the_density() {
        let m = GammaMargin::new(2.0, 3.0).unwrap();
        let pdf = |t: f64| m.log_density(t).exp();
        for x in [0.1, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 12.0, 20.0, 40.0] {
            let q = adaptive(&pdf, 0.0, x, 1e-13, 40);
            assert!((gamma_cdf(x, m).unwrap() - q).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn cdf_agrees_with_library_on_both_branches() {
        for &(a, b) in &[(0.3, 0.2), (1.0, 1.7), (5.0, 40.0), (0.01, 300.0)] {
            let m = GammaMargin::new(a, b).unwrap();
            for k in 1..60 {
                let x = a * b * k as f64 / 20.0;
                let lib = statrs::function::gamma::gamma_lr(b, x / a);
                assert!((gamma_cdf(x, m).unwrap() - lib).abs() < 1e-12, "a={a} b={b} x={x}");
            }
        }
    }

    #[test]
    fn cdf_rejects_bad_inputs() {
        assert!(gamma_cdf(1.0, GammaMargin { a: 0.0, b: 1.0 }).is_err());
        assert!(gamma_cdf(1.0, GammaMargin { a: 1.0, b: -2.0 }).is_err());
        assert!(gamma_cdf(-1.0, GammaMargin { a: 1.0, b: 1.0 }).is_err());
    }

    #[test]
    fn quantile_symmetry_and_bisection() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        for u in [1e-7, 1e-4, 0.01, 0.2, 0.49] {
            assert!((normal_quantile(u).unwrap() + normal_quantile(1.0 - u).unwrap()).abs() < 1e-9);
        }
        for u in [0.975, 1e-7, 0.3, 0.999_999_9] {
            let (mut lo, mut hi) = (-10.0, 10.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if normal_cdf(mid) < u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert!((normal_quantile(u).unwrap() - 0.5 * (lo + hi)).abs() < 1e-8, "{u}");
        }
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn trigamma_matches_known_values() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-13);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-13);
        // ψ'(x) − ψ'(x+1) = 1/x²
        for x in [0.1, 2.3, 9.5, 40.0] {
            assert!((trigamma(x) - trigamma(x + 1.0) - 1.0 / (x * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_gamma_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = Gamma::new(3.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut rng)).collect();
        let m = fit_gamma_mle(&xs).unwrap();
        assert!((m.a - 2.0).abs() / 2.0 < 0.05 && (m.b - 3.0).abs() / 3.0 < 0.05, "{m:?}");
    }

    #[test]
    fn shape_matches_profile_likelihood_grid() {
        // The MLE depends only on the empirical distribution, so ten copies
        // of 1..5 meet the minimum sample count without moving the optimum.
        let xs: Vec<f64> = (0..10).flat_map(|_| [1.0, 2.0, 3.0, 4.0, 5.0]).collect();
        let mean = 3.0;
        let loglik = |b: f64| {
            let m = GammaMargin { a: mean / b, b };
            xs.iter().map(|&x| m.log_density(x)).sum::<f64>()
        };
        let best = (10..=20_000).map(|k| k as f64 * 1e-3).max_by(|p, q| loglik(*p).total_cmp(&loglik(*q))).unwrap();
        let fit = fit_gamma_mle(&xs).unwrap();
        assert!((fit.b - best).abs() < 1e-3, "{} vs {best}", fit.b);
        assert!((fit.a - mean / fit.b).abs() < 1e-12);
    }

    #[test]
    fn scaling_samples_scales_only_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = Gamma::new(1.4, 0.7).unwrap();
        let xs: Vec<f64> = (0..5000).map(|_| dist.sample(&mut rng)).collect();
        let base = fit_gamma_mle(&xs).unwrap();
        for c in [1e-3, 0.5, 17.0] {
            let scaled: Vec<f64> = xs.iter().map(|v| v * c).collect();
            let m = fit_gamma_mle(&scaled).unwrap();
            assert!((m.b - base.b).abs() < 1e-8);
            assert!((m.a - c * base.a).abs() < 1e-8 * c * base.a);
        }
    }

    #[test]
    fn fit_rejects_degenerate_and_short_input() {
        assert!(matches!(fit_gamma_mle(&[2.0; 80]), Err(crate::Error::Degenerate(_))));
        assert!(matches!(fit_gamma_mle(&[1.0; 10]), Err(crate::Error::Contract(_))));
        let mut xs = vec![1.0; 60];
        xs[3] = 0.0;
        assert!(fit_gamma_mle(&xs).is_err());
    }
}
