//! Gaussian copula with Gamma margins.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use super::special::{fit_gamma_mle, gamma_cdf, normal_quantile, GammaMargin};
use crate::error::{contract, degenerate, numeric, Error, Result};

/// Minimum number of observations accepted by [`fit_gaussian_copula`].
pub const MIN_COPULA_SAMPLES: usize = 200;
/// CDF values are kept inside `[CDF_CLAMP, 1 − CDF_CLAMP]` before `Φ⁻¹`.
pub const CDF_CLAMP: f64 = 1e-7;
const MIN_EIGENVALUE: f64 = 1e-10;
const JITTER_START: f64 = 1e-8;
const JITTER_ROUNDS: usize = 5;

/// `d` Gamma margins tied together by a correlation matrix `Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaModel {
    margins: Vec<GammaMargin>,
    corr: DMatrix<f64>,
}

impl CopulaModel {
    /// Checks that `corr` is a `d×d` correlation matrix with smallest
    /// eigenvalue above `1e-10`.
    pub fn new(margins: Vec<GammaMargin>, corr: DMatrix<f64>) -> Result<Self> {
        let d = margins.len();
        if d == 0 || corr.shape() != (d, d) {
            return Err(contract(format!("{d} margins with a {:?} correlation matrix", corr.shape())));
        }
        for m in &margins {
            GammaMargin::new(m.a, m.b)?;
        }
        for i in 0..d {
            if corr[(i, i)] != 1.0 {
                return Err(contract(format!("correlation diagonal entry {i} is {}", corr[(i, i)])));
            }
            for j in 0..d {
                let v = corr[(i, j)];
                if !(v.abs() <= 1.0) || v != corr[(j, i)] {
                    return Err(contract(format!("correlation entry ({i}, {j}) = {v} is invalid")));
                }
            }
        }
        let min_eig = min_eigenvalue(&corr);
        if !(min_eig > MIN_EIGENVALUE) {
            return Err(numeric(format!("correlation matrix has smallest eigenvalue {min_eig:e}")));
        }
        Ok(Self { margins, corr })
    }

    pub fn dim(&self) -> usize {
        self.margins.len()
    }

    pub fn margins(&self) -> &[GammaMargin] {
        &self.margins
    }

    pub fn corr(&self) -> &DMatrix<f64> {
        &self.corr
    }

    /// Gaussian scores `y_i = Φ⁻¹(F_i(x_i))` with the CDF clamped.
    pub fn gaussian_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(contract(format!("{}-vector for a {}-dimensional copula", x.len(), self.dim())));
        }
        x.iter().zip(&self.margins).map(|(&v, &m)| gaussian_score(v, m)).collect()
    }
}

fn gaussian_score(x: f64, margin: GammaMargin) -> Result<f64> {
    normal_quantile(gamma_cdf(x, margin)?.clamp(CDF_CLAMP, 1.0 - CDF_CLAMP))
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Sum that only depends on the multiset of terms.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Two-step estimate: Gamma MLE per column, then the empirical correlation
/// of the Gaussian scores.
///
/// `columns` holds the `d` variables, each with the same `n` observations.
/// A non-positive-definite correlation estimate is repaired by adding a
/// growing diagonal jitter (`1e-8`, `1e-7`, …, five tries) and rescaling to
/// unit diagonal.
pub fn fit_gaussian_copula<C: AsRef<[f64]>>(columns: &[C]) -> Result<CopulaModel> {
    let d = columns.len();
    if d < 2 {
        return Err(contract(format!("copula needs at least 2 columns, got {d}")));
    }
    let n = columns[0].as_ref().len();
    if columns.iter().any(|c| c.as_ref().len() != n) {
        return Err(contract("copula columns differ in length"));
    }
    if n < MIN_COPULA_SAMPLES {
        return Err(contract(format!("copula fit needs at least {MIN_COPULA_SAMPLES} rows, got {n}")));
    }

    let mut margins = Vec::with_capacity(d);
    let mut scores = Vec::with_capacity(d);
    for (j, col) in columns.iter().enumerate() {
        let col = col.as_ref();
        let margin = fit_gamma_mle(col).map_err(|e| match e {
            Error::Degenerate(msg) => degenerate(format!("column {j}: {msg}")),
            other => other,
        })?;
        let y = col.iter().map(|&x| gaussian_score(x, margin)).collect::<Result<Vec<_>>>()?;
        let mean = ordered_sum(y.clone()) / n as f64;
        let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
        if centered.iter().all(|&v| v == 0.0) {
            return Err(degenerate(format!("column {j}: Gaussian scores are constant")));
        }
        margins.push(margin);
        scores.push(centered);
    }

    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let c = ordered_sum(scores[i].iter().zip(&scores[j]).map(|(p, q)| p * q).collect());
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    let mut corr = unit_diagonal(&cov);

    let mut jitter = JITTER_START;
    let mut rounds = 0;
    while min_eigenvalue(&corr) <= MIN_EIGENVALUE {
        if rounds == JITTER_ROUNDS {
            return Err(numeric("correlation matrix could not be made positive definite"));
        }
        let mut bumped = corr.clone();
        for i in 0..d {
            bumped[(i, i)] += jitter;
        }
        corr = unit_diagonal(&bumped);
        jitter *= 10.0;
        rounds += 1;
    }
    CopulaModel::new(margins, corr)
}

/// `D^{-1/2} M D^{-1/2}` with an exact unit diagonal and entries clamped to `[−1, 1]`.
fn unit_diagonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            (m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt()).clamp(-1.0, 1.0)
        }
    })
}

/// `log f(x; θ)` with
/// `f = |Σ|^{−1/2} exp(−yᵀ(Σ⁻¹ − I)y / 2) ∏ f_i(x_i)`.
pub fn copula_log_density(x: &[f64], model: &CopulaModel) -> Result<f64> {
    if let Some(v) = x.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(contract(format!("copula density needs positive finite values, got {v}")));
    }
    let y = DVector::from_vec(model.gaussian_scores(x)?);
    let chol = Cholesky::new(model.corr.clone()).ok_or_else(|| numeric("correlation matrix is singular"))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = y.dot(&chol.solve(&y)) - y.dot(&y);
    let margins: f64 = x.iter().zip(&model.margins).map(|(&v, m)| m.log_density(v)).sum();
    Ok(-0.5 * log_det - 0.5 * quad + margins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, StandardNormal};

    /// Inverse Gamma CDF by bisection, used only to synthesize draws.
    fn gamma_inverse(u: f64, m: GammaMargin) -> f64 {
        let (mut lo, mut hi) = (0.0, m.a * (m.b + 40.0 * m.b.sqrt() + 40.0));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gamma_cdf(mid, m).unwrap() < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn normal_cdf(x: f64) -> f64 {
        0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
    }

    #[test]
    fn independent_columns_give_small_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cols: Vec<Vec<f64>> = [(1.0, 2.0), (0.5, 0.8), (3.0, 5.0)]
            .iter()
            .map(|&(a, b)| {
                let g = Gamma::new(b, a).unwrap();
                (0..100_000).map(|_| g.sample(&mut rng)).collect()
            })
            .collect();
        let m = fit_gaussian_copula(&cols).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(m.corr()[(i, j)].abs() <= 0.02, "{}", m.corr()[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn recovers_copula_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho: f64 = 0.7;
        let (m1, m2) = (GammaMargin::new(1.0, 2.0).unwrap(), GammaMargin::new(2.0, 3.0).unwrap());
        let (mut c1, mut c2) = (Vec::new(), Vec::new());
        for _ in 0..100_000 {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let z2 = rho * z1 + (1.0 - rho * rho).sqrt() * e;
            c1.push(gamma_inverse(normal_cdf(z1), m1));
            c2.push(gamma_inverse(normal_cdf(z2), m2));
        }
        let m = fit_gaussian_copula(&[c1, c2]).unwrap();
        let r = m.corr()[(0, 1)];
        assert!((0.68..=0.72).contains(&r), "{r}");
    }

    #[test]
    fn row_permutation_gives_identical_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Gamma::new(1.5, 1.0).unwrap();
        let n = 600;
        let base: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let cols = vec![
            base.clone(),
            base.iter().enumerate().map(|(i, v)| v + 0.3 * g.sample(&mut rng) + (i % 3) as f64).collect::<Vec<_>>(),
        ];
        let perm: Vec<usize> = (0..n).map(|i| (i * 7919) % n).collect();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let shuffled: Vec<Vec<f64>> = cols.iter().map(|c| perm.iter().map(|&i| c[i]).collect()).collect();
        assert_eq!(fit_gaussian_copula(&cols).unwrap(), fit_gaussian_copula(&shuffled).unwrap());
    }

    #[test]
    fn identical_columns_are_repaired() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Gamma::new(2.0, 1.0).unwrap();
        let col: Vec<f64> = (0..500).map(|_| g.sample(&mut rng)).collect();
        let m = fit_gaussian_copula(&[col.clone(), col]).unwrap();
        assert!(m.corr()[(0, 1)] >= 0.999 && m.corr()[(0, 1)] < 1.0);
        assert!(min_eigenvalue(m.corr()) > MIN_EIGENVALUE);
    }

    #[test]
    fn degenerate_column_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Gamma::new(2.0, 1.0).unwrap();
        let ok: Vec<f64> = (0..300).map(|_| g.sample(&mut rng)).collect();
        let err = fit_gaussian_copula(&[ok, vec![0.4; 300]]).unwrap_err();
        assert!(matches!(&err, Error::Degenerate(m) if m.contains("column 1")), "{err}");
        assert!(fit_gaussian_copula(&[vec![1.0; 100], vec![2.0; 100]]).is_err());
    }

    #[test]
    fn identity_correlation_reduces_to_margins() {
        let margins = vec![GammaMargin::new(1.0, 2.0).unwrap(), GammaMargin::new(0.5, 4.0).unwrap()];
        let m = CopulaModel::new(margins.clone(), DMatrix::identity(2, 2)).unwrap();
        let x = [0.7, 3.1];
        let want = margins[0].log_density(x[0]) + margins[1].log_density(x[1]);
        assert!((copula_log_density(&x, &m).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let unit = GammaMargin::new(1.0, 1.0).unwrap();
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 1.0]);
        let m = CopulaModel::new(vec![unit, unit], corr).unwrap();
        // midpoint rule on a log-spaced grid over [1e-4, 20]²
        let k = 400;
        let (lo, hi) = (1e-4f64.ln(), 20f64.ln());
        let step = (hi - lo) / k as f64;
        let nodes: Vec<(f64, f64)> = (0..k)
            .map(|i| {
                let t = lo + (i as f64 + 0.5) * step;
                (t.exp(), t.exp() * step)
            })
            .collect();
        let mut total = 0.0;
        for &(x1, w1) in &nodes {
            for &(x2, w2) in &nodes {
                total += copula_log_density(&[x1, x2], &m).unwrap().exp() * w1 * w2;
            }
        }
        assert!((total - 1.0).abs() <= 1e-2, "{total}");
    }

    #[test]
    fn density_matches_direct_evaluation() {
        let margins = vec![
            GammaMargin::new(1.3, 2.0).unwrap(),
            GammaMargin::new(0.4, 0.9).unwrap(),
            GammaMargin::new(2.0, 5.0).unwrap(),
        ];
        let s = [[1.0, 0.3, -0.2], [0.3, 1.0, 0.5], [-0.2, 0.5, 1.0]];
        let m = CopulaModel::new(margins.clone(), DMatrix::from_fn(3, 3, |i, j| s[i][j])).unwrap();
        let x = [1.1, 0.2, 9.0];
        let y: Vec<f64> = x
            .iter()
            .zip(&margins)
            .map(|(&v, &mg)| normal_quantile(gamma_cdf(v, mg).unwrap()).unwrap())
            .collect();
        // cofactor inverse and determinant of the 3×3 matrix
        let det = s[0][0] * (s[1][1] * s[2][2] - s[1][2] * s[2][1]) - s[0][1] * (s[1][0] * s[2][2] - s[1][2] * s[2][0])
            + s[0][2] * (s[1][0] * s[2][1] - s[1][1] * s[2][0]);
        let cof = |i: usize, j: usize| {
            let r: Vec<usize> = (0..3).filter(|&k| k != i).collect();
            let c: Vec<usize> = (0..3).filter(|&k| k != j).collect();
            let minor = s[r[0]][c[0]] * s[r[1]][c[1]] - s[r[0]][c[1]] * s[r[1]][c[0]];
            if (i + j) % 2 == 0 { minor } else { -minor }
        };
        let mut quad = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let inv = cof(j, i) / det - if i == j { 1.0 } else { 0.0 };
                quad += y[i] * inv * y[j];
            }
        }
        let dens: f64 = x
            .iter()
            .zip(&margins)
            .map(|(&v, mg)| v.powf(mg.b - 1.0) * (-v / mg.a).exp() / (mg.a.powf(mg.b) * statrs::function::gamma::gamma(mg.b)))
            .product();
        let direct = det.powf(-0.5) * (-0.5 * quad).exp() * dens;
        let got = copula_log_density(&x, &m).unwrap();
        assert!((got - direct.ln()).abs() < 1e-10, "{got} vs {}", direct.ln());
    }

    #[test]
    fn fitted_model_beats_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = Gamma::new(1.2, 1.0).unwrap();
        let n = 2000;
        let base: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|k| base.iter().map(|v| v * (1.0 + 0.2 * k as f64) + g.sample(&mut rng)).collect())
            .collect();
        let fit = fit_gaussian_copula(&cols).unwrap();
        let indep = CopulaModel::new(fit.margins().to_vec(), DMatrix::identity(3, 3)).unwrap();
        let ll = |m: &CopulaModel| -> f64 {
            (0..n).map(|i| copula_log_density(&[cols[0][i], cols[1][i], cols[2][i]], m).unwrap()).sum()
        };
        assert!(ll(&fit) >= ll(&indep) - 1e-6 * n as f64);
    }

    #[test]
    fn model_validation() {
        let m = vec![GammaMargin::new(1.0, 1.0).unwrap(); 2];
        assert!(CopulaModel::new(m.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).is_err());
        assert!(CopulaModel::new(m.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0])).is_err());
        assert!(CopulaModel::new(m, DMatrix::identity(3, 3)).is_err());
    }
}
