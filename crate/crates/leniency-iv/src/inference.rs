//! Inference: heterogeneity-robust standard errors, a weak-instrument test
//! built on null-imposed residuals, and the numerator/denominator correlation
//! diagnostic.

use crate::design::{GMatrix, DESK_SCALE_CAP};
use crate::error::{Error, Result};
use crate::estimate::dot;
use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

/// Correlation magnitude above which delta-method confidence intervals can
/// undercover badly when instruments are weak.
pub const RHO_FLAG_THRESHOLD: f64 = 0.76;

/// Variance estimate for one ratio estimate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VarianceComponents {
    /// Robust variance of the point estimate.
    pub sigma_hat_sq: f64,
    /// sqrt(sigma_hat_sq): robust to heteroskedasticity, treatment-effect
    /// heterogeneity, and many instruments (slightly conservative).
    pub se_robust: f64,
    /// Homoskedastic delta-method standard error, reported for comparison.
    pub se_plain: f64,
    /// Control-residualized estimation residuals: the i-th entry of
    /// M(y - x·beta).
    #[serde(skip)]
    pub residuals: Vec<f64>,
    /// Estimated relative-leniency weights (Gx)_i.
    #[serde(skip)]
    pub leniency: Vec<f64>,
}

/// Robust standard error of beta = y'Gx / x'Gx.
///
/// se^2 = sum_i eps_i^2 (Gx)_i^2 / (x'Gx)^2, with eps the control residual
/// of y - x·beta. The plain version replaces eps_i^2 by a pooled variance.
pub fn robust_se(g: &GMatrix<'_>, y: &[f64], x: &[f64], beta: f64) -> Result<VarianceComponents> {
    let ctx = g.context();
    let (n, _, l) = ctx.counts();
    if y.len() != n || x.len() != n {
        return Err(Error::Dimension(format!(
            "outcome/treatment length {}/{} != n = {n}",
            y.len(),
            x.len()
        )));
    }
    let gx = g.apply(x)?;
    let den = dot(x, &gx);
    if den.abs() <= 1e-12 * (dot(x, x).sqrt() * dot(&gx, &gx).sqrt()).max(1.0) {
        return Err(Error::Diagnostic(
            "variance undefined: x'Gx is numerically zero".into(),
        ));
    }
    let e: Vec<f64> = y.iter().zip(x).map(|(yi, xi)| yi - beta * xi).collect();
    let eps = ctx.residualize_controls(&e)?;
    let num: f64 = eps.iter().zip(&gx).map(|(e, g)| e * e * g * g).sum();
    let sigma_hat_sq = num / (den * den);

    let df = n.saturating_sub(l + 1).max(1) as f64;
    let pooled = dot(&eps, &eps) / df;
    let se_plain = (pooled * dot(&gx, &gx)).sqrt() / den.abs();

    Ok(VarianceComponents {
        sigma_hat_sq,
        se_robust: sigma_hat_sq.sqrt(),
        se_plain,
        residuals: eps,
        leniency: gx,
    })
}

/// Grid specification for confidence-set inversion: `points` evenly spaced
/// values spanning `[lo, hi]` inclusive.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi < lo || points == 0 {
            return Err(Error::Config(format!(
                "invalid grid {lo}:{hi}:{points}; need finite lo <= hi and points >= 1"
            )));
        }
        Ok(GridSpec { lo, hi, points })
    }

    fn value(&self, idx: usize) -> f64 {
        if self.points == 1 {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * idx as f64 / (self.points - 1) as f64
        }
    }
}

/// One maximal run of non-rejected grid values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    /// True when the run touches the grid edge, so the set may extend past it.
    pub open_lower: bool,
    pub open_upper: bool,
}

/// Weak-instrument test result with an inverted confidence set.
#[derive(Debug, Clone, serde::Serialize)]
pub struct WeakIvTest {
    pub beta0: f64,
    pub stat: f64,
    pub p: f64,
    pub level: f64,
    pub grid: GridSpec,
    /// Union of intervals where the test does not reject at `level`.
    pub confidence_set: Vec<ConfidenceInterval>,
    /// Every grid value was rejected.
    pub empty: bool,
}

/// Precomputed quadratic coefficients of the statistic in beta0.
///
/// With residuals my = My, mx = Mx and weights gx = Gx, the statistic is
/// (N1 - b·N2) / sqrt(A - 2b·B + b^2·C), so repeated evaluation over a grid
/// is O(1) per point.
struct StatCoefficients {
    n1: f64,
    n2: f64,
    a: f64,
    b: f64,
    c: f64,
    scale: f64,
}

impl StatCoefficients {
    fn build(g: &GMatrix<'_>, y: &[f64], x: &[f64]) -> Result<Self> {
        let ctx = g.context();
        let gx = g.apply(x)?;
        let my = ctx.residualize_controls(y)?;
        let mx = ctx.residualize_controls(x)?;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            let w = gx[i] * gx[i];
            a += w * my[i] * my[i];
            b += w * my[i] * mx[i];
            c += w * mx[i] * mx[i];
        }
        let scale = (a.max(c)).max(1e-300);
        Ok(StatCoefficients {
            n1: dot(y, &gx),
            n2: dot(x, &gx),
            a,
            b,
            c,
            scale,
        })
    }

    fn stat(&self, beta0: f64) -> f64 {
        let num = self.n1 - beta0 * self.n2;
        let var = self.a - 2.0 * beta0 * self.b + beta0 * beta0 * self.c;
        let tiny = 1e-14 * self.scale * (1.0 + beta0 * beta0);
        if var <= tiny {
            // Degenerate null variance: a zero numerator is a perfect fit
            // (no evidence against beta0), anything else is infinite evidence.
            if num.abs() <= tiny.sqrt() {
                return 0.0;
            }
            return num.signum() * f64::INFINITY;
        }
        num / var.sqrt()
    }
}

fn two_sided_p(stat: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - normal.cdf(stat.abs()))).clamp(0.0, 1.0)
}

/// Tests H0: beta = beta0 with null-imposed residuals and inverts the test
/// over a grid to produce a confidence set.
///
/// The statistic is (y - x·beta0)'Gx / sqrt(sum_i eps0_i^2 (Gx)_i^2) with
/// eps0 the control residual of y - x·beta0; unlike the Wald ratio it stays
/// valid when instruments are weak. When `grid` is `None` the default spans
/// the point estimate +/- 10 robust standard errors with 401 points.
pub fn weak_iv_test(
    g: &GMatrix<'_>,
    y: &[f64],
    x: &[f64],
    beta0: f64,
    grid: Option<GridSpec>,
    level: f64,
) -> Result<WeakIvTest> {
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::Config(format!(
            "test level must lie in (0, 1), got {level}"
        )));
    }
    let co = StatCoefficients::build(g, y, x)?;
    let grid = match grid {
        Some(s) => s,
        None => {
            if co.n2.abs() <= 1e-12 * co.scale.sqrt() {
                return Err(Error::Diagnostic(
                    "default grid needs a defined point estimate; pass an explicit grid".into(),
                ));
            }
            let beta_hat = co.n1 / co.n2;
            let se = robust_se(g, y, x, beta_hat)?.se_robust;
            let half = (10.0 * se).max(1e-8 * (1.0 + beta_hat.abs()));
            GridSpec::new(beta_hat - half, beta_hat + half, 401)?
        }
    };

    let mut intervals = Vec::new();
    let mut run_start: Option<usize> = None;
    for idx in 0..grid.points {
        let b = grid.value(idx);
        let accepted = two_sided_p(co.stat(b)) >= level;
        match (accepted, run_start) {
            (true, None) => run_start = Some(idx),
            (false, Some(s)) => {
                intervals.push(make_interval(&grid, s, idx - 1));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        intervals.push(make_interval(&grid, s, grid.points - 1));
    }

    let stat = co.stat(beta0);
    Ok(WeakIvTest {
        beta0,
        stat,
        p: two_sided_p(stat),
        level,
        grid,
        empty: intervals.is_empty(),
        confidence_set: intervals,
    })
}

fn make_interval(grid: &GridSpec, first: usize, last: usize) -> ConfidenceInterval {
    ConfidenceInterval {
        lo: grid.value(first),
        hi: grid.value(last),
        open_lower: first == 0,
        open_upper: last == grid.points - 1,
    }
}

/// Plug-in covariance matrix of the estimator's numerator and denominator
/// (y'Gx, x'Gx), as a symmetric 2x2 (s11, s12, s22).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SigmaHat {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

/// Estimates SigmaHat by the plug-in described in the module docs.
///
/// Signal terms come from fitted values: with q = x - (M-H)x the fitted
/// treatment, lhat = G q is the leniency weight and rhat = G'q its transpose
/// analogue; per-observation variances plug in products of the joint
/// residuals nu = (M-H)x and nu_y = (M-H)y. The linear component is then a
/// Gram matrix (hence PSD); the many-instrument component adds the i != j
/// double sums in G_ij^2 and G_ij G_ji. Requires materializing G, so n is
/// capped at the desk-scale limit.
pub fn sigma_components(g: &GMatrix<'_>, y: &[f64], x: &[f64]) -> Result<SigmaHat> {
    let ctx = g.context();
    let n = ctx.n();
    if n > DESK_SCALE_CAP {
        return Err(Error::Capacity(format!(
            "covariance diagnostic materializes an n x n matrix; n = {n} exceeds the cap {DESK_SCALE_CAP}"
        )));
    }
    if y.len() != n || x.len() != n {
        return Err(Error::Dimension("outcome/treatment length != n".into()));
    }

    let nu_x = ctx.annihilate_design(x)?;
    let nu_y = ctx.annihilate_design(y)?;
    let q_x: Vec<f64> = x.iter().zip(&nu_x).map(|(v, r)| v - r).collect();
    let q_y: Vec<f64> = y.iter().zip(&nu_y).map(|(v, r)| v - r).collect();

    let gd = materialize(g)?;
    let lhat = g.apply(&q_x)?;
    let mut r_x = vec![0.0; n];
    let mut r_y = vec![0.0; n];
    for i in 0..n {
        let mut sx = 0.0;
        let mut sy = 0.0;
        for j in 0..n {
            let gji = gd[(j, i)];
            sx += gji * q_x[j];
            sy += gji * q_y[j];
        }
        r_x[i] = sx;
        r_y[i] = sy;
    }

    // Linear (signal x residual) component: exact Gram of (a, b).
    let (mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0);
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        a[i] = lhat[i] * nu_y[i] + r_y[i] * nu_x[i];
        b[i] = (lhat[i] + r_x[i]) * nu_x[i];
        s11 += a[i] * a[i];
        s12 += a[i] * b[i];
        s22 += b[i] * b[i];
    }

    // Many-instrument component: i != j double sums over residual products.
    let sy: Vec<f64> = nu_y.iter().map(|v| v * v).collect();
    let sx: Vec<f64> = nu_x.iter().map(|v| v * v).collect();
    let sxy: Vec<f64> = nu_y.iter().zip(&nu_x).map(|(a, b)| a * b).collect();
    let (mut t11, mut t12, mut t22) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let gij = gd[(i, j)];
            let g2 = gij * gij;
            let gt = gij * gd[(j, i)];
            t11 += g2 * sy[i] * sx[j] + gt * sxy[i] * sxy[j];
            t12 += (g2 + gt) * sxy[i] * sx[j];
            t22 += (g2 + gt) * sx[i] * sx[j];
        }
    }

    Ok(SigmaHat {
        s11: s11 + t11,
        s12: s12 + t12,
        s22: s22 + t22,
    })
}

pub(crate) fn materialize(g: &GMatrix<'_>) -> Result<DMatrix<f64>> {
    let n = g.context().n();
    let mut gd = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = g.apply(&e)?;
        e[j] = 0.0;
        for i in 0..n {
            gd[(i, j)] = col[i];
        }
    }
    Ok(gd)
}

/// Correlation between the mean-zero parts of the numerator and denominator,
/// evaluated at a hypothesized estimand value.
pub fn rho_from_sigma(sigma: &SigmaHat, beta_star: f64) -> Result<f64> {
    let var1 = sigma.s11 - 2.0 * beta_star * sigma.s12 + beta_star * beta_star * sigma.s22;
    let denom = sigma.s22 * var1;
    if !(denom > 0.0) {
        return Err(Error::Diagnostic(format!(
            "correlation diagnostic unavailable: non-positive variance estimate ({denom:.3e})"
        )));
    }
    Ok(((sigma.s12 - beta_star * sigma.s22) / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Correlation diagnostic over a point or an interval of estimand values.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RhoDiagnostic {
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub rho_at_lo: f64,
    pub rho_at_hi: f64,
    /// Largest |rho| over [beta_lo, beta_hi]; rho is monotone in the
    /// estimand, so the extremes sit at the endpoints.
    pub max_abs_rho: f64,
    /// Delta-method intervals may undercover when this is set.
    pub flag_076: bool,
    pub sigma: SigmaHat,
}

/// Evaluates the correlation diagnostic over `[beta_lo, beta_hi]`
/// (pass `beta_lo == beta_hi` for a point evaluation).
pub fn rho_diagnostic(
    g: &GMatrix<'_>,
    y: &[f64],
    x: &[f64],
    beta_lo: f64,
    beta_hi: f64,
) -> Result<RhoDiagnostic> {
    if !(beta_lo.is_finite() && beta_hi.is_finite()) || beta_hi < beta_lo {
        return Err(Error::Config(format!(
            "invalid estimand interval [{beta_lo}, {beta_hi}]"
        )));
    }
    let sigma = sigma_components(g, y, x)?;
    let rho_at_lo = rho_from_sigma(&sigma, beta_lo)?;
    let rho_at_hi = rho_from_sigma(&sigma, beta_hi)?;
    let max_abs_rho = rho_at_lo.abs().max(rho_at_hi.abs());
    Ok(RhoDiagnostic {
        beta_lo,
        beta_hi,
        rho_at_lo,
        rho_at_hi,
        max_abs_rho,
        flag_076: max_abs_rho >= RHO_FLAG_THRESHOLD,
        sigma,
    })
}

/// Descriptive decomposition of the robust variance numerator, evaluated at
/// a given estimand value. Diagnostic only: the headline standard error does
/// not use it.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct NumeratorBreakdown {
    /// Baseline term sum_i lhat_i^2 var(y_i - x_i beta).
    pub main: f64,
    /// Extra variation from effect heterogeneity across complier groups.
    pub heterogeneity: f64,
    /// Many-instrument (leniency-estimation) term.
    pub bekker: f64,
}

/// Computes the desk-scale variance breakdown at `beta_star`.
pub fn variance_breakdown(
    g: &GMatrix<'_>,
    y: &[f64],
    x: &[f64],
    beta_star: f64,
) -> Result<NumeratorBreakdown> {
    let ctx = g.context();
    let n = ctx.n();
    if n > DESK_SCALE_CAP {
        return Err(Error::Capacity(format!(
            "variance breakdown materializes an n x n matrix; n = {n} exceeds the cap {DESK_SCALE_CAP}"
        )));
    }
    let nu_x = ctx.annihilate_design(x)?;
    let nu_y = ctx.annihilate_design(y)?;
    let nu_e: Vec<f64> = nu_y
        .iter()
        .zip(&nu_x)
        .map(|(a, b)| a - beta_star * b)
        .collect();
    let q_x: Vec<f64> = x.iter().zip(&nu_x).map(|(v, r)| v - r).collect();
    let q_e: Vec<f64> = y
        .iter()
        .zip(x)
        .zip(&nu_e)
        .map(|((yi, xi), r)| yi - beta_star * xi - r)
        .collect();

    let gd = materialize(g)?;
    let lhat = g.apply(&q_x)?;
    let mut r_e = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += gd[(j, i)] * q_e[j];
        }
        r_e[i] = s;
    }

    let mut main = 0.0;
    let mut linear = 0.0;
    for i in 0..n {
        let base = lhat[i] * nu_e[i];
        main += base * base;
        let full = base + r_e[i] * nu_x[i];
        linear += full * full;
    }

    let se2: Vec<f64> = nu_e.iter().map(|v| v * v).collect();
    let sx2: Vec<f64> = nu_x.iter().map(|v| v * v).collect();
    let sex: Vec<f64> = nu_e.iter().zip(&nu_x).map(|(a, b)| a * b).collect();
    let mut bekker = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let gij = gd[(i, j)];
            bekker += gij * gij * se2[i] * sx2[j] + gij * gd[(j, i)] * sex[i] * sex[j];
        }
    }

    Ok(NumeratorBreakdown {
        main,
        heterogeneity: linear - main,
        bekker,
    })
}
