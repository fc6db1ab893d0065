//! Point estimation: the unified ratio estimator, first-stage strength
//! diagnostics, and back-of-envelope bias rules.

use crate::design::{DesignContext, GKind, GMatrix};
use crate::error::{Error, Result};
use crate::inference;

/// First-stage strength summary for the encoded design.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct FirstStage {
    /// Homoskedastic first-stage F: (x'Hx / K) / resid_var.
    pub f_stat: f64,
    /// Sample partial R-squared of the instruments: x'Hx / x'Mx.
    pub partial_r2: f64,
    /// Instrument-explained sum of squares x'Hx.
    pub leniency_ss: f64,
    /// Residual variance x'(M-H)x / (n - K - L).
    pub resid_var: f64,
}

/// First-stage diagnostics for treatment `x`.
///
/// Degenerate designs degrade gracefully: x with no instrument-explained
/// variation gives F = 0 and R^2 = 0; a perfectly fit x (zero residual
/// variance but positive signal) gives an infinite F and R^2 = 1.
pub fn first_stage(ctx: &DesignContext, x: &[f64]) -> Result<FirstStage> {
    let (n, k, l) = ctx.counts();
    if n <= k + l {
        return Err(Error::InsufficientDof(format!(
            "first stage needs n > K + L (n = {n}, K = {k}, L = {l})"
        )));
    }
    let hx = ctx.project_instruments(x)?;
    let mx = ctx.residualize_controls(x)?;
    let ss = dot(x, &hx).max(0.0);
    let total = dot(x, &mx).max(0.0);
    let resid = (total - ss).max(0.0);
    let resid_var = resid / (n - k - l) as f64;

    let scale = total.max(dot(x, x)).max(1.0);
    let tiny = 1e-12 * scale;
    let partial_r2 = if total <= tiny {
        0.0
    } else {
        (ss / total).min(1.0)
    };
    let f_stat = if k == 0 || ss <= tiny {
        0.0
    } else if resid_var <= tiny / n as f64 {
        f64::INFINITY
    } else {
        (ss / k as f64) / resid_var
    };
    Ok(FirstStage {
        f_stat,
        partial_r2,
        leniency_ss: ss,
        resid_var,
    })
}

/// One estimator's output on one design.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Estimate {
    /// Which G matrix produced this estimate.
    #[serde(rename = "estimator")]
    pub kind: GKind,
    /// Point estimate y'Gx / x'Gx; `None` when the denominator vanishes.
    pub beta: Option<f64>,
    pub numerator: f64,
    pub denominator: f64,
    /// Heterogeneity- and heteroskedasticity-robust standard error.
    pub se_robust: Option<f64>,
    /// Homoskedastic (delta-method) standard error, for comparison only.
    pub se_plain: Option<f64>,
    pub first_stage: FirstStage,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    /// Numerically realized tr(G).
    pub g_trace: f64,
}

/// Estimates beta for one kind, building the G matrix internally.
pub fn estimate(ctx: &DesignContext, y: &[f64], x: &[f64], kind: GKind) -> Result<Estimate> {
    let g = GMatrix::new(ctx, kind)?;
    estimate_with(&g, y, x)
}

/// Estimates beta with an already validated G matrix.
///
/// The ratio is computed from a single application of G to `x`; a
/// denominator below the relative tolerance yields `beta = None` (reported
/// as undefined, never as an infinity).
pub fn estimate_with(g: &GMatrix<'_>, y: &[f64], x: &[f64]) -> Result<Estimate> {
    let ctx = g.context();
    let (n, k, l) = ctx.counts();
    if y.len() != n || x.len() != n {
        return Err(Error::Dimension(format!(
            "outcome/treatment length {}/{} != n = {n}",
            y.len(),
            x.len()
        )));
    }
    let gx = g.apply(x)?;
    let numerator = dot(y, &gx);
    let denominator = dot(x, &gx);
    let scale = norm2(x) * norm2(&gx);
    let beta = if denominator.abs() <= 1e-12 * scale.max(1.0) {
        None
    } else {
        Some(numerator / denominator)
    };
    let fs = first_stage(ctx, x)?;
    let (se_robust, se_plain) = match beta {
        Some(b) => {
            let se = inference::robust_se(g, y, x, b)?;
            (Some(se.se_robust), Some(se.se_plain))
        }
        None => (None, None),
    };
    Ok(Estimate {
        kind: g.kind(),
        beta,
        numerator,
        denominator,
        se_robust,
        se_plain,
        first_stage: fs,
        n,
        k,
        l,
        g_trace: g.trace(),
    })
}

/// Estimates every requested kind on a shared design.
pub fn estimate_all(
    ctx: &DesignContext,
    y: &[f64],
    x: &[f64],
    kinds: &[GKind],
) -> Result<Vec<Estimate>> {
    kinds.iter().map(|&k| estimate(ctx, y, x, k)).collect()
}

/// Design-planning bias rules driven by target first-stage strength.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BiasRules {
    /// Bias of 2SLS relative to OLS: 1 / ((1 - R^2) E[F]).
    pub tsls_rel_bias: f64,
    /// Bias of JIVE relative to 2SLS: -E[F] L / ((E[F] - 1) K - L).
    /// `None` when the denominator vanishes (JIVE bias explodes).
    pub jive_rel_bias_vs_tsls: Option<f64>,
}

/// Evaluates the bias rules at an expected F, a first-stage partial
/// R-squared, and design counts K, L.
pub fn bias_rules(expected_f: f64, partial_r2: f64, k: usize, l: usize) -> Result<BiasRules> {
    if !(expected_f > 0.0) || !expected_f.is_finite() {
        return Err(Error::Config(format!(
            "expected F must be positive and finite, got {expected_f}"
        )));
    }
    if !(0.0..1.0).contains(&partial_r2) {
        return Err(Error::Config(format!(
            "partial R^2 must lie in [0, 1), got {partial_r2}"
        )));
    }
    let tsls_rel_bias = 1.0 / ((1.0 - partial_r2) * expected_f);
    let denom = (expected_f - 1.0) * k as f64 - l as f64;
    let jive = if denom.abs() < 1e-12 {
        None
    } else {
        Some(-expected_f * l as f64 / denom)
    };
    Ok(BiasRules {
        tsls_rel_bias,
        jive_rel_bias_vs_tsls: jive,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
