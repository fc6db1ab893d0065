//! Design checklist steps: covariate balance, the average-monotonicity test
//! on transformed outcomes, and complier characterization.
//!
//! Every operation here is a re-targeted run of the main estimator: the
//! outcome (and sometimes the treatment coding) is transformed, but the
//! instruments, controls, and G matrix are identical to the headline
//! specification. Each report carries the G probe checksum so callers can
//! assert that identity.

use crate::data::{prune, Dataset};
use crate::design::{DesignContext, GKind, GMatrix};
use crate::error::{Error, Result};
use crate::estimate::dot;
use crate::inference::robust_se;
use statrs::distribution::{ContinuousCDF, Normal};

/// One covariate's balance regression: the covariate as outcome, everything
/// else as in the main specification.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub coefficient: Option<f64>,
    pub se: Option<f64>,
    pub n_used: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    /// Probe checksum of the G matrix used; compare with the main estimate's.
    pub g_checksum: f64,
}

/// Balance check: regresses each covariate on the treatment with the main
/// instruments and controls.
///
/// Covariates with missing values are handled by subsetting to observed
/// rows, re-pruning, and rebuilding the design on the subsample; the row's
/// `n_used` reports the surviving count. Constant covariates and degenerate
/// subsamples produce a note row instead of an estimate.
pub fn balance(ds: &Dataset, g: &GMatrix<'_>, covariates: &[String]) -> Result<BalanceReport> {
    require_matching(ds, g)?;
    let x = &ds.treatment;
    let mut rows = Vec::with_capacity(covariates.len());
    for name in covariates {
        let cov = ds
            .covariate(name)
            .ok_or_else(|| Error::Schema(format!("covariate column '{name}' not found")))?;
        let mask = cov.observed_mask();
        let n_obs = mask.iter().filter(|&&m| m).count();
        let row = if n_obs == 0 {
            BalanceRow {
                covariate: name.clone(),
                coefficient: None,
                se: None,
                n_used: 0,
                note: Some("no observed values".into()),
            }
        } else if n_obs == ds.n() {
            balance_row(name, g, &cov.values, x, ds.n())
        } else {
            match resubsampled(ds, &mask) {
                Ok((sub, sub_ctx)) => {
                    let g2 = match GMatrix::new(&sub_ctx, GKind::Ujive) {
                        Ok(g2) => g2,
                        Err(e) if is_note(&e) => {
                            rows.push(note_row(name, 0, &e));
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let v2 = &sub.covariate(name).expect("subset keeps columns").values;
                    balance_row(name, &g2, v2, &sub.treatment, sub.n())
                }
                Err(e) if is_note(&e) => note_row(name, 0, &e),
                Err(e) => return Err(e),
            }
        };
        rows.push(row);
    }
    Ok(BalanceReport {
        rows,
        g_checksum: g.probe_checksum()?,
    })
}

fn balance_row(name: &str, g: &GMatrix<'_>, v: &[f64], x: &[f64], n_used: usize) -> BalanceRow {
    if is_constant(v) {
        return BalanceRow {
            covariate: name.to_string(),
            coefficient: None,
            se: None,
            n_used,
            note: Some("constant on the estimation sample".into()),
        };
    }
    match ratio_with_se(g, v, x) {
        Ok((beta, se)) => BalanceRow {
            covariate: name.to_string(),
            coefficient: Some(beta),
            se: Some(se),
            n_used,
            note: None,
        },
        Err(e) => BalanceRow {
            covariate: name.to_string(),
            coefficient: None,
            se: None,
            n_used,
            note: Some(e.to_string()),
        },
    }
}

/// Binning rule for the monotonicity test.
#[derive(Debug, Clone)]
pub enum BinSpec {
    /// One bin per distinct outcome value if there are at most 12,
    /// otherwise deciles.
    Auto,
    /// One bin per distinct value; errors if the count exceeds `max_distinct`.
    DistinctValues { max_distinct: usize },
    /// Equal-probability bins split at sample quantiles.
    Quantiles(usize),
    /// Caller-provided `[lo, hi)` intervals (last interval closed). They
    /// must partition the observed outcome support.
    Explicit(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Bin {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Assigns observations to bins.
#[derive(Debug)]
enum BinIndex {
    /// Sorted distinct values; membership by exact match.
    Exact(Vec<f64>),
    /// Interior cut points; bin j holds y with edges[j-1] <= y < edges[j].
    Edges(Vec<f64>),
    Explicit(Vec<(f64, f64)>),
}

#[derive(Debug)]
pub(crate) struct Bins {
    index: BinIndex,
    pub bins: Vec<Bin>,
}

impl Bins {
    fn assign(&self, y: f64) -> Option<usize> {
        match &self.index {
            BinIndex::Exact(vals) => vals.binary_search_by(|v| v.total_cmp(&y)).ok(),
            BinIndex::Edges(edges) => Some(edges.partition_point(|e| *e <= y)),
            BinIndex::Explicit(ivs) => {
                let last = ivs.len() - 1;
                ivs.iter().position(|&(lo, hi)| {
                    y >= lo && (y < hi || (ivs[last] == (lo, hi) && y <= hi))
                })
            }
        }
    }
}

pub(crate) fn resolve_bins(y: &[f64], spec: &BinSpec) -> Result<Bins> {
    if y.is_empty() {
        return Err(Error::EmptyData("no outcome values to bin".into()));
    }
    let mut sorted: Vec<f64> = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct: Vec<f64> = Vec::new();
    for &v in &sorted {
        if distinct.last().map(|&d| d != v).unwrap_or(true) {
            distinct.push(v);
        }
    }
    let index = match spec {
        BinSpec::Auto => {
            if distinct.len() <= 12 {
                BinIndex::Exact(distinct.clone())
            } else {
                BinIndex::Edges(quantile_edges(&sorted, 10))
            }
        }
        BinSpec::DistinctValues { max_distinct } => {
            if distinct.len() > *max_distinct {
                return Err(Error::Config(format!(
                    "outcome has {} distinct values (cap {max_distinct}); use quantile bins",
                    distinct.len()
                )));
            }
            BinIndex::Exact(distinct.clone())
        }
        BinSpec::Quantiles(b) => {
            if *b == 0 {
                return Err(Error::Config("quantile bin count must be positive".into()));
            }
            BinIndex::Edges(quantile_edges(&sorted, *b))
        }
        BinSpec::Explicit(ivs) => {
            if ivs.is_empty() {
                return Err(Error::Config("explicit bin list is empty".into()));
            }
            for &(lo, hi) in ivs {
                if !(lo.is_finite() && hi.is_finite()) || hi < lo {
                    return Err(Error::Config(format!("invalid bin [{lo}, {hi})")));
                }
            }
            BinIndex::Explicit(ivs.clone())
        }
    };

    let bins = match &index {
        BinIndex::Exact(vals) => vals
            .iter()
            .map(|&v| Bin {
                label: format!("{v}"),
                lo: v,
                hi: v,
                count: 0,
            })
            .collect(),
        BinIndex::Edges(edges) => {
            let lo0 = sorted[0];
            let hi_last = *sorted.last().expect("nonempty");
            let mut bins = Vec::with_capacity(edges.len() + 1);
            for j in 0..=edges.len() {
                let lo = if j == 0 { lo0 } else { edges[j - 1] };
                let hi = if j == edges.len() { hi_last } else { edges[j] };
                bins.push(Bin {
                    label: format!("[{lo}, {hi}{}", if j == edges.len() { "]" } else { ")" }),
                    lo,
                    hi,
                    count: 0,
                });
            }
            bins
        }
        BinIndex::Explicit(ivs) => ivs
            .iter()
            .enumerate()
            .map(|(j, &(lo, hi))| Bin {
                label: format!("[{lo}, {hi}{}", if j + 1 == ivs.len() { "]" } else { ")" }),
                lo,
                hi,
                count: 0,
            })
            .collect(),
    };
    let mut out = Bins { index, bins };
    for &v in y {
        match out.assign(v) {
            Some(idx) if idx < out.bins.len() => out.bins[idx].count += 1,
            _ => {
                return Err(Error::Config(format!(
                    "outcome value {v} falls outside every bin; bins must partition the support"
                )))
            }
        }
    }
    Ok(out)
}

/// Interior cut points at sample quantiles j/b, nearest-rank, deduplicated.
fn quantile_edges(sorted: &[f64], b: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::new();
    for j in 1..b {
        let rank = (j * n) / b;
        let e = sorted[rank.min(n - 1)];
        if edges.last().map(|&last| e > last).unwrap_or(true) && e > sorted[0] {
            edges.push(e);
        }
    }
    edges
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BinRow {
    #[serde(flatten)]
    pub bin: Bin,
    /// Estimated treated-complier outcome mass for this bin.
    pub treated_mass: Option<f64>,
    pub treated_se: Option<f64>,
    /// Estimated untreated-complier outcome mass for this bin.
    pub untreated_mass: Option<f64>,
    pub untreated_se: Option<f64>,
    /// Set when the mass is significantly negative at the report's level.
    pub treated_flag: bool,
    pub untreated_flag: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MonotonicityReport {
    pub rows: Vec<BinRow>,
    /// Sum of treated-complier masses; 1 up to float roundoff by linearity.
    pub treated_mass_sum: f64,
    pub untreated_mass_sum: f64,
    pub level: f64,
    pub any_flag: bool,
    pub g_checksum: f64,
}

/// Average-monotonicity test: estimates the treated- and untreated-complier
/// outcome distribution bin by bin and flags significantly negative masses.
///
/// For bin b the treated mass replaces the outcome with 1{y in b}*x and the
/// untreated mass with 1{y in b}*(x-1); the untreated regressions code the
/// treatment as x-1 so that each family of masses sums to one mechanically.
/// A genuine density cannot be negative, so significantly negative masses
/// indicate monotonicity violations (defiers whose effects vary with the
/// outcome).
pub fn monotonicity(
    g: &GMatrix<'_>,
    y: &[f64],
    x: &[f64],
    spec: &BinSpec,
    level: f64,
) -> Result<MonotonicityReport> {
    require_ujive(g)?;
    require_binary(x)?;
    let n = g.context().n();
    if y.len() != n || x.len() != n {
        return Err(Error::Dimension("outcome/treatment length != n".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {level}")));
    }
    let z = Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(1.0 - level / 2.0);

    let bins = resolve_bins(y, spec)?;
    let assignments: Vec<usize> = y
        .iter()
        .map(|&v| bins.assign(v).expect("validated partition"))
        .collect();
    let x_minus: Vec<f64> = x.iter().map(|&v| v - 1.0).collect();

    let mut rows = Vec::with_capacity(bins.bins.len());
    let mut treated_sum = 0.0;
    let mut untreated_sum = 0.0;
    let mut any_flag = false;
    for (idx, bin) in bins.bins.iter().enumerate() {
        if bin.count == 0 {
            rows.push(BinRow {
                bin: bin.clone(),
                treated_mass: None,
                treated_se: None,
                untreated_mass: None,
                untreated_se: None,
                treated_flag: false,
                untreated_flag: false,
                note: Some("empty bin".into()),
            });
            continue;
        }
        let vt: Vec<f64> = assignments
            .iter()
            .zip(x)
            .map(|(&a, &xi)| if a == idx { xi } else { 0.0 })
            .collect();
        let vu: Vec<f64> = assignments
            .iter()
            .zip(&x_minus)
            .map(|(&a, &xi)| if a == idx { xi } else { 0.0 })
            .collect();
        let (tm, ts) = ratio_with_se(g, &vt, x)?;
        let (um, us) = ratio_with_se(g, &vu, &x_minus)?;
        treated_sum += tm;
        untreated_sum += um;
        let tflag = tm < -z * ts;
        let uflag = um < -z * us;
        any_flag |= tflag || uflag;
        rows.push(BinRow {
            bin: bin.clone(),
            treated_mass: Some(tm),
            treated_se: Some(ts),
            untreated_mass: Some(um),
            untreated_se: Some(us),
            treated_flag: tflag,
            untreated_flag: uflag,
            note: None,
        });
    }
    Ok(MonotonicityReport {
        rows,
        treated_mass_sum: treated_sum,
        untreated_mass_sum: untreated_sum,
        level,
        any_flag,
        g_checksum: g.probe_checksum()?,
    })
}

/// One covariate's complier profile.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ComplierRow {
    pub covariate: String,
    /// Mean over the rows actually used for this covariate.
    pub sample_mean: Option<f64>,
    /// Pooled complier mean (treated and untreated compliers combined).
    pub complier_mean: Option<f64>,
    pub se: Option<f64>,
    pub treated_mean: Option<f64>,
    pub treated_se: Option<f64>,
    pub untreated_mean: Option<f64>,
    pub untreated_se: Option<f64>,
    pub n_used: usize,
    /// For binary covariates: pooled mean within [0 - 2se, 1 + 2se].
    pub within_logical_bounds: Option<bool>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ComplierReport {
    pub rows: Vec<ComplierRow>,
    pub g_checksum: f64,
}

/// Complier characterization: for each covariate v, the pooled complier mean
/// regresses v*xt on xt (xt = 2x - 1), and the treated/untreated means use
/// outcomes v*x and v*(x-1) with matching treatment codings. The pooled
/// estimate equals the denominator-weighted average of the treated and
/// untreated estimates by construction.
pub fn complier_means(
    ds: &Dataset,
    g: &GMatrix<'_>,
    covariates: &[String],
) -> Result<ComplierReport> {
    let ctx = require_matching(ds, g)?;
    require_binary(&ds.treatment)?;
    require_intercept_span(g, ctx)?;
    let mut rows = Vec::with_capacity(covariates.len());
    for name in covariates {
        let cov = ds
            .covariate(name)
            .ok_or_else(|| Error::Schema(format!("covariate column '{name}' not found")))?;
        let mask = cov.observed_mask();
        let n_obs = mask.iter().filter(|&&m| m).count();
        let row = if n_obs == 0 {
            ComplierRow {
                covariate: name.clone(),
                sample_mean: None,
                complier_mean: None,
                se: None,
                treated_mean: None,
                treated_se: None,
                untreated_mean: None,
                untreated_se: None,
                n_used: 0,
                within_logical_bounds: None,
                note: Some("no observed values".into()),
            }
        } else if n_obs == ds.n() {
            complier_row(name, g, &cov.values, &ds.treatment, ds.n())
        } else {
            match resubsampled(ds, &mask) {
                Ok((sub, sub_ctx)) => match GMatrix::new(&sub_ctx, GKind::Ujive) {
                    Ok(g2) => {
                        if let Err(e) = require_intercept_span(&g2, &sub_ctx) {
                            complier_note_row(name, 0, &e)
                        } else {
                            let v2 = &sub.covariate(name).expect("subset keeps columns").values;
                            complier_row(name, &g2, v2, &sub.treatment, sub.n())
                        }
                    }
                    Err(e) if is_note(&e) => complier_note_row(name, 0, &e),
                    Err(e) => return Err(e),
                },
                Err(e) if is_note(&e) => complier_note_row(name, 0, &e),
                Err(e) => return Err(e),
            }
        };
        rows.push(row);
    }
    Ok(ComplierReport {
        rows,
        g_checksum: g.probe_checksum()?,
    })
}

fn complier_row(name: &str, g: &GMatrix<'_>, v: &[f64], x: &[f64], n_used: usize) -> ComplierRow {
    let xt: Vec<f64> = x.iter().map(|&xi| 2.0 * xi - 1.0).collect();
    let x_minus: Vec<f64> = x.iter().map(|&xi| xi - 1.0).collect();
    let vp: Vec<f64> = v.iter().zip(&xt).map(|(a, b)| a * b).collect();
    let vt: Vec<f64> = v.iter().zip(x).map(|(a, b)| a * b).collect();
    let vu: Vec<f64> = v.iter().zip(&x_minus).map(|(a, b)| a * b).collect();

    let pooled = ratio_with_se(g, &vp, &xt);
    let treated = ratio_with_se(g, &vt, x);
    let untreated = ratio_with_se(g, &vu, &x_minus);
    let sample_mean = v.iter().sum::<f64>() / n_used as f64;

    let (complier_mean, se, note) = match &pooled {
        Ok((b, s)) => (Some(*b), Some(*s), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    let binary = v.iter().all(|&vi| vi == 0.0 || vi == 1.0);
    let within = match (binary, complier_mean, se) {
        (true, Some(m), Some(s)) => Some(m >= -2.0 * s && m <= 1.0 + 2.0 * s),
        _ => None,
    };
    ComplierRow {
        covariate: name.to_string(),
        sample_mean: Some(sample_mean),
        complier_mean,
        se,
        treated_mean: treated.as_ref().ok().map(|t| t.0),
        treated_se: treated.as_ref().ok().map(|t| t.1),
        untreated_mean: untreated.as_ref().ok().map(|t| t.0),
        untreated_se: untreated.as_ref().ok().map(|t| t.1),
        n_used,
        within_logical_bounds: within,
        note,
    }
}

fn complier_note_row(name: &str, n_used: usize, e: &Error) -> ComplierRow {
    ComplierRow {
        covariate: name.to_string(),
        sample_mean: None,
        complier_mean: None,
        se: None,
        treated_mean: None,
        treated_se: None,
        untreated_mean: None,
        untreated_se: None,
        n_used,
        within_logical_bounds: None,
        note: Some(e.to_string()),
    }
}

/// Ratio estimate of outcome v on treatment t plus its robust se.
fn ratio_with_se(g: &GMatrix<'_>, v: &[f64], t: &[f64]) -> Result<(f64, f64)> {
    let gt = g.apply(t)?;
    let den = dot(t, &gt);
    let scale = (dot(t, t).sqrt() * dot(&gt, &gt).sqrt()).max(1.0);
    if den.abs() <= 1e-12 * scale {
        return Err(Error::Diagnostic(
            "transformed-treatment denominator is numerically zero".into(),
        ));
    }
    let beta = dot(v, &gt) / den;
    let se = robust_se(g, v, t, beta)?.se_robust;
    Ok((beta, se))
}

fn resubsampled(ds: &Dataset, mask: &[bool]) -> Result<(Dataset, DesignContext)> {
    let sub = ds.subset(mask)?;
    let (pruned, _report) = prune(&sub)?;
    let ctx = DesignContext::build(&pruned)?;
    Ok((pruned, ctx))
}

fn require_matching<'a>(ds: &Dataset, g: &'a GMatrix<'_>) -> Result<&'a DesignContext> {
    require_ujive(g)?;
    let ctx = g.context();
    if ds.n() != ctx.n() {
        return Err(Error::Dimension(format!(
            "dataset has {} rows but the design context has {}; pass the pruned dataset",
            ds.n(),
            ctx.n()
        )));
    }
    Ok(ctx)
}

fn require_ujive(g: &GMatrix<'_>) -> Result<()> {
    if g.kind() != GKind::Ujive {
        return Err(Error::Unsupported(format!(
            "checklist operations are defined for the ujive weighting, got {}",
            g.kind()
        )));
    }
    Ok(())
}

fn require_binary(x: &[f64]) -> Result<()> {
    if x.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Unsupported(
            "this operation requires a binary (0/1) treatment".into(),
        ));
    }
    Ok(())
}

/// The pooled-complier algebra needs G to annihilate constants, which holds
/// whenever the controls span an intercept.
fn require_intercept_span(g: &GMatrix<'_>, ctx: &DesignContext) -> Result<()> {
    let ones = vec![1.0; ctx.n()];
    let g1 = g.apply(&ones)?;
    let worst = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > 1e-8 {
        return Err(Error::Unsupported(
            "complier pooling requires controls that span an intercept".into(),
        ));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

fn note_row(name: &str, n_used: usize, e: &Error) -> BalanceRow {
    BalanceRow {
        covariate: name.to_string(),
        coefficient: None,
        se: None,
        n_used,
        note: Some(e.to_string()),
    }
}

/// Errors that describe a per-covariate condition rather than a caller bug.
fn is_note(e: &Error) -> bool {
    matches!(
        e,
        Error::DegenerateDesign(_)
            | Error::DegenerateLeverage { .. }
            | Error::InsufficientDof(_)
            | Error::Diagnostic(_)
    )
}
