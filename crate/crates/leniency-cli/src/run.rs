//! The five subcommand implementations.

use crate::output::{
    emit, opt, opt_str, EstimateRow, Format, IntervalOut, PruneSummary, RhoOut, RunManifest,
    Table, WeakIvOut,
};
use crate::{
    reject_cluster, BalanceArgs, CompliersArgs, DataArgs, EstimateArgs, MonotonicityArgs,
    SimulateArgs,
};
use leniency_iv::checklist::{self, BalanceRow, BinRow, BinSpec, ComplierRow};
use leniency_iv::data::{prune, Dataset, Schema};
use leniency_iv::design::{DesignContext, GKind, GMatrix};
use leniency_iv::error::{Error, Result};
use leniency_iv::estimate::{estimate_with, first_stage};
use leniency_iv::inference::{rho_diagnostic, weak_iv_test, GridSpec};
use leniency_iv::sim::{generate, monte_carlo, MonteCarloConfig, MonteCarloSummary, SimConfig};
use serde::Serialize;

/// Loads and prunes the input, recording both in the manifest.
fn load(args: &DataArgs, covariates: &[String], manifest: &mut RunManifest) -> Result<(Dataset, DesignContext)> {
    reject_cluster(&args.cluster)?;
    let schema = Schema {
        outcome: args.outcome.clone(),
        treatment: args.treatment.clone(),
        examiner: args.examiner.clone(),
        fixed_effects: Schema::parse_fixed_effects(&args.fe)?,
        covariates: covariates.to_vec(),
    };
    let raw = Dataset::load_csv(&args.data, &schema)?;
    let rows_in = raw.n();
    let (pruned, report) = prune(&raw)?;
    manifest.data = Some(args.data.display().to_string());
    manifest.schema = Some(schema);
    manifest.prune = Some(PruneSummary::from_report(rows_in, pruned.n(), &report));
    let ctx = DesignContext::build(&pruned)?;
    Ok((pruned, ctx))
}

fn parse_kinds(spec: &str) -> Result<Vec<GKind>> {
    if spec.trim() == "all" {
        return Ok(GKind::ALL.to_vec());
    }
    let kinds: Vec<GKind> = spec
        .split(',')
        .map(|s| GKind::parse(s.trim()))
        .collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    Ok(kinds)
}

fn parse_list(spec: &str) -> Vec<String> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_pair(spec: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("{what} must be 'lo:hi', got '{spec}'")));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} bound '{}'", parts[1])))?;
    Ok((lo, hi))
}

fn parse_grid(spec: &str) -> Result<GridSpec> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "grid must be 'lo:hi:points', got '{spec}'"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| Error::Config(format!("bad grid bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| Error::Config(format!("bad grid bound '{}'", parts[1])))?;
    let points: usize = parts[2]
        .parse()
        .map_err(|_| Error::Config(format!("bad grid count '{}'", parts[2])))?;
    GridSpec::new(lo, hi, points)
}

#[derive(Serialize)]
struct EstimateDoc {
    manifest: RunManifest,
    estimates: Vec<EstimateRow>,
    weak_iv: Option<WeakIvOut>,
    rho: Option<RhoOut>,
}

pub fn estimate(args: EstimateArgs) -> Result<()> {
    let format = Format::parse(&args.output.format)?;
    let kinds = parse_kinds(&args.estimator)?;
    let mut manifest = RunManifest::new("estimate");
    manifest.estimators = kinds.iter().map(|k| k.to_string()).collect();
    let (pruned, ctx) = load(&args.data, &[], &mut manifest)?;
    let y = &pruned.outcome;
    let x = &pruned.treatment;
    let fs = first_stage(&ctx, x)?;

    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in &kinds {
        let built = match (kind, args.fejiv_cap) {
            (GKind::Fejiv, Some(cap)) => GMatrix::with_fejiv_cap(&ctx, kind, cap),
            _ => GMatrix::new(&ctx, kind),
        };
        let est = built.and_then(|g| estimate_with(&g, y, x));
        match est {
            Ok(e) => rows.push(EstimateRow {
                estimator: kind.to_string(),
                beta: e.beta,
                se_robust: e.se_robust,
                se_plain: e.se_plain,
                f: e.first_stage.f_stat,
                partial_r2: e.first_stage.partial_r2,
                n: e.n,
                k: e.k,
                l: e.l,
                g_trace: e.g_trace,
                note: None,
            }),
            // With several estimators requested, an unavailable one becomes
            // a note row rather than failing the run.
            Err(err) if kinds.len() > 1 && unavailable(&err) => rows.push(EstimateRow {
                estimator: kind.to_string(),
                beta: None,
                se_robust: None,
                se_plain: None,
                f: fs.f_stat,
                partial_r2: fs.partial_r2,
                n: ctx.n(),
                k: ctx.k(),
                l: ctx.l(),
                g_trace: f64::NAN,
                note: Some(err.to_string()),
            }),
            Err(err) => return Err(err),
        }
    }

    let want_weak = args.weak_iv_beta0.is_some() || args.weak_iv_grid.is_some();
    let weak_iv = if want_weak {
        let g = GMatrix::new(&ctx, GKind::Ujive)?;
        let beta0 = match args.weak_iv_beta0 {
            Some(b) => b,
            None => estimate_with(&g, y, x)?.beta.ok_or_else(|| {
                Error::Diagnostic(
                    "cannot center the weak-instrument test: the estimate is undefined".into(),
                )
            })?,
        };
        let grid = args.weak_iv_grid.as_deref().map(parse_grid).transpose()?;
        let t = weak_iv_test(&g, y, x, beta0, grid, 0.05)?;
        let single = (t.confidence_set.len() == 1).then(|| t.confidence_set[0].clone());
        Some(WeakIvOut {
            beta0: t.beta0,
            stat: t.stat,
            p: t.p,
            level: t.level,
            ci_lo: single.as_ref().map(|c| c.lo),
            ci_hi: single.as_ref().map(|c| c.hi),
            set: t
                .confidence_set
                .iter()
                .map(|c| IntervalOut {
                    lo: c.lo,
                    hi: c.hi,
                    open_lower: c.open_lower,
                    open_upper: c.open_upper,
                })
                .collect(),
            empty: t.empty,
        })
    } else {
        None
    };

    let rho = match (&args.rho_at, &args.rho_range) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either --rho-at or --rho-range, not both".into(),
            ))
        }
        (Some(b), None) => Some((*b, *b)),
        (None, Some(spec)) => Some(parse_pair(spec, "effect range")?),
        (None, None) => None,
    };
    let rho = match rho {
        None => None,
        Some((lo, hi)) => {
            let g = GMatrix::new(&ctx, GKind::Ujive)?;
            let d = rho_diagnostic(&g, y, x, lo, hi)?;
            Some(RhoOut {
                value: (lo == hi).then_some(d.rho_at_lo),
                beta_lo: d.beta_lo,
                beta_hi: d.beta_hi,
                rho_at_lo: d.rho_at_lo,
                rho_at_hi: d.rho_at_hi,
                max_abs_rho: d.max_abs_rho,
                flag_076: d.flag_076,
            })
        }
    };

    let table = Table {
        header: vec![
            "estimator", "beta", "se_robust", "se_plain", "F", "partial_R2", "n", "K", "L",
            "g_trace", "note",
        ],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.estimator.clone(),
                    opt(r.beta),
                    opt(r.se_robust),
                    opt(r.se_plain),
                    format!("{}", r.f),
                    format!("{}", r.partial_r2),
                    r.n.to_string(),
                    r.k.to_string(),
                    r.l.to_string(),
                    format!("{}", r.g_trace),
                    opt_str(&r.note),
                ]
            })
            .collect(),
    };
    let doc = EstimateDoc {
        manifest,
        estimates: rows,
        weak_iv,
        rho,
    };
    emit(&doc, &doc.manifest, table, &args.output.out, &format)
}

fn unavailable(e: &Error) -> bool {
    matches!(e, Error::FejivUnavailable(_) | Error::Capacity(_))
}

#[derive(Serialize)]
struct BalanceDoc {
    manifest: RunManifest,
    rows: Vec<BalanceRow>,
    g_checksum: f64,
}

pub fn balance(args: BalanceArgs) -> Result<()> {
    let format = Format::parse(&args.output.format)?;
    let covs = parse_list(&args.covariates);
    let mut manifest = RunManifest::new("balance");
    manifest.estimators = vec![GKind::Ujive.to_string()];
    let (pruned, ctx) = load(&args.data, &covs, &mut manifest)?;
    let g = GMatrix::new(&ctx, GKind::Ujive)?;
    let report = checklist::balance(&pruned, &g, &covs)?;

    let table = Table {
        header: vec!["covariate", "coefficient", "se", "n_used", "note"],
        rows: report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.covariate.clone(),
                    opt(r.coefficient),
                    opt(r.se),
                    r.n_used.to_string(),
                    opt_str(&r.note),
                ]
            })
            .collect(),
    };
    let doc = BalanceDoc {
        manifest,
        rows: report.rows,
        g_checksum: report.g_checksum,
    };
    emit(&doc, &doc.manifest, table, &args.output.out, &format)
}

#[derive(Serialize)]
struct MonotonicityDoc {
    manifest: RunManifest,
    level: f64,
    any_flag: bool,
    treated_mass_sum: f64,
    untreated_mass_sum: f64,
    rows: Vec<BinRow>,
    g_checksum: f64,
}

fn parse_bins(spec: &str) -> Result<BinSpec> {
    if spec == "auto" {
        return Ok(BinSpec::Auto);
    }
    if let Some(rest) = spec.strip_prefix("quantiles:") {
        let k = rest
            .parse()
            .map_err(|_| Error::Config(format!("bad quantile count '{rest}'")))?;
        return Ok(BinSpec::Quantiles(k));
    }
    if let Some(rest) = spec.strip_prefix("distinct:") {
        let max_distinct = rest
            .parse()
            .map_err(|_| Error::Config(format!("bad distinct cap '{rest}'")))?;
        return Ok(BinSpec::DistinctValues { max_distinct });
    }
    if let Some(rest) = spec.strip_prefix("explicit:") {
        let ivs = rest
            .split(',')
            .map(|p| parse_pair(p, "bin"))
            .collect::<Result<Vec<_>>>()?;
        return Ok(BinSpec::Explicit(ivs));
    }
    Err(Error::Config(format!(
        "bins must be auto, quantiles:K, distinct:MAX, or explicit:lo:hi,... (got '{spec}')"
    )))
}

pub fn monotonicity(args: MonotonicityArgs) -> Result<()> {
    let format = Format::parse(&args.output.format)?;
    let spec = parse_bins(&args.bins)?;
    let mut manifest = RunManifest::new("monotonicity");
    manifest.estimators = vec![GKind::Ujive.to_string()];
    let (pruned, ctx) = load(&args.data, &[], &mut manifest)?;
    let g = GMatrix::new(&ctx, GKind::Ujive)?;
    let report = checklist::monotonicity(&g, &pruned.outcome, &pruned.treatment, &spec, args.level)?;

    let table = Table {
        header: vec![
            "bin", "lo", "hi", "count", "treated_mass", "treated_se", "treated_flag",
            "untreated_mass", "untreated_se", "untreated_flag", "note",
        ],
        rows: report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.bin.label.clone(),
                    format!("{}", r.bin.lo),
                    format!("{}", r.bin.hi),
                    r.bin.count.to_string(),
                    opt(r.treated_mass),
                    opt(r.treated_se),
                    r.treated_flag.to_string(),
                    opt(r.untreated_mass),
                    opt(r.untreated_se),
                    r.untreated_flag.to_string(),
                    opt_str(&r.note),
                ]
            })
            .collect(),
    };
    let doc = MonotonicityDoc {
        manifest,
        level: report.level,
        any_flag: report.any_flag,
        treated_mass_sum: report.treated_mass_sum,
        untreated_mass_sum: report.untreated_mass_sum,
        rows: report.rows,
        g_checksum: report.g_checksum,
    };
    emit(&doc, &doc.manifest, table, &args.output.out, &format)
}

#[derive(Serialize)]
struct CompliersDoc {
    manifest: RunManifest,
    rows: Vec<ComplierRow>,
    g_checksum: f64,
}

pub fn compliers(args: CompliersArgs) -> Result<()> {
    let format = Format::parse(&args.output.format)?;
    let covs = parse_list(&args.covariates);
    let mut manifest = RunManifest::new("compliers");
    manifest.estimators = vec![GKind::Ujive.to_string()];
    let (pruned, ctx) = load(&args.data, &covs, &mut manifest)?;
    let g = GMatrix::new(&ctx, GKind::Ujive)?;
    let report = checklist::complier_means(&pruned, &g, &covs)?;

    let table = Table {
        header: vec![
            "covariate", "sample_mean", "complier_mean", "se", "treated_mean", "treated_se",
            "untreated_mean", "untreated_se", "n_used", "within_logical_bounds", "note",
        ],
        rows: report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.covariate.clone(),
                    opt(r.sample_mean),
                    opt(r.complier_mean),
                    opt(r.se),
                    opt(r.treated_mean),
                    opt(r.treated_se),
                    opt(r.untreated_mean),
                    opt(r.untreated_se),
                    r.n_used.to_string(),
                    r.within_logical_bounds
                        .map(|b| b.to_string())
                        .unwrap_or_default(),
                    opt_str(&r.note),
                ]
            })
            .collect(),
    };
    let doc = CompliersDoc {
        manifest,
        rows: report.rows,
        g_checksum: report.g_checksum,
    };
    emit(&doc, &doc.manifest, table, &args.output.out, &format)
}

#[derive(Serialize)]
struct SimulateDoc {
    manifest: RunManifest,
    config: SimConfig,
    results: Option<MonteCarloSummary>,
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let format = Format::parse(&args.output.format)?;
    let kinds = parse_kinds(&args.estimator)?;
    let mut cfg = match &args.config {
        Some(path) => SimConfig::from_key_values(&std::fs::read_to_string(path)?)?,
        None => SimConfig::from_key_values("")?,
    };
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(d) = args.defier_fraction {
        cfg.defier_fraction = d;
    }
    if let Some(c) = args.covariates {
        cfg.n_covariates = c;
    }
    cfg.validate()?;

    if let Some(path) = &args.emit_data {
        let (ds, _) = generate(&cfg)?;
        ds.write_csv(path)?;
    }

    let results = if args.reps == 0 {
        if args.emit_data.is_none() {
            return Err(Error::Config(
                "nothing to do: zero replications and no --emit-data".into(),
            ));
        }
        None
    } else {
        Some(monte_carlo(&MonteCarloConfig {
            cfg: cfg.clone(),
            reps: args.reps,
            kinds: kinds.clone(),
            weak_iv_beta0: args.weak_iv_beta0,
        })?)
    };

    let mut manifest = RunManifest::new("simulate");
    manifest.estimators = kinds.iter().map(|k| k.to_string()).collect();
    manifest.seed = Some(cfg.seed);

    let table = Table {
        header: vec![
            "estimator", "n_defined", "mean", "bias", "sd", "mc_se", "coverage95",
        ],
        rows: results
            .as_ref()
            .map(|r| {
                r.summaries
                    .iter()
                    .map(|s| {
                        vec![
                            s.kind.to_string(),
                            s.n_defined.to_string(),
                            format!("{}", s.mean),
                            format!("{}", s.bias),
                            format!("{}", s.sd),
                            format!("{}", s.mc_se),
                            format!("{}", s.coverage95),
                        ]
                    })
                    .collect()
            })
            .unwrap_or_default(),
    };
    let doc = SimulateDoc {
        manifest,
        config: cfg,
        results,
    };
    emit(&doc, &doc.manifest, table, &args.output.out, &format)
}
