//! Every G kind is checked entry-by-entry against an independent dense
//! construction of M, H, and G, on nested and non-nested random designs.

mod common;

use common::*;
use leniency_iv::data::{prune, Categorical, Dataset};
use leniency_iv::design::{DesignContext, GKind, GMatrix};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DENSE_TOL: f64 = 1e-8;

fn check_all_kinds(ds: &Dataset, label: &str) {
    let (pruned, ctx) = pruned_context(ds);
    let n = ctx.n();
    let z_cols = ctx.instrument_columns();
    let w_cols = ctx.control_columns();
    assert!(ctx.k() >= 1, "{label}: design lost all instruments");
    assert!(pruned.n() == n);

    for kind in GKind::ALL {
        let g = match GMatrix::new(&ctx, kind) {
            Ok(g) => g,
            Err(e) => {
                // FEJIV may be legitimately unavailable (caseload <= 2).
                assert_eq!(kind, GKind::Fejiv, "{label}: {kind} failed: {e}");
                continue;
            }
        };
        let dense = oracle_g(kind, n, &z_cols, &w_cols);
        let lib = materialize(&g, n);
        let diff = max_abs_diff(&dense, &lib);
        assert!(
            diff < DENSE_TOL,
            "{label}: {kind} differs from dense oracle by {diff:.2e}"
        );
        let tr_dense = dense.trace();
        let tr_lib = g.trace();
        assert!(
            (tr_dense - tr_lib).abs() < 1e-8,
            "{label}: {kind} trace {tr_lib} vs dense {tr_dense}"
        );
    }
}

#[test]
fn nested_designs_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..6 {
        let ds = random_dataset(&mut rng, 80 + trial * 5, 4, 12, true, false);
        check_all_kinds(&ds, &format!("nested trial {trial}"));
    }
}

#[test]
fn non_nested_designs_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..6 {
        let ds = random_dataset(&mut rng, 90, 3, 8, false, false);
        check_all_kinds(&ds, &format!("non-nested trial {trial}"));
    }
}

#[test]
fn two_factor_designs_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for trial in 0..4 {
        let ds = random_dataset(&mut rng, 100, 3, 8, false, true);
        check_all_kinds(&ds, &format!("two-factor trial {trial}"));
    }
}

#[test]
fn hat_diagonals_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for nested in [true, false] {
        let ds = random_dataset(&mut rng, 70, 3, 9, nested, false);
        let (_, ctx) = pruned_context(&ds);
        let n = ctx.n();
        let z_cols = ctx.instrument_columns();
        let w_cols = ctx.control_columns();
        let m_dense = oracle_m(n, &w_cols);
        let h_dense = oracle_h(n, &z_cols, &w_cols);
        for i in 0..n {
            assert!((ctx.m_diag()[i] - m_dense[(i, i)]).abs() < 1e-9);
            assert!((ctx.h_diag()[i] - h_dense[(i, i)]).abs() < 1e-9);
        }
    }
}

#[test]
fn fejiv_satisfies_minque_constraints() {
    // Symmetry, zero diagonal, and exact pass-through/annihilation of the
    // design: G W = 0, W'G = 0, G Z~ = Z~, Z~'G = Z~'.
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for nested in [true, false] {
        let ds = random_dataset(&mut rng, 60, 2, 6, nested, false);
        let (_, ctx) = pruned_context(&ds);
        let g = match GMatrix::new(&ctx, GKind::Fejiv) {
            Ok(g) => g,
            Err(_) => continue, // small caseloads can void FEJIV; other seeds cover it
        };
        let n = ctx.n();
        let gd = materialize(&g, n);
        let sym_err = max_abs_diff(&gd, &gd.transpose());
        assert!(sym_err < 1e-7, "FEJIV not symmetric: {sym_err:.2e}");
        for i in 0..n {
            assert!(gd[(i, i)].abs() < 1e-7, "FEJIV diagonal {i} = {}", gd[(i, i)]);
        }
        let w = dummy_matrix(n, &ctx.control_columns());
        let gw = &gd * &w;
        assert!(gw.abs().max() < 1e-7, "FEJIV G W != 0");
        let wg = w.transpose() * &gd;
        assert!(wg.abs().max() < 1e-7, "FEJIV W'G != 0");
        let m = oracle_m(n, &ctx.control_columns());
        let z = dummy_matrix(n, &ctx.instrument_columns());
        let zt = &m * z;
        let gz = &gd * &zt - &zt;
        assert!(gz.abs().max() < 1e-7, "FEJIV G Z~ != Z~");
        let zg = zt.transpose() * &gd - zt.transpose();
        assert!(zg.abs().max() < 1e-7, "FEJIV Z~'G != Z~'");
        // Weights agree with the dense Hadamard-system oracle.
        let lam_dense =
            oracle_fejiv_lambda(n, &ctx.instrument_columns(), &ctx.control_columns()).unwrap();
        let lam = &g.fejiv_weights().unwrap().lambda;
        for (a, b) in lam.iter().zip(&lam_dense) {
            assert!((a - b).abs() < 1e-7, "lambda {a} vs dense {b}");
        }
    }
}

#[test]
fn fejiv_constant_leverage_gives_constant_weights() {
    // Balanced nested design, no controls beyond one cell: H_ii = K/n forces
    // a constant lambda by symmetry.
    let m = 5usize; // caseload
    let k_exams = 4usize;
    let n = m * k_exams;
    let mut exam = Vec::new();
    for e in 0..k_exams {
        for _ in 0..m {
            exam.push(format!("e{e}"));
        }
    }
    let cell = vec!["c0".to_string(); n];
    let ds = Dataset {
        outcome_name: "y".into(),
        treatment_name: "x".into(),
        outcome: (0..n).map(|i| (i as f64).sin()).collect(),
        treatment: (0..n).map(|i| f64::from(i % 2 == 0)).collect(),
        examiner: Categorical::from_values("exam", &exam),
        fixed_effects: vec![Categorical::from_values("cell", &cell)],
        covariates: vec![],
    };
    let (_, ctx) = pruned_context(&ds);
    let g = GMatrix::new(&ctx, GKind::Fejiv).unwrap();
    let lam = &g.fejiv_weights().unwrap().lambda;
    for &l in lam.iter() {
        assert!((l - lam[0]).abs() < 1e-10, "lambda not constant: {l} vs {}", lam[0]);
    }
    let cond = g.fejiv_weights().unwrap().condition;
    assert!(cond >= 1.0 && cond.is_finite());
}

#[test]
fn engineered_leverage_one_is_pruned() {
    // Cells: A = {0, 3, 4}, B = {1, 2}; examiners: e1 = {0, 1, 2},
    // e2 = {3, 4}. No singletons, but span(W, Z) contains the indicator of
    // observation 0, so its full-design leverage is exactly one.
    let exam = ["e1", "e1", "e1", "e2", "e2"].map(String::from);
    let cell = ["cA", "cB", "cB", "cA", "cA"].map(String::from);
    let ds = Dataset {
        outcome_name: "y".into(),
        treatment_name: "x".into(),
        outcome: vec![0.3, -0.1, 0.7, 1.2, 0.4],
        treatment: vec![1.0, 0.0, 1.0, 0.0, 1.0],
        examiner: Categorical::from_values("exam", &exam),
        fixed_effects: vec![Categorical::from_values("cell", &cell)],
        covariates: vec![],
    };
    // Dense confirmation that observation 0 has leverage one pre-prune:
    // design columns are cells {A, B} and the lone instrument e2.
    let z_cols = vec![vec![3, 4]];
    let w_cols = vec![vec![0, 3, 4], vec![1, 2]];
    let hat = oracle_full_hat_diag(5, &z_cols, &w_cols);
    assert!((hat[0] - 1.0).abs() < 1e-10, "hat[0] = {}", hat[0]);
    assert!(hat[1..].iter().all(|&h| h < 1.0 - 1e-6));

    let (pruned, report) = prune(&ds).unwrap();
    assert_eq!(pruned.n(), 4);
    assert_eq!(report.n_leverage_drops(), 1);
    assert_eq!(report.dropped_rows[0].row, 0);
    assert!(matches!(
        report.dropped_rows[0].reason,
        leniency_iv::data::DropReason::LeverageOne
    ));
}

#[test]
fn collinear_controls_are_dropped_before_instruments() {
    // Two additive factors whose dummies each sum to one: the scan must drop
    // a control column, and instruments collinear with cells must go too.
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let ds = random_dataset(&mut rng, 120, 4, 10, false, true);
    let (pruned, report) = prune(&ds).unwrap();
    assert!(
        !report.dropped_control_columns.is_empty(),
        "additive factors must shed at least one control column"
    );
    let ctx = DesignContext::build(&pruned).unwrap();
    // Survivor design must be full rank: Gram of [W Z~] positive definite
    // is certified by a successful context build; verify rank densely.
    let z = dummy_matrix(ctx.n(), &ctx.instrument_columns());
    let w = dummy_matrix(ctx.n(), &ctx.control_columns());
    let mut all = DMatrix::zeros(ctx.n(), z.ncols() + w.ncols());
    all.view_mut((0, 0), (ctx.n(), w.ncols())).copy_from(&w);
    all.view_mut((0, w.ncols()), (ctx.n(), z.ncols())).copy_from(&z);
    assert_eq!(rank(&all), z.ncols() + w.ncols());
}

#[test]
fn b2sls_matches_closed_form_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let ds = random_dataset(&mut rng, 80, 3, 9, true, false);
    let (pruned, ctx) = pruned_context(&ds);
    let (n, k, l) = ctx.counts();
    let y = &pruned.outcome;
    let x = &pruned.treatment;
    let g = GMatrix::new(&ctx, GKind::B2sls).unwrap();
    let gx = g.apply(x).unwrap();
    let num: f64 = y.iter().zip(&gx).map(|(a, b)| a * b).sum();
    let den: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
    // Closed form: (y'Hx - c y'(M-H)x) / (x'Hx - c x'(M-H)x).
    let hx = ctx.project_instruments(x).unwrap();
    let mhx = ctx.annihilate_design(x).unwrap();
    let c = k as f64 / (n - k - l) as f64;
    let num2: f64 = y
        .iter()
        .zip(hx.iter().zip(&mhx))
        .map(|(yi, (h, mh))| yi * (h - c * mh))
        .sum();
    let den2: f64 = x
        .iter()
        .zip(hx.iter().zip(&mhx))
        .map(|(xi, (h, mh))| xi * (h - c * mh))
        .sum();
    assert!((num - num2).abs() < 1e-10 * num.abs().max(1.0));
    assert!((den - den2).abs() < 1e-10 * den.abs().max(1.0));
}
