//! Shared test support: an independent dense-matrix oracle for every G kind
//! and generators for small random designs.
//!
//! The oracle builds M, H, and G literally from their defining formulas with
//! dense linear algebra, sharing no code with the library's partition/sparse
//! implementations beyond the raw dummy columns.

#![allow(dead_code)]

use leniency_iv::data::{Categorical, Covariate, Dataset};
use leniency_iv::design::{DesignContext, GKind};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// 0/1 matrix from row-index lists.
pub fn dummy_matrix(n: usize, cols: &[Vec<usize>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, cols.len());
    for (j, rows) in cols.iter().enumerate() {
        for &i in rows {
            m[(i, j)] = 1.0;
        }
    }
    m
}

/// Orthogonal projection onto the column span of `a`, via SVD.
pub fn projection(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if a.ncols() == 0 {
        return DMatrix::zeros(n, n);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-10 * smax.max(1.0);
    let mut p = DMatrix::zeros(n, n);
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            let uj = u.column(j);
            p += uj * uj.transpose();
        }
    }
    p
}

/// Dense M = I - P_W.
pub fn oracle_m(n: usize, w_cols: &[Vec<usize>]) -> DMatrix<f64> {
    DMatrix::identity(n, n) - projection(&dummy_matrix(n, w_cols))
}

/// Dense H: projection onto span(M Z).
pub fn oracle_h(n: usize, z_cols: &[Vec<usize>], w_cols: &[Vec<usize>]) -> DMatrix<f64> {
    let m = oracle_m(n, w_cols);
    let z = dummy_matrix(n, z_cols);
    projection(&(&m * z))
}

/// Dense FEJIV weights: solve ((M-H) o (M-H)) lambda = diag(H) directly.
pub fn oracle_fejiv_lambda(
    n: usize,
    z_cols: &[Vec<usize>],
    w_cols: &[Vec<usize>],
) -> Option<Vec<f64>> {
    let m = oracle_m(n, w_cols);
    let h = oracle_h(n, z_cols, w_cols);
    let mh = &m - &h;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = mh[(i, j)] * mh[(i, j)];
        }
    }
    let rhs = nalgebra::DVector::from_iterator(n, (0..n).map(|i| h[(i, i)]));
    let chol = nalgebra::linalg::Cholesky::new(a)?;
    Some(chol.solve(&rhs).iter().copied().collect())
}

/// Dense G for a kind, from the defining formulas.
pub fn oracle_g(
    kind: GKind,
    n: usize,
    z_cols: &[Vec<usize>],
    w_cols: &[Vec<usize>],
) -> DMatrix<f64> {
    let m = oracle_m(n, w_cols);
    let h = oracle_h(n, z_cols, w_cols);
    match kind {
        GKind::Ols => m,
        GKind::Tsls => h,
        GKind::Jive => {
            // Full-design hat P_Q from the concatenated dummies.
            let mut all = z_cols.to_vec();
            all.extend_from_slice(w_cols);
            let p_q = projection(&dummy_matrix(n, &all));
            let mut scale = DMatrix::zeros(n, n);
            let mut hq_minus_d = p_q.clone();
            for i in 0..n {
                scale[(i, i)] = 1.0 / (1.0 - p_q[(i, i)]);
                hq_minus_d[(i, i)] -= p_q[(i, i)];
            }
            &m * scale * hq_minus_d
        }
        GKind::Ijive => {
            let mut scale = DMatrix::zeros(n, n);
            let mut h_minus_d = h.clone();
            for i in 0..n {
                scale[(i, i)] = 1.0 / (1.0 - h[(i, i)]);
                h_minus_d[(i, i)] -= h[(i, i)];
            }
            &m * scale * h_minus_d * &m
        }
        GKind::Ujive => {
            let mut d = DMatrix::zeros(n, n);
            for i in 0..n {
                d[(i, i)] = h[(i, i)] / (m[(i, i)] - h[(i, i)]);
            }
            &h - d * (&m - &h)
        }
        GKind::B2sls => {
            let k = z_cols.len();
            let l = rank(&dummy_matrix(n, w_cols));
            let c = k as f64 / (n - k - l) as f64;
            &h - (&m - &h) * c
        }
        GKind::Fejiv => {
            let lambda = oracle_fejiv_lambda(n, z_cols, w_cols).expect("solvable weight system");
            let mh = &m - &h;
            let mut lam = DMatrix::zeros(n, n);
            for i in 0..n {
                lam[(i, i)] = lambda[i];
            }
            &h - &mh * lam * &mh
        }
    }
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.ncols() == 0 {
        return 0;
    }
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    svd.singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax.max(1.0))
        .count()
}

/// Materializes the library's G by probing unit vectors.
pub fn materialize(g: &leniency_iv::design::GMatrix<'_>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    let mut probe = vec![0.0; n];
    for j in 0..n {
        probe[j] = 1.0;
        let col = g.apply(&probe).unwrap();
        probe[j] = 0.0;
        for i in 0..n {
            out[(i, j)] = col[i];
        }
    }
    out
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Random dataset for design tests. With `nested` each examiner sits in one
/// cell; otherwise examiners and cells are drawn independently so instruments
/// straddle cells. `extra_factor` adds a second additive fixed-effect factor
/// (which forces collinearity drops in the scan).
pub fn random_dataset(
    rng: &mut ChaCha8Rng,
    n: usize,
    n_cells: usize,
    n_exams: usize,
    nested: bool,
    extra_factor: bool,
) -> Dataset {
    let mut exam = Vec::with_capacity(n);
    let mut cell = Vec::with_capacity(n);
    let mut extra = Vec::with_capacity(n);
    for _ in 0..n {
        let e = rng.gen_range(0..n_exams);
        let c = if nested {
            e % n_cells
        } else {
            rng.gen_range(0..n_cells)
        };
        exam.push(format!("e{e:03}"));
        cell.push(format!("c{c:03}"));
        extra.push(format!("g{:03}", rng.gen_range(0..3)));
    }
    let outcome: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let treatment: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let mut fixed_effects = vec![Categorical::from_values("cell", &cell)];
    if extra_factor {
        fixed_effects.push(Categorical::from_values("grp", &extra));
    }
    Dataset {
        outcome_name: "y".into(),
        treatment_name: "x".into(),
        outcome,
        treatment,
        examiner: Categorical::from_values("exam", &exam),
        fixed_effects,
        covariates: vec![],
    }
}

/// Adds a numeric covariate column to a dataset.
pub fn with_covariate(mut ds: Dataset, name: &str, values: Vec<f64>) -> Dataset {
    assert_eq!(values.len(), ds.n());
    ds.covariates.push(Covariate {
        name: name.into(),
        values,
    });
    ds
}

/// Dense hat diagonal of the full (Z, W) design.
pub fn oracle_full_hat_diag(n: usize, z_cols: &[Vec<usize>], w_cols: &[Vec<usize>]) -> Vec<f64> {
    let mut all = z_cols.to_vec();
    all.extend_from_slice(w_cols);
    let p_q = projection(&dummy_matrix(n, &all));
    (0..n).map(|i| p_q[(i, i)]).collect()
}

/// Convenience: prune, build the context, and return both with column lists.
pub fn pruned_context(ds: &Dataset) -> (Dataset, DesignContext) {
    let (pruned, _) = leniency_iv::data::prune(ds).expect("prunable");
    let ctx = DesignContext::build(&pruned).expect("buildable");
    (pruned, ctx)
}
