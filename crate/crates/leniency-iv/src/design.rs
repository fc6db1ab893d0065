//! Design encoding and the unified G-matrix family.
//!
//! The design has instruments Z (examiner dummies, one reference omitted per
//! cell), controls W (fixed-effect dummies), the annihilator M = I - P_W, and
//! the residualized-instrument projection H with range span(M Z). Every
//! estimator in this family is a ratio y'Gx / x'Gx for a kind-specific n x n
//! matrix G that is never materialized at estimation scale: all public
//! operations are O(n)-per-apply partition arithmetic when examiners are
//! nested in a single fixed-effect partition, and cached small-matrix
//! factorizations otherwise.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector, Dyn};

use crate::data::{Dataset, LEVERAGE_TOL};
use crate::error::{Error, Result};

/// Relative pivot tolerance of the collinearity scan. Pivots of the combined
/// (W, Z) Gram matrix below this fraction of the largest initial pivot mark a
/// column as collinear.
pub const REL_PIVOT_TOL: f64 = 1e-9;

/// Observation cap for operations that materialize dense n x n workspaces
/// (FEJIV weight solve on non-nested designs, covariance diagnostics).
pub const DESK_SCALE_CAP: usize = 5000;

/// Largest total realized diagonal |diag(G)|_1 accepted from the FEJIV
/// weight solve. An ill-conditioned Hadamard system can factor numerically
/// yet return weights that miss the zero-diagonal constraint by orders of
/// magnitude; such solves are rejected rather than silently applied.
pub const FEJIV_RESID_TOL: f64 = 1e-8;

type Chol = nalgebra::linalg::Cholesky<f64, Dyn>;

// ---------------------------------------------------------------------------
// Encoding: from a dataset to concrete design columns.
// ---------------------------------------------------------------------------

/// Concrete design columns chosen for a dataset: which examiner dummies are
/// instruments (after reference omission and collinearity drops) and which
/// fixed-effect dummies are controls.
#[derive(Debug, Clone)]
pub(crate) struct Encoding {
    pub n: usize,
    /// Active instrument column per row; `None` for reference or dropped
    /// examiners.
    pub z_col: Vec<Option<u32>>,
    pub z_labels: Vec<String>,
    /// Active control columns per row (one per surviving factor level).
    pub row_w: Vec<Vec<u32>>,
    pub w_labels: Vec<String>,
    pub k: usize,
    pub l: usize,
    pub dropped_instruments: Vec<String>,
    pub dropped_controls: Vec<String>,
    /// (factor-0 level, examiner) pairs chosen as omitted references.
    pub reference_examiners: Vec<(String, String)>,
    /// Raw examiner code per row and caseloads, for the nested fast path.
    pub exam_code: Vec<u32>,
    pub n_examiners: usize,
    /// Raw factor-0 code per row.
    pub cell_code: Vec<u32>,
    pub n_cells: usize,
    /// True when W is a single full partition, examiners are nested in its
    /// cells, and no column was dropped: projections then have closed forms.
    pub nested: bool,
}

/// Chooses design columns for a dataset: omits one reference examiner per
/// factor-0 cell (lexicographically smallest code), then drops any remaining
/// collinear columns found by a pivoted scan of the combined (W, Z) Gram
/// matrix. Controls are scanned before instruments, so collinearity between
/// an examiner dummy and the fixed effects always drops the instrument.
pub(crate) fn encode(ds: &Dataset) -> Result<Encoding> {
    ds.validate()?;
    let n = ds.n();
    let n_factors = ds.fixed_effects.len();

    // Reference examiner per factor-0 cell: smallest not yet omitted.
    let factor0 = &ds.fixed_effects[0];
    let mut exams_in_cell: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for i in 0..n {
        exams_in_cell
            .entry(factor0.codes[i])
            .or_default()
            .insert(ds.examiner.codes[i]);
    }
    let mut omitted: BTreeSet<u32> = BTreeSet::new();
    let mut reference_examiners = Vec::new();
    for (&cell, exams) in &exams_in_cell {
        if let Some(&e) = exams.iter().find(|e| !omitted.contains(e)) {
            omitted.insert(e);
            reference_examiners.push((
                factor0.labels[cell as usize].clone(),
                ds.examiner.labels[e as usize].clone(),
            ));
        }
    }

    // Raw columns: all factor levels (controls), then non-reference examiners.
    let mut w_offsets = Vec::with_capacity(n_factors);
    let mut w_raw_labels = Vec::new();
    for f in &ds.fixed_effects {
        w_offsets.push(w_raw_labels.len());
        for lab in &f.labels {
            w_raw_labels.push(format!("{}={}", f.name, lab));
        }
    }
    let l_raw = w_raw_labels.len();
    let z_raw_codes: Vec<u32> = (0..ds.examiner.n_levels() as u32)
        .filter(|c| !omitted.contains(c))
        .collect();
    let z_raw_index: HashMap<u32, usize> = z_raw_codes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let k_raw = z_raw_codes.len();
    let p = l_raw + k_raw;

    // Gram matrix of the raw dummy design; entries are exact row counts.
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut row_cols: Vec<u32> = Vec::with_capacity(n_factors + 1);
    for i in 0..n {
        row_cols.clear();
        for (f, fe) in ds.fixed_effects.iter().enumerate() {
            row_cols.push((w_offsets[f] + fe.codes[i] as usize) as u32);
        }
        if let Some(&zi) = z_raw_index.get(&ds.examiner.codes[i]) {
            row_cols.push((l_raw + zi) as u32);
        }
        for &a in &row_cols {
            for &b in &row_cols {
                gram[(a as usize, b as usize)] += 1.0;
            }
        }
    }

    let dependent = collinearity_scan(&gram, l_raw);

    // Re-map surviving columns to dense indices.
    let mut w_new = vec![None; l_raw];
    let mut w_labels = Vec::new();
    let mut dropped_controls = Vec::new();
    for j in 0..l_raw {
        if dependent[j] {
            dropped_controls.push(w_raw_labels[j].clone());
        } else {
            w_new[j] = Some(w_labels.len() as u32);
            w_labels.push(w_raw_labels[j].clone());
        }
    }
    let mut z_new = vec![None; k_raw];
    let mut z_labels = Vec::new();
    let mut dropped_instruments = Vec::new();
    for j in 0..k_raw {
        if dependent[l_raw + j] {
            dropped_instruments.push(ds.examiner.labels[z_raw_codes[j] as usize].clone());
        } else {
            z_new[j] = Some(z_labels.len() as u32);
            z_labels.push(ds.examiner.labels[z_raw_codes[j] as usize].clone());
        }
    }

    let mut row_w = Vec::with_capacity(n);
    let mut z_col = Vec::with_capacity(n);
    for i in 0..n {
        let mut cols = Vec::with_capacity(n_factors);
        for (f, fe) in ds.fixed_effects.iter().enumerate() {
            if let Some(c) = w_new[w_offsets[f] + fe.codes[i] as usize] {
                cols.push(c);
            }
        }
        row_w.push(cols);
        z_col.push(
            z_raw_index
                .get(&ds.examiner.codes[i])
                .and_then(|&j| z_new[j]),
        );
    }

    // Nested fast path: one factor, nothing dropped, each examiner confined
    // to one cell. Then span(W, Z) is exactly the examiner partition.
    let nested = n_factors == 1 && dropped_controls.is_empty() && dropped_instruments.is_empty() && {
        let mut cell_of_exam: Vec<Option<u32>> = vec![None; ds.examiner.n_levels()];
        let mut ok = true;
        for i in 0..n {
            let e = ds.examiner.codes[i] as usize;
            match cell_of_exam[e] {
                None => cell_of_exam[e] = Some(factor0.codes[i]),
                Some(c) if c == factor0.codes[i] => {}
                Some(_) => {
                    ok = false;
                    break;
                }
            }
        }
        ok
    };

    Ok(Encoding {
        n,
        z_col,
        k: z_labels.len(),
        z_labels,
        row_w,
        l: w_labels.len(),
        w_labels,
        dropped_instruments,
        dropped_controls,
        reference_examiners,
        exam_code: ds.examiner.codes.clone(),
        n_examiners: ds.examiner.n_levels(),
        cell_code: factor0.codes.clone(),
        n_cells: factor0.n_levels(),
        nested,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ColState {
    Remaining,
    Pivoted,
    Dependent,
}

/// Pivoted-Cholesky rank scan of a design Gram matrix. Columns `0..n_w` are
/// controls and are pivoted first, so dependencies resolve against
/// instruments whenever possible. Returns a dependency flag per column.
fn collinearity_scan(gram: &DMatrix<f64>, n_w: usize) -> Vec<bool> {
    let p = gram.nrows();
    let mut a = gram.clone();
    let mut state = vec![ColState::Remaining; p];
    let d0 = (0..p).map(|j| a[(j, j)]).fold(0.0f64, f64::max);
    let tol = REL_PIVOT_TOL * d0.max(1.0);

    for phase in 0..2 {
        let range = if phase == 0 { 0..n_w } else { n_w..p };
        loop {
            let mut pivot = None;
            let mut best = tol;
            for j in range.clone() {
                if state[j] == ColState::Remaining && a[(j, j)] > best {
                    pivot = Some(j);
                    best = a[(j, j)];
                }
            }
            let Some(j) = pivot else {
                for j in range.clone() {
                    if state[j] == ColState::Remaining {
                        state[j] = ColState::Dependent;
                    }
                }
                break;
            };
            state[j] = ColState::Pivoted;
            let d = a[(j, j)];
            let col_j: Vec<f64> = (0..p).map(|i| a[(i, j)]).collect();
            for i in 0..p {
                if state[i] != ColState::Remaining {
                    continue;
                }
                let ci = col_j[i] / d;
                if ci == 0.0 {
                    continue;
                }
                for k2 in 0..p {
                    if state[k2] == ColState::Remaining {
                        a[(i, k2)] -= ci * col_j[k2];
                    }
                }
            }
        }
    }
    state.iter().map(|&s| s == ColState::Dependent).collect()
}

// ---------------------------------------------------------------------------
// Projection paths.
// ---------------------------------------------------------------------------

/// Closed-form path: M subtracts cell means, H is examiner means minus cell
/// means, and both diagonals come from caseload counts.
#[derive(Debug, Clone)]
struct NestedPath {
    cell_of: Vec<u32>,
    cell_size: Vec<f64>,
    exam_of: Vec<u32>,
    exam_size: Vec<f64>,
}

impl NestedPath {
    fn cell_means(&self, v: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.cell_size.len()];
        for (i, &val) in v.iter().enumerate() {
            sums[self.cell_of[i] as usize] += val;
        }
        for (s, n) in sums.iter_mut().zip(&self.cell_size) {
            *s /= n;
        }
        v.iter()
            .enumerate()
            .map(|(i, _)| sums[self.cell_of[i] as usize])
            .collect()
    }

    fn exam_means(&self, v: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.exam_size.len()];
        for (i, &val) in v.iter().enumerate() {
            sums[self.exam_of[i] as usize] += val;
        }
        for (s, n) in sums.iter_mut().zip(&self.exam_size) {
            *s /= n;
        }
        v.iter()
            .enumerate()
            .map(|(i, _)| sums[self.exam_of[i] as usize])
            .collect()
    }
}

/// General path: sparse dummy columns with cached Cholesky factors of W'W
/// (L x L) and of the residualized instrument Gram Z~'Z~ (K x K). Applies
/// cost O(n + K^2 + L^2); nothing n x n is ever formed.
#[derive(Debug, Clone)]
struct GeneralPath {
    n: usize,
    k: usize,
    l: usize,
    z_col: Vec<Option<u32>>,
    row_w: Vec<Vec<u32>>,
    chol_ww: Option<Chol>,
    /// (W'W)^{-1} W'Z, L x K.
    b: DMatrix<f64>,
    chol_zz: Option<Chol>,
}

impl GeneralPath {
    fn build(
        n: usize,
        k: usize,
        l: usize,
        z_col: Vec<Option<u32>>,
        row_w: Vec<Vec<u32>>,
    ) -> Result<GeneralPath> {
        // W'W and W'Z by sparse accumulation; entries are exact counts.
        let chol_ww = if l > 0 {
            let mut ww = DMatrix::<f64>::zeros(l, l);
            for cols in &row_w {
                for &a in cols {
                    for &b in cols {
                        ww[(a as usize, b as usize)] += 1.0;
                    }
                }
            }
            Some(Chol::new(ww).ok_or_else(|| {
                Error::DegenerateDesign(
                    "control Gram matrix is not positive definite; design needs pruning".into(),
                )
            })?)
        } else {
            None
        };

        let mut wz = DMatrix::<f64>::zeros(l.max(1), k.max(1));
        let mut zz_diag = DVector::<f64>::zeros(k.max(1));
        for (i, z) in z_col.iter().enumerate() {
            if let Some(z) = z {
                zz_diag[*z as usize] += 1.0;
                for &w in &row_w[i] {
                    wz[(w as usize, *z as usize)] += 1.0;
                }
            }
        }

        let b = match (&chol_ww, l > 0 && k > 0) {
            (Some(c), true) => c.solve(&wz),
            _ => DMatrix::zeros(l.max(1), k.max(1)),
        };

        let chol_zz = if k > 0 {
            let mut ztz = DMatrix::from_diagonal(&zz_diag.rows(0, k).into_owned());
            if l > 0 {
                ztz -= wz.rows(0, l).transpose() * b.rows(0, l);
            }
            // Enforce exact symmetry before factorizing.
            let sym = (&ztz + ztz.transpose()) * 0.5;
            Some(Chol::new(sym).ok_or_else(|| {
                Error::DegenerateDesign(
                    "instrument Gram matrix is rank deficient after residualizing controls; \
                     design needs pruning"
                        .into(),
                )
            })?)
        } else {
            None
        };

        Ok(GeneralPath {
            n,
            k,
            l,
            z_col,
            row_w,
            chol_ww,
            b,
            chol_zz,
        })
    }

    /// P_W v.
    fn control_fit(&self, v: &[f64]) -> Vec<f64> {
        let Some(chol) = &self.chol_ww else {
            return vec![0.0; self.n];
        };
        let mut s = DVector::<f64>::zeros(self.l);
        for (i, cols) in self.row_w.iter().enumerate() {
            for &w in cols {
                s[w as usize] += v[i];
            }
        }
        let c = chol.solve(&s);
        self.row_w
            .iter()
            .map(|cols| cols.iter().map(|&w| c[w as usize]).sum())
            .collect()
    }

    /// H v for the W-residualized instrument projection.
    fn instrument_fit(&self, mv: &[f64]) -> Vec<f64> {
        let Some(chol) = &self.chol_zz else {
            return vec![0.0; self.n];
        };
        let mut s = DVector::<f64>::zeros(self.k);
        for (i, z) in self.z_col.iter().enumerate() {
            if let Some(z) = z {
                s[*z as usize] += mv[i];
            }
        }
        let c = chol.solve(&s);
        let u: Vec<f64> = self
            .z_col
            .iter()
            .map(|z| z.map_or(0.0, |z| c[z as usize]))
            .collect();
        let pw_u = self.control_fit(&u);
        u.iter().zip(&pw_u).map(|(a, b)| a - b).collect()
    }

    fn m_diag(&self) -> Vec<f64> {
        let Some(chol) = &self.chol_ww else {
            return vec![1.0; self.n];
        };
        let mut cache: HashMap<&[u32], f64> = HashMap::new();
        let mut out = Vec::with_capacity(self.n);
        for cols in &self.row_w {
            let fit = *cache.entry(cols.as_slice()).or_insert_with(|| {
                let mut rhs = DVector::<f64>::zeros(self.l);
                for &w in cols.iter() {
                    rhs[w as usize] += 1.0;
                }
                let sol = chol.solve(&rhs);
                cols.iter().map(|&w| sol[w as usize]).sum()
            });
            out.push(1.0 - fit);
        }
        out
    }

    fn h_diag(&self) -> Vec<f64> {
        let Some(chol) = &self.chol_zz else {
            return vec![0.0; self.n];
        };
        let mut cache: HashMap<(Option<u32>, &[u32]), f64> = HashMap::new();
        let mut out = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let key = (self.z_col[i], self.row_w[i].as_slice());
            let h = *cache.entry(key).or_insert_with(|| {
                // z~_i = z_i - B' w_i as a dense K-vector.
                let mut v = DVector::<f64>::zeros(self.k);
                if let Some(z) = self.z_col[i] {
                    v[z as usize] += 1.0;
                }
                for &w in &self.row_w[i] {
                    for j in 0..self.k {
                        v[j] -= self.b[(w as usize, j)];
                    }
                }
                let sol = chol.solve(&v);
                v.dot(&sol)
            });
            out.push(h);
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Path {
    Nested(NestedPath),
    General(GeneralPath),
}

// ---------------------------------------------------------------------------
// DesignContext.
// ---------------------------------------------------------------------------

/// Encoded design with cached factorizations and hat diagonals.
///
/// All estimator and diagnostic operations go through this context so that
/// the whole toolkit agrees on one design. Diagonal invariants
/// (0 <= H_ii <= M_ii <= 1, sum H_ii = K, sum M_ii = n - L) hold after
/// [`crate::data::prune`].
#[derive(Debug, Clone)]
pub struct DesignContext {
    n: usize,
    k: usize,
    l: usize,
    path: Path,
    m_diag: Vec<f64>,
    h_diag: Vec<f64>,
    z_labels: Vec<String>,
    w_labels: Vec<String>,
    z_col: Vec<Option<u32>>,
    row_w: Vec<Vec<u32>>,
    reference_examiners: Vec<(String, String)>,
    nested: bool,
}

/// Hat diagonals (M_ii, H_ii) for an encoding; used by the pruning loop
/// before a full context exists.
pub(crate) fn hat_diagonals(enc: &Encoding) -> Result<(Vec<f64>, Vec<f64>)> {
    let path = build_path(enc)?;
    Ok(diagonals(&path, enc.n))
}

fn build_path(enc: &Encoding) -> Result<Path> {
    if enc.nested {
        let mut cell_size = vec![0.0; enc.n_cells];
        let mut exam_size = vec![0.0; enc.n_examiners];
        for i in 0..enc.n {
            cell_size[enc.cell_code[i] as usize] += 1.0;
            exam_size[enc.exam_code[i] as usize] += 1.0;
        }
        Ok(Path::Nested(NestedPath {
            cell_of: enc.cell_code.clone(),
            cell_size,
            exam_of: enc.exam_code.clone(),
            exam_size,
        }))
    } else {
        Ok(Path::General(GeneralPath::build(
            enc.n,
            enc.k,
            enc.l,
            enc.z_col.clone(),
            enc.row_w.clone(),
        )?))
    }
}

fn diagonals(path: &Path, n: usize) -> (Vec<f64>, Vec<f64>) {
    match path {
        Path::Nested(p) => {
            let mut m = Vec::with_capacity(n);
            let mut h = Vec::with_capacity(n);
            for i in 0..n {
                let nc = p.cell_size[p.cell_of[i] as usize];
                let ne = p.exam_size[p.exam_of[i] as usize];
                m.push(1.0 - 1.0 / nc);
                h.push(1.0 / ne - 1.0 / nc);
            }
            (m, h)
        }
        Path::General(p) => (p.m_diag(), p.h_diag()),
    }
}

impl DesignContext {
    /// Builds the context for a dataset. The dataset should already be
    /// pruned; rank-deficient designs produce a degenerate-design error.
    pub fn build(ds: &Dataset) -> Result<DesignContext> {
        let enc = encode(ds)?;
        DesignContext::from_encoding(enc)
    }

    pub(crate) fn from_encoding(enc: Encoding) -> Result<DesignContext> {
        let path = build_path(&enc)?;
        let (m_diag, h_diag) = diagonals(&path, enc.n);
        Ok(DesignContext {
            n: enc.n,
            k: enc.k,
            l: enc.l,
            path,
            m_diag,
            h_diag,
            z_labels: enc.z_labels,
            w_labels: enc.w_labels,
            z_col: enc.z_col,
            row_w: enc.row_w,
            reference_examiners: enc.reference_examiners,
            nested: enc.nested,
        })
    }

    /// Builds a context from explicit 0/1 columns given as row-index lists.
    /// Instrument columns must be disjoint (at most one per row); control
    /// columns may overlap arbitrarily. No collinearity scan is applied: a
    /// rank-deficient input is an error.
    pub fn from_columns(
        n: usize,
        instrument_columns: &[Vec<usize>],
        control_columns: &[Vec<usize>],
    ) -> Result<DesignContext> {
        let mut z_col: Vec<Option<u32>> = vec![None; n];
        for (j, rows) in instrument_columns.iter().enumerate() {
            for &i in rows {
                if i >= n {
                    return Err(Error::Dimension(format!(
                        "instrument column {j} references row {i} >= n = {n}"
                    )));
                }
                if z_col[i].is_some() {
                    return Err(Error::Unsupported(format!(
                        "row {i} appears in two instrument columns; instruments must be \
                         mutually exclusive dummies"
                    )));
                }
                z_col[i] = Some(j as u32);
            }
        }
        let mut row_w: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (j, rows) in control_columns.iter().enumerate() {
            for &i in rows {
                if i >= n {
                    return Err(Error::Dimension(format!(
                        "control column {j} references row {i} >= n = {n}"
                    )));
                }
                row_w[i].push(j as u32);
            }
        }
        let k = instrument_columns.len();
        let l = control_columns.len();
        let path = Path::General(GeneralPath::build(n, k, l, z_col.clone(), row_w.clone())?);
        let (m_diag, h_diag) = diagonals(&path, n);
        Ok(DesignContext {
            n,
            k,
            l,
            path,
            m_diag,
            h_diag,
            z_labels: (0..k).map(|j| format!("z{j}")).collect(),
            w_labels: (0..l).map(|j| format!("w{j}")).collect(),
            z_col,
            row_w,
            reference_examiners: Vec::new(),
            nested: false,
        })
    }

    /// (n, K, L): observations, instrument columns, control columns.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.n, self.k, self.l)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// True when projections use the nested-partition closed forms.
    pub fn is_nested_fast_path(&self) -> bool {
        self.nested
    }

    /// Labels of active instrument columns.
    pub fn instrument_labels(&self) -> &[String] {
        &self.z_labels
    }

    /// Labels of active control columns.
    pub fn control_labels(&self) -> &[String] {
        &self.w_labels
    }

    /// (cell, examiner) reference pairs omitted from the instrument set.
    pub fn reference_examiners(&self) -> &[(String, String)] {
        &self.reference_examiners
    }

    /// Row-index lists of the active instrument columns (desk-scale
    /// introspection for oracles and dense diagnostics).
    pub fn instrument_columns(&self) -> Vec<Vec<usize>> {
        let mut cols = vec![Vec::new(); self.k];
        for (i, z) in self.z_col.iter().enumerate() {
            if let Some(z) = z {
                cols[*z as usize].push(i);
            }
        }
        cols
    }

    /// Row-index lists of the active control columns.
    pub fn control_columns(&self) -> Vec<Vec<usize>> {
        let mut cols = vec![Vec::new(); self.l];
        for (i, ws) in self.row_w.iter().enumerate() {
            for &w in ws {
                cols[w as usize].push(i);
            }
        }
        cols
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::Dimension(format!(
                "vector length {} != n = {}",
                v.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// M v = v - P_W v: residualizes out the controls.
    pub fn residualize_controls(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        Ok(match &self.path {
            Path::Nested(p) => {
                let cm = p.cell_means(v);
                v.iter().zip(&cm).map(|(a, b)| a - b).collect()
            }
            Path::General(p) => {
                let fit = p.control_fit(v);
                v.iter().zip(&fit).map(|(a, b)| a - b).collect()
            }
        })
    }

    /// H v: projection onto the W-residualized instrument span.
    pub fn project_instruments(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        Ok(match &self.path {
            Path::Nested(p) => {
                let em = p.exam_means(v);
                let cm = p.cell_means(v);
                em.iter().zip(&cm).map(|(a, b)| a - b).collect()
            }
            Path::General(p) => {
                let mv = self.residualize_controls(v)?;
                p.instrument_fit(&mv)
            }
        })
    }

    /// (M - H) v: residual after projecting on the full design (Z, W).
    pub fn annihilate_design(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mv = self.residualize_controls(v)?;
        let hv = self.project_instruments(v)?;
        Ok(mv.iter().zip(&hv).map(|(a, b)| a - b).collect())
    }

    /// Diagonal of M.
    pub fn m_diag(&self) -> &[f64] {
        &self.m_diag
    }

    /// Diagonal of H.
    pub fn h_diag(&self) -> &[f64] {
        &self.h_diag
    }

    /// Per-observation leave-out margin M_ii - H_ii.
    pub fn leverage_gap(&self) -> Vec<f64> {
        self.m_diag
            .iter()
            .zip(&self.h_diag)
            .map(|(m, h)| m - h)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// The G-matrix family.
// ---------------------------------------------------------------------------

/// Estimator kinds in the unified y'Gx / x'Gx family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GKind {
    /// G = M: ordinary least squares on W-residualized data.
    Ols,
    /// G = H: two-stage least squares.
    #[serde(rename = "2sls")]
    Tsls,
    /// Leave-one-out fit of the full (Z, W) design.
    Jive,
    /// Leave-one-out on pre-residualized data.
    Ijive,
    /// Leave-one-out for both instruments and controls; trace is exactly 0.
    Ujive,
    /// Jackknife-free trace correction of 2SLS; trace is exactly 0.
    B2sls,
    /// Symmetric zero-diagonal weighting from a Hadamard weight system.
    Fejiv,
}

impl GKind {
    /// Every kind, in presentation order.
    pub const ALL: [GKind; 7] = [
        GKind::Ols,
        GKind::Tsls,
        GKind::Jive,
        GKind::Ijive,
        GKind::Ujive,
        GKind::B2sls,
        GKind::Fejiv,
    ];

    /// Parses a kind name; accepts common aliases ("2sls", "tsls").
    pub fn parse(s: &str) -> Result<GKind> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(GKind::Ols),
            "tsls" | "2sls" => Ok(GKind::Tsls),
            "jive" => Ok(GKind::Jive),
            "ijive" => Ok(GKind::Ijive),
            "ujive" => Ok(GKind::Ujive),
            "b2sls" => Ok(GKind::B2sls),
            "fejiv" => Ok(GKind::Fejiv),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GKind::Ols => "ols",
            GKind::Tsls => "2sls",
            GKind::Jive => "jive",
            GKind::Ijive => "ijive",
            GKind::Ujive => "ujive",
            GKind::B2sls => "b2sls",
            GKind::Fejiv => "fejiv",
        }
    }
}

impl fmt::Display for GKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A validated, applicable G matrix for one estimator kind.
///
/// Construction checks the kind's preconditions (leverage margins for the
/// leave-one-out kinds, degrees of freedom for B2SLS, solvability of the
/// weight system for FEJIV) so that `apply` cannot divide by zero.
#[derive(Debug)]
pub struct GMatrix<'a> {
    kind: GKind,
    ctx: &'a DesignContext,
    /// UJIVE diagonal weights H_ii / (M_ii - H_ii).
    ujive_d: Option<Vec<f64>>,
    /// JIVE scale 1 / (1 - D_Q,ii).
    jive_inv: Option<Vec<f64>>,
    /// IJIVE scale 1 / (1 - H_ii).
    ijive_inv: Option<Vec<f64>>,
    /// FEJIV weights and the realized diagonal residual H_ii - (A lambda)_i.
    fejiv: Option<FejivWeights>,
    /// B2SLS constant K / (n - K - L).
    b2sls_c: f64,
}

/// Solved FEJIV weight system.
#[derive(Debug, Clone)]
pub struct FejivWeights {
    /// Per-observation weights lambda solving (M-H)o(M-H) lambda = diag(H).
    pub lambda: Vec<f64>,
    /// Realized diagonal of G; its total magnitude is below
    /// [`FEJIV_RESID_TOL`], or construction would have failed.
    pub diag: Vec<f64>,
    /// Condition estimate of the weight system (exact eigenvalue ratio on
    /// the nested path, Cholesky-diagonal estimate otherwise).
    pub condition: f64,
}

impl<'a> GMatrix<'a> {
    /// Builds the G matrix for `kind` with the default desk-scale cap.
    pub fn new(ctx: &'a DesignContext, kind: GKind) -> Result<GMatrix<'a>> {
        GMatrix::with_fejiv_cap(ctx, kind, DESK_SCALE_CAP)
    }

    /// As [`GMatrix::new`] but with an explicit cap for the dense FEJIV
    /// weight solve on non-nested designs.
    pub fn with_fejiv_cap(ctx: &'a DesignContext, kind: GKind, cap: usize) -> Result<GMatrix<'a>> {
        let (n, k, l) = ctx.counts();
        let mut g = GMatrix {
            kind,
            ctx,
            ujive_d: None,
            jive_inv: None,
            ijive_inv: None,
            fejiv: None,
            b2sls_c: 0.0,
        };
        match kind {
            GKind::Ols | GKind::Tsls => {}
            GKind::Ujive => {
                let mut d = Vec::with_capacity(n);
                for i in 0..n {
                    let gap = ctx.m_diag[i] - ctx.h_diag[i];
                    if gap < LEVERAGE_TOL {
                        return Err(Error::DegenerateLeverage {
                            observation: i,
                            message: format!(
                                "M_ii - H_ii = {gap:.3e} is below tolerance; prune the design first"
                            ),
                        });
                    }
                    d.push(ctx.h_diag[i] / gap);
                }
                g.ujive_d = Some(d);
            }
            GKind::Jive => {
                let mut inv = Vec::with_capacity(n);
                for i in 0..n {
                    // 1 - D_Q,ii = M_ii - H_ii.
                    let gap = ctx.m_diag[i] - ctx.h_diag[i];
                    if gap < LEVERAGE_TOL {
                        return Err(Error::DegenerateLeverage {
                            observation: i,
                            message: format!(
                                "full-design leverage 1 - {gap:.3e}; prune the design first"
                            ),
                        });
                    }
                    inv.push(1.0 / gap);
                }
                g.jive_inv = Some(inv);
            }
            GKind::Ijive => {
                let mut inv = Vec::with_capacity(n);
                for i in 0..n {
                    let slack = 1.0 - ctx.h_diag[i];
                    if slack < LEVERAGE_TOL {
                        return Err(Error::DegenerateLeverage {
                            observation: i,
                            message: format!(
                                "instrument leverage 1 - {slack:.3e}; prune the design first"
                            ),
                        });
                    }
                    inv.push(1.0 / slack);
                }
                g.ijive_inv = Some(inv);
            }
            GKind::B2sls => {
                if n <= k + l {
                    return Err(Error::InsufficientDof(format!(
                        "B2SLS needs n > K + L (n = {n}, K = {k}, L = {l})"
                    )));
                }
                g.b2sls_c = k as f64 / (n - k - l) as f64;
            }
            GKind::Fejiv => {
                g.fejiv = Some(solve_fejiv_weights(ctx, cap)?);
            }
        }
        Ok(g)
    }

    pub fn kind(&self) -> GKind {
        self.kind
    }

    pub fn context(&self) -> &DesignContext {
        self.ctx
    }

    /// Solved FEJIV weights, if this is a FEJIV matrix.
    pub fn fejiv_weights(&self) -> Option<&FejivWeights> {
        self.fejiv.as_ref()
    }

    /// G v.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.ctx.check_len(v)?;
        let ctx = self.ctx;
        match self.kind {
            GKind::Ols => ctx.residualize_controls(v),
            GKind::Tsls => ctx.project_instruments(v),
            GKind::Ujive => {
                let hv = ctx.project_instruments(v)?;
                let mv = ctx.residualize_controls(v)?;
                let d = self.ujive_d.as_ref().expect("validated at construction");
                Ok((0..v.len())
                    .map(|i| hv[i] - d[i] * (mv[i] - hv[i]))
                    .collect())
            }
            GKind::Jive => {
                // M (I - D_Q)^{-1} (H_Q - D_Q) v with H_Q = P_W + H.
                let hv = ctx.project_instruments(v)?;
                let mv = ctx.residualize_controls(v)?;
                let inv = self.jive_inv.as_ref().expect("validated at construction");
                let dq: Vec<f64> = (0..v.len())
                    .map(|i| 1.0 - ctx.m_diag[i] + ctx.h_diag[i])
                    .collect();
                let t: Vec<f64> = (0..v.len())
                    .map(|i| {
                        let hq_v = v[i] - mv[i] + hv[i];
                        (hq_v - dq[i] * v[i]) * inv[i]
                    })
                    .collect();
                ctx.residualize_controls(&t)
            }
            GKind::Ijive => {
                // M (I - D_H)^{-1} (H - D_H) M v.
                let mv = ctx.residualize_controls(v)?;
                let hmv = ctx.project_instruments(&mv)?;
                let inv = self.ijive_inv.as_ref().expect("validated at construction");
                let t: Vec<f64> = (0..v.len())
                    .map(|i| (hmv[i] - ctx.h_diag[i] * mv[i]) * inv[i])
                    .collect();
                ctx.residualize_controls(&t)
            }
            GKind::B2sls => {
                let hv = ctx.project_instruments(v)?;
                let mv = ctx.residualize_controls(v)?;
                Ok((0..v.len())
                    .map(|i| hv[i] - self.b2sls_c * (mv[i] - hv[i]))
                    .collect())
            }
            GKind::Fejiv => {
                let fe = self.fejiv.as_ref().expect("validated at construction");
                let hv = ctx.project_instruments(v)?;
                let mv = ctx.residualize_controls(v)?;
                let t: Vec<f64> = (0..v.len())
                    .map(|i| fe.lambda[i] * (mv[i] - hv[i]))
                    .collect();
                let mt = ctx.residualize_controls(&t)?;
                let ht = ctx.project_instruments(&t)?;
                Ok((0..v.len()).map(|i| hv[i] - (mt[i] - ht[i])).collect())
            }
        }
    }

    /// tr(G), computed from the cached hat diagonals (and, for FEJIV, the
    /// realized diagonal of the weight solve).
    pub fn trace(&self) -> f64 {
        let n = self.ctx.n;
        let m = &self.ctx.m_diag;
        let h = &self.ctx.h_diag;
        match self.kind {
            GKind::Ols => m.iter().sum(),
            GKind::Tsls => h.iter().sum(),
            GKind::Ujive => {
                let d = self.ujive_d.as_ref().expect("validated at construction");
                (0..n).map(|i| h[i] - d[i] * (m[i] - h[i])).sum()
            }
            GKind::Jive => {
                // tr(G) = sum_i (H_ii - D_Q,ii M_ii) / (1 - D_Q,ii).
                let inv = self.jive_inv.as_ref().expect("validated at construction");
                (0..n)
                    .map(|i| {
                        let dq = 1.0 - m[i] + h[i];
                        (h[i] - dq * m[i]) * inv[i]
                    })
                    .sum()
            }
            GKind::Ijive => {
                let inv = self.ijive_inv.as_ref().expect("validated at construction");
                (0..n).map(|i| h[i] * (1.0 - m[i]) * inv[i]).sum()
            }
            GKind::B2sls => (0..n).map(|i| h[i] - self.b2sls_c * (m[i] - h[i])).sum(),
            GKind::Fejiv => {
                let fe = self.fejiv.as_ref().expect("validated at construction");
                fe.diag.iter().sum()
            }
        }
    }

    /// Checksum of the action of G on a fixed probe vector; two G matrices
    /// built from the same design agree on this value bit for bit.
    pub fn probe_checksum(&self) -> Result<f64> {
        let n = self.ctx.n;
        let probe: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).sin()).collect();
        let gv = self.apply(&probe)?;
        Ok(gv
            .iter()
            .enumerate()
            .map(|(i, &g)| g * (i as f64).cos())
            .sum())
    }
}

/// Solves the FEJIV weight system (M-H)o(M-H) lambda = diag(H), where `o`
/// is the entry-wise product. On the nested path the system is block
/// diagonal by examiner with closed-form blocks; otherwise the dense system
/// is formed (requires n <= cap) and factorized.
pub fn fejiv_weights(ctx: &DesignContext) -> Result<FejivWeights> {
    solve_fejiv_weights(ctx, DESK_SCALE_CAP)
}

fn solve_fejiv_weights(ctx: &DesignContext, cap: usize) -> Result<FejivWeights> {
    let n = ctx.n;
    match &ctx.path {
        Path::Nested(p) => {
            // Block for an examiner with caseload m: (1 - 2/m) I + (1/m^2) J.
            // Eigenvalues 1 - 2/m and 1 - 1/m; singular when m <= 2.
            let mut lambda = vec![0.0; n];
            let mut block_rhs_sum = vec![0.0; p.exam_size.len()];
            let mut min_eig = f64::INFINITY;
            let mut max_eig = 0.0f64;
            for (e, &m) in p.exam_size.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                let a = 1.0 - 2.0 / m;
                if a <= LEVERAGE_TOL {
                    return Err(Error::FejivUnavailable(format!(
                        "examiner block with caseload {m} makes the weight system singular \
                         (needs caseload >= 3 on every examiner)"
                    )));
                }
                min_eig = min_eig.min(a);
                max_eig = max_eig.max(1.0 - 1.0 / m);
                let _ = e;
            }
            for i in 0..n {
                block_rhs_sum[p.exam_of[i] as usize] += ctx.h_diag[i];
            }
            for i in 0..n {
                let e = p.exam_of[i] as usize;
                let m = p.exam_size[e];
                let a = 1.0 - 2.0 / m;
                let b = 1.0 / (m * m);
                // Sherman-Morrison for (aI + bJ)^{-1} rhs.
                lambda[i] = ctx.h_diag[i] / a - b * block_rhs_sum[e] / (a * (a + m * b));
            }
            let diag = fejiv_diag_nested(p, &ctx.h_diag, &lambda);
            Ok(FejivWeights {
                lambda,
                diag,
                condition: max_eig / min_eig,
            })
        }
        Path::General(_) => {
            if n > cap {
                return Err(Error::Capacity(format!(
                    "FEJIV weight solve materializes an n x n system; n = {n} exceeds the \
                     cap of {cap} for non-nested designs"
                )));
            }
            // Materialize (M - H) by probing, then square entry-wise.
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut probe = vec![0.0; n];
            for j in 0..n {
                probe[j] = 1.0;
                let col = ctx.annihilate_design(&probe)?;
                probe[j] = 0.0;
                for i in 0..n {
                    a[(i, j)] = col[i] * col[i];
                }
            }
            let sym = (&a + a.transpose()) * 0.5;
            let chol = Chol::new(sym).ok_or_else(|| {
                Error::FejivUnavailable(
                    "Hadamard weight system is not positive definite (an observation with \
                     too small a leave-out margin)"
                        .into(),
                )
            })?;
            let rhs = DVector::from_column_slice(&ctx.h_diag);
            let lambda_v = chol.solve(&rhs);
            let resid = &a * &lambda_v;
            let diag: Vec<f64> = (0..n).map(|i| ctx.h_diag[i] - resid[i]).collect();
            let resid_l1: f64 = diag.iter().map(|d| d.abs()).sum();
            if resid_l1 > FEJIV_RESID_TOL {
                return Err(Error::FejivUnavailable(format!(
                    "Hadamard weight solve is unreliable: the realized diagonal misses \
                     zero by {resid_l1:.1e} in total (leave-out margins too small)"
                )));
            }
            let ld = chol.l_dirty();
            let mut dmin = f64::INFINITY;
            let mut dmax = 0.0f64;
            for i in 0..n {
                let d = ld[(i, i)] * ld[(i, i)];
                dmin = dmin.min(d);
                dmax = dmax.max(d);
            }
            Ok(FejivWeights {
                lambda: lambda_v.iter().copied().collect(),
                diag,
                condition: dmax / dmin,
            })
        }
    }
}

fn fejiv_diag_nested(p: &NestedPath, h_diag: &[f64], lambda: &[f64]) -> Vec<f64> {
    // (A lambda)_i with the closed-form blocks; diag(G) = h - A lambda.
    let n = h_diag.len();
    let mut lam_sum = vec![0.0; p.exam_size.len()];
    for i in 0..n {
        lam_sum[p.exam_of[i] as usize] += lambda[i];
    }
    (0..n)
        .map(|i| {
            let e = p.exam_of[i] as usize;
            let m = p.exam_size[e];
            let a_row = (1.0 - 2.0 / m) * lambda[i] + lam_sum[e] / (m * m);
            h_diag[i] - a_row
        })
        .collect()
}
