//! Tabular data model: schema, CSV loading, subsetting, and design pruning.
//!
//! A [`Dataset`] holds one outcome, one treatment, one examiner column, and
//! one or more categorical fixed-effect factors, plus optional numeric
//! covariates used by the diagnostics. [`prune`] removes observations and
//! design columns that would make leave-one-out estimators undefined.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::design::encode;
use crate::error::{Error, Result};

/// Values treated as missing when parsing covariate cells.
const MISSING_MARKERS: [&str; 4] = ["", "NA", "NaN", "nan"];

/// Column-role mapping from a CSV header onto the design.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Schema {
    /// Outcome column name.
    pub outcome: String,
    /// Treatment column name.
    pub treatment: String,
    /// Examiner (decision-maker) identifier column name.
    pub examiner: String,
    /// Fixed-effect factors; each inner list is a set of columns whose
    /// interaction forms one factor (e.g. `["unit", "year"]`).
    pub fixed_effects: Vec<Vec<String>>,
    /// Extra numeric covariate columns for balance/complier diagnostics.
    pub covariates: Vec<String>,
}

impl Schema {
    /// Parses a fixed-effect specification of the form `"a:b,c"` into
    /// factors `[["a", "b"], ["c"]]`.
    pub fn parse_fixed_effects(spec: &str) -> Result<Vec<Vec<String>>> {
        let mut factors = Vec::new();
        for part in spec.split(',') {
            let cols: Vec<String> = part
                .split(':')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if cols.is_empty() {
                return Err(Error::Schema(format!(
                    "empty fixed-effect factor in spec `{spec}`"
                )));
            }
            factors.push(cols);
        }
        if factors.is_empty() {
            return Err(Error::Schema("no fixed-effect factors given".into()));
        }
        Ok(factors)
    }

    fn validate(&self) -> Result<()> {
        if self.fixed_effects.is_empty() {
            return Err(Error::Schema(
                "at least one fixed-effect factor is required".into(),
            ));
        }
        let mut roles: Vec<(&str, &str)> = vec![
            (self.outcome.as_str(), "outcome"),
            (self.treatment.as_str(), "treatment"),
            (self.examiner.as_str(), "examiner"),
        ];
        for f in &self.fixed_effects {
            for c in f {
                roles.push((c.as_str(), "fixed effect"));
            }
        }
        for c in &self.covariates {
            roles.push((c.as_str(), "covariate"));
        }
        for (i, (name, role)) in roles.iter().enumerate() {
            for (other, other_role) in roles.iter().skip(i + 1) {
                if name == other && !(*role == "fixed effect" && *other_role == "fixed effect") {
                    return Err(Error::Schema(format!(
                        "column `{name}` assigned to both {role} and {other_role}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A categorical column stored as dense codes into a sorted label table.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    /// Column (or interaction) name.
    pub name: String,
    /// Per-row code indexing into `labels`.
    pub codes: Vec<u32>,
    /// Distinct labels in lexicographic order.
    pub labels: Vec<String>,
}

impl Categorical {
    /// Builds a categorical from raw string values, interning labels in
    /// lexicographic order.
    pub fn from_values(name: &str, values: &[String]) -> Self {
        let mut table: BTreeMap<&str, u32> = BTreeMap::new();
        for v in values {
            let next = table.len() as u32;
            table.entry(v.as_str()).or_insert(next);
        }
        // Re-number so codes follow sorted label order.
        let labels: Vec<String> = table.keys().map(|s| s.to_string()).collect();
        let index: BTreeMap<&str, u32> = labels
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        let codes = values.iter().map(|v| index[v.as_str()]).collect();
        Categorical {
            name: name.to_string(),
            codes,
            labels,
        }
    }

    /// Number of distinct levels.
    pub fn n_levels(&self) -> usize {
        self.labels.len()
    }

    /// Label of the code at `row`.
    pub fn label(&self, row: usize) -> &str {
        &self.labels[self.codes[row] as usize]
    }

    /// Per-level row counts.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.labels.len()];
        for &c in &self.codes {
            counts[c as usize] += 1;
        }
        counts
    }

    fn subset(&self, keep: &[bool]) -> Categorical {
        let values: Vec<String> = self
            .codes
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&c, _)| self.labels[c as usize].clone())
            .collect();
        Categorical::from_values(&self.name, &values)
    }
}

/// A numeric covariate; missing values are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: Vec<f64>,
}

impl Covariate {
    /// Rows with a non-missing value.
    pub fn observed_mask(&self) -> Vec<bool> {
        self.values.iter().map(|v| v.is_finite()).collect()
    }
}

/// An in-memory analysis table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub outcome_name: String,
    pub treatment_name: String,
    pub outcome: Vec<f64>,
    pub treatment: Vec<f64>,
    pub examiner: Categorical,
    /// One categorical per fixed-effect factor (interactions already folded).
    pub fixed_effects: Vec<Categorical>,
    pub covariates: Vec<Covariate>,
}

impl Dataset {
    /// Number of observations.
    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Looks up a covariate by name.
    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.name == name)
    }

    /// True when the treatment column is exactly 0/1.
    pub fn treatment_is_binary(&self) -> bool {
        self.treatment.iter().all(|&x| x == 0.0 || x == 1.0)
    }

    /// Loads a CSV file using the given schema.
    pub fn load_csv<P: AsRef<Path>>(path: P, schema: &Schema) -> Result<Dataset> {
        let file = std::fs::File::open(path.as_ref())?;
        Dataset::from_reader(file, schema)
    }

    /// Parses CSV content from any reader using the given schema.
    pub fn from_reader<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);

        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
        };
        let outcome_idx = col(&schema.outcome)?;
        let treatment_idx = col(&schema.treatment)?;
        let examiner_idx = col(&schema.examiner)?;
        let fe_idx: Vec<Vec<usize>> = schema
            .fixed_effects
            .iter()
            .map(|f| f.iter().map(|c| col(c)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let cov_idx: Vec<usize> = schema
            .covariates
            .iter()
            .map(|c| col(c))
            .collect::<Result<Vec<_>>>()?;

        let mut outcome = Vec::new();
        let mut treatment = Vec::new();
        let mut examiner_raw: Vec<String> = Vec::new();
        let mut fe_raw: Vec<Vec<String>> = vec![Vec::new(); fe_idx.len()];
        let mut cov_raw: Vec<Vec<f64>> = vec![Vec::new(); cov_idx.len()];

        for (rec_no, record) in rdr.records().enumerate() {
            let row = rec_no + 1; // 1-based data-row number for messages
            let record = record?;
            let field = |idx: usize, name: &str| -> Result<&str> {
                record.get(idx).ok_or_else(|| Error::Parse {
                    row,
                    column: name.to_string(),
                    message: "row has too few fields".into(),
                })
            };
            let required_f64 = |idx: usize, name: &str| -> Result<f64> {
                let raw = field(idx, name)?;
                if MISSING_MARKERS.contains(&raw) {
                    return Err(Error::Parse {
                        row,
                        column: name.to_string(),
                        message: "missing value in required column".into(),
                    });
                }
                raw.parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: name.to_string(),
                    message: format!("`{raw}` is not a number"),
                })
            };

            outcome.push(required_f64(outcome_idx, &schema.outcome)?);
            treatment.push(required_f64(treatment_idx, &schema.treatment)?);

            let ex = field(examiner_idx, &schema.examiner)?;
            if MISSING_MARKERS.contains(&ex) {
                return Err(Error::Parse {
                    row,
                    column: schema.examiner.clone(),
                    message: "missing examiner identifier".into(),
                });
            }
            examiner_raw.push(ex.to_string());

            for (f, idxs) in fe_idx.iter().enumerate() {
                let mut parts = Vec::with_capacity(idxs.len());
                for (&idx, name) in idxs.iter().zip(&schema.fixed_effects[f]) {
                    let raw = field(idx, name)?;
                    if MISSING_MARKERS.contains(&raw) {
                        return Err(Error::Parse {
                            row,
                            column: name.clone(),
                            message: "missing fixed-effect value".into(),
                        });
                    }
                    parts.push(raw);
                }
                fe_raw[f].push(parts.join(":"));
            }

            for (c, &idx) in cov_idx.iter().enumerate() {
                let raw = field(idx, &schema.covariates[c])?;
                if MISSING_MARKERS.contains(&raw) {
                    cov_raw[c].push(f64::NAN);
                } else {
                    cov_raw[c].push(raw.parse::<f64>().map_err(|_| Error::Parse {
                        row,
                        column: schema.covariates[c].clone(),
                        message: format!("`{raw}` is not a number"),
                    })?);
                }
            }
        }

        if outcome.is_empty() {
            return Err(Error::EmptyData("CSV contains no data rows".into()));
        }

        let examiner = Categorical::from_values(&schema.examiner, &examiner_raw);
        let fixed_effects = fe_raw
            .iter()
            .enumerate()
            .map(|(f, vals)| Categorical::from_values(&schema.fixed_effects[f].join(":"), vals))
            .collect();
        let covariates = cov_raw
            .into_iter()
            .zip(&schema.covariates)
            .map(|(values, name)| Covariate {
                name: name.clone(),
                values,
            })
            .collect();

        let ds = Dataset {
            outcome_name: schema.outcome.clone(),
            treatment_name: schema.treatment.clone(),
            outcome,
            treatment,
            examiner,
            fixed_effects,
            covariates,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the dataset as CSV. Interacted factors are written as a single
    /// column with `:`-joined labels, so a round-trip preserves the design.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec![self.outcome_name.clone(), self.treatment_name.clone()];
        header.push(self.examiner.name.clone());
        for f in &self.fixed_effects {
            header.push(f.name.clone());
        }
        for c in &self.covariates {
            header.push(c.name.clone());
        }
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![
                format_float(self.outcome[i]),
                format_float(self.treatment[i]),
                self.examiner.label(i).to_string(),
            ];
            for f in &self.fixed_effects {
                rec.push(f.label(i).to_string());
            }
            for c in &self.covariates {
                let v = c.values[i];
                rec.push(if v.is_finite() {
                    format_float(v)
                } else {
                    "NA".to_string()
                });
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// The schema this dataset round-trips under.
    pub fn schema(&self) -> Schema {
        Schema {
            outcome: self.outcome_name.clone(),
            treatment: self.treatment_name.clone(),
            examiner: self.examiner.name.clone(),
            fixed_effects: self
                .fixed_effects
                .iter()
                .map(|f| vec![f.name.clone()])
                .collect(),
            covariates: self.covariates.iter().map(|c| c.name.clone()).collect(),
        }
    }

    /// Returns the rows where `keep` is true, re-interning categorical codes.
    pub fn subset(&self, keep: &[bool]) -> Result<Dataset> {
        if keep.len() != self.n() {
            return Err(Error::Dimension(format!(
                "mask length {} != n {}",
                keep.len(),
                self.n()
            )));
        }
        let pick = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .collect()
        };
        let ds = Dataset {
            outcome_name: self.outcome_name.clone(),
            treatment_name: self.treatment_name.clone(),
            outcome: pick(&self.outcome),
            treatment: pick(&self.treatment),
            examiner: self.examiner.subset(keep),
            fixed_effects: self.fixed_effects.iter().map(|f| f.subset(keep)).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    values: pick(&c.values),
                })
                .collect(),
        };
        if ds.n() == 0 {
            return Err(Error::EmptyData("subset removed every observation".into()));
        }
        Ok(ds)
    }

    /// Internal consistency checks: equal lengths, finite outcome/treatment.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::EmptyData("dataset has no observations".into()));
        }
        if self.treatment.len() != n
            || self.examiner.codes.len() != n
            || self.fixed_effects.iter().any(|f| f.codes.len() != n)
            || self.covariates.iter().any(|c| c.values.len() != n)
        {
            return Err(Error::Dimension("columns have unequal lengths".into()));
        }
        if self.fixed_effects.is_empty() {
            return Err(Error::Schema(
                "at least one fixed-effect factor is required".into(),
            ));
        }
        for (i, (&y, &x)) in self.outcome.iter().zip(&self.treatment).enumerate() {
            if !y.is_finite() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: self.outcome_name.clone(),
                    message: "non-finite outcome".into(),
                });
            }
            if !x.is_finite() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: self.treatment_name.clone(),
                    message: "non-finite treatment".into(),
                });
            }
        }
        Ok(())
    }
}

fn format_float(v: f64) -> String {
    // Shortest round-trip representation keeps files deterministic.
    let mut buf = ryu_free_format(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_free_format(v: f64) -> String {
    // `{}` on f64 is the shortest representation that round-trips.
    format!("{v}")
}

/// Why an observation was removed by [`prune`].
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    /// Sole member of a fixed-effect cell.
    SingletonCell { factor: String, level: String },
    /// Sole case of an examiner.
    SingletonExaminer { examiner: String },
    /// Leverage one under the full design: M_ii - H_ii below tolerance.
    LeverageOne,
}

/// One dropped observation; `row` indexes the dataset passed to [`prune`].
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct DroppedRow {
    pub row: usize,
    #[serde(flatten)]
    pub reason: DropReason,
}

/// What [`prune`] removed and how many passes it took.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PruneReport {
    /// Fixpoint passes over the three rules.
    pub iterations: usize,
    /// Observations dropped, in drop order, with reasons.
    pub dropped_rows: Vec<DroppedRow>,
    /// Instrument (examiner dummy) labels dropped as collinear in the final
    /// design. Reference examiners are a separate convention, not a drop.
    pub dropped_instrument_columns: Vec<String>,
    /// Control (fixed-effect dummy) labels dropped as collinear.
    pub dropped_control_columns: Vec<String>,
}

impl PruneReport {
    pub fn n_dropped_rows(&self) -> usize {
        self.dropped_rows.len()
    }

    pub fn n_singleton_drops(&self) -> usize {
        self.dropped_rows
            .iter()
            .filter(|d| !matches!(d.reason, DropReason::LeverageOne))
            .count()
    }

    pub fn n_leverage_drops(&self) -> usize {
        self.dropped_rows
            .iter()
            .filter(|d| matches!(d.reason, DropReason::LeverageOne))
            .count()
    }

    /// One-line human-readable summary.
    pub fn summary(&self) -> String {
        format!(
            "pruned {} observation(s) ({} singleton, {} leverage-one), \
             {} collinear instrument column(s), {} collinear control column(s) \
             in {} pass(es)",
            self.n_dropped_rows(),
            self.n_singleton_drops(),
            self.n_leverage_drops(),
            self.dropped_instrument_columns.len(),
            self.dropped_control_columns.len(),
            self.iterations
        )
    }
}

/// Tolerance below which M_ii - H_ii counts as leverage one.
pub const LEVERAGE_TOL: f64 = 1e-10;

/// Iteratively removes observations and design columns until the design
/// supports leave-one-out estimation.
///
/// Each pass applies, in order: (a) drop observations that are the sole
/// member of a fixed-effect cell or the sole case of an examiner; (b) drop
/// instrument/control dummy columns collinear with the rest of the design;
/// (c) drop observations whose leverage under the full design is one
/// (M_ii - H_ii < 1e-10). Passes repeat until nothing changes. The result is
/// idempotent: pruning a pruned dataset changes nothing.
pub fn prune(dataset: &Dataset) -> Result<(Dataset, PruneReport)> {
    dataset.validate()?;
    let n_input = dataset.n();
    // Map current row -> row index in the input dataset, for reporting.
    let mut origin: Vec<usize> = (0..n_input).collect();
    let mut current = dataset.clone();
    let mut report = PruneReport::default();

    loop {
        report.iterations += 1;
        if report.iterations > n_input + 2 {
            // Each productive pass removes something, so this cannot happen.
            return Err(Error::DegenerateDesign(
                "pruning failed to reach a fixpoint".into(),
            ));
        }
        let mut changed = false;

        // (a) singleton cells and singleton examiners, one sweep.
        let mut keep = vec![true; current.n()];
        let exam_counts = current.examiner.level_counts();
        let fe_counts: Vec<Vec<usize>> =
            current.fixed_effects.iter().map(|f| f.level_counts()).collect();
        for i in 0..current.n() {
            let mut reason = None;
            for (f, counts) in fe_counts.iter().enumerate() {
                if counts[current.fixed_effects[f].codes[i] as usize] == 1 {
                    reason = Some(DropReason::SingletonCell {
                        factor: current.fixed_effects[f].name.clone(),
                        level: current.fixed_effects[f].label(i).to_string(),
                    });
                    break;
                }
            }
            if reason.is_none() && exam_counts[current.examiner.codes[i] as usize] == 1 {
                reason = Some(DropReason::SingletonExaminer {
                    examiner: current.examiner.label(i).to_string(),
                });
            }
            if let Some(reason) = reason {
                keep[i] = false;
                report.dropped_rows.push(DroppedRow {
                    row: origin[i],
                    reason,
                });
            }
        }
        if keep.iter().any(|&k| !k) {
            changed = true;
            if keep.iter().all(|&k| !k) {
                return Err(Error::DegenerateDesign(
                    "pruning removed every observation".into(),
                ));
            }
            origin = origin
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(&o, _)| o)
                .collect();
            current = current.subset(&keep)?;
        }

        // (b) + (c): encode the design, then check leverage. The encoding
        // itself performs the collinearity scan.
        let enc = encode(&current)?;
        let (m_diag, h_diag) = crate::design::hat_diagonals(&enc)?;
        let mut keep = vec![true; current.n()];
        for i in 0..current.n() {
            if m_diag[i] - h_diag[i] < LEVERAGE_TOL {
                keep[i] = false;
                report.dropped_rows.push(DroppedRow {
                    row: origin[i],
                    reason: DropReason::LeverageOne,
                });
            }
        }
        if keep.iter().any(|&k| !k) {
            if keep.iter().all(|&k| !k) {
                return Err(Error::DegenerateDesign(
                    "pruning removed every observation".into(),
                ));
            }
            origin = origin
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(&o, _)| o)
                .collect();
            current = current.subset(&keep)?;
            continue;
        }
        if !changed {
            // Nothing dropped this pass: the column drops of the final
            // encoding are the report's column drops. (Column drops alone do
            // not force another pass; they are recomputed on every pass.)
            report.dropped_instrument_columns = enc.dropped_instruments;
            report.dropped_control_columns = enc.dropped_controls;
            return Ok((current, report));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv() -> &'static str {
        "y,x,judge,court,age\n\
         1.0,1,j1,c1,30\n\
         2.0,0,j2,c1,41\n\
         0.5,1,j1,c1,NA\n\
         1.5,0,j2,c1,28\n\
         3.0,1,j3,c2,50\n\
         2.5,0,j4,c2,33\n\
         1.0,1,j3,c2,44\n\
         0.0,0,j4,c2,39\n"
    }

    fn toy_schema() -> Schema {
        Schema {
            outcome: "y".into(),
            treatment: "x".into(),
            examiner: "judge".into(),
            fixed_effects: vec![vec!["court".into()]],
            covariates: vec!["age".into()],
        }
    }

    #[test]
    fn loads_and_interns_sorted() {
        let ds = Dataset::from_reader(toy_csv().as_bytes(), &toy_schema()).unwrap();
        assert_eq!(ds.n(), 8);
        assert_eq!(ds.examiner.labels, vec!["j1", "j2", "j3", "j4"]);
        assert_eq!(ds.fixed_effects[0].labels, vec!["c1", "c2"]);
        assert!(ds.covariates[0].values[2].is_nan());
        assert!(ds.treatment_is_binary());
    }

    #[test]
    fn missing_examiner_names_row() {
        let csv = "y,x,judge,court\n1.0,1,j1,c1\n2.0,0,,c1\n";
        let schema = Schema {
            covariates: vec![],
            ..toy_schema()
        };
        let err = Dataset::from_reader(csv.as_bytes(), &schema).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "judge");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "y,x,judge\n1.0,1,j1\n";
        let err = Dataset::from_reader(csv.as_bytes(), &toy_schema()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err}");
    }

    #[test]
    fn empty_file_is_empty_data() {
        let csv = "y,x,judge,court,age\n";
        let err = Dataset::from_reader(csv.as_bytes(), &toy_schema()).unwrap_err();
        assert!(matches!(err, Error::EmptyData(_)), "got {err}");
    }

    #[test]
    fn duplicate_role_is_schema_error() {
        let mut schema = toy_schema();
        schema.treatment = "y".into();
        let err = Dataset::from_reader(toy_csv().as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err}");
    }

    #[test]
    fn non_numeric_outcome_names_row_and_column() {
        let csv = "y,x,judge,court\n1.0,1,j1,c1\noops,0,j2,c1\n";
        let schema = Schema {
            covariates: vec![],
            ..toy_schema()
        };
        let err = Dataset::from_reader(csv.as_bytes(), &schema).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn interaction_folds_columns() {
        let csv = "y,x,judge,unit,year\n\
                   1.0,1,j1,u1,2001\n\
                   2.0,0,j2,u1,2001\n\
                   1.0,1,j1,u1,2002\n\
                   2.0,0,j2,u1,2002\n";
        let schema = Schema {
            outcome: "y".into(),
            treatment: "x".into(),
            examiner: "judge".into(),
            fixed_effects: vec![vec!["unit".into(), "year".into()]],
            covariates: vec![],
        };
        let ds = Dataset::from_reader(csv.as_bytes(), &schema).unwrap();
        assert_eq!(ds.fixed_effects[0].name, "unit:year");
        assert_eq!(ds.fixed_effects[0].labels, vec!["u1:2001", "u1:2002"]);
    }

    #[test]
    fn subset_reinterns_codes() {
        let ds = Dataset::from_reader(toy_csv().as_bytes(), &toy_schema()).unwrap();
        let keep: Vec<bool> = (0..8).map(|i| i >= 4).collect();
        let sub = ds.subset(&keep).unwrap();
        assert_eq!(sub.n(), 4);
        assert_eq!(sub.examiner.labels, vec!["j3", "j4"]);
        assert_eq!(sub.fixed_effects[0].labels, vec!["c2"]);
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::from_reader(toy_csv().as_bytes(), &toy_schema()).unwrap();
        let dir = std::env::temp_dir().join("leniency_iv_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.csv");
        ds.write_csv(&path).unwrap();
        let back = Dataset::load_csv(&path, &ds.schema()).unwrap();
        assert_eq!(back.n(), ds.n());
        assert_eq!(back.outcome, ds.outcome);
        assert_eq!(back.examiner.labels, ds.examiner.labels);
        // NaN != NaN, so compare covariates by finiteness pattern and values.
        for (a, b) in ds.covariates[0].values.iter().zip(&back.covariates[0].values) {
            assert_eq!(a.is_finite(), b.is_finite());
            if a.is_finite() {
                assert_eq!(a, b);
            }
        }
        std::fs::remove_file(&path).ok();
    }
}
