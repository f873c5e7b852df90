//! Trial data model, CSV ingestion, validation, nearest-neighbor matching and
//! the difference-in-means benchmark.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{ArmEstimate, TauEstimate};

/// Region label reserved for the target region.
pub const TARGET_REGION: i64 = 1;

/// Column bindings for a trial file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    /// Covariates recorded in every region (X).
    pub shared_names: Vec<String>,
    /// Covariates recorded only in the target region (U).
    #[serde(default)]
    pub target_only_names: Vec<String>,
    #[serde(default = "default_region_column")]
    pub region_column: String,
    #[serde(default = "default_treatment_column")]
    pub treatment_column: String,
    #[serde(default = "default_outcome_column")]
    pub outcome_column: String,
}

fn default_region_column() -> String {
    "R".into()
}
fn default_treatment_column() -> String {
    "A".into()
}
fn default_outcome_column() -> String {
    "Y".into()
}

impl CovariateSchema {
    pub fn new<S: Into<String>>(shared: impl IntoIterator<Item = S>, target_only: impl IntoIterator<Item = S>) -> Self {
        Self {
            shared_names: shared.into_iter().map(Into::into).collect(),
            target_only_names: target_only.into_iter().map(Into::into).collect(),
            region_column: default_region_column(),
            treatment_column: default_treatment_column(),
            outcome_column: default_outcome_column(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.shared_names.is_empty() {
            return Err(Error::Schema("shared covariate list is empty".into()));
        }
        let mut seen = HashSet::new();
        let all = self
            .shared_names
            .iter()
            .chain(&self.target_only_names)
            .chain([&self.region_column, &self.treatment_column, &self.outcome_column]);
        for name in all {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("column name `{name}` is used twice")));
            }
        }
        Ok(())
    }

    pub fn shared_index(&self, name: &str) -> Option<usize> {
        self.shared_names.iter().position(|n| n == name)
    }
}

/// One patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub region: i64,
    pub treatment: u8,
    pub outcome: f64,
    pub x: Vec<f64>,
    pub u: Option<Vec<f64>>,
}

impl TrialRecord {
    #[inline]
    pub fn is_target(&self) -> bool {
        self.region == TARGET_REGION
    }
}

/// An ordered collection of trial records. Record order is part of the
/// identity of a dataset: selection sets and randomization draws refer to
/// records by index.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    schema: CovariateSchema,
    records: Vec<TrialRecord>,
    n_target: usize,
}

impl StudyDataset {
    /// Builds a dataset, checking record shapes against the schema. Softer
    /// rules (target rows carrying U, both target arms present) are reported
    /// by [`validate`].
    pub fn new(schema: CovariateSchema, records: Vec<TrialRecord>) -> Result<Self> {
        schema.check()?;
        let px = schema.shared_names.len();
        let pu = schema.target_only_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.treatment > 1 {
                return Err(Error::Validation(format!("row {i}: treatment must be 0 or 1")));
            }
            if r.x.len() != px {
                return Err(Error::dimension(format!("row {i}: expected {px} shared covariates, found {}", r.x.len())));
            }
            if let Some(u) = &r.u {
                if u.len() != pu {
                    return Err(Error::dimension(format!("row {i}: expected {pu} target-only covariates, found {}", u.len())));
                }
            }
            if !r.outcome.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("row {i}: non-finite outcome or covariate")));
            }
        }
        let n_target = records.iter().filter(|r| r.is_target()).count();
        Ok(Self { schema, records, n_target })
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &TrialRecord {
        &self.records[i]
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn n_aux(&self) -> usize {
        self.records.len() - self.n_target
    }

    pub fn treatments(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.treatment).collect()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.records[i].is_target()).collect()
    }

    /// Indices of records in the given region and arm.
    pub fn indices_where(&self, pred: impl Fn(&TrialRecord) -> bool) -> Vec<usize> {
        self.records.iter().enumerate().filter(|(_, r)| pred(r)).map(|(i, _)| i).collect()
    }

    /// Distinct auxiliary region labels in order of first appearance.
    pub fn aux_regions(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for r in &self.records {
            if !r.is_target() && !out.contains(&r.region) {
                out.push(r.region);
            }
        }
        out
    }

    /// Number of target-region records in each arm, `[controls, treated]`.
    pub fn target_arm_counts(&self) -> [usize; 2] {
        let mut c = [0usize; 2];
        for r in self.records.iter().filter(|r| r.is_target()) {
            c[r.treatment as usize] += 1;
        }
        c
    }

    /// Copy of the dataset with the treatment vector replaced.
    pub fn with_assignment(&self, assignment: &[u8]) -> Result<Self> {
        if assignment.len() != self.n() {
            return Err(Error::dimension(format!(
                "assignment has length {}, dataset has {} records",
                assignment.len(),
                self.n()
            )));
        }
        let mut out = self.clone();
        for (r, &a) in out.records.iter_mut().zip(assignment) {
            if a > 1 {
                return Err(Error::Validation("assignment entries must be 0 or 1".into()));
            }
            r.treatment = a;
        }
        Ok(out)
    }

    /// Dataset made of the given records, in the given order (duplicates allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        let records: Vec<TrialRecord> = indices.iter().map(|&i| self.records[i].clone()).collect();
        let n_target = records.iter().filter(|r| r.is_target()).count();
        Self { schema: self.schema.clone(), records, n_target }
    }

    /// Restrict shared covariates to `names` (in that order).
    pub fn with_shared_subset(&self, names: &[String]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.schema
                    .shared_index(n)
                    .ok_or_else(|| Error::Schema(format!("unknown shared covariate `{n}`")))
            })
            .collect::<Result<_>>()?;
        let mut schema = self.schema.clone();
        schema.shared_names = names.to_vec();
        let records = self
            .records
            .iter()
            .map(|r| TrialRecord { x: idx.iter().map(|&j| r.x[j]).collect(), ..r.clone() })
            .collect();
        // An empty shared set is allowed here (intercept-only nuisance models).
        Ok(Self { schema, records, n_target: self.n_target })
    }
}

fn parse_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

fn parse_num(cell: &str, row: usize, col: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        message: format!("column `{col}`: `{cell}` is not numeric"),
    })
}

/// Reads a CSV file with a header row. Rows with a missing shared covariate
/// or outcome are dropped (and logged); absent target-only covariates on
/// auxiliary rows are stored as `None`.
pub fn load_dataset(path: impl AsRef<Path>, schema: &CovariateSchema) -> Result<StudyDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &CovariateSchema) -> Result<StudyDataset> {
    schema.check()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let r_col = col(&schema.region_column)?;
    let a_col = col(&schema.treatment_column)?;
    let y_col = col(&schema.outcome_column)?;
    let x_cols: Vec<usize> = schema.shared_names.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let u_cols: Vec<usize> = schema.target_only_names.iter().map(|n| col(n)).collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut dropped = 0usize;
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        // 1-based data row number (header excluded).
        let line = k + 1;
        let get = |c: usize| row.get(c).unwrap_or("");
        let region_cell = get(r_col);
        let region = region_cell
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.fract() == 0.0)
            .map(|v| v as i64)
            .ok_or_else(|| Error::Parse { row: line, message: format!("region `{region_cell}` is not an integer") })?;
        let a_cell = get(a_col);
        let treatment = match a_cell.trim().parse::<f64>() {
            Ok(v) if v == 0.0 => 0,
            Ok(v) if v == 1.0 => 1,
            _ => {
                return Err(Error::Parse { row: line, message: format!("treatment `{a_cell}` is not 0 or 1") });
            }
        };
        if parse_missing(get(y_col)) || x_cols.iter().any(|&c| parse_missing(get(c))) {
            dropped += 1;
            continue;
        }
        let outcome = parse_num(get(y_col), line, &schema.outcome_column)?;
        let x = x_cols
            .iter()
            .zip(&schema.shared_names)
            .map(|(&c, n)| parse_num(get(c), line, n))
            .collect::<Result<Vec<_>>>()?;
        let u = if u_cols.iter().any(|&c| parse_missing(get(c))) {
            if region == TARGET_REGION && !u_cols.is_empty() {
                return Err(Error::Validation(format!("row {line}: target-region row is missing a target-only covariate")));
            }
            None
        } else {
            Some(
                u_cols
                    .iter()
                    .zip(&schema.target_only_names)
                    .map(|(&c, n)| parse_num(get(c), line, n))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        records.push(TrialRecord { region, treatment, outcome, x, u });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing outcome or shared covariates");
    }
    StudyDataset::new(schema.clone(), records)
}

/// Writes the dataset as CSV. Numbers use the shortest representation that
/// parses back to the identical `f64`; absent U is written as `NA`.
pub fn save_dataset(dataset: &StudyDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_dataset(dataset, file)
}

pub fn write_dataset<W: std::io::Write>(dataset: &StudyDataset, writer: W) -> Result<()> {
    let s = dataset.schema();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![s.region_column.clone(), s.treatment_column.clone(), s.outcome_column.clone()];
    header.extend(s.shared_names.iter().cloned());
    header.extend(s.target_only_names.iter().cloned());
    w.write_record(&header)?;
    for r in dataset.records() {
        let mut row = vec![r.region.to_string(), r.treatment.to_string(), r.outcome.to_string()];
        row.extend(r.x.iter().map(|v| v.to_string()));
        match &r.u {
            Some(u) => row.extend(u.iter().map(|v| v.to_string())),
            None => row.extend(s.target_only_names.iter().map(|_| "NA".to_string())),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Checks dataset invariants; returns one description per violation.
pub fn validate(dataset: &StudyDataset) -> Vec<String> {
    let mut out = Vec::new();
    let needs_u = !dataset.schema().target_only_names.is_empty();
    for (i, r) in dataset.records().iter().enumerate() {
        if r.is_target() && needs_u && r.u.is_none() {
            out.push(format!("row {i}: target-region record has no target-only covariates"));
        }
        if r.treatment > 1 {
            out.push(format!("row {i}: treatment must be 0 or 1"));
        }
    }
    let [c0, c1] = dataset.target_arm_counts();
    if dataset.n_target() < 2 {
        out.push(format!("target region has {} records; at least 2 required", dataset.n_target()));
    }
    if c0 == 0 {
        out.push("no target controls".to_string());
    }
    if c1 == 0 {
        out.push("no target treated".to_string());
    }
    out
}

/// Greedy nearest-neighbor matching of auxiliary records to target records
/// on a scalar score.
///
/// Auxiliary records whose score falls outside the target score range are
/// removed first. Target records are then processed in dataset order; each
/// takes up to `ratio` of the nearest unused auxiliary records from its own
/// arm (ties go to the lower record index). All target records are kept.
pub fn nn_match(dataset: &StudyDataset, ratio: usize, score: &[f64]) -> Result<StudyDataset> {
    if score.len() != dataset.n() {
        return Err(Error::dimension(format!("score has length {}, dataset has {} records", score.len(), dataset.n())));
    }
    if ratio == 0 {
        return Err(Error::precondition("matching ratio must be at least 1"));
    }
    let targets = dataset.target_indices();
    if targets.is_empty() {
        return Err(Error::precondition("no target-region records to match"));
    }
    let lo = targets.iter().map(|&i| score[i]).fold(f64::INFINITY, f64::min);
    let hi = targets.iter().map(|&i| score[i]).fold(f64::NEG_INFINITY, f64::max);

    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in dataset.records().iter().enumerate() {
        if !r.is_target() && score[i] >= lo && score[i] <= hi {
            pools[r.treatment as usize].push(i);
        }
    }
    for arm in 0..2 {
        let has_target = targets.iter().any(|&i| dataset.record(i).treatment as usize == arm);
        if has_target && pools[arm].is_empty() {
            return Err(Error::precondition(format!("no auxiliary records within target support for arm {arm}")));
        }
    }

    let mut used = vec![false; dataset.n()];
    for &t in &targets {
        let arm = dataset.record(t).treatment as usize;
        let mut candidates: Vec<(f64, usize)> = pools[arm]
            .iter()
            .filter(|&&j| !used[j])
            .map(|&j| ((score[j] - score[t]).abs(), j))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in candidates.iter().take(ratio) {
            used[j] = true;
        }
    }
    let keep: Vec<usize> = (0..dataset.n()).filter(|&i| dataset.record(i).is_target() || used[i]).collect();
    Ok(dataset.select(&keep))
}

/// Unadjusted difference in target-region arm means with the unpooled
/// two-sample standard error.
pub fn difference_in_means(dataset: &StudyDataset, alpha: f64) -> Result<TauEstimate> {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for r in dataset.records().iter().filter(|r| r.is_target()) {
        sums[r.treatment as usize] += r.outcome;
        counts[r.treatment as usize] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::precondition("difference in means needs target records in both arms"));
    }
    let means = [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64];
    let mut ss = [0.0f64; 2];
    for r in dataset.records().iter().filter(|r| r.is_target()) {
        let a = r.treatment as usize;
        ss[a] += (r.outcome - means[a]).powi(2);
    }
    let mut flags = Vec::new();
    let mut var = 0.0;
    for a in 0..2 {
        if counts[a] > 1 {
            var += ss[a] / (counts[a] - 1) as f64 / counts[a] as f64;
        } else {
            flags.push(format!("single target record in arm {a}; its variance is taken as 0"));
        }
    }
    let n = dataset.n() as f64;
    let n_target = dataset.n_target() as f64;
    let arm = |a: usize| {
        let contributions = dataset
            .records()
            .iter()
            .map(|r| {
                if r.is_target() && r.treatment as usize == a {
                    r.outcome * n_target / counts[a] as f64 * n / n_target
                } else {
                    0.0
                }
            })
            .collect();
        ArmEstimate { arm: a as u8, theta_hat: means[a], contributions }
    };
    let mut est = TauEstimate::from_arms("DiM", arm(1), arm(0), var.sqrt(), alpha);
    est.flags = flags;
    Ok(est)
}

/// Counts of records per (region, arm), used in reports.
pub fn arm_table(dataset: &StudyDataset) -> BTreeMap<(i64, u8), usize> {
    let mut t = BTreeMap::new();
    for r in dataset.records() {
        *t.entry((r.region, r.treatment)).or_insert(0) += 1;
    }
    t
}
