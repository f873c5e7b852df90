//! Cross-validation+ conformal p-values measuring how exchangeable each
//! auxiliary record is with the target region.
//!
//! For arm `a`, the target records of that arm are split into K folds. A
//! linear outcome model on the shared covariates is fitted with each fold
//! held out. A target record is scored against the model that did not see
//! it; an auxiliary record is scored against every held-out model, once per
//! target record, and its p-value counts how many target scores are at least
//! as large.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::StudyDataset;
use crate::error::{Error, Result};
use crate::estimators::{aux_arm_rows, target_arm_rows};
use crate::frame;
use crate::models::{self, FoldAssignment, LinearModelFit, Predictor};
use crate::seed::{self, stage};

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalScoreTable {
    pub arm: u8,
    pub fold_assignment: FoldAssignment,
    /// Target records of the arm, in increasing index order.
    pub target_rows: Vec<usize>,
    /// Auxiliary records of the arm, in increasing index order.
    pub aux_rows: Vec<usize>,
    /// Held-out absolute residual of each target record.
    pub calib_scores: Vec<f64>,
    /// Auxiliary rows by target rows: residual of the auxiliary record under
    /// the model that held out the target record's fold.
    pub aux_scores: DMatrix<f64>,
    pub flags: Vec<String>,
}

/// Conformal p-values of every record; target records carry 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueTable {
    pub p: Vec<f64>,
    /// Number of target calibration records per arm, `[arm 0, arm 1]`.
    pub calib_sizes: [usize; 2],
    /// Folds actually used per arm.
    pub folds: [usize; 2],
    pub seed: u64,
    pub flags: Vec<String>,
}

/// One row of the audit table written for a [`PValueTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRow {
    pub record_index: usize,
    pub region: i64,
    pub arm: u8,
    pub p_value: f64,
}

impl PValueTable {
    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.p[i]
    }

    /// Auxiliary records only, in index order.
    pub fn rows(&self, dataset: &StudyDataset) -> Vec<PValueRow> {
        dataset
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_target())
            .map(|(i, r)| PValueRow { record_index: i, region: r.region, arm: r.treatment, p_value: self.p[i] })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, dataset: &StudyDataset, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in self.rows(dataset) {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed of the fold split of arm `arm` under master seed `seed`.
pub fn fold_seed(seed: u64, arm: u8) -> u64 {
    seed::derive(seed, &[stage::CONFORMAL, arm as u64])
}

/// Held-out fits and scores for one arm.
pub fn conformal_scores(dataset: &StudyDataset, arm: u8, k: usize, seed: u64) -> Result<ConformalScoreTable> {
    let target_rows = target_arm_rows(dataset, arm);
    let aux_rows = aux_arm_rows(dataset, arm);
    let m = target_rows.len();
    let mut flags = Vec::new();
    if m < 2 {
        return Err(Error::precondition(format!("arm {arm} has {m} target records; conformal scores need at least 2")));
    }
    if k < 2 {
        return Err(Error::precondition("conformal scores need at least two folds"));
    }
    let k = if k > m {
        flags.push(format!("arm {arm}: folds reduced from {k} to {m}"));
        m
    } else {
        k
    };
    let folds = models::kfold_split(&target_rows, k, fold_seed(seed, arm))?;
    let p = dataset.schema().shared_names.len();

    // fold f (1-based) -> model trained without it
    let mut fits: Vec<LinearModelFit> = Vec::with_capacity(k);
    for f in 1..=k {
        let train: Vec<usize> = target_rows.iter().copied().filter(|i| folds.fold_of[i] != f).collect();
        let y = frame::outcomes(dataset, &train);
        let fit = if train.len() < p + 1 {
            flags.push(format!("arm {arm}: fold {f} trained on {} rows, intercept only", train.len()));
            let mut fit = LinearModelFit::intercept_only(&y);
            fit.coefficients.resize(p + 1, 0.0);
            fit
        } else {
            models::fit_linear(&frame::x_rows(dataset, &train), &y)?
        };
        fits.push(fit);
    }

    let residual = |fit: &LinearModelFit, i: usize| {
        let r = dataset.record(i);
        (r.outcome - fit.predict_row(&r.x)).abs()
    };
    let calib_scores: Vec<f64> = target_rows.iter().map(|&i| residual(&fits[folds.fold_of[&i] - 1], i)).collect();
    // the residual only depends on the fold, so compute once per fold and spread
    let mut by_fold = DMatrix::zeros(aux_rows.len(), k);
    for (f, fit) in fits.iter().enumerate() {
        for (row, &j) in aux_rows.iter().enumerate() {
            by_fold[(row, f)] = residual(fit, j);
        }
    }
    let aux_scores =
        DMatrix::from_fn(aux_rows.len(), m, |row, col| by_fold[(row, folds.fold_of[&target_rows[col]] - 1)]);
    Ok(ConformalScoreTable { arm, fold_assignment: folds, target_rows, aux_rows, calib_scores, aux_scores, flags })
}

/// `p_j = (1 + #{i : s_i >= s_j^i}) / (m + 1)` for each auxiliary record.
pub fn cvplus_from_scores(table: &ConformalScoreTable) -> Vec<f64> {
    let m = table.calib_scores.len();
    (0..table.aux_rows.len())
        .map(|row| {
            let hits = table.calib_scores.iter().enumerate().filter(|&(col, &s)| s >= table.aux_scores[(row, col)]).count();
            (hits + 1) as f64 / (m + 1) as f64
        })
        .collect()
}

/// Conformal p-values for both arms from the given score tables.
pub fn cvplus_pvalues(dataset: &StudyDataset, tables: &[ConformalScoreTable; 2], seed: u64) -> PValueTable {
    let mut p = vec![1.0; dataset.n()];
    let mut flags = Vec::new();
    for t in tables {
        for (row, pv) in cvplus_from_scores(t).into_iter().enumerate() {
            p[t.aux_rows[row]] = pv;
        }
        flags.extend(t.flags.iter().cloned());
    }
    PValueTable {
        p,
        calib_sizes: [tables[0].calib_scores.len(), tables[1].calib_scores.len()],
        folds: [tables[0].fold_assignment.k, tables[1].fold_assignment.k],
        seed,
        flags,
    }
}

/// Scores and p-values for both arms in one call.
pub fn conformal_pvalues(dataset: &StudyDataset, k: usize, seed: u64) -> Result<PValueTable> {
    let tables = [conformal_scores(dataset, 0, k, seed)?, conformal_scores(dataset, 1, k, seed)?];
    Ok(cvplus_pvalues(dataset, &tables, seed))
}
