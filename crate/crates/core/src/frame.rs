//! Design-matrix assembly shared by the estimators.

use nalgebra::DMatrix;

use crate::data::StudyDataset;
use crate::error::{Error, Result};

/// Shared covariates of the given rows.
pub(crate) fn x_rows(ds: &StudyDataset, rows: &[usize]) -> DMatrix<f64> {
    let p = ds.schema().shared_names.len();
    DMatrix::from_fn(rows.len(), p, |i, j| ds.record(rows[i]).x[j])
}

/// Shared plus target-only covariates of the given (target) rows.
pub(crate) fn xu_rows(ds: &StudyDataset, rows: &[usize]) -> Result<DMatrix<f64>> {
    let px = ds.schema().shared_names.len();
    let pu = ds.schema().target_only_names.len();
    for &r in rows {
        if pu > 0 && ds.record(r).u.is_none() {
            return Err(Error::Validation(format!("record {r} has no target-only covariates")));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), px + pu, |i, j| {
        let rec = ds.record(rows[i]);
        if j < px {
            rec.x[j]
        } else {
            rec.u.as_ref().map_or(0.0, |u| u[j - px])
        }
    }))
}

/// Shared plus target-only covariates of one record as a row vector.
pub(crate) fn xu_of(ds: &StudyDataset, i: usize, buf: &mut Vec<f64>) {
    let rec = ds.record(i);
    buf.clear();
    buf.extend_from_slice(&rec.x);
    match &rec.u {
        Some(u) => buf.extend_from_slice(u),
        None => buf.extend(std::iter::repeat_n(0.0, ds.schema().target_only_names.len())),
    }
}

pub(crate) fn outcomes(ds: &StudyDataset, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| ds.record(i).outcome).collect()
}
