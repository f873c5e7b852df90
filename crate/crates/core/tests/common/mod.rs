#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rsate::data::StudyDataset;
use rsate::sim::{self, DgpConfig};

pub fn small_dgp() -> DgpConfig {
    DgpConfig { n_target: 150, n_aux: 250, ..DgpConfig::default() }
}

pub fn trial(cfg: &DgpConfig, seed: u64) -> StudyDataset {
    sim::generate_trial(cfg, seed).unwrap().dataset
}

/// Least squares through the normal equations, with an intercept column.
pub fn normal_equations(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = rows[0].len() + 1;
    let x = DMatrix::from_fn(rows.len(), p, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * DVector::from_column_slice(y);
    xtx.lu().solve(&xty).unwrap().iter().copied().collect()
}

pub fn predict(beta: &[f64], row: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
}

/// Target-only doubly robust arm estimate with its raw per-record terms.
pub fn nb_arm_oracle(ds: &StudyDataset, arm: u8, p_treat: f64, with_u: bool) -> (f64, Vec<f64>) {
    let feats = |i: usize| {
        let r = ds.record(i);
        let mut v = r.x.clone();
        if with_u {
            v.extend(r.u.clone().unwrap());
        }
        v
    };
    let rows: Vec<usize> = ds.indices_where(|r| r.is_target() && r.treatment == arm);
    let beta = normal_equations(&rows.iter().map(|&i| feats(i)).collect::<Vec<_>>(), &rows.iter().map(|&i| ds.record(i).outcome).collect::<Vec<_>>());
    let e = if arm == 1 { p_treat } else { 1.0 - p_treat };
    let raw: Vec<f64> = (0..ds.n())
        .map(|i| {
            let r = ds.record(i);
            if !r.is_target() {
                return 0.0;
            }
            let yh = predict(&beta, &feats(i));
            yh + if r.treatment == arm { (r.outcome - yh) / e } else { 0.0 }
        })
        .collect();
    (raw.iter().sum::<f64>() / ds.n_target() as f64, raw)
}

/// `sum_i (raw1_i - raw0_i - R_i tau)^2 / n_R^2`.
pub fn se_oracle(ds: &StudyDataset, raw1: &[f64], raw0: &[f64], tau: f64) -> f64 {
    let nr = ds.n_target() as f64;
    let s: f64 = (0..ds.n())
        .map(|i| {
            let r = if ds.record(i).is_target() { 1.0 } else { 0.0 };
            (raw1[i] - raw0[i] - r * tau).powi(2)
        })
        .sum();
    (s / (nr * nr)).sqrt()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}
