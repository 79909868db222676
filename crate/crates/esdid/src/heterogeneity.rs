//! Effect-heterogeneity tooling: regressions of group-level effect estimates
//! on group-level predictors.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::{Design, Direction};
use crate::error::{Error, Result};
use crate::estimate::Aggregates;
use crate::numeric::{chi2_sf, solve_sym_pivoted};
use crate::panel::Panel;

/// One coefficient in a heterogeneity regression.
#[derive(Debug, Clone, Serialize)]
pub struct HetCoef {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

/// Regression of group-level effect estimates on predictors, one horizon.
#[derive(Debug, Clone, Serialize)]
pub struct HetTable {
    pub horizon: usize,
    pub coefs: Vec<HetCoef>,
    pub dropped: Vec<String>,
    /// Joint test that all predictor coefficients are zero.
    pub joint_p: Option<f64>,
    pub n_switchers: usize,
    pub note: Option<String>,
}

/// Heteroskedasticity-robust weighted least squares used by the
/// heterogeneity regressions.
fn robust_wls(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>, Vec<bool>) {
    let k = x.ncols();
    let mut gram = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for r in 0..x.nrows() {
        let wi = w[r];
        for i in 0..k {
            for j in i..k {
                gram[(i, j)] += wi * x[(r, i)] * x[(r, j)];
            }
            rhs[i] += wi * x[(r, i)] * y[r];
        }
    }
    for i in 0..k {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    let solved = solve_sym_pivoted(&gram, &rhs);
    let beta = solved.coefs.clone();

    // Sandwich: bread (X'WX)^-1 on kept columns, meat sum w^2 e^2 x x'.
    let mut bread = DMatrix::zeros(k, k);
    for i in 0..k {
        if !solved.kept[i] {
            continue;
        }
        let mut e = DVector::zeros(k);
        e[i] = 1.0;
        let col = solve_sym_pivoted(&gram, &e);
        for j in 0..k {
            bread[(j, i)] = col.coefs[j];
        }
    }
    let mut meat = DMatrix::zeros(k, k);
    for r in 0..x.nrows() {
        let mut fit = 0.0;
        for i in 0..k {
            fit += x[(r, i)] * beta[i];
        }
        let e = y[r] - fit;
        let s = w[r] * e;
        for i in 0..k {
            for j in i..k {
                meat[(i, j)] += s * s * x[(r, i)] * x[(r, j)];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            meat[(i, j)] = meat[(j, i)];
        }
    }
    let cov = &bread * meat * bread.transpose();
    (beta, cov, solved.kept)
}

/// Regresses sign-adjusted group-level effect estimates on the panel's
/// predictor columns with an intercept, weighted by the groups' contribution
/// weights, with heteroskedasticity-robust standard errors.
pub fn predict_het(
    panel: &Panel,
    design: &Design,
    agg: &Aggregates,
    horizons: &[usize],
) -> Result<Vec<HetTable>> {
    let p_count = panel.predictors.len();
    if p_count == 0 {
        return Err(Error::Usage("no predictor columns available for the heterogeneity regression".into()));
    }
    let mut out = Vec::new();
    for &l in horizons {
        let Some(h) = agg.per_l.get(l - 1) else {
            continue;
        };
        if !h.estimable {
            out.push(HetTable {
                horizon: l,
                coefs: vec![],
                dropped: vec![],
                joint_p: None,
                n_switchers: 0,
                note: Some("horizon not estimable".into()),
            });
            continue;
        }
        // Rows: contributing switchers with all predictors present.
        let mut rows: Vec<(usize, f64, f64)> = Vec::new(); // (g, y, w)
        let mut missing_pred = 0usize;
        for &(g, contrast) in &h.group_effects {
            let s = &design.schedules[g];
            let sign = match s.direction {
                Direction::In => 1.0,
                Direction::Out => -1.0,
                Direction::Never => continue,
            };
            if (0..p_count).any(|k| panel.predictors[k][g].is_none()) {
                missing_pred += 1;
                continue;
            }
            let t = s.f - 1 + l;
            rows.push((g, sign * contrast, panel.weight(g, t)));
        }
        if rows.len() < p_count + 2 {
            out.push(HetTable {
                horizon: l,
                coefs: vec![],
                dropped: vec![],
                joint_p: None,
                n_switchers: rows.len(),
                note: Some(format!(
                    "skipped: {} usable switchers for {} predictors",
                    rows.len(),
                    p_count
                )),
            });
            continue;
        }
        let n = rows.len();
        let k = p_count + 1;
        let mut x = DMatrix::zeros(n, k);
        let mut y = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        for (r, &(g, yv, wv)) in rows.iter().enumerate() {
            x[(r, 0)] = 1.0;
            for p in 0..p_count {
                x[(r, p + 1)] = panel.predictors[p][g].unwrap();
            }
            y[r] = yv;
            w[r] = wv;
        }
        let (beta, cov, kept) = robust_wls(&x, &y, &w);
        let names: Vec<String> = std::iter::once("intercept".to_string())
            .chain(panel.predictor_names.iter().cloned())
            .collect();
        let mut coefs = Vec::new();
        let mut dropped = Vec::new();
        for i in 0..k {
            if !kept[i] {
                dropped.push(names[i].clone());
                continue;
            }
            let se = cov[(i, i)].max(0.0).sqrt();
            let t_stat = if se > 0.0 { beta[i] / se } else { f64::INFINITY };
            coefs.push(HetCoef {
                name: names[i].clone(),
                estimate: beta[i],
                se,
                t_stat,
                p_value: chi2_sf(t_stat * t_stat, 1.0),
            });
        }
        // Joint zero test over the kept predictor coefficients.
        let kept_preds: Vec<usize> = (1..k).filter(|&i| kept[i]).collect();
        let joint_p = if kept_preds.is_empty() {
            None
        } else {
            let q = kept_preds.len();
            let mut sub = DMatrix::zeros(q, q);
            let mut b = DVector::zeros(q);
            for (a, &i) in kept_preds.iter().enumerate() {
                b[a] = beta[i];
                for (c, &j) in kept_preds.iter().enumerate() {
                    sub[(a, c)] = cov[(i, j)];
                }
            }
            match sub.clone().cholesky() {
                Some(ch) => {
                    let stat = (b.transpose() * ch.inverse() * &b)[(0, 0)].max(0.0);
                    Some(chi2_sf(stat, q as f64))
                }
                None => None,
            }
        };
        out.push(HetTable {
            horizon: l,
            coefs,
            dropped,
            joint_p,
            n_switchers: n,
            note: (missing_pred > 0)
                .then(|| format!("{missing_pred} switchers dropped for missing predictor values")),
        });
    }
    Ok(out)
}
