//! Residualization of outcome evolutions on control-variable evolutions
//! within baseline-treatment values, propagation of the estimated
//! coefficients' sampling noise, and the continuous-baseline mode.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::design::{classify, Design, DesignOptions, Direction};
use crate::error::{Error, Result};
use crate::estimate::{Engine, Window};
use crate::influence::MVectors;
use crate::numeric::{solve_sym_pivoted, KahanSum, WeightedMean};
use crate::panel::Panel;

/// Weighted OLS of the outcome first-difference on control first-differences
/// and period fixed effects, over the not-yet-switched sample of one
/// baseline-treatment value.
#[derive(Debug, Clone)]
pub struct ResidualizationFit {
    pub d1_class: usize,
    /// Representative baseline value (for reporting).
    pub d_value: f64,
    /// Coefficients on the control evolutions; zero for dropped columns.
    pub theta: Vec<f64>,
    pub kept: Vec<bool>,
    pub dropped_names: Vec<String>,
    /// Period fixed effects, indexed by t (1-based; None outside the sample).
    pub gamma: Vec<Option<f64>>,
    /// Weighted Gram matrix of the partialled control evolutions.
    pub gram: DMatrix<f64>,
    /// Inverse of the Gram matrix on the kept columns (zeros elsewhere).
    gram_inv: DMatrix<f64>,
    /// Weight mass of the sample.
    pub n_mass: f64,
    pub sample_cells: usize,
    /// Per period t: weighted mean of the control first-differences.
    x_mean_by_t: Vec<Option<Vec<f64>>>,
    /// Per period t: distinct clusters among sample members at t.
    cluster_count_by_t: Vec<usize>,
}

/// All fits plus the per-group coefficient-noise rows.
#[derive(Debug, Clone)]
pub struct ControlFits {
    pub fits: BTreeMap<usize, ResidualizationFit>,
    pub warnings: Vec<String>,
}

impl ControlFits {
    pub fn theta_map(&self) -> BTreeMap<usize, Vec<f64>> {
        self.fits.iter().map(|(&d, f)| (d, f.theta.clone())).collect()
    }
}

fn delta(panel: &Panel, g: usize, t: usize, k: usize) -> Option<f64> {
    Some(panel.x(g, t, k)? - panel.x(g, t - 1, k)?)
}

fn delta_y(panel: &Panel, g: usize, t: usize) -> Option<f64> {
    Some(panel.y(g, t)? - panel.y(g, t - 1)?)
}

/// Sample membership: not yet switched at t, within the class horizon, with
/// weight and complete first-differences. Cells with a missing control value
/// drop out of control-using computations only.
fn in_sample(panel: &Panel, design: &Design, d1_class: usize, g: usize, t: usize, t_d: usize) -> bool {
    let s = &design.schedules[g];
    if s.d1_class != d1_class || s.f <= t || t < 2 || t > t_d {
        return false;
    }
    if panel.weight(g, t) <= 0.0 || delta_y(panel, g, t).is_none() {
        return false;
    }
    (0..panel.n_controls()).all(|k| delta(panel, g, t, k).is_some())
}

/// Fits the residualization regression for one baseline class.
pub fn fit_residualization(
    panel: &Panel,
    design: &Design,
    d1_class: usize,
) -> Result<Option<ResidualizationFit>> {
    let k_dim = panel.n_controls();
    let t_max = panel.n_periods;
    let t_d = design
        .schedules
        .iter()
        .filter(|s| s.d1_class == d1_class)
        .map(|s| s.f)
        .max()
        .unwrap_or(0)
        .saturating_sub(1);
    if t_d < 2 {
        return Ok(None);
    }

    // Per-period weighted means of the control first-differences.
    let mut x_mean_by_t: Vec<Option<Vec<f64>>> = vec![None; t_max + 1];
    let mut cluster_count_by_t = vec![0usize; t_max + 1];
    let mut n_mass = KahanSum::new();
    let mut sample_cells = 0usize;
    for t in 2..=t_d {
        let mut acc: Vec<WeightedMean> = vec![WeightedMean::new(); k_dim];
        let mut clusters: Vec<usize> = Vec::new();
        for g in 0..panel.n_groups {
            if !in_sample(panel, design, d1_class, g, t, t_d) {
                continue;
            }
            let w = panel.weight(g, t);
            for (k, a) in acc.iter_mut().enumerate() {
                a.add(w, delta(panel, g, t, k).unwrap());
            }
            if let Err(pos) = clusters.binary_search(&panel.cluster_of[g]) {
                clusters.insert(pos, panel.cluster_of[g]);
            }
            n_mass.add(w);
            sample_cells += 1;
        }
        if acc.first().map(|a| a.total_weight() > 0.0).unwrap_or(false) || k_dim == 0 {
            let means: Option<Vec<f64>> = acc.iter().map(|a| a.mean()).collect();
            x_mean_by_t[t] = means;
        }
        cluster_count_by_t[t] = clusters.len();
    }
    if sample_cells == 0 {
        return Ok(None);
    }
    let n_mass = n_mass.value();

    // Weighted Gram and cross moments of the partialled differences.
    let mut gram = DMatrix::zeros(k_dim, k_dim);
    let mut rhs = DVector::zeros(k_dim);
    let mut xdot = vec![0.0; k_dim];
    for t in 2..=t_d {
        let Some(means) = &x_mean_by_t[t] else { continue };
        for g in 0..panel.n_groups {
            if !in_sample(panel, design, d1_class, g, t, t_d) {
                continue;
            }
            let w = panel.weight(g, t);
            let dy = delta_y(panel, g, t).unwrap();
            for k in 0..k_dim {
                xdot[k] = delta(panel, g, t, k).unwrap() - means[k];
            }
            for i in 0..k_dim {
                for j in i..k_dim {
                    gram[(i, j)] += w * xdot[i] * xdot[j];
                }
                rhs[i] += w * xdot[i] * dy;
            }
        }
    }
    for i in 0..k_dim {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    gram /= n_mass;
    rhs /= n_mass;

    let solved = solve_sym_pivoted(&gram, &rhs);
    let dropped_names: Vec<String> = solved
        .kept
        .iter()
        .enumerate()
        .filter(|(_, &k)| !k)
        .map(|(i, _)| panel.control_names.get(i).cloned().unwrap_or_else(|| format!("x{i}")))
        .collect();

    // Inverse restricted to kept columns, for the per-group noise rows.
    let mut gram_inv = DMatrix::zeros(k_dim, k_dim);
    for i in 0..k_dim {
        if !solved.kept[i] {
            continue;
        }
        let mut e = DVector::zeros(k_dim);
        e[i] = 1.0;
        let col = solve_sym_pivoted(&gram, &e);
        for j in 0..k_dim {
            gram_inv[(j, i)] = col.coefs[j];
        }
    }

    let theta: Vec<f64> = solved.coefs.iter().copied().collect();

    // Period fixed effects: weighted means of the residualized differences.
    let mut gamma = vec![None; t_max + 1];
    for t in 2..=t_d {
        if x_mean_by_t[t].is_none() {
            continue;
        }
        let mut acc = WeightedMean::new();
        for g in 0..panel.n_groups {
            if !in_sample(panel, design, d1_class, g, t, t_d) {
                continue;
            }
            let dy = delta_y(panel, g, t).unwrap();
            let mut adj = dy;
            for (k, th) in theta.iter().enumerate() {
                adj -= th * delta(panel, g, t, k).unwrap();
            }
            acc.add(panel.weight(g, t), adj);
        }
        gamma[t] = acc.mean();
    }

    Ok(Some(ResidualizationFit {
        d1_class,
        d_value: design.classes.rep(d1_class),
        theta,
        kept: solved.kept,
        dropped_names,
        gamma,
        gram,
        gram_inv,
        n_mass,
        sample_cells,
        x_mean_by_t,
        cluster_count_by_t,
    }))
}

/// Fits every applicable baseline class.
pub fn fit_all(panel: &Panel, design: &Design) -> Result<ControlFits> {
    let mut warnings = Vec::new();
    let applicable = crate::design::applicable_classes(design);
    let mut fits = BTreeMap::new();
    for class in 0..design.classes.len() {
        if !applicable[class] {
            continue;
        }
        match fit_residualization(panel, design, class)? {
            Some(fit) => {
                if !fit.dropped_names.is_empty() {
                    warnings.push(format!(
                        "residualization at baseline {}: collinear control evolutions dropped: {}",
                        fit.d_value,
                        fit.dropped_names.join(", ")
                    ));
                }
                fits.insert(class, fit);
            }
            None => warnings.push(format!(
                "residualization at baseline {}: empty sample; groups at this baseline are excluded",
                design.classes.rep(class)
            )),
        }
    }
    if fits.is_empty() {
        return Err(Error::Estimation(
            "controls requested but no baseline value has a usable residualization sample".into(),
        ));
    }
    Ok(ControlFits { fits, warnings })
}

/// Per-group coefficient-noise rows for one baseline class.
///
/// The point leg averages to zero by the normal equations; the variance leg
/// demeans the outcome evolutions with the fitted regression values and
/// applies the small-sample multiplier to each period's contribution.
pub struct NoiseRows {
    pub v_point: BTreeMap<usize, Vec<Vec<f64>>>,
    pub v_var: BTreeMap<usize, Vec<Vec<f64>>>,
}

pub fn noise_rows(panel: &Panel, design: &Design, fits: &ControlFits) -> NoiseRows {
    let k_dim = panel.n_controls();
    let g_count = panel.n_groups as f64;
    let mut v_point = BTreeMap::new();
    let mut v_var = BTreeMap::new();
    for (&class, fit) in &fits.fits {
        let t_d = fit.gamma.len() - 1;
        let mut point = vec![vec![0.0; k_dim]; panel.n_groups];
        let mut var = vec![vec![0.0; k_dim]; panel.n_groups];
        for g in 0..panel.n_groups {
            let s = &design.schedules[g];
            let mut raw_p = vec![0.0; k_dim];
            let mut raw_v = vec![0.0; k_dim];
            if s.d1_class == class && s.f >= 3 {
                let hi = (s.f - 1).min(t_d);
                for t in 2..=hi {
                    if !in_sample(panel, design, class, g, t, t_d) {
                        continue;
                    }
                    let Some(means) = &fit.x_mean_by_t[t] else { continue };
                    let w = panel.weight(g, t);
                    let dy = delta_y(panel, g, t).unwrap();
                    let n_t = fit.cluster_count_by_t[t];
                    let fitted_available = n_t >= 2;
                    let e_dy = if fitted_available {
                        let mut v = fit.gamma[t].unwrap_or(0.0);
                        for (k, th) in fit.theta.iter().enumerate() {
                            v += th * delta(panel, g, t, k).unwrap();
                        }
                        v
                    } else {
                        0.0
                    };
                    let dof = if fitted_available {
                        let n = n_t as f64;
                        (n / (n - 1.0)).sqrt()
                    } else {
                        1.0
                    };
                    for k in 0..k_dim {
                        let xdot = delta(panel, g, t, k).unwrap() - means[k];
                        raw_p[k] += w * xdot * dy;
                        raw_v[k] += w * xdot * dof * (dy - e_dy);
                    }
                }
            }
            // Den^{-1} (G / N^c) (sum ...) - theta_hat, for every group.
            for i in 0..k_dim {
                let mut acc_p = 0.0;
                let mut acc_v = 0.0;
                for j in 0..k_dim {
                    acc_p += fit.gram_inv[(i, j)] * raw_p[j];
                    acc_v += fit.gram_inv[(i, j)] * raw_v[j];
                }
                point[g][i] = acc_p * g_count / fit.n_mass - fit.theta[i];
                var[g][i] = acc_v * g_count / fit.n_mass - fit.theta[i];
            }
        }
        v_point.insert(class, point);
        v_var.insert(class, var);
    }
    NoiseRows { v_point, v_var }
}

/// Switcher-weighted contrasts of the control-variable evolutions, per
/// baseline class and side, for each horizon of a window.
pub fn m_vectors(engine: &Engine, window: Window, l_count: usize) -> MVectors {
    let panel = engine.panel;
    let design = engine.design;
    let k_dim = panel.n_controls();
    let mut out = Vec::with_capacity(l_count);
    for l in 1..=l_count {
        let agg_mass = |side: Direction| -> f64 {
            let mut m = 0.0;
            for (g, s) in design.schedules.iter().enumerate() {
                let est = match window {
                    Window::Effect => &engine.est_effect,
                    Window::Placebo => &engine.est_placebo,
                };
                if s.direction == side && l <= est.len() && est[l - 1][g] {
                    m += panel.weight(g, s.f - 1 + l);
                }
            }
            m
        };
        let mut cache: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let mut ctrl_x_mean = |si: usize, t: usize| -> Vec<f64> {
            if let Some(v) = cache.get(&(si, t)) {
                return v.clone();
            }
            let mut acc = vec![WeightedMean::new(); k_dim];
            for &g in &design.strata[si] {
                let s = &design.schedules[g];
                let ok = s.f > t
                    && panel.weight(g, t) > 0.0
                    && match window {
                        Window::Effect => engine.differ.effect(g, t, l).is_some(),
                        Window::Placebo => engine.differ.placebo(g, t, l).is_some(),
                    };
                if !ok {
                    continue;
                }
                let w = panel.weight(g, t);
                for (k, a) in acc.iter_mut().enumerate() {
                    let xd = match window {
                        Window::Effect => engine.differ.x_effect(g, t, l, k),
                        Window::Placebo => engine.differ.x_placebo(g, t, l, k),
                    };
                    a.add(w, xd.unwrap_or(0.0));
                }
            }
            let v: Vec<f64> = acc.iter().map(|a| a.mean().unwrap_or(0.0)).collect();
            cache.insert((si, t), v.clone());
            v
        };
        let mut per_side = |side: Direction| -> BTreeMap<usize, Vec<f64>> {
            let mass = agg_mass(side);
            let mut m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            if mass <= 0.0 {
                return m;
            }
            for (g, s) in design.schedules.iter().enumerate() {
                let est = match window {
                    Window::Effect => &engine.est_effect,
                    Window::Placebo => &engine.est_placebo,
                };
                if s.direction != side || l > est.len() || !est[l - 1][g] {
                    continue;
                }
                let t = s.f - 1 + l;
                let w = panel.weight(g, t);
                let means = ctrl_x_mean(s.stratum, t);
                let entry = m.entry(s.d1_class).or_insert_with(|| vec![0.0; k_dim]);
                for k in 0..k_dim {
                    let own = match window {
                        Window::Effect => engine.differ.x_effect(g, t, l, k),
                        Window::Placebo => engine.differ.x_placebo(g, t, l, k),
                    }
                    .unwrap_or(0.0);
                    entry[k] += w / mass * (own - means[k]);
                }
            }
            m
        };
        out.push((per_side(Direction::In), per_side(Direction::Out)));
    }
    out
}

/// Recodes the panel for a continuously distributed baseline treatment:
/// the estimation treatment becomes a post-switch direction indicator, the
/// original treatment is kept as the dose source, and polynomial-in-baseline
/// step interactions are appended to the controls.
pub fn apply_continuous(
    panel: &mut Panel,
    design_opts: &DesignOptions,
    poly_order: usize,
) -> Result<Vec<String>> {
    let original = classify(panel, design_opts)?;
    let mut warnings = original.warnings.clone();
    let t_max = panel.n_periods;
    let n = panel.n_groups;

    let mut any_switch = false;
    let mut recoded = vec![None; n * t_max];
    for g in 0..n {
        let s = &original.schedules[g];
        for t in 1..=t_max {
            let v = if s.d1_class == usize::MAX {
                None
            } else if !s.is_switcher() || t < s.f {
                Some(0.0)
            } else {
                any_switch = true;
                Some(match s.direction {
                    Direction::In => 1.0,
                    Direction::Out => -1.0,
                    Direction::Never => 0.0,
                })
            };
            recoded[g * t_max + (t - 1)] = v;
        }
    }
    if !any_switch {
        return Err(Error::Estimation("no switcher after recoding the treatment".into()));
    }
    panel.recode_treatment(recoded);

    // Polynomial-in-baseline step functions; the k = 0 block duplicates the
    // period fixed effects and is dropped by the rank screen.
    for k in 0..=poly_order {
        for t_from in 1..=t_max {
            let mut col = vec![None; n * t_max];
            for g in 0..n {
                let s = &original.schedules[g];
                if s.d1_class == usize::MAX {
                    continue;
                }
                let base = s.d1.powi(k as i32);
                for t in 1..=t_max {
                    col[g * t_max + (t - 1)] = Some(if t >= t_from { base } else { 0.0 });
                }
            }
            panel.push_control(format!("base^{k}.step{t_from}"), col);
        }
    }
    warnings.push(
        "continuous baseline mode: analytic standard errors are advisory; prefer the bootstrap"
            .to_string(),
    );
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{classify, DesignOptions};
    use crate::panel::{build_panel, PanelCell};
    use approx::assert_relative_eq;

    fn panel_with_controls(
        ds: &[Vec<Option<f64>>],
        ys: &[Vec<Option<f64>>],
        xs: &[Vec<Vec<Option<f64>>>],
    ) -> Panel {
        let mut cells = Vec::new();
        for (g, (drow, yrow)) in ds.iter().zip(ys.iter()).enumerate() {
            for (t, (&d, &y)) in drow.iter().zip(yrow.iter()).enumerate() {
                cells.push(PanelCell {
                    group: format!("{g:03}"),
                    period: (t + 1) as i64,
                    outcome: y,
                    treatment: d,
                    weight: 1.0,
                    controls: xs.iter().map(|x| x[g][t]).collect(),
                    cluster: None,
                    supergroup: None,
                    by_value: None,
                    predictors: vec![],
                });
            }
        }
        build_panel(&cells).unwrap().0
    }

    fn some(vals: &[f64]) -> Vec<Option<f64>> {
        vals.iter().map(|&v| Some(v)).collect()
    }

    #[test]
    fn exact_linear_model_recovers_coefficient() {
        // dY = 2*dX + period shifts
        let d = vec![
            some(&[0.0, 0.0, 0.0, 0.0, 0.0]),
            some(&[0.0, 0.0, 0.0, 0.0, 1.0]),
            some(&[0.0, 0.0, 0.0, 1.0, 1.0]),
        ];
        let x: Vec<Vec<Option<f64>>> = vec![
            some(&[0.0, 1.0, 3.0, 6.0, 10.0]),
            some(&[1.0, 0.5, 2.0, 2.5, 4.0]),
            some(&[2.0, 4.0, 4.5, 8.0, 9.0]),
        ];
        let shifts = [0.0, 5.0, 3.0, 7.0, 1.0];
        let y: Vec<Vec<Option<f64>>> = (0..3)
            .map(|g| {
                (0..5)
                    .map(|t| Some(2.0 * x[g][t].unwrap() + shifts[..=t].iter().sum::<f64>()))
                    .collect()
            })
            .collect();
        let mut p = panel_with_controls(&d, &y, &[x]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        let fit = fit_residualization(&p, &design, 0).unwrap().unwrap();
        assert_relative_eq!(fit.theta[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn constant_within_period_controls_are_collinear() {
        // dX identical across groups within each period: no within-period variation
        let d = vec![
            some(&[0.0, 0.0, 0.0, 0.0]),
            some(&[0.0, 0.0, 0.0, 1.0]),
            some(&[0.0, 0.0, 1.0, 1.0]),
        ];
        let x: Vec<Vec<Option<f64>>> =
            (0..3).map(|_| some(&[1.0, 2.0, 4.0, 7.0])).collect();
        let y: Vec<Vec<Option<f64>>> =
            (0..3).map(|g| (0..4).map(|t| Some((g + t) as f64)).collect()).collect();
        let mut p = panel_with_controls(&d, &y, &[x]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        let fit = fit_residualization(&p, &design, 0).unwrap().unwrap();
        assert!(!fit.kept[0]);
        assert_eq!(fit.theta[0], 0.0);
    }

    #[test]
    fn noise_rows_average_to_zero() {
        let d = vec![
            some(&[0.0, 0.0, 0.0, 0.0, 0.0]),
            some(&[0.0, 0.0, 0.0, 0.0, 1.0]),
            some(&[0.0, 0.0, 0.0, 1.0, 1.0]),
            some(&[0.0, 0.0, 1.0, 1.0, 1.0]),
        ];
        let x: Vec<Vec<Option<f64>>> = vec![
            some(&[0.0, 1.0, 3.0, 6.0, 10.0]),
            some(&[1.0, 0.5, 2.0, 2.5, 4.0]),
            some(&[2.0, 4.0, 4.5, 8.0, 9.0]),
            some(&[0.5, 2.0, 3.5, 3.0, 5.0]),
        ];
        let y: Vec<Vec<Option<f64>>> = (0..4)
            .map(|g| {
                (0..5)
                    .map(|t| Some(1.5 * x[g][t].unwrap() + ((t + 1) * (t + 1)) as f64 + g as f64))
                    .collect()
            })
            .collect();
        let mut p = panel_with_controls(&d, &y, &[x]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        let fits = fit_all(&p, &design).unwrap();
        let rows = noise_rows(&p, &design, &fits);
        for (_, point) in &rows.v_point {
            let mean: f64 = point.iter().map(|v| v[0]).sum::<f64>() / point.len() as f64;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn continuous_recode_and_polynomial_columns() {
        let d = vec![
            some(&[0.3, 0.3, 0.3, 0.3]),
            some(&[0.7, 0.7, 1.5, 1.5]),
            some(&[0.9, 0.9, 0.9, 0.2]),
        ];
        let y: Vec<Vec<Option<f64>>> =
            (0..3).map(|g| (0..4).map(|t| Some((g * t) as f64)).collect()).collect();
        let mut p = panel_with_controls(&d, &y, &[]);
        let warnings = apply_continuous(&mut p, &DesignOptions::default(), 1).unwrap();
        assert!(warnings.iter().any(|w| w.contains("bootstrap")));
        // recoded: group 1 switches in at t=3, group 2 out at t=4
        assert_eq!(p.d(1, 2), Some(0.0));
        assert_eq!(p.d(1, 3), Some(1.0));
        assert_eq!(p.d(2, 4), Some(-1.0));
        // dose preserved
        assert_eq!(p.dose(1, 3), Some(1.5));
        // polynomial columns appended: (K+1) x T = 8
        assert_eq!(p.n_controls(), 8);
        // k=1 column with step at t=3 carries the baseline value
        let name_idx = p
            .control_names
            .iter()
            .position(|n| n == "base^1.step3")
            .unwrap();
        assert_eq!(p.x(1, 3, name_idx), Some(0.7));
        assert_eq!(p.x(1, 2, name_idx), Some(0.0));
    }
}
