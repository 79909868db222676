//! End-to-end estimation runs: configuration, the pipeline composing the
//! modules, and the result structures the outputs are built from.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::controls::{self, ControlFits};
use crate::design::{check_design_restriction, classify, Design, DesignOptions, DesignPath};
use crate::error::{Error, Result};
use crate::estimate::{Aggregates, Differ, Engine, EstOptions, SwitcherFilter, Window};
use crate::heterogeneity::{predict_het, HetTable};
use crate::inference::{
    cluster_bootstrap, confidence_interval, effects_equal_test, joint_zero_test, BootstrapResult,
    BootstrapSpec, ReplicationEstimates, WaldResult,
};
use crate::influence::{build_influence, ControlAdjustment, InfluenceTable};
use crate::numeric::KahanSum;
use crate::panel::{
    apply_missing_conventions, build_panel, collapse, read_csv, AuditEvent, CsvBindings,
    MissingPolicy, Panel, RawRow,
};

/// Which horizons the equal-effects test covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectsEqualSpec {
    All,
    Subset(Vec<usize>),
}

/// Full option surface of an estimation run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub bindings: CsvBindings,
    pub effects: usize,
    pub placebos: usize,
    pub normalized: bool,
    /// Accepted for compatibility; reports unavailability.
    pub normalized_weights: bool,
    pub effects_equal: Option<EffectsEqualSpec>,
    /// (cumulative weight share, emit to csv instead of console)
    pub design_report: Option<f64>,
    pub controls: Vec<String>,
    pub trends_nonparam: Option<String>,
    pub trends_lin: bool,
    pub continuous: Option<usize>,
    pub cluster: Option<String>,
    pub by: Option<String>,
    pub predict_het: Option<(Vec<String>, Vec<usize>)>,
    pub same_switchers: bool,
    pub same_switchers_pl: bool,
    pub switchers: SwitcherFilter,
    pub dont_drop_larger_lower: bool,
    pub missing_policy: MissingPolicy,
    pub more_granular_demeaning: bool,
    pub bootstrap: Option<BootstrapSpec>,
    pub treatment_tolerance: f64,
    pub ci_level: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            bindings: CsvBindings::default(),
            effects: 1,
            placebos: 0,
            normalized: false,
            normalized_weights: false,
            effects_equal: None,
            design_report: None,
            controls: Vec::new(),
            trends_nonparam: None,
            trends_lin: false,
            continuous: None,
            cluster: None,
            by: None,
            predict_het: None,
            same_switchers: false,
            same_switchers_pl: false,
            switchers: SwitcherFilter::Both,
            dont_drop_larger_lower: false,
            missing_policy: MissingPolicy::Liberal,
            more_granular_demeaning: false,
            bootstrap: None,
            treatment_tolerance: 0.0,
            ci_level: 0.95,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.effects == 0 {
            return Err(Error::Usage("at least one effect must be requested".into()));
        }
        if self.placebos > self.effects {
            return Err(Error::Usage(format!(
                "the number of placebos requested ({}) cannot be larger than the number of effects requested ({})",
                self.placebos, self.effects
            )));
        }
        if self.same_switchers_pl && !self.same_switchers {
            return Err(Error::Usage(
                "holding the placebo sample fixed requires the same-switchers option".into(),
            ));
        }
        if self.predict_het.is_some() && (self.normalized || !self.controls.is_empty()) {
            return Err(Error::Usage(
                "the heterogeneity-prediction option cannot be combined with the normalized or controls options"
                    .into(),
            ));
        }
        if !(0.5..1.0).contains(&self.ci_level) {
            return Err(Error::Usage("the confidence level must lie in [0.5, 1)".into()));
        }
        if let Some(share) = self.design_report {
            if !(share > 0.0 && share <= 1.0) {
                return Err(Error::Usage("the design-report share must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }

    fn design_options(&self) -> DesignOptions {
        DesignOptions {
            treatment_tolerance: self.treatment_tolerance,
            dont_drop_larger_lower: self.dont_drop_larger_lower,
        }
    }

    fn est_options(&self) -> EstOptions {
        EstOptions {
            effects: self.effects,
            placebos: if self.trends_lin { self.placebos.saturating_sub(1) } else { self.placebos },
            switcher_filter: self.switchers,
            same_switchers: self.same_switchers || self.trends_lin,
            same_switchers_pl: self.same_switchers_pl,
            more_granular_demeaning: self.more_granular_demeaning,
            compute_average_total: !self.trends_lin,
        }
    }
}

/// One reported estimate row.
#[derive(Debug, Clone, Serialize)]
pub struct EffectRow {
    pub kind: EstimateKind,
    pub horizon: usize,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub se_bootstrap: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Weight mass behind the estimate.
    pub n: f64,
    pub switchers: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Effect,
    Placebo,
    AverageTotal,
}

/// Per-horizon dose summary.
#[derive(Debug, Clone, Serialize)]
pub struct DoseRow {
    pub horizon: usize,
    pub delta_d_plus: f64,
    pub delta_d_minus: f64,
    pub delta_d_abs: f64,
}

/// Result of one estimation run (one split level when splitting).
pub struct EstimationResult {
    pub effects: Vec<EffectRow>,
    pub placebos: Vec<EffectRow>,
    pub average_total: Option<EffectRow>,
    pub dose: Vec<DoseRow>,
    pub w_plus: Option<f64>,
    pub effects_equal: Option<WaldResult>,
    pub joint_placebos: Option<WaldResult>,
    pub het: Option<Vec<HetTable>>,
    pub design_paths: Option<Vec<DesignPath>>,
    pub influence: InfluenceTable,
    pub bootstrap: Option<BootstrapResult>,
    pub n_groups: usize,
    pub n_periods: usize,
    pub normalized: bool,
    pub analytic_se_advisory: bool,
    pub warnings: Vec<String>,
}

/// A full run: possibly several split levels, plus the shared audit log.
pub struct RunOutput {
    /// (level label, result); a single entry labeled "" without splitting.
    pub results: Vec<(String, EstimationResult)>,
    pub audit: Vec<AuditEvent>,
    pub warnings: Vec<String>,
}

/// Loads the CSV named by the config and runs the estimation.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let path = config
        .input
        .as_ref()
        .ok_or_else(|| Error::Usage("no input file given".into()))?;
    let mut bindings = config.bindings.clone();
    bindings.controls = config.controls.clone();
    bindings.supergroup = config.trends_nonparam.clone();
    bindings.cluster = config.cluster.clone();
    bindings.by = config.by.clone();
    if let Some((preds, _)) = &config.predict_het {
        bindings.predictors = preds.clone();
    }
    let rows = read_csv(path, &bindings)?;
    run_rows(config, &rows)
}

/// Runs the estimation on already-loaded rows.
pub fn run_rows(config: &RunConfig, rows: &[RawRow]) -> Result<RunOutput> {
    config.validate()?;
    let cells = collapse(rows)?;
    let (mut panel, mut warnings) = build_panel(&cells)?;
    let audit = apply_missing_conventions(&mut panel, config.missing_policy);

    let results = match &panel.by_of {
        Some(by_of) if config.by.is_some() => {
            let by_of = by_of.clone();
            let labels = panel.by_labels.clone();
            let mut out = Vec::new();
            for (level, label) in labels.iter().enumerate() {
                let keep: Vec<usize> =
                    (0..panel.n_groups).filter(|&g| by_of[g] == level).collect();
                let mut sub = panel.subset_groups(&keep);
                match estimate_prepared(&mut sub, config) {
                    Ok(res) => out.push((label.clone(), res)),
                    Err(e) => {
                        warnings.push(format!("split level {label}: {e}"));
                        out.push((label.clone(), empty_result(&sub, format!("{e}"))));
                    }
                }
            }
            out
        }
        _ => vec![(String::new(), estimate_prepared(&mut panel, config)?)],
    };

    Ok(RunOutput { results, audit, warnings })
}

fn empty_result(panel: &Panel, note: String) -> EstimationResult {
    EstimationResult {
        effects: vec![],
        placebos: vec![],
        average_total: None,
        dose: vec![],
        w_plus: None,
        effects_equal: None,
        joint_placebos: None,
        het: None,
        design_paths: None,
        influence: InfluenceTable {
            n_groups: panel.n_groups,
            l_max: 0,
            pl_max: 0,
            u: vec![],
            u_var: vec![],
            u_pl: vec![],
            u_var_pl: vec![],
            u_total: vec![],
            u_var_total: vec![],
            sigma2: vec![],
            sigma2_pl: vec![],
            sigma2_total: None,
            delta_d_abs: vec![],
        },
        bootstrap: None,
        n_groups: panel.n_groups,
        n_periods: panel.n_periods,
        normalized: false,
        analytic_se_advisory: false,
        warnings: vec![note],
    }
}

struct Pipeline<'a> {
    design: Design,
    fits: Option<ControlFits>,
    agg: Aggregates,
    engine_warnings: Vec<String>,
    panel: &'a Panel,
}

/// Classification through aggregation, shared by the main run and the
/// bootstrap replications. The panel must already be prepared (conventions
/// applied; outcome differenced and/or treatment recoded when applicable).
fn point_pipeline<'a>(panel: &'a mut Panel, config: &RunConfig) -> Result<Pipeline<'a>> {
    let design = classify(panel, &config.design_options())?;
    check_design_restriction(&design)?;
    let panel = &*panel;
    let fits = if panel.n_controls() > 0 {
        Some(controls::fit_all(panel, &design)?)
    } else {
        None
    };
    let theta = fits.as_ref().map(|f| f.theta_map());
    let differ = Differ::new(panel, &design, theta);
    let engine = Engine::new(panel, &design, config.est_options(), differ)?;
    let agg = engine.aggregates()?;
    let engine_warnings = engine.warnings.clone();
    Ok(Pipeline { design, fits, agg, engine_warnings, panel })
}

/// Rebuilds the engine for influence computation (the engine borrows the
/// design, so it cannot live inside `Pipeline`).
fn engine_for<'a>(panel: &'a Panel, design: &'a Design, fits: &Option<ControlFits>, config: &RunConfig) -> Result<Engine<'a>> {
    let theta = fits.as_ref().map(|f| f.theta_map());
    let differ = Differ::new(panel, design, theta);
    Engine::new(panel, design, config.est_options(), differ)
}

/// Cumulated point estimates for the outcome-differencing mode: effect `l`
/// on levels is the sum of the first-difference effects up to `l`.
fn cumulate(agg: &mut Aggregates, influence: &mut InfluenceTable) {
    let l_max = agg.per_l.len();
    let mut run_ok = true;
    let mut run_sum = KahanSum::new();
    for h in agg.per_l.iter_mut() {
        match (run_ok, h.did) {
            (true, Some(v)) => {
                run_sum.add(v);
                h.did = Some(run_sum.value());
            }
            _ => {
                run_ok = false;
                h.did = None;
                h.estimable = false;
            }
        }
    }
    let n_groups = influence.n_groups;
    let mut acc_u = vec![KahanSum::new(); n_groups];
    let mut acc_var = vec![KahanSum::new(); n_groups];
    for l in 0..l_max {
        for g in 0..n_groups {
            acc_u[g].add(influence.u[l][g]);
            acc_var[g].add(influence.u_var[l][g]);
        }
        for g in 0..n_groups {
            influence.u[l][g] = acc_u[g].value();
            influence.u_var[l][g] = acc_var[g].value();
        }
    }
    // variances recomputed from the cumulated rows by the caller
}

fn variance_from_rows(rows: &[f64], cluster_of: &[usize], n_clusters: usize) -> f64 {
    let mut per_cluster = vec![KahanSum::new(); n_clusters];
    for (g, &v) in rows.iter().enumerate() {
        per_cluster[cluster_of[g]].add(v);
    }
    let mut total = KahanSum::new();
    for c in &per_cluster {
        let v = c.value();
        total.add(v * v);
    }
    let g = rows.len() as f64;
    total.value() / (g * g)
}

/// Full estimation on a prepared panel: points, influence, variances, tests,
/// heterogeneity, bootstrap.
pub fn estimate_prepared(panel: &mut Panel, config: &RunConfig) -> Result<EstimationResult> {
    config.validate()?;
    let mut warnings = Vec::new();

    if let Some(order) = config.continuous {
        let w = controls::apply_continuous(panel, &config.design_options(), order)?;
        warnings.extend(w);
    }
    if config.trends_lin {
        panel.first_difference_outcome();
        if config.placebos > 0 && config.placebos.saturating_sub(1) < config.placebos {
            warnings.push(format!(
                "outcome differencing consumes one pre-period: at most {} placebos reported",
                config.placebos - 1
            ));
        }
    }

    let base = point_pipeline(panel, config)?;
    let Pipeline { design, fits, mut agg, engine_warnings, panel: panel_ref } = base;
    warnings.extend(design.warnings.iter().cloned());
    if let Some(f) = &fits {
        warnings.extend(f.warnings.iter().cloned());
    }
    warnings.extend(engine_warnings);

    let engine = engine_for(panel_ref, &design, &fits, config)?;

    // Control-coefficient noise rows and switcher-side control contrasts.
    let noise = fits.as_ref().map(|f| controls::noise_rows(panel_ref, &design, f));
    let adj = noise.as_ref().map(|n| ControlAdjustment { v_point: &n.v_point, v_var: &n.v_var });
    let m_eff = fits
        .as_ref()
        .map(|_| controls::m_vectors(&engine, Window::Effect, engine.l_max));
    let m_pl = fits
        .as_ref()
        .map(|_| controls::m_vectors(&engine, Window::Placebo, engine.pl_max));

    let mut influence =
        build_influence(&engine, &agg, adj.as_ref(), m_eff.as_ref(), m_pl.as_ref());

    if config.trends_lin {
        cumulate(&mut agg, &mut influence);
        let n_clusters = panel_ref.cluster_labels.len().max(1);
        for l in 0..influence.l_max {
            influence.sigma2[l] = agg.per_l[l].estimable.then(|| {
                variance_from_rows(&influence.u_var[l], &panel_ref.cluster_of, n_clusters)
            });
        }
    }

    // Reported rows.
    let normalized = config.normalized;
    if config.normalized_weights {
        warnings.push(
            "lag-weight decomposition of normalized effects is not implemented; the flag is accepted and ignored"
                .to_string(),
        );
    }
    let mut effects = Vec::with_capacity(agg.per_l.len());
    for (i, h) in agg.per_l.iter().enumerate() {
        let l = i + 1;
        let (estimate, variance, note) = if normalized {
            match (h.normalized(), influence.sigma2_normalized(l)) {
                (Some(v), s2) => (Some(v), s2, None),
                (None, _) if h.estimable => {
                    (None, None, Some("zero incremental dose: normalized effect undefined".into()))
                }
                _ => (None, None, Some("not estimable".into())),
            }
        } else {
            (h.did, influence.sigma2[i], None)
        };
        effects.push(make_row(
            EstimateKind::Effect,
            l,
            estimate,
            variance,
            h.n_total(),
            h.switcher_count(),
            note.or_else(|| (!h.estimable).then(|| "not estimable".into())),
            config.ci_level,
        ));
    }

    let mut placebos = Vec::with_capacity(agg.per_l_pl.len());
    for (i, h) in agg.per_l_pl.iter().enumerate() {
        let l = i + 1;
        // Placebos are normalized by the matching effect's constant.
        let (estimate, variance) = if normalized {
            let dd = agg.per_l.get(i).map(|e| e.delta_d_abs).unwrap_or(0.0);
            if dd > 0.0 {
                (h.did.map(|v| v / dd), influence.sigma2_pl[i].map(|s| s / (dd * dd)))
            } else {
                (None, None)
            }
        } else {
            (h.did, influence.sigma2_pl[i])
        };
        placebos.push(make_row(
            EstimateKind::Placebo,
            l,
            estimate,
            variance,
            h.n_total(),
            h.switcher_count(),
            (!h.estimable).then(|| "not estimable".into()),
            config.ci_level,
        ));
    }

    let average_total = agg.avg_total.as_ref().map(|avg| {
        make_row(
            EstimateKind::AverageTotal,
            0,
            avg.delta,
            influence.sigma2_total,
            avg.n,
            avg.switcher_count,
            avg.delta.is_none().then(|| "undefined: zero total incremental dose".into()),
            config.ci_level,
        )
    });

    // Equal-effects test on the reported effects.
    let effects_equal = match &config.effects_equal {
        Some(spec) => {
            let horizons: Vec<usize> = match spec {
                EffectsEqualSpec::All => (1..=agg.per_l.len()).collect(),
                EffectsEqualSpec::Subset(h) => h.clone(),
            };
            let mut est = Vec::new();
            let mut owned_rows: Vec<Vec<f64>> = Vec::new();
            for &l in &horizons {
                if l == 0 || l > effects.len() {
                    warnings.push(format!("equal-effects test: horizon {l} not estimated; skipped"));
                    continue;
                }
                if let Some(v) = effects[l - 1].estimate {
                    est.push(v);
                    // Normalized effects scale their rows by the same constants.
                    let row = if normalized {
                        let dd = agg.per_l[l - 1].delta_d_abs;
                        influence.u_var[l - 1].iter().map(|x| x / dd).collect()
                    } else {
                        influence.u_var[l - 1].clone()
                    };
                    owned_rows.push(row);
                }
            }
            let rows: Vec<&[f64]> = owned_rows.iter().map(|r| r.as_slice()).collect();
            if est.len() >= 2 {
                match effects_equal_test(
                    &est,
                    &rows,
                    &panel_ref.cluster_of,
                    panel_ref.cluster_labels.len().max(1),
                ) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        warnings.push(format!("equal-effects test skipped: {e}"));
                        None
                    }
                }
            } else {
                warnings.push("equal-effects test skipped: fewer than two estimated effects".into());
                None
            }
        }
        None => None,
    };

    // Joint test that all placebos are zero, when at least two placebos.
    let joint_placebos = if agg.per_l_pl.len() >= 2 {
        let mut est = Vec::new();
        let mut rows: Vec<&[f64]> = Vec::new();
        for (i, h) in agg.per_l_pl.iter().enumerate() {
            if let Some(v) = h.did {
                est.push(v);
                rows.push(&influence.u_var_pl[i]);
            }
        }
        if est.len() >= 2 {
            match joint_zero_test(
                &est,
                &rows,
                &panel_ref.cluster_of,
                panel_ref.cluster_labels.len().max(1),
            ) {
                Ok(r) => Some(r),
                Err(e) => {
                    warnings.push(format!("joint placebo test skipped: {e}"));
                    None
                }
            }
        } else {
            None
        }
    } else {
        None
    };

    // Heterogeneity regression.
    let het = match &config.predict_het {
        Some((_, horizons)) => {
            let hs: Vec<usize> = if horizons.is_empty() {
                (1..=agg.per_l.len()).collect()
            } else {
                horizons.clone()
            };
            Some(predict_het(panel_ref, &design, &agg, &hs)?)
        }
        None => None,
    };

    // Design paths at the last estimated horizon.
    let design_paths = config.design_report.map(|share| {
        let l = agg.per_l.iter().rposition(|h| h.estimable).map(|i| i + 1).unwrap_or(1);
        let h = &agg.per_l[l - 1];
        let contributors: Vec<(usize, f64)> = h
            .switchers_in
            .iter()
            .chain(h.switchers_out.iter())
            .map(|&g| {
                let t = design.schedules[g].f - 1 + l;
                (g, panel_ref.weight(g, t))
            })
            .collect();
        crate::design::report_design_paths(panel_ref, &design, &contributors, l, share)
    });

    let dose: Vec<DoseRow> = agg
        .per_l
        .iter()
        .map(|h| DoseRow {
            horizon: h.horizon,
            delta_d_plus: h.delta_d_plus,
            delta_d_minus: h.delta_d_minus,
            delta_d_abs: h.delta_d_abs,
        })
        .collect();
    let w_plus = agg.avg_total.as_ref().map(|a| a.w_plus);

    // Bootstrap: rerun the point pipeline on resampled panels.
    let bootstrap = match &config.bootstrap {
        Some(spec) => {
            let l_max = agg.per_l.len();
            let pl_max = agg.per_l_pl.len();
            let mut sub_config = config.clone();
            sub_config.bootstrap = None;
            let result = cluster_bootstrap(panel_ref, spec, l_max, pl_max, |mut resampled| {
                replication_points(&mut resampled, &sub_config)
            })?;
            if result.skipped > 0 {
                warnings.push(format!(
                    "{} of {} bootstrap replications produced no estimate",
                    result.skipped, result.replications
                ));
            }
            Some(result)
        }
        None => None,
    };

    let mut effects = effects;
    let mut placebos = placebos;
    let mut average_total = average_total;
    if let Some(b) = &bootstrap {
        for (row, se) in effects.iter_mut().zip(&b.se_effects) {
            row.se_bootstrap = *se;
        }
        for (row, se) in placebos.iter_mut().zip(&b.se_placebos) {
            row.se_bootstrap = *se;
        }
        if let Some(row) = &mut average_total {
            row.se_bootstrap = b.se_average_total;
        }
    }

    Ok(EstimationResult {
        effects,
        placebos,
        average_total,
        dose,
        w_plus,
        effects_equal,
        joint_placebos,
        het,
        design_paths,
        influence,
        bootstrap,
        n_groups: panel_ref.n_groups,
        n_periods: panel_ref.n_periods,
        normalized,
        analytic_se_advisory: config.continuous.is_some(),
        warnings,
    })
}

/// Point estimates for one bootstrap replication: the panel is already
/// prepared (differenced/recoded), so only the point pipeline reruns.
fn replication_points(panel: &mut Panel, config: &RunConfig) -> Option<ReplicationEstimates> {
    let pipe = point_pipeline(panel, config).ok()?;
    let mut agg = pipe.agg;
    if config.trends_lin {
        // Cumulate points only; rows are not needed for the bootstrap.
        let mut run_ok = true;
        let mut acc = KahanSum::new();
        for h in agg.per_l.iter_mut() {
            match (run_ok, h.did) {
                (true, Some(v)) => {
                    acc.add(v);
                    h.did = Some(acc.value());
                }
                _ => {
                    run_ok = false;
                    h.did = None;
                }
            }
        }
    }
    let effects = agg
        .per_l
        .iter()
        .map(|h| if config.normalized { h.normalized() } else { h.did })
        .collect();
    let placebos = agg
        .per_l_pl
        .iter()
        .enumerate()
        .map(|(i, h)| {
            if config.normalized {
                let dd = agg.per_l.get(i).map(|e| e.delta_d_abs).unwrap_or(0.0);
                if dd > 0.0 {
                    h.did.map(|v| v / dd)
                } else {
                    None
                }
            } else {
                h.did
            }
        })
        .collect();
    Some(ReplicationEstimates {
        effects,
        placebos,
        average_total: agg.avg_total.as_ref().and_then(|a| a.delta),
    })
}

#[allow(clippy::too_many_arguments)]
fn make_row(
    kind: EstimateKind,
    horizon: usize,
    estimate: Option<f64>,
    variance: Option<f64>,
    n: f64,
    switchers: usize,
    note: Option<String>,
    level: f64,
) -> EffectRow {
    let se = variance.map(|v| v.max(0.0).sqrt());
    let ci = match (estimate, variance) {
        (Some(p), Some(v)) => Some(confidence_interval(p, v.max(0.0), level)),
        _ => None,
    };
    EffectRow {
        kind,
        horizon,
        estimate,
        se,
        se_bootstrap: None,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        n,
        switchers,
        note,
    }
}

/// Convenience wrapper mirroring the library-level entry: collapse rows,
/// apply the conventions, run one estimation.
pub fn estimate_rows(rows: &[RawRow], config: &RunConfig) -> Result<EstimationResult> {
    let cells = collapse(rows)?;
    let (mut panel, _warnings) = build_panel(&cells)?;
    apply_missing_conventions(&mut panel, config.missing_policy);
    estimate_prepared(&mut panel, config)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::RawRow;

    fn toy_rows() -> Vec<RawRow> {
        // two never-switchers, switchers at periods 3 and 2, outcome 5*D
        let ds = [
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 1.0, 1.0, 1.0],
        ];
        let mut rows = Vec::new();
        for (g, d) in ds.iter().enumerate() {
            for (t, &dv) in d.iter().enumerate() {
                rows.push(
                    RawRow::new(format!("g{g}"), (t + 1) as i64)
                        .outcome(5.0 * dv)
                        .treatment(dv),
                );
            }
        }
        rows
    }

    #[test]
    fn full_pipeline_on_toy_panel() {
        let config = RunConfig { effects: 3, placebos: 1, ..Default::default() };
        let res = estimate_rows(&toy_rows(), &config).unwrap();
        assert_eq!(res.effects.len(), 3);
        assert_eq!(res.effects[0].estimate, Some(5.0));
        assert!(res.effects[0].se.is_some());
        let avg = res.average_total.as_ref().unwrap();
        assert!((avg.estimate.unwrap() - 5.0).abs() < 1e-12);
        // linearization identity
        for (i, row) in res.effects.iter().enumerate() {
            if let Some(v) = row.estimate {
                let mean = InfluenceTable::row_mean(&res.influence.u[i]);
                assert!((mean - v).abs() <= 1e-10 * v.abs().max(1.0), "l={} {mean} vs {v}", i + 1);
            }
        }
    }

    #[test]
    fn normalized_se_is_scaled_se() {
        let mut config = RunConfig { effects: 2, ..Default::default() };
        let raw = estimate_rows(&toy_rows(), &config).unwrap();
        config.normalized = true;
        let norm = estimate_rows(&toy_rows(), &config).unwrap();
        for i in 0..2 {
            let (Some(se_raw), Some(se_n)) = (raw.effects[i].se, norm.effects[i].se) else {
                continue;
            };
            let dd = raw.dose[i].delta_d_abs;
            assert_eq!(se_n, se_raw / dd);
        }
    }

    #[test]
    fn placebo_cap_under_outcome_differencing() {
        // 6 periods so differencing leaves room
        let ds = [
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        ];
        let mut rows = Vec::new();
        for (g, d) in ds.iter().enumerate() {
            for (t, &dv) in d.iter().enumerate() {
                rows.push(
                    RawRow::new(format!("g{g}"), (t + 1) as i64)
                        .outcome(((t + 1) * (t + 1)) as f64 + 3.0 * dv)
                        .treatment(dv),
                );
            }
        }
        let config =
            RunConfig { effects: 2, placebos: 2, trends_lin: true, ..Default::default() };
        let res = estimate_rows(&rows, &config).unwrap();
        // one placebo lost to differencing; no average total
        assert!(res.placebos.len() <= 1);
        assert!(res.average_total.is_none());
    }

    #[test]
    fn group_level_linear_trends_removed_by_differencing() {
        // Y = a_g + b_g t + 5 D: differencing recovers the effect
        let ds = [
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        ];
        let slopes = [0.0, 2.0, -1.5, 4.0];
        let mut rows = Vec::new();
        for (g, d) in ds.iter().enumerate() {
            for (t, &dv) in d.iter().enumerate() {
                let y = 10.0 * g as f64 + slopes[g] * (t + 1) as f64 + 5.0 * dv;
                rows.push(RawRow::new(format!("g{g}"), (t + 1) as i64).outcome(y).treatment(dv));
            }
        }
        let config = RunConfig { effects: 2, trends_lin: true, ..Default::default() };
        let res = estimate_rows(&rows, &config).unwrap();
        for row in &res.effects {
            if let Some(v) = row.estimate {
                assert!((v - 5.0).abs() < 1e-10, "effect {} = {v}", row.horizon);
            }
        }
    }

    #[test]
    fn usage_error_placebos_exceed_effects() {
        let config = RunConfig { effects: 3, placebos: 4, ..Default::default() };
        let err = estimate_rows(&toy_rows(), &config);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn split_variable_runs_per_level() {
        let mut rows = Vec::new();
        for (g, (d_at, level)) in [(3usize, "a"), (2, "a"), (9, "b"), (2, "b"), (9, "b")]
            .iter()
            .enumerate()
        {
            for t in 1..=4i64 {
                let d = if (t as usize) >= *d_at { 1.0 } else { 0.0 };
                let mut row = RawRow::new(format!("g{g}"), t).outcome(2.0 * d).treatment(d);
                row.by_value = Some(level.to_string());
                rows.push(row);
            }
        }
        let config = RunConfig {
            effects: 1,
            by: Some("lvl".into()),
            ..Default::default()
        };
        let out = run_rows(&config, &rows).unwrap();
        assert_eq!(out.results.len(), 2);
        assert_eq!(out.results[0].0, "a");
        let eff = &out.results[0].1.effects[0];
        assert_eq!(eff.estimate, Some(2.0));
    }

    #[test]
    fn bootstrap_attaches_standard_errors() {
        let mut rows = Vec::new();
        // add outcome noise so the bootstrap se is nonzero
        let noise = [0.3, -0.2, 0.15, -0.4, 0.05, 0.2, -0.1, 0.25];
        for g in 0..8usize {
            let f = 2 + (g % 4);
            for t in 1..=5i64 {
                let d = if (t as usize) >= f && g < 6 { 1.0 } else { 0.0 };
                let y = 2.0 * d + noise[g] * t as f64;
                rows.push(RawRow::new(format!("g{g}"), t).outcome(y).treatment(d));
            }
        }
        let config = RunConfig {
            effects: 1,
            bootstrap: Some(BootstrapSpec { replications: 20, seed: 7 }),
            ..Default::default()
        };
        let res = estimate_rows(&rows, &config).unwrap();
        let se = res.effects[0].se_bootstrap;
        assert!(se.is_some());
        // deterministic given the seed
        let res2 = estimate_rows(&rows, &config).unwrap();
        assert_eq!(se, res2.effects[0].se_bootstrap);
    }
}
