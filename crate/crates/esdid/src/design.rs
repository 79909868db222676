//! Per-group design facts: baseline treatment, first-switch date, switcher
//! direction, horizons, and the design restrictions the estimators require.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::ValueClasses;
use crate::panel::Panel;

/// Direction of a group's first treatment change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    In,
    Out,
    Never,
}

/// Derived design facts for one group.
#[derive(Debug, Clone)]
pub struct GroupSchedule {
    /// Baseline treatment: the first observed treatment value.
    pub d1: f64,
    /// Equivalence class of the baseline treatment.
    pub d1_class: usize,
    /// First period with a treatment different from the baseline; T+1 when
    /// the treatment never changes.
    pub f: usize,
    pub direction: Direction,
    /// Treatment at the switch period (baseline for never-switchers).
    pub d_at_f: f64,
    /// Last period with a surviving same-baseline (and same-supergroup, when
    /// active) control group. Filled by `compute_horizons`.
    pub t_g: usize,
    /// Switcher whose post-switch average treatment equals the baseline
    /// exactly; excluded from switcher aggregates.
    pub no_first_stage: bool,
    /// Stratum index: (baseline class, supergroup) pair.
    pub stratum: usize,
}

impl GroupSchedule {
    pub fn is_switcher(&self) -> bool {
        self.direction != Direction::Never && !self.no_first_stage
    }
}

/// Classification options.
#[derive(Debug, Clone, Default)]
pub struct DesignOptions {
    /// Absolute tolerance for treatment equality (0 = exact).
    pub treatment_tolerance: f64,
    /// Keep cells where a group has been both strictly above and strictly
    /// below its baseline.
    pub dont_drop_larger_lower: bool,
}

/// Classified design: schedules, strata, and treatment-value classes.
#[derive(Debug, Clone)]
pub struct Design {
    pub schedules: Vec<GroupSchedule>,
    pub classes: ValueClasses,
    /// Groups per stratum, ascending group index.
    pub strata: Vec<Vec<usize>>,
    /// (d1_class, supergroup) per stratum.
    pub stratum_keys: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl Design {
    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }
}

/// Derives group schedules from the panel, enforcing the larger-lower cell
/// drops unless disabled. Mutates the panel when cells are dropped.
pub fn classify(panel: &mut Panel, opts: &DesignOptions) -> Result<Design> {
    let mut warnings = Vec::new();
    let t_max = panel.n_periods;

    let mut observed_values = Vec::new();
    for g in 0..panel.n_groups {
        for t in 1..=t_max {
            if let Some(v) = panel.d(g, t) {
                observed_values.push(v);
            }
        }
    }
    let classes = ValueClasses::build(observed_values, opts.treatment_tolerance);
    if classes.is_empty() {
        return Err(Error::Input("no observed treatment values".into()));
    }

    // Enforce the restriction that a group's observed treatments stay weakly
    // on one side of its baseline: once a group has been strictly above and
    // strictly below, its cells are dropped from that period on.
    if !opts.dont_drop_larger_lower {
        for g in 0..panel.n_groups {
            let mut base: Option<usize> = None;
            let mut seen_above = false;
            let mut seen_below = false;
            let mut drop_from: Option<usize> = None;
            for t in 1..=t_max {
                if let Some(d) = panel.d(g, t) {
                    let c = classes.class_of(d);
                    match base {
                        None => base = Some(c),
                        Some(b) => {
                            if c > b {
                                seen_above = true;
                            } else if c < b {
                                seen_below = true;
                            }
                        }
                    }
                    if seen_above && seen_below {
                        drop_from = Some(t);
                        break;
                    }
                }
            }
            if let Some(t0) = drop_from {
                for t in t0..=t_max {
                    panel.set_y(g, t, None);
                    panel.set_d(g, t, None);
                    panel.set_weight(g, t, 0.0);
                }
                warnings.push(format!(
                    "group {}: treatments strictly above and below the baseline; cells dropped from period {} on",
                    panel.group_labels[g],
                    panel.period_labels[t0 - 1]
                ));
            }
        }
    }

    let mut schedules = Vec::with_capacity(panel.n_groups);
    for g in 0..panel.n_groups {
        let observed: Vec<usize> = (1..=t_max).filter(|&t| panel.d(g, t).is_some()).collect();
        let (d1, first_switch) = match observed.first() {
            Some(&fd) => {
                let d1 = panel.d(g, fd).unwrap();
                let c1 = classes.class_of(d1);
                let fs = observed
                    .iter()
                    .copied()
                    .find(|&t| classes.class_of(panel.d(g, t).unwrap()) != c1);
                (d1, fs)
            }
            None => {
                // No treatment information at all: inert group.
                schedules.push(GroupSchedule {
                    d1: f64::NAN,
                    d1_class: usize::MAX,
                    f: t_max + 1,
                    direction: Direction::Never,
                    d_at_f: f64::NAN,
                    t_g: 0,
                    no_first_stage: false,
                    stratum: usize::MAX,
                });
                warnings.push(format!(
                    "group {}: no observed treatment; excluded",
                    panel.group_labels[g]
                ));
                continue;
            }
        };
        let d1_class = classes.class_of(d1);
        match first_switch {
            Some(f) => {
                let d_at_f = panel.d(g, f).unwrap();
                let direction = if classes.class_of(d_at_f) > d1_class {
                    Direction::In
                } else {
                    Direction::Out
                };
                // Post-switch average treatment exactly equal to the baseline
                // means no first stage; such switchers are dropped from
                // switcher aggregates (they still serve as pre-switch controls).
                let mut post = crate::numeric::WeightedMean::new();
                for &t in observed.iter().filter(|&&t| t >= f) {
                    post.add(1.0, panel.d(g, t).unwrap());
                }
                let no_first_stage = post.mean().map(|m| m == d1).unwrap_or(false);
                schedules.push(GroupSchedule {
                    d1,
                    d1_class,
                    f,
                    direction,
                    d_at_f,
                    t_g: 0,
                    no_first_stage,
                    stratum: 0,
                });
            }
            None => schedules.push(GroupSchedule {
                d1,
                d1_class,
                f: t_max + 1,
                direction: Direction::Never,
                d_at_f: d1,
                t_g: 0,
                no_first_stage: false,
                stratum: 0,
            }),
        }
    }

    for (g, s) in schedules.iter().enumerate() {
        if s.no_first_stage {
            warnings.push(format!(
                "group {}: average post-switch treatment equals the baseline (no first stage); dropped from switcher aggregates",
                panel.group_labels[g]
            ));
        }
    }

    // Strata: (baseline class, supergroup) pairs in ascending order.
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for (g, s) in schedules.iter().enumerate() {
        if s.d1_class != usize::MAX {
            keys.push((s.d1_class, panel.supergroup_of[g]));
        }
    }
    keys.sort_unstable();
    keys.dedup();
    let stratum_keys = keys;
    let mut strata = vec![Vec::new(); stratum_keys.len()];
    for (g, s) in schedules.iter_mut().enumerate() {
        if s.d1_class == usize::MAX {
            continue;
        }
        let key = (s.d1_class, panel.supergroup_of[g]);
        let idx = stratum_keys.binary_search(&key).unwrap();
        s.stratum = idx;
        strata[idx].push(g);
    }

    let mut design = Design { schedules, classes, strata, stratum_keys, warnings };
    compute_horizons(panel, &mut design);
    Ok(design)
}

/// Fills `t_g` per group: the last period where a same-stratum group has not
/// yet switched.
fn compute_horizons(panel: &Panel, design: &mut Design) {
    let _ = panel;
    for stratum in &design.strata {
        let max_f = stratum.iter().map(|&g| design.schedules[g].f).max().unwrap_or(0);
        for &g in stratum {
            design.schedules[g].t_g = max_f.saturating_sub(1);
        }
    }
}

/// Checks the baseline applicability restriction: some pair of groups shares
/// a baseline treatment but switches at different dates.
pub fn check_design_restriction(design: &Design) -> Result<()> {
    let mut shared_baseline = false;
    for key_class in 0..design.classes.len() {
        let members: Vec<&GroupSchedule> = design
            .schedules
            .iter()
            .filter(|s| s.d1_class == key_class)
            .collect();
        if members.len() >= 2 {
            shared_baseline = true;
            let f0 = members[0].f;
            if members.iter().any(|s| s.f != f0) {
                return Ok(());
            }
        }
    }
    if !shared_baseline {
        Err(Error::Design(
            "no two groups share a baseline treatment value; with a continuously distributed \
             baseline treatment, rerun with the continuous option"
                .into(),
        ))
    } else {
        Err(Error::Design(
            "all groups with a common baseline treatment switch at the same date; \
             the estimators need variation in the first-switch date"
                .into(),
        ))
    }
}

/// Baseline classes satisfying the restriction: at least two groups share the
/// class and their first-switch dates differ. Only groups in these classes
/// enter estimation.
pub fn applicable_classes(design: &Design) -> Vec<bool> {
    let mut ok = vec![false; design.classes.len()];
    for class in 0..design.classes.len() {
        let mut first_f: Option<usize> = None;
        let mut count = 0usize;
        for s in design.schedules.iter().filter(|s| s.d1_class == class) {
            count += 1;
            match first_f {
                None => first_f = Some(s.f),
                Some(f0) => {
                    if s.f != f0 {
                        ok[class] = true;
                    }
                }
            }
        }
        let _ = count;
    }
    ok
}

/// One treatment path among switchers contributing to an event-study effect.
#[derive(Debug, Clone, Serialize)]
pub struct DesignPath {
    /// Baseline followed by treatments at F..F-1+horizon.
    pub path: Vec<f64>,
    pub weight_share: f64,
    pub n_groups: usize,
}

/// Design report: the most common switcher treatment paths for a horizon,
/// by weight share, truncated at a cumulative share.
pub fn report_design_paths(
    panel: &Panel,
    design: &Design,
    contributors: &[(usize, f64)],
    horizon: usize,
    coverage: f64,
) -> Vec<DesignPath> {
    use std::collections::BTreeMap;
    let mut by_path: BTreeMap<Vec<u64>, (Vec<f64>, f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for &(g, w) in contributors {
        let s = &design.schedules[g];
        let mut path = Vec::with_capacity(horizon + 1);
        let mut key = Vec::with_capacity(horizon + 1);
        let mut complete = true;
        let push = |v: Option<f64>, path: &mut Vec<f64>, key: &mut Vec<u64>| match v {
            Some(v) => {
                // 12 significant digits for float path grouping
                let canon: f64 = format!("{v:.12e}").parse().unwrap();
                path.push(v);
                key.push(canon.to_bits());
                true
            }
            None => false,
        };
        complete &= push(Some(s.d1), &mut path, &mut key);
        for k in 0..horizon {
            complete &= push(panel.dose(g, s.f + k), &mut path, &mut key);
        }
        if !complete {
            continue;
        }
        total += w;
        let entry = by_path.entry(key).or_insert_with(|| (path, 0.0, 0));
        entry.1 += w;
        entry.2 += 1;
    }
    if total <= 0.0 {
        return Vec::new();
    }
    let mut rows: Vec<DesignPath> = by_path
        .into_values()
        .map(|(path, w, n)| DesignPath { path, weight_share: w / total, n_groups: n })
        .collect();
    rows.sort_by(|a, b| {
        b.weight_share
            .partial_cmp(&a.weight_share)
            .unwrap()
            .then_with(|| a.path.partial_cmp(&b.path).unwrap())
    });
    let mut cum = 0.0;
    let mut keep = rows.len();
    for (i, r) in rows.iter().enumerate() {
        cum += r.weight_share;
        if cum >= coverage {
            keep = i + 1;
            break;
        }
    }
    rows.truncate(keep);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{build_panel, PanelCell};

    pub(crate) fn panel_from_d(ds: &[Vec<Option<f64>>]) -> Panel {
        let mut cells = Vec::new();
        for (g, drow) in ds.iter().enumerate() {
            for (t, &d) in drow.iter().enumerate() {
                cells.push(PanelCell {
                    group: format!("{g:03}"),
                    period: (t + 1) as i64,
                    outcome: Some(0.0),
                    treatment: d,
                    weight: 1.0,
                    controls: vec![],
                    cluster: None,
                    supergroup: None,
                    by_value: None,
                    predictors: vec![],
                });
            }
        }
        build_panel(&cells).unwrap().0
    }

    fn d(vals: &[f64]) -> Vec<Option<f64>> {
        vals.iter().map(|&v| Some(v)).collect()
    }

    #[test]
    fn classify_switcher_directions() {
        let mut p = panel_from_d(&[d(&[0.0, 0.0, 1.0, 1.0]), d(&[5.0, 5.0, 2.0, 2.0]), d(&[1.0, 1.0, 1.0, 1.0])]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        assert_eq!(design.schedules[0].f, 3);
        assert_eq!(design.schedules[0].direction, Direction::In);
        assert_eq!(design.schedules[1].f, 3);
        assert_eq!(design.schedules[1].direction, Direction::Out);
        assert_eq!(design.schedules[2].f, 5);
        assert_eq!(design.schedules[2].direction, Direction::Never);
    }

    #[test]
    fn restriction_needs_f_heterogeneity() {
        let mut p = panel_from_d(&[d(&[0.0, 1.0]), d(&[0.0, 1.0])]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        assert!(check_design_restriction(&design).is_err());

        let mut p = panel_from_d(&[d(&[0.0, 1.0]), d(&[0.0, 0.0])]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        assert!(check_design_restriction(&design).is_ok());
    }

    #[test]
    fn restriction_needs_shared_baseline() {
        let mut p = panel_from_d(&[d(&[0.1, 1.0]), d(&[0.2, 0.2]), d(&[0.3, 0.3, 0.9])]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        let err = check_design_restriction(&design).unwrap_err();
        assert!(format!("{err}").contains("continuous"));
    }

    #[test]
    fn larger_lower_cells_dropped() {
        let mut p = panel_from_d(&[d(&[1.0, 2.0, 0.0, 0.0]), d(&[1.0, 1.0, 1.0, 1.0])]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        // cells from the period of the 0 onward dropped; switcher-in with F=2 kept
        assert_eq!(p.d(0, 3), None);
        assert_eq!(p.d(0, 4), None);
        assert_eq!(design.schedules[0].f, 2);
        assert_eq!(design.schedules[0].direction, Direction::In);
    }

    #[test]
    fn monotone_path_unchanged() {
        let mut p = panel_from_d(&[d(&[0.0, 1.0, 2.0])]);
        classify(&mut p, &DesignOptions::default()).unwrap();
        assert_eq!(p.d(0, 3), Some(2.0));
    }

    #[test]
    fn larger_lower_flag_keeps_cells() {
        let mut p = panel_from_d(&[d(&[1.0, 2.0, 0.0, 0.0])]);
        let opts = DesignOptions { dont_drop_larger_lower: true, ..Default::default() };
        let design = classify(&mut p, &opts).unwrap();
        assert_eq!(p.d(0, 3), Some(0.0));
        // classified by sign of the first change
        assert_eq!(design.schedules[0].direction, Direction::In);
    }

    #[test]
    fn no_first_stage_switcher_dropped() {
        // average post-switch treatment (2 + 0) / 2 = 1 = baseline
        let mut p = panel_from_d(&[d(&[1.0, 2.0, 0.0])]);
        let opts = DesignOptions { dont_drop_larger_lower: true, ..Default::default() };
        let design = classify(&mut p, &opts).unwrap();
        assert!(design.schedules[0].no_first_stage);
        assert!(!design.schedules[0].is_switcher());
    }

    #[test]
    fn horizons_from_same_stratum_controls() {
        let mut p = panel_from_d(&[
            d(&[0.0, 0.0, 0.0, 0.0]),
            d(&[0.0, 0.0, 0.0, 0.0]),
            d(&[0.0, 0.0, 1.0, 1.0]),
            d(&[0.0, 1.0, 1.0, 1.0]),
        ]);
        let design = classify(&mut p, &DesignOptions::default()).unwrap();
        for s in &design.schedules {
            assert_eq!(s.t_g, 4);
        }
    }

    #[test]
    fn direction_invariant_to_added_never_switchers() {
        let mut p1 = panel_from_d(&[d(&[0.0, 2.0, 2.0])]);
        let d1 = classify(&mut p1, &DesignOptions::default()).unwrap();
        let mut p2 = panel_from_d(&[d(&[0.0, 2.0, 2.0]), d(&[0.0, 0.0, 0.0]), d(&[7.0, 7.0, 7.0])]);
        let d2 = classify(&mut p2, &DesignOptions::default()).unwrap();
        assert_eq!(d1.schedules[0].direction, d2.schedules[0].direction);
        assert_eq!(d1.schedules[0].f, d2.schedules[0].f);
    }
}
