//! Panel ingestion: long-format rows, aggregation to (group, period) cells,
//! missing-treatment conventions, and the dense panel used by the estimators.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One long-format observation before aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub group: String,
    pub period: i64,
    pub outcome: Option<f64>,
    pub treatment: Option<f64>,
    pub weight: f64,
    pub controls: Vec<Option<f64>>,
    pub cluster: Option<String>,
    pub supergroup: Option<String>,
    pub by_value: Option<String>,
    pub predictors: Vec<Option<f64>>,
}

impl RawRow {
    pub fn new(group: impl Into<String>, period: i64) -> Self {
        Self {
            group: group.into(),
            period,
            outcome: None,
            treatment: None,
            weight: 1.0,
            controls: Vec::new(),
            cluster: None,
            supergroup: None,
            by_value: None,
            predictors: Vec::new(),
        }
    }

    pub fn outcome(mut self, y: f64) -> Self {
        self.outcome = Some(y);
        self
    }

    pub fn treatment(mut self, d: f64) -> Self {
        self.treatment = Some(d);
        self
    }

    pub fn weight(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }
}

/// One (group, period) cell after aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelCell {
    pub group: String,
    pub period: i64,
    pub outcome: Option<f64>,
    pub treatment: Option<f64>,
    /// Weight mass of the cell: sum of row weights with non-missing outcome.
    pub weight: f64,
    pub controls: Vec<Option<f64>>,
    pub cluster: Option<String>,
    pub supergroup: Option<String>,
    pub by_value: Option<String>,
    pub predictors: Vec<Option<f64>>,
}

/// Convention for unobserved treatments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MissingPolicy {
    /// Impute treatments where the design justifies it (default).
    #[default]
    Liberal,
    /// Never impute; drop every cell whose treatment history is ambiguous.
    Conservative,
}

/// Which convention produced an audit event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingRule {
    /// Outcomes before the first observed treatment are unusable.
    BeforeFirstObserved,
    /// Switcher treatment missing strictly between first observation and the
    /// last observation before the switch: imputed to the baseline.
    SwitcherInteriorBaseline,
    /// Treatment unobserved just before the first switch: the switch date is
    /// unknown, outcomes from that point on are unusable.
    UnknownSwitchDate,
    /// Switcher treatment missing after the switch: imputed to the
    /// at-switch treatment.
    SwitcherPostCarry,
    /// Never-switcher treatment missing between first and last observation:
    /// imputed to the baseline.
    NeverInteriorBaseline,
    /// Never-switcher outcomes after the last observed treatment are
    /// unusable.
    AfterLastObserved,
    /// Conservative mode: treatment missing before any observed change with
    /// outcome data at or before that date.
    ConservativeDrop,
}

/// What was done to a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MissingAction {
    ImputedTreatment { value: f64 },
    DroppedOutcome,
    DroppedCell,
}

/// One imputation or drop, recorded for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub group: String,
    pub period: i64,
    pub rule: MissingRule,
    pub action: MissingAction,
}

impl fmt::Display for AuditEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = match self.rule {
            MissingRule::BeforeFirstObserved => "before-first-observed-treatment",
            MissingRule::SwitcherInteriorBaseline => "switcher-interior-baseline",
            MissingRule::UnknownSwitchDate => "unknown-switch-date",
            MissingRule::SwitcherPostCarry => "switcher-post-switch-carry",
            MissingRule::NeverInteriorBaseline => "never-switcher-interior-baseline",
            MissingRule::AfterLastObserved => "after-last-observed-treatment",
            MissingRule::ConservativeDrop => "conservative-drop",
        };
        match &self.action {
            MissingAction::ImputedTreatment { value } => write!(
                f,
                "group {} period {}: treatment imputed to {} [{}]",
                self.group, self.period, value, rule
            ),
            MissingAction::DroppedOutcome => write!(
                f,
                "group {} period {}: outcome set missing [{}]",
                self.group, self.period, rule
            ),
            MissingAction::DroppedCell => write!(
                f,
                "group {} period {}: cell dropped [{}]",
                self.group, self.period, rule
            ),
        }
    }
}

/// Aggregates raw rows into (group, period) cells.
///
/// Only rows with a non-missing outcome contribute to the cell weight and to
/// the outcome/treatment/control means. When every row of a cell has a
/// missing outcome the cell keeps its treatment information (weighted over
/// rows where the treatment is observed) with zero weight, so treatment
/// histories survive outcome gaps.
pub fn collapse(rows: &[RawRow]) -> Result<Vec<PanelCell>> {
    if rows.is_empty() {
        return Err(Error::Input("no input rows".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if !r.weight.is_finite() || r.weight < 0.0 {
            return Err(Error::Input(format!(
                "row {}: negative or non-finite weight {}",
                i + 1,
                r.weight
            )));
        }
    }
    let n_controls = rows.iter().map(|r| r.controls.len()).max().unwrap_or(0);
    let n_pred = rows.iter().map(|r| r.predictors.len()).max().unwrap_or(0);

    let mut cells: BTreeMap<(String, i64), Vec<&RawRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.group.clone(), r.period)).or_default().push(r);
    }

    let mut out = Vec::with_capacity(cells.len());
    for ((group, period), members) in cells {
        let with_y: Vec<&&RawRow> = members.iter().filter(|r| r.outcome.is_some()).collect();
        let mut weight = 0.0;
        let outcome;
        let treatment;
        let mut controls = vec![None; n_controls];
        if with_y.is_empty() {
            outcome = None;
            treatment = weighted_mean_opt(members.iter().map(|r| (r.weight, r.treatment)));
            for (k, slot) in controls.iter_mut().enumerate() {
                *slot = weighted_mean_opt(
                    members.iter().map(|r| (r.weight, r.controls.get(k).copied().flatten())),
                );
            }
        } else {
            let mut y_acc = crate::numeric::WeightedMean::new();
            for r in &with_y {
                y_acc.add(r.weight, r.outcome.unwrap());
                weight += r.weight;
            }
            outcome = y_acc.mean();
            treatment = weighted_mean_opt(with_y.iter().map(|r| (r.weight, r.treatment)));
            for (k, slot) in controls.iter_mut().enumerate() {
                *slot = weighted_mean_opt(
                    with_y.iter().map(|r| (r.weight, r.controls.get(k).copied().flatten())),
                );
            }
        }
        let mut predictors = vec![None; n_pred];
        for (k, slot) in predictors.iter_mut().enumerate() {
            *slot = members.iter().find_map(|r| r.predictors.get(k).copied().flatten());
        }
        out.push(PanelCell {
            group,
            period,
            outcome,
            treatment,
            weight,
            controls,
            cluster: members.iter().find_map(|r| r.cluster.clone()),
            supergroup: members.iter().find_map(|r| r.supergroup.clone()),
            by_value: members.iter().find_map(|r| r.by_value.clone()),
            predictors,
        });
    }
    Ok(out)
}

fn weighted_mean_opt(items: impl Iterator<Item = (f64, Option<f64>)>) -> Option<f64> {
    let mut acc = crate::numeric::WeightedMean::new();
    for (w, v) in items {
        if let Some(v) = v {
            acc.add(w, v);
        }
    }
    acc.mean()
}

/// Dense panel over the common period grid, periods rebased to ranks 1..=T.
#[derive(Debug, Clone)]
pub struct Panel {
    pub n_groups: usize,
    pub n_periods: usize,
    pub group_labels: Vec<String>,
    /// Original period labels in rank order.
    pub period_labels: Vec<i64>,
    y: Vec<Option<f64>>,
    d: Vec<Option<f64>>,
    w: Vec<f64>,
    /// Treatment used for dose computations; differs from `d` only in
    /// continuous-baseline mode where `d` holds the recoded treatment.
    dose: Option<Vec<Option<f64>>>,
    /// Control columns, flattened as [k][g*T + t-1].
    pub control_names: Vec<String>,
    x: Vec<Vec<Option<f64>>>,
    /// Cluster index per group (defaults to the group itself).
    pub cluster_of: Vec<usize>,
    pub cluster_labels: Vec<String>,
    /// Supergroup index per group (defaults to a single supergroup).
    pub supergroup_of: Vec<usize>,
    pub supergroup_labels: Vec<String>,
    /// Optional split variable, constant within group.
    pub by_of: Option<Vec<usize>>,
    pub by_labels: Vec<String>,
    /// Group-level numeric predictors for effect-heterogeneity regressions.
    pub predictor_names: Vec<String>,
    pub predictors: Vec<Vec<Option<f64>>>,
}

impl Panel {
    /// Builds a dense panel directly from per-group outcome/treatment rows
    /// with unit period labels. All weights default to 1 where the outcome is
    /// present; cells with a missing outcome carry zero weight.
    pub fn dense(y: Vec<Vec<Option<f64>>>, d: Vec<Vec<Option<f64>>>) -> Panel {
        let n_groups = y.len();
        let n_periods = y.first().map(|r| r.len()).unwrap_or(0);
        let mut fy = Vec::with_capacity(n_groups * n_periods);
        let mut fd = Vec::with_capacity(n_groups * n_periods);
        let mut fw = Vec::with_capacity(n_groups * n_periods);
        for (yr, dr) in y.iter().zip(d.iter()) {
            assert_eq!(yr.len(), n_periods);
            assert_eq!(dr.len(), n_periods);
            for (yv, dv) in yr.iter().zip(dr.iter()) {
                fy.push(*yv);
                fd.push(*dv);
                fw.push(if yv.is_some() { 1.0 } else { 0.0 });
            }
        }
        let group_labels: Vec<String> = (0..n_groups).map(|g| format!("{g:04}")).collect();
        Panel {
            n_groups,
            n_periods,
            group_labels: group_labels.clone(),
            period_labels: (1..=n_periods as i64).collect(),
            y: fy,
            d: fd,
            w: fw,
            dose: None,
            control_names: Vec::new(),
            x: Vec::new(),
            cluster_of: (0..n_groups).collect(),
            cluster_labels: group_labels,
            supergroup_of: vec![0; n_groups],
            supergroup_labels: vec![String::new()],
            by_of: None,
            by_labels: Vec::new(),
            predictor_names: Vec::new(),
            predictors: Vec::new(),
        }
    }

    /// Assigns group-level cluster indices (labels derived from indices).
    pub fn set_clusters(&mut self, cluster_of: Vec<usize>) {
        assert_eq!(cluster_of.len(), self.n_groups);
        let n = cluster_of.iter().max().map(|m| m + 1).unwrap_or(0);
        self.cluster_labels = (0..n).map(|c| format!("c{c:03}")).collect();
        self.cluster_of = cluster_of;
    }

    /// Assigns group-level supergroup indices.
    pub fn set_supergroups(&mut self, supergroup_of: Vec<usize>) {
        assert_eq!(supergroup_of.len(), self.n_groups);
        let n = supergroup_of.iter().max().map(|m| m + 1).unwrap_or(1);
        self.supergroup_labels = (0..n).map(|s| format!("s{s}")).collect();
        self.supergroup_of = supergroup_of;
    }

    #[inline]
    fn idx(&self, g: usize, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.n_periods);
        g * self.n_periods + (t - 1)
    }

    #[inline]
    pub fn y(&self, g: usize, t: usize) -> Option<f64> {
        self.y[self.idx(g, t)]
    }

    #[inline]
    pub fn d(&self, g: usize, t: usize) -> Option<f64> {
        self.d[self.idx(g, t)]
    }

    #[inline]
    pub fn weight(&self, g: usize, t: usize) -> f64 {
        self.w[self.idx(g, t)]
    }

    /// Treatment entering dose (normalization and average-total) formulas.
    #[inline]
    pub fn dose(&self, g: usize, t: usize) -> Option<f64> {
        match &self.dose {
            Some(v) => v[self.idx(g, t)],
            None => self.d(g, t),
        }
    }

    /// Baseline dose: the first observed dose value of the group.
    pub fn dose_baseline(&self, g: usize) -> Option<f64> {
        (1..=self.n_periods).find_map(|t| self.dose(g, t))
    }

    #[inline]
    pub fn x(&self, g: usize, t: usize, k: usize) -> Option<f64> {
        self.x[k][g * self.n_periods + (t - 1)]
    }

    pub fn n_controls(&self) -> usize {
        self.x.len()
    }

    pub fn set_y(&mut self, g: usize, t: usize, v: Option<f64>) {
        let i = self.idx(g, t);
        self.y[i] = v;
    }

    pub fn set_d(&mut self, g: usize, t: usize, v: Option<f64>) {
        let i = self.idx(g, t);
        self.d[i] = v;
    }

    pub fn set_weight(&mut self, g: usize, t: usize, v: f64) {
        let i = self.idx(g, t);
        self.w[i] = v;
    }

    /// Switches to a recoded estimation treatment while keeping the original
    /// treatment as the dose source.
    pub fn recode_treatment(&mut self, new_d: Vec<Option<f64>>) {
        assert_eq!(new_d.len(), self.d.len());
        let original = std::mem::replace(&mut self.d, new_d);
        self.dose = Some(original);
    }

    pub fn push_control(&mut self, name: String, col: Vec<Option<f64>>) {
        assert_eq!(col.len(), self.n_groups * self.n_periods);
        self.control_names.push(name);
        self.x.push(col);
    }

    /// First-differences the outcome in place: Y[t] := Y[t] - Y[t-1], with
    /// period 1 set missing.
    pub fn first_difference_outcome(&mut self) {
        for g in 0..self.n_groups {
            let mut prev: Option<f64> = None;
            let mut diffs = Vec::with_capacity(self.n_periods);
            for t in 1..=self.n_periods {
                let cur = self.y(g, t);
                diffs.push(match (cur, prev) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                });
                prev = cur;
            }
            for (t, v) in (1..=self.n_periods).zip(diffs) {
                let v = if t == 1 { None } else { v };
                self.set_y(g, t, v);
            }
        }
    }

    /// Restriction to a subset of groups (order preserved), relabeling
    /// cluster/supergroup/by indices compactly.
    pub fn subset_groups(&self, keep: &[usize]) -> Panel {
        let t = self.n_periods;
        let take = |src: &Vec<Option<f64>>| -> Vec<Option<f64>> {
            let mut out = Vec::with_capacity(keep.len() * t);
            for &g in keep {
                out.extend_from_slice(&src[g * t..(g + 1) * t]);
            }
            out
        };
        let mut cluster_map = BTreeMap::new();
        let mut cluster_labels = Vec::new();
        let cluster_of = keep
            .iter()
            .map(|&g| {
                *cluster_map.entry(self.cluster_of[g]).or_insert_with(|| {
                    cluster_labels.push(self.cluster_labels[self.cluster_of[g]].clone());
                    cluster_labels.len() - 1
                })
            })
            .collect();
        let mut sg_map = BTreeMap::new();
        let mut supergroup_labels = Vec::new();
        let supergroup_of = keep
            .iter()
            .map(|&g| {
                *sg_map.entry(self.supergroup_of[g]).or_insert_with(|| {
                    supergroup_labels.push(self.supergroup_labels[self.supergroup_of[g]].clone());
                    supergroup_labels.len() - 1
                })
            })
            .collect();
        Panel {
            n_groups: keep.len(),
            n_periods: t,
            group_labels: keep.iter().map(|&g| self.group_labels[g].clone()).collect(),
            period_labels: self.period_labels.clone(),
            y: take(&self.y),
            d: take(&self.d),
            w: {
                let mut out = Vec::with_capacity(keep.len() * t);
                for &g in keep {
                    out.extend_from_slice(&self.w[g * t..(g + 1) * t]);
                }
                out
            },
            dose: self.dose.as_ref().map(take),
            control_names: self.control_names.clone(),
            x: self.x.iter().map(take).collect(),
            cluster_of,
            cluster_labels,
            supergroup_of,
            supergroup_labels,
            by_of: self
                .by_of
                .as_ref()
                .map(|b| keep.iter().map(|&g| b[g]).collect()),
            by_labels: self.by_labels.clone(),
            predictor_names: self.predictor_names.clone(),
            predictors: self
                .predictors
                .iter()
                .map(|p| keep.iter().map(|&g| p[g]).collect())
                .collect(),
        }
    }

    /// Panel built from drawing clusters with replacement. Each draw becomes
    /// its own cluster (and its groups fresh groups), so repeated draws stay
    /// distinct resampling units.
    pub fn resample_clusters(&self, draws: &[usize]) -> Panel {
        let n_clusters = self.cluster_labels.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
        for (g, &c) in self.cluster_of.iter().enumerate() {
            members[c].push(g);
        }
        let t = self.n_periods;
        let mut out_groups: Vec<usize> = Vec::new();
        let mut group_labels = Vec::new();
        let mut cluster_of = Vec::new();
        let mut cluster_labels = Vec::new();
        for (i, &c) in draws.iter().enumerate() {
            cluster_labels.push(format!("{}~{}", self.cluster_labels[c], i));
            for &g in &members[c] {
                out_groups.push(g);
                group_labels.push(format!("{}~{}", self.group_labels[g], i));
                cluster_of.push(i);
            }
        }
        let take = |src: &Vec<Option<f64>>| -> Vec<Option<f64>> {
            let mut out = Vec::with_capacity(out_groups.len() * t);
            for &g in &out_groups {
                out.extend_from_slice(&src[g * t..(g + 1) * t]);
            }
            out
        };
        Panel {
            n_groups: out_groups.len(),
            n_periods: t,
            group_labels,
            period_labels: self.period_labels.clone(),
            y: take(&self.y),
            d: take(&self.d),
            w: {
                let mut out = Vec::with_capacity(out_groups.len() * t);
                for &g in &out_groups {
                    out.extend_from_slice(&self.w[g * t..(g + 1) * t]);
                }
                out
            },
            dose: self.dose.as_ref().map(take),
            control_names: self.control_names.clone(),
            x: self.x.iter().map(take).collect(),
            cluster_of,
            cluster_labels,
            supergroup_of: out_groups.iter().map(|&g| self.supergroup_of[g]).collect(),
            supergroup_labels: self.supergroup_labels.clone(),
            by_of: self
                .by_of
                .as_ref()
                .map(|b| out_groups.iter().map(|&g| b[g]).collect()),
            by_labels: self.by_labels.clone(),
            predictor_names: self.predictor_names.clone(),
            predictors: self
                .predictors
                .iter()
                .map(|p| out_groups.iter().map(|&g| p[g]).collect())
                .collect(),
        }
    }

    /// Total weight over all cells.
    pub fn total_weight(&self) -> f64 {
        let mut acc = crate::numeric::KahanSum::new();
        for &w in &self.w {
            acc.add(w);
        }
        acc.value()
    }
}

/// Orders keys numerically when every key parses as a number, otherwise
/// lexicographically.
fn sort_keys(mut keys: Vec<String>) -> Vec<String> {
    let all_numeric: Option<Vec<f64>> = keys.iter().map(|k| k.trim().parse::<f64>().ok()).collect();
    match all_numeric {
        Some(_) => {
            keys.sort_by(|a, b| {
                let fa: f64 = a.trim().parse().unwrap();
                let fb: f64 = b.trim().parse().unwrap();
                fa.partial_cmp(&fb).unwrap().then_with(|| a.cmp(b))
            });
            keys
        }
        None => {
            keys.sort();
            keys
        }
    }
}

/// Builds the dense panel from aggregated cells: groups in key order, the
/// common period grid rebased to ranks 1..=T, original labels retained.
pub fn build_panel(cells: &[PanelCell]) -> Result<(Panel, Vec<String>)> {
    if cells.is_empty() {
        return Err(Error::Input("no cells".into()));
    }
    let mut warnings = Vec::new();

    let group_labels = sort_keys(
        cells
            .iter()
            .map(|c| c.group.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect(),
    );
    let gidx: BTreeMap<String, usize> =
        group_labels.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();

    let period_labels: Vec<i64> =
        cells.iter().map(|c| c.period).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let tidx: BTreeMap<i64, usize> =
        period_labels.iter().enumerate().map(|(i, &p)| (p, i + 1)).collect();

    let n_groups = group_labels.len();
    let n_periods = period_labels.len();
    let n_controls = cells.iter().map(|c| c.controls.len()).max().unwrap_or(0);
    let n_pred = cells.iter().map(|c| c.predictors.len()).max().unwrap_or(0);

    let size = n_groups * n_periods;
    let mut panel = Panel {
        n_groups,
        n_periods,
        group_labels,
        period_labels,
        y: vec![None; size],
        d: vec![None; size],
        w: vec![0.0; size],
        dose: None,
        control_names: (0..n_controls).map(|k| format!("x{k}")).collect(),
        x: vec![vec![None; size]; n_controls],
        cluster_of: (0..n_groups).collect(),
        cluster_labels: Vec::new(),
        supergroup_of: vec![0; n_groups],
        supergroup_labels: vec![String::new()],
        by_of: None,
        by_labels: Vec::new(),
        predictor_names: (0..n_pred).map(|k| format!("p{k}")).collect(),
        predictors: vec![vec![None; n_groups]; n_pred],
    };

    // Group-level attributes, validated constant within group.
    let mut cluster_raw: Vec<Option<String>> = vec![None; n_groups];
    let mut sg_raw: Vec<Option<String>> = vec![None; n_groups];
    let mut by_raw: Vec<Option<String>> = vec![None; n_groups];
    let mut any_cluster = false;
    let mut any_sg = false;
    let mut any_by = false;

    for c in cells {
        let g = gidx[&c.group];
        let t = tidx[&c.period];
        let i = g * n_periods + (t - 1);
        panel.y[i] = c.outcome;
        panel.d[i] = c.treatment;
        panel.w[i] = c.weight;
        for (k, v) in c.controls.iter().enumerate() {
            panel.x[k][i] = *v;
        }
        for (k, v) in c.predictors.iter().enumerate() {
            if let Some(v) = v {
                match panel.predictors[k][g] {
                    None => panel.predictors[k][g] = Some(*v),
                    Some(old) if old != *v => {
                        return Err(Error::Input(format!(
                            "predictor column {} varies within group {}",
                            k, c.group
                        )))
                    }
                    _ => {}
                }
            }
        }
        for (slot, val, flag, what) in [
            (&mut cluster_raw[g], &c.cluster, &mut any_cluster, "cluster"),
            (&mut sg_raw[g], &c.supergroup, &mut any_sg, "supergroup"),
            (&mut by_raw[g], &c.by_value, &mut any_by, "split variable"),
        ] {
            if let Some(v) = val {
                *flag = true;
                match slot {
                    None => *slot = Some(v.clone()),
                    Some(old) if old != v => {
                        return Err(Error::Input(format!(
                            "{} varies within group {} ({} vs {})",
                            what, c.group, old, v
                        )))
                    }
                    _ => {}
                }
            }
        }
    }

    if any_cluster {
        let missing: Vec<&str> = cluster_raw
            .iter()
            .zip(&panel.group_labels)
            .filter(|(c, _)| c.is_none())
            .map(|(_, g)| g.as_str())
            .take(5)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Input(format!("groups without cluster value: {}", missing.join(", "))));
        }
        let labels = sort_keys(
            cluster_raw
                .iter()
                .map(|c| c.clone().unwrap())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect(),
        );
        let lidx: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        panel.cluster_of = cluster_raw.iter().map(|c| lidx[c.as_deref().unwrap()]).collect();
        panel.cluster_labels = labels;
    } else {
        panel.cluster_labels = panel.group_labels.clone();
    }

    if any_sg {
        let labels = sort_keys(
            sg_raw
                .iter()
                .filter_map(|c| c.clone())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect(),
        );
        let lidx: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        for (g, c) in sg_raw.iter().enumerate() {
            match c {
                Some(v) => panel.supergroup_of[g] = lidx[v.as_str()],
                None => {
                    return Err(Error::Input(format!(
                        "group {} has no supergroup value",
                        panel.group_labels[g]
                    )))
                }
            }
        }
        panel.supergroup_labels = labels;
    }

    if any_by {
        let labels = sort_keys(
            by_raw
                .iter()
                .filter_map(|c| c.clone())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect(),
        );
        let lidx: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut by_of = vec![0usize; n_groups];
        for (g, c) in by_raw.iter().enumerate() {
            match c {
                Some(v) => by_of[g] = lidx[v.as_str()],
                None => {
                    return Err(Error::Input(format!(
                        "group {} has no value for the split variable",
                        panel.group_labels[g]
                    )))
                }
            }
        }
        panel.by_of = Some(by_of);
        panel.by_labels = labels;
    }

    if n_periods < 2 {
        warnings.push("panel has a single period; nothing is estimable".to_string());
    }
    Ok((panel, warnings))
}

/// Applies the missing-treatment conventions in place on the dense panel.
/// Returns the audit log of every imputation and drop.
pub fn apply_missing_conventions(panel: &mut Panel, policy: MissingPolicy) -> Vec<AuditEvent> {
    let mut audit = Vec::new();
    let t_max = panel.n_periods;
    for g in 0..panel.n_groups {
        match policy {
            MissingPolicy::Liberal => liberal_rules(panel, g, t_max, &mut audit),
            MissingPolicy::Conservative => conservative_rules(panel, g, t_max, &mut audit),
        }
    }
    audit
}

fn liberal_rules(panel: &mut Panel, g: usize, t_max: usize, audit: &mut Vec<AuditEvent>) {
    let observed: Vec<usize> = (1..=t_max).filter(|&t| panel.d(g, t).is_some()).collect();
    let Some(&fd) = observed.first() else { return };
    let ld = *observed.last().unwrap();
    let baseline = panel.d(g, fd).unwrap();

    // First observed period with a treatment different from the baseline.
    let first_switch = observed.iter().copied().find(|&t| panel.d(g, t) != Some(baseline));

    // Outcomes before the first observed treatment are unusable in both
    // switcher and never-switcher cases: the group joins the panel at fd.
    for t in 1..fd {
        if panel.y(g, t).is_some() {
            panel.set_y(g, t, None);
            panel.set_weight(g, t, 0.0);
            audit.push(AuditEvent {
                group: panel.group_labels[g].clone(),
                period: panel.period_labels[t - 1],
                rule: MissingRule::BeforeFirstObserved,
                action: MissingAction::DroppedOutcome,
            });
        }
    }

    match first_switch {
        Some(f) => {
            // Last observed treatment date before the switch.
            let ldbf = observed.iter().copied().filter(|&t| t < f).max().unwrap_or(fd);
            for t in (fd + 1)..ldbf {
                if panel.d(g, t).is_none() {
                    panel.set_d(g, t, Some(baseline));
                    audit.push(AuditEvent {
                        group: panel.group_labels[g].clone(),
                        period: panel.period_labels[t - 1],
                        rule: MissingRule::SwitcherInteriorBaseline,
                        action: MissingAction::ImputedTreatment { value: baseline },
                    });
                }
            }
            if ldbf < f - 1 {
                // The switch may have happened anywhere in (ldbf, f]; outcomes
                // from ldbf+1 on cannot be attributed to a known treatment path.
                for t in (ldbf + 1)..=t_max {
                    if panel.y(g, t).is_some() {
                        panel.set_y(g, t, None);
                        panel.set_weight(g, t, 0.0);
                        audit.push(AuditEvent {
                            group: panel.group_labels[g].clone(),
                            period: panel.period_labels[t - 1],
                            rule: MissingRule::UnknownSwitchDate,
                            action: MissingAction::DroppedOutcome,
                        });
                    }
                }
            }
            let d_at_f = panel.d(g, f).unwrap();
            for t in (f + 1)..=t_max {
                if panel.d(g, t).is_none() {
                    panel.set_d(g, t, Some(d_at_f));
                    audit.push(AuditEvent {
                        group: panel.group_labels[g].clone(),
                        period: panel.period_labels[t - 1],
                        rule: MissingRule::SwitcherPostCarry,
                        action: MissingAction::ImputedTreatment { value: d_at_f },
                    });
                }
            }
        }
        None => {
            for t in (fd + 1)..ld {
                if panel.d(g, t).is_none() {
                    panel.set_d(g, t, Some(baseline));
                    audit.push(AuditEvent {
                        group: panel.group_labels[g].clone(),
                        period: panel.period_labels[t - 1],
                        rule: MissingRule::NeverInteriorBaseline,
                        action: MissingAction::ImputedTreatment { value: baseline },
                    });
                }
            }
            for t in (ld + 1)..=t_max {
                if panel.y(g, t).is_some() {
                    panel.set_y(g, t, None);
                    panel.set_weight(g, t, 0.0);
                    audit.push(AuditEvent {
                        group: panel.group_labels[g].clone(),
                        period: panel.period_labels[t - 1],
                        rule: MissingRule::AfterLastObserved,
                        action: MissingAction::DroppedOutcome,
                    });
                }
            }
        }
    }
}

fn conservative_rules(panel: &mut Panel, g: usize, t_max: usize, audit: &mut Vec<AuditEvent>) {
    // Drop every (g, t) for which some t0 <= t has: treatment missing at t0,
    // treatment not yet changed at t0 (on observed values), and the outcome
    // observed at least once at or before t0.
    let mut baseline: Option<f64> = None;
    let mut changed = false;
    let mut outcome_seen = false;
    let mut drop_from: Option<usize> = None;
    for t0 in 1..=t_max {
        if panel.y(g, t0).is_some() {
            outcome_seen = true;
        }
        match panel.d(g, t0) {
            Some(d) => match baseline {
                None => baseline = Some(d),
                Some(b) => {
                    if d != b {
                        changed = true;
                    }
                }
            },
            None => {
                if !changed && outcome_seen {
                    drop_from = Some(t0);
                    break;
                }
            }
        }
    }
    if let Some(t0) = drop_from {
        for t in t0..=t_max {
            let had_any = panel.y(g, t).is_some() || panel.d(g, t).is_some() || panel.weight(g, t) > 0.0;
            panel.set_y(g, t, None);
            panel.set_d(g, t, None);
            panel.set_weight(g, t, 0.0);
            if had_any {
                audit.push(AuditEvent {
                    group: panel.group_labels[g].clone(),
                    period: panel.period_labels[t - 1],
                    rule: MissingRule::ConservativeDrop,
                    action: MissingAction::DroppedCell,
                });
            }
        }
    }
}

/// Column bindings for CSV input. Empty fields are missing values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvBindings {
    pub outcome: String,
    pub group: String,
    pub time: String,
    pub treatment: String,
    pub weight: Option<String>,
    pub cluster: Option<String>,
    pub supergroup: Option<String>,
    pub by: Option<String>,
    pub controls: Vec<String>,
    pub predictors: Vec<String>,
}

impl Default for CsvBindings {
    fn default() -> Self {
        Self {
            outcome: "Y".into(),
            group: "G".into(),
            time: "T".into(),
            treatment: "D".into(),
            weight: None,
            cluster: None,
            supergroup: None,
            by: None,
            controls: Vec::new(),
            predictors: Vec::new(),
        }
    }
}

/// Reads long-format rows from a UTF-8 CSV file with a header.
pub fn read_csv(path: &Path, bindings: &CsvBindings) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    read_csv_impl(&mut reader, bindings)
}

/// Reads long-format rows from any CSV reader (used by tests).
pub fn read_csv_from<R: std::io::Read>(reader: R, bindings: &CsvBindings) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    read_csv_impl(&mut reader, bindings)
}

fn read_csv_impl<R: std::io::Read>(
    reader: &mut csv::Reader<R>,
    bindings: &CsvBindings,
) -> Result<Vec<RawRow>> {
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("column {name} not found in header")))
    };
    let opt_col = |name: &Option<String>| -> Result<Option<usize>> {
        match name {
            Some(n) => Ok(Some(col(n)?)),
            None => Ok(None),
        }
    };
    let y_i = col(&bindings.outcome)?;
    let g_i = col(&bindings.group)?;
    let t_i = col(&bindings.time)?;
    let d_i = col(&bindings.treatment)?;
    let w_i = opt_col(&bindings.weight)?;
    let cl_i = opt_col(&bindings.cluster)?;
    let sg_i = opt_col(&bindings.supergroup)?;
    let by_i = opt_col(&bindings.by)?;
    let x_i: Vec<usize> = bindings.controls.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let p_i: Vec<usize> = bindings.predictors.iter().map(|c| col(c)).collect::<Result<_>>()?;

    let parse_num = |field: &str, what: &str, line: usize| -> Result<Option<f64>> {
        let field = field.trim();
        if field.is_empty() {
            return Ok(None);
        }
        field.parse::<f64>().map(Some).map_err(|_| {
            Error::Input(format!("row {line}: non-numeric {what} value {field:?}"))
        })
    };

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2; // 1-based, after header
        let period_str = record.get(t_i).unwrap_or("").trim();
        let period: i64 = match period_str.parse::<i64>() {
            Ok(p) => p,
            Err(_) => match period_str.parse::<f64>() {
                Ok(f) if f.fract() == 0.0 && f.abs() < 9e15 => f as i64,
                _ => {
                    return Err(Error::Input(format!(
                        "row {line}: period value {period_str:?} is not an integer"
                    )))
                }
            },
        };
        let weight = match w_i {
            Some(wi) => match parse_num(record.get(wi).unwrap_or(""), "weight", line)? {
                Some(w) if w >= 0.0 => w,
                Some(w) => {
                    return Err(Error::Input(format!("row {line}: negative weight {w}")));
                }
                None => 0.0,
            },
            None => 1.0,
        };
        let get_opt = |idx: Option<usize>| -> Option<String> {
            idx.and_then(|i| record.get(i)).map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
        };
        rows.push(RawRow {
            group: record.get(g_i).unwrap_or("").trim().to_string(),
            period,
            outcome: parse_num(record.get(y_i).unwrap_or(""), "outcome", line)?,
            treatment: parse_num(record.get(d_i).unwrap_or(""), "treatment", line)?,
            weight,
            controls: x_i
                .iter()
                .map(|&k| parse_num(record.get(k).unwrap_or(""), "control", line))
                .collect::<Result<_>>()?,
            cluster: get_opt(cl_i),
            supergroup: get_opt(sg_i),
            by_value: get_opt(by_i),
            predictors: p_i
                .iter()
                .map(|&k| parse_num(record.get(k).unwrap_or(""), "predictor", line))
                .collect::<Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Input("input contains no data rows".into()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(panel: &Panel, g: usize, t: usize) -> (Option<f64>, Option<f64>, f64) {
        (panel.y(g, t), panel.d(g, t), panel.weight(g, t))
    }

    #[test]
    fn collapse_weighted_mean() {
        let rows = vec![
            RawRow::new("1", 1).outcome(2.0).treatment(0.0).weight(1.0),
            RawRow::new("1", 1).outcome(4.0).treatment(0.0).weight(3.0),
        ];
        let cells = collapse(&rows).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].outcome, Some(3.5));
        assert_eq!(cells[0].weight, 4.0);
    }

    #[test]
    fn collapse_single_row_identity() {
        let rows = vec![RawRow::new("g", 1).outcome(5.0).treatment(0.0)];
        let cells = collapse(&rows).unwrap();
        assert_eq!(cells[0].outcome, Some(5.0));
        assert_eq!(cells[0].treatment, Some(0.0));
        assert_eq!(cells[0].weight, 1.0);
    }

    #[test]
    fn collapse_skips_missing_outcome_rows() {
        let rows = vec![
            RawRow::new("1", 1).treatment(1.0).weight(1.0),
            RawRow::new("1", 1).outcome(4.0).treatment(0.0).weight(1.0),
        ];
        let cells = collapse(&rows).unwrap();
        assert_eq!(cells[0].outcome, Some(4.0));
        assert_eq!(cells[0].weight, 1.0);
        // treatment mean over outcome-bearing rows only
        assert_eq!(cells[0].treatment, Some(0.0));
    }

    #[test]
    fn collapse_is_idempotent() {
        let rows = vec![
            RawRow::new("1", 1).outcome(2.0).treatment(0.0).weight(1.0),
            RawRow::new("1", 1).outcome(4.0).treatment(0.0).weight(3.0),
            RawRow::new("1", 2).outcome(1.0).treatment(1.0).weight(2.0),
        ];
        let once = collapse(&rows).unwrap();
        let as_rows: Vec<RawRow> = once
            .iter()
            .map(|c| RawRow {
                group: c.group.clone(),
                period: c.period,
                outcome: c.outcome,
                treatment: c.treatment,
                weight: c.weight,
                controls: c.controls.clone(),
                cluster: c.cluster.clone(),
                supergroup: c.supergroup.clone(),
                by_value: c.by_value.clone(),
                predictors: c.predictors.clone(),
            })
            .collect();
        let twice = collapse(&as_rows).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn collapse_conserves_total_weight() {
        let rows = vec![
            RawRow::new("1", 1).outcome(2.0).weight(1.5),
            RawRow::new("1", 1).weight(9.0), // missing outcome: excluded
            RawRow::new("2", 1).outcome(0.0).weight(2.5),
        ];
        let cells = collapse(&rows).unwrap();
        let total: f64 = cells.iter().map(|c| c.weight).sum();
        assert_eq!(total, 4.0);
    }

    #[test]
    fn collapse_rejects_negative_weight() {
        let rows = vec![RawRow::new("1", 1).outcome(1.0).weight(-1.0)];
        assert!(matches!(collapse(&rows), Err(Error::Input(_))));
    }

    fn grid_panel(ds: &[&[Option<f64>]], ys: &[&[Option<f64>]]) -> Panel {
        let mut cells = Vec::new();
        for (g, (drow, yrow)) in ds.iter().zip(ys.iter()).enumerate() {
            for (t, (&d, &y)) in drow.iter().zip(yrow.iter()).enumerate() {
                cells.push(PanelCell {
                    group: format!("g{g}"),
                    period: (t + 1) as i64,
                    outcome: y,
                    treatment: d,
                    weight: if y.is_some() { 1.0 } else { 0.0 },
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

    #[test]
    fn rebase_renumbers_gapped_periods() {
        let cells: Vec<PanelCell> = [1900i64, 1904, 1908]
            .iter()
            .map(|&p| PanelCell {
                group: "a".into(),
                period: p,
                outcome: Some(1.0),
                treatment: Some(0.0),
                weight: 1.0,
                controls: vec![],
                cluster: None,
                supergroup: None,
                by_value: None,
                predictors: vec![],
            })
            .collect();
        let (panel, _) = build_panel(&cells).unwrap();
        assert_eq!(panel.n_periods, 3);
        assert_eq!(panel.period_labels, vec![1900, 1904, 1908]);
    }

    #[test]
    fn liberal_imputes_interior_missing_to_baseline() {
        // D = (0, ., 0, 1): baseline imputation inside (FD, LDBF)
        let d: &[Option<f64>] = &[Some(0.0), None, Some(0.0), Some(1.0)];
        let y: &[Option<f64>] = &[Some(1.0), Some(1.0), Some(1.0), Some(1.0)];
        let mut p = grid_panel(&[d], &[y]);
        let audit = apply_missing_conventions(&mut p, MissingPolicy::Liberal);
        assert_eq!(p.d(0, 2), Some(0.0));
        assert_eq!(audit.len(), 1);
        assert_eq!(audit[0].rule, MissingRule::SwitcherInteriorBaseline);
        // first switch stays at period 4
        assert_eq!(p.d(0, 4), Some(1.0));
    }

    #[test]
    fn liberal_unknown_switch_date_drops_outcomes() {
        // D = (0, ., 1): LDBF = 1 < F - 1 = 2, outcomes missing from 2 on
        let d: &[Option<f64>] = &[Some(0.0), None, Some(1.0)];
        let y: &[Option<f64>] = &[Some(1.0), Some(2.0), Some(3.0)];
        let mut p = grid_panel(&[d], &[y]);
        let audit = apply_missing_conventions(&mut p, MissingPolicy::Liberal);
        assert_eq!(p.y(0, 1), Some(1.0));
        assert_eq!(p.y(0, 2), None);
        assert_eq!(p.y(0, 3), None);
        assert!(audit.iter().all(|a| a.rule == MissingRule::UnknownSwitchDate));
        assert_eq!(audit.len(), 2);
    }

    #[test]
    fn fully_observed_group_untouched() {
        let d: &[Option<f64>] = &[Some(0.0), Some(0.0), Some(1.0)];
        let y: &[Option<f64>] = &[Some(1.0), Some(2.0), Some(3.0)];
        let mut p = grid_panel(&[d], &[y]);
        let audit = apply_missing_conventions(&mut p, MissingPolicy::Liberal);
        assert!(audit.is_empty());
        assert_eq!(cell(&p, 0, 3), (Some(3.0), Some(1.0), 1.0));
    }

    #[test]
    fn conservative_drops_ambiguous_prefix() {
        // D = (0, ., 0, 1) with outcomes observed: drop from t=2 on
        let d: &[Option<f64>] = &[Some(0.0), None, Some(0.0), Some(1.0)];
        let y: &[Option<f64>] = &[Some(1.0), Some(1.0), Some(1.0), Some(1.0)];
        let mut p = grid_panel(&[d], &[y]);
        let audit = apply_missing_conventions(&mut p, MissingPolicy::Conservative);
        assert_eq!(cell(&p, 0, 1), (Some(1.0), Some(0.0), 1.0));
        for t in 2..=4 {
            assert_eq!(cell(&p, 0, t), (None, None, 0.0));
        }
        assert_eq!(audit.len(), 3);
        assert!(audit.iter().all(|a| a.rule == MissingRule::ConservativeDrop));
    }

    #[test]
    fn conservative_never_imputes() {
        let d: &[Option<f64>] = &[Some(0.0), Some(0.0), Some(1.0), None];
        let y: &[Option<f64>] = &[Some(1.0); 4];
        let mut p = grid_panel(&[d], &[y]);
        apply_missing_conventions(&mut p, MissingPolicy::Conservative);
        // missing after the change is not dropped (change already observed) and not imputed
        assert_eq!(p.d(0, 4), None);
        assert_eq!(p.y(0, 4), Some(1.0));
    }

    #[test]
    fn modes_agree_on_fully_observed_groups() {
        let d: &[Option<f64>] = &[Some(0.0), Some(2.0), Some(2.0)];
        let y: &[Option<f64>] = &[Some(1.0), Some(4.0), Some(9.0)];
        let mut a = grid_panel(&[d], &[y]);
        let mut b = grid_panel(&[d], &[y]);
        let audit_a = apply_missing_conventions(&mut a, MissingPolicy::Liberal);
        let audit_b = apply_missing_conventions(&mut b, MissingPolicy::Conservative);
        assert!(audit_a.is_empty() && audit_b.is_empty());
        for t in 1..=3 {
            assert_eq!(cell(&a, 0, t), cell(&b, 0, t));
        }
    }

    #[test]
    fn csv_roundtrip_with_missing_fields() {
        let data = "Y,G,T,D,w\n1.5,a,1,0,2\n,a,2,1,2\n2.5,b,1,,1\n";
        let mut bindings = CsvBindings::default();
        bindings.weight = Some("w".into());
        let rows = read_csv_from(data.as_bytes(), &bindings).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].outcome, None);
        assert_eq!(rows[2].treatment, None);
        assert_eq!(rows[0].weight, 2.0);
    }

    #[test]
    fn csv_rejects_nonnumeric_outcome() {
        let data = "Y,G,T,D\nabc,a,1,0\n";
        let err = read_csv_from(data.as_bytes(), &CsvBindings::default()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("row 2"), "{msg}");
    }
}
