//! Point estimators: group-level long-difference contrasts, aggregated
//! event-study effects, normalized effects, the average total effect, and
//! placebos.

use std::collections::BTreeMap;

use crate::design::{Design, Direction};
use crate::error::{Error, Result};
use crate::numeric::{KahanSum, WeightedMean};
use crate::panel::Panel;

/// Which switchers enter the reported estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SwitcherFilter {
    #[default]
    Both,
    In,
    Out,
}

/// Estimation options relevant to the core engine.
#[derive(Debug, Clone)]
pub struct EstOptions {
    pub effects: usize,
    pub placebos: usize,
    pub switcher_filter: SwitcherFilter,
    pub same_switchers: bool,
    pub same_switchers_pl: bool,
    pub more_granular_demeaning: bool,
    /// Skipped under outcome first-differencing.
    pub compute_average_total: bool,
}

impl Default for EstOptions {
    fn default() -> Self {
        Self {
            effects: 1,
            placebos: 0,
            switcher_filter: SwitcherFilter::Both,
            same_switchers: false,
            same_switchers_pl: false,
            more_granular_demeaning: false,
            compute_average_total: true,
        }
    }
}

/// Long-difference source. With controls active, differences are
/// residualized on the control evolutions using the baseline-specific
/// coefficient vector; a missing coefficient set or missing control value
/// makes the difference unavailable.
pub struct Differ<'a> {
    panel: &'a Panel,
    d1_class: Vec<usize>,
    theta: Option<BTreeMap<usize, Vec<f64>>>,
}

impl<'a> Differ<'a> {
    pub fn new(panel: &'a Panel, design: &Design, theta: Option<BTreeMap<usize, Vec<f64>>>) -> Self {
        Self {
            panel,
            d1_class: design.schedules.iter().map(|s| s.d1_class).collect(),
            theta,
        }
    }

    pub fn has_controls(&self) -> bool {
        self.theta.is_some()
    }

    fn diff_between(&self, g: usize, t_hi: usize, t_lo: usize) -> Option<f64> {
        let y_hi = self.panel.y(g, t_hi)?;
        let y_lo = self.panel.y(g, t_lo)?;
        let mut v = y_hi - y_lo;
        if let Some(theta_map) = &self.theta {
            let theta = theta_map.get(&self.d1_class[g])?;
            for (k, th) in theta.iter().enumerate() {
                let x_hi = self.panel.x(g, t_hi, k)?;
                let x_lo = self.panel.x(g, t_lo, k)?;
                v -= th * (x_hi - x_lo);
            }
        }
        Some(v)
    }

    /// Outcome evolution from t-l to t (effect window).
    pub fn effect(&self, g: usize, t: usize, l: usize) -> Option<f64> {
        if t <= l {
            return None;
        }
        self.diff_between(g, t, t - l)
    }

    /// Outcome evolution from t-l to t-2l (placebo window, future to past).
    pub fn placebo(&self, g: usize, t: usize, l: usize) -> Option<f64> {
        if t <= 2 * l {
            return None;
        }
        self.diff_between(g, t - 2 * l, t - l)
    }

    /// Raw control-vector evolution over the effect window.
    pub fn x_effect(&self, g: usize, t: usize, l: usize, k: usize) -> Option<f64> {
        if t <= l {
            return None;
        }
        Some(self.panel.x(g, t, k)? - self.panel.x(g, t - l, k)?)
    }

    /// Raw control-vector evolution over the placebo window.
    pub fn x_placebo(&self, g: usize, t: usize, l: usize, k: usize) -> Option<f64> {
        if t <= 2 * l {
            return None;
        }
        Some(self.panel.x(g, t - 2 * l, k)? - self.panel.x(g, t - l, k)?)
    }
}

/// Which window a computation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Effect,
    Placebo,
}

/// Control-group masses and weighted mean evolutions per (horizon, stratum,
/// period), for one window kind.
pub struct WindowStats {
    /// [l-1][stratum][t-1]: total weight of valid controls.
    pub ctrl_mass: Vec<Vec<Vec<f64>>>,
    /// [l-1][stratum][t-1]: weighted mean control evolution.
    pub ctrl_mean: Vec<Vec<Vec<Option<f64>>>>,
}

/// The estimation engine: panel + design + per-horizon estimability.
pub struct Engine<'a> {
    pub panel: &'a Panel,
    pub design: &'a Design,
    pub opts: EstOptions,
    pub differ: Differ<'a>,
    /// Baseline classes where estimation is possible.
    pub applicable: Vec<bool>,
    /// Effective number of effect horizons (after truncation).
    pub l_max: usize,
    /// Effective number of placebo horizons.
    pub pl_max: usize,
    /// [l-1][g]: switcher g contributes to effect l.
    pub est_effect: Vec<Vec<bool>>,
    /// [l-1][g]: switcher g contributes to placebo l.
    pub est_placebo: Vec<Vec<bool>>,
    pub win_effect: WindowStats,
    pub win_placebo: WindowStats,
    pub warnings: Vec<String>,
}

/// A group is a usable comparison at (t, l): same stratum handled by the
/// caller; here we require it has not switched by t, carries weight at t, and
/// its window evolution is computable.
fn valid_control(
    differ: &Differ,
    design: &Design,
    g: usize,
    t: usize,
    l: usize,
    window: Window,
) -> bool {
    let s = &design.schedules[g];
    if s.d1_class == usize::MAX || s.f <= t {
        return false;
    }
    if design.schedules[g].stratum == usize::MAX {
        return false;
    }
    if differ.panel.weight(g, t) <= 0.0 {
        return false;
    }
    match window {
        Window::Effect => differ.effect(g, t, l).is_some(),
        Window::Placebo => differ.placebo(g, t, l).is_some(),
    }
}

/// The dose is known at the baseline and at every period from the switch
/// through the reached period.
fn dose_path_ok(panel: &Panel, f: usize, g: usize, l: usize) -> bool {
    if panel.dose_baseline(g).is_none() {
        return false;
    }
    (0..l).all(|k| panel.dose(g, f + k).is_some())
}

fn window_stats(
    panel: &Panel,
    design: &Design,
    differ: &Differ,
    l_max: usize,
    window: Window,
) -> WindowStats {
    let t_max = panel.n_periods;
    let n_strata = design.n_strata();
    let mut ctrl_mass = vec![vec![vec![0.0; t_max]; n_strata]; l_max];
    let mut ctrl_mean = vec![vec![vec![None; t_max]; n_strata]; l_max];
    for l in 1..=l_max {
        let lo = match window {
            Window::Effect => l + 1,
            Window::Placebo => 2 * l + 1,
        };
        for (si, stratum) in design.strata.iter().enumerate() {
            for t in lo..=t_max {
                let mut acc = WeightedMean::new();
                for &g in stratum {
                    if valid_control(differ, design, g, t, l, window) {
                        let diff = match window {
                            Window::Effect => differ.effect(g, t, l).unwrap(),
                            Window::Placebo => differ.placebo(g, t, l).unwrap(),
                        };
                        acc.add(panel.weight(g, t), diff);
                    }
                }
                ctrl_mass[l - 1][si][t - 1] = acc.total_weight();
                ctrl_mean[l - 1][si][t - 1] = acc.mean();
            }
        }
    }
    WindowStats { ctrl_mass, ctrl_mean }
}

impl<'a> Engine<'a> {
    pub fn new(
        panel: &'a Panel,
        design: &'a Design,
        opts: EstOptions,
        differ: Differ<'a>,
    ) -> Result<Engine<'a>> {
        let mut warnings = Vec::new();
        if opts.placebos > opts.effects {
            return Err(Error::Usage(format!(
                "the number of placebos requested ({}) cannot be larger than the number of effects requested ({})",
                opts.placebos, opts.effects
            )));
        }
        if opts.same_switchers_pl && !opts.same_switchers {
            return Err(Error::Usage(
                "holding the placebo sample fixed requires holding the effect sample fixed as well".into(),
            ));
        }
        let applicable = crate::design::applicable_classes(design);

        // Largest horizon any switcher can reach.
        let mut global_max = 0usize;
        for s in &design.schedules {
            if s.direction != Direction::Never
                && s.d1_class != usize::MAX
                && applicable[s.d1_class]
                && s.t_g >= s.f
            {
                global_max = global_max.max(s.t_g - s.f + 1);
            }
        }
        if global_max == 0 {
            return Err(Error::Estimation(
                "no switcher has a valid control group; nothing is estimable".into(),
            ));
        }
        let l_max = opts.effects.min(global_max);
        if l_max < opts.effects {
            warnings.push(format!(
                "only {} of the {} requested effects are estimable on this design; extra horizons skipped",
                l_max, opts.effects
            ));
        }
        let pl_max = opts.placebos.min(l_max);
        if pl_max < opts.placebos {
            warnings.push(format!(
                "only {} of the {} requested placebos are estimable on this design",
                pl_max, opts.placebos
            ));
        }

        let win_effect = window_stats(panel, design, &differ, l_max, Window::Effect);
        let win_placebo = window_stats(panel, design, &differ, pl_max.max(0), Window::Placebo);

        // Effect estimability per switcher and horizon.
        let mut est_effect = vec![vec![false; panel.n_groups]; l_max];
        for (g, s) in design.schedules.iter().enumerate() {
            if !s.is_switcher() || s.d1_class == usize::MAX || !applicable[s.d1_class] {
                continue;
            }
            for l in 1..=l_max {
                let t = s.f - 1 + l;
                if t > s.t_g || t > panel.n_periods {
                    continue;
                }
                if panel.weight(g, t) <= 0.0 {
                    continue;
                }
                if differ.effect(g, t, l).is_none() {
                    continue;
                }
                // Dose path availability through t; without it the switcher
                // cannot enter the dose-weighted aggregates.
                if !dose_path_ok(panel, s.f, g, l) {
                    continue;
                }
                if win_effect.ctrl_mass[l - 1][s.stratum][t - 1] <= 0.0 {
                    continue;
                }
                est_effect[l - 1][g] = true;
            }
        }

        if opts.same_switchers {
            let kept: Vec<bool> = (0..panel.n_groups)
                .map(|g| (1..=l_max).all(|l| est_effect[l - 1][g]))
                .collect();
            for row in est_effect.iter_mut() {
                for (g, e) in row.iter_mut().enumerate() {
                    *e &= kept[g];
                }
            }
        }

        // Placebo estimability: only switchers contributing to the matching
        // effect, with enough pre-switch periods and a valid placebo window.
        let mut est_placebo = vec![vec![false; panel.n_groups]; pl_max];
        for (g, s) in design.schedules.iter().enumerate() {
            for l in 1..=pl_max {
                if !est_effect[l - 1][g] {
                    continue;
                }
                if s.f < l + 2 {
                    continue;
                }
                let t = s.f - 1 + l;
                if differ.placebo(g, t, l).is_none() {
                    continue;
                }
                if win_placebo.ctrl_mass[l - 1][s.stratum][t - 1] <= 0.0 {
                    continue;
                }
                est_placebo[l - 1][g] = true;
            }
        }

        if opts.same_switchers_pl {
            let kept: Vec<bool> = (0..panel.n_groups)
                .map(|g| (1..=pl_max).all(|l| est_placebo[l - 1][g]))
                .collect();
            for row in est_placebo.iter_mut() {
                for (g, e) in row.iter_mut().enumerate() {
                    *e &= kept[g];
                }
            }
        }

        Ok(Engine {
            panel,
            design,
            opts,
            differ,
            applicable,
            l_max,
            pl_max,
            est_effect,
            est_placebo,
            win_effect,
            win_placebo,
            warnings,
        })
    }

    /// Whether switcher `g` passes the side filter.
    pub fn in_scope(&self, g: usize) -> bool {
        let dir = self.design.schedules[g].direction;
        match self.opts.switcher_filter {
            SwitcherFilter::Both => dir != Direction::Never,
            SwitcherFilter::In => dir == Direction::In,
            SwitcherFilter::Out => dir == Direction::Out,
        }
    }

    /// Group-level contrast: own window evolution minus the mean evolution of
    /// its not-yet-switched stratum mates.
    pub fn did_gl(&self, g: usize, l: usize, window: Window) -> Option<f64> {
        let s = &self.design.schedules[g];
        let est = match window {
            Window::Effect => &self.est_effect,
            Window::Placebo => &self.est_placebo,
        };
        if l == 0 || l > est.len() || !est[l - 1][g] {
            return None;
        }
        let t = s.f - 1 + l;
        let (own, ctrl) = match window {
            Window::Effect => (
                self.differ.effect(g, t, l)?,
                self.win_effect.ctrl_mean[l - 1][s.stratum][t - 1]?,
            ),
            Window::Placebo => (
                self.differ.placebo(g, t, l)?,
                self.win_placebo.ctrl_mean[l - 1][s.stratum][t - 1]?,
            ),
        };
        Some(own - ctrl)
    }

    /// Builds the per-horizon aggregates, the dose quantities, and the
    /// average total effect.
    pub fn aggregates(&self) -> Result<Aggregates> {
        let mut per_l = Vec::with_capacity(self.l_max);
        for l in 1..=self.l_max {
            per_l.push(self.horizon_aggregate(l, Window::Effect));
        }
        let mut per_l_pl = Vec::with_capacity(self.pl_max);
        for l in 1..=self.pl_max {
            per_l_pl.push(self.horizon_aggregate(l, Window::Placebo));
        }
        if per_l.iter().all(|h| !h.estimable) {
            return Err(Error::Estimation("no estimable switcher at any requested horizon".into()));
        }

        let avg_total = if self.opts.compute_average_total {
            Some(self.average_total(&per_l))
        } else {
            None
        };

        Ok(Aggregates { per_l, per_l_pl, avg_total })
    }

    fn horizon_aggregate(&self, l: usize, window: Window) -> HorizonAgg {
        let panel = self.panel;
        let est = match window {
            Window::Effect => &self.est_effect,
            Window::Placebo => &self.est_placebo,
        };
        let mut plus = WeightedMean::new();
        let mut minus = WeightedMean::new();
        let mut dose_plus = WeightedMean::new();
        let mut dose_minus = WeightedMean::new();
        let mut dose_abs = WeightedMean::new();
        let mut switchers_in = Vec::new();
        let mut switchers_out = Vec::new();
        let mut group_effects = Vec::new();
        for g in 0..panel.n_groups {
            if !est[l - 1][g] || !self.in_scope(g) {
                continue;
            }
            let s = &self.design.schedules[g];
            let side = s.direction;
            let t = s.f - 1 + l;
            let w = panel.weight(g, t);
            let contrast = match self.did_gl(g, l, window) {
                Some(v) => v,
                None => continue,
            };
            // Incremental dose from the switch through t, and the dose gap at t.
            let dose1 = panel.dose_baseline(g).expect("dose path checked at estimability");
            let dose_gap = panel.dose(g, t).expect("dose path checked at estimability") - dose1;
            let mut cum = KahanSum::new();
            for k in 0..l {
                let v = panel.dose(g, s.f + k).expect("dose path checked at estimability");
                cum.add(v - dose1);
            }
            group_effects.push((g, contrast));
            dose_abs.add(w, cum.value().abs());
            match side {
                Direction::In => {
                    plus.add(w, contrast);
                    dose_plus.add(w, dose_gap);
                    switchers_in.push(g);
                }
                Direction::Out => {
                    minus.add(w, -contrast);
                    dose_minus.add(w, -dose_gap);
                    switchers_out.push(g);
                }
                Direction::Never => unreachable!(),
            }
        }
        let n1 = plus.total_weight();
        let n0 = minus.total_weight();
        let did_plus = plus.mean();
        let did_minus = minus.mean();
        let combined = match (did_plus, did_minus) {
            (Some(a), Some(b)) => Some((n1 * a + n0 * b) / (n1 + n0)),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        };
        HorizonAgg {
            horizon: l,
            estimable: combined.is_some(),
            n1,
            n0,
            did_plus,
            did_minus,
            did: combined,
            delta_d_plus: dose_plus.mean().unwrap_or(0.0),
            delta_d_minus: dose_minus.mean().unwrap_or(0.0),
            delta_d_abs: dose_abs.mean().unwrap_or(0.0),
            switchers_in,
            switchers_out,
            group_effects,
        }
    }

    /// Dose-weighted effect per unit of treatment, combining both switcher
    /// sides.
    fn average_total(&self, per_l: &[HorizonAgg]) -> AvgTotal {
        // Total incremental dose mass per side across estimated horizons.
        let mut num_plus = KahanSum::new();
        let mut den_plus = KahanSum::new();
        let mut num_minus = KahanSum::new();
        let mut den_minus = KahanSum::new();
        let mut any_plus = false;
        let mut any_minus = false;
        for h in per_l {
            if h.n1 > 0.0 {
                any_plus = true;
                num_plus.add(h.n1 * h.did_plus.unwrap_or(0.0));
                den_plus.add(h.n1 * h.delta_d_plus);
            }
            if h.n0 > 0.0 {
                any_minus = true;
                num_minus.add(h.n0 * h.did_minus.unwrap_or(0.0));
                den_minus.add(h.n0 * h.delta_d_minus);
            }
        }
        // The per-horizon weights w_l = N_l / sum N_l' cancel out of the
        // ratios, so the sums here carry the raw weight masses.
        let delta_plus = if any_plus && den_plus.value() != 0.0 {
            Some(num_plus.value() / den_plus.value())
        } else {
            None
        };
        let delta_minus = if any_minus && den_minus.value() != 0.0 {
            Some(num_minus.value() / den_minus.value())
        } else {
            None
        };
        let (w_plus, degenerate) = match (any_plus, any_minus) {
            (true, true) => {
                let tot = den_plus.value() + den_minus.value();
                if tot > 0.0 {
                    (den_plus.value() / tot, false)
                } else {
                    (0.5, true)
                }
            }
            (true, false) => (1.0, false),
            (false, true) => (0.0, false),
            (false, false) => (0.0, true),
        };
        let delta = if degenerate {
            None
        } else {
            match (delta_plus, delta_minus) {
                (Some(p), Some(m)) => Some(w_plus * p + (1.0 - w_plus) * m),
                (Some(p), None) if w_plus == 1.0 => Some(p),
                (None, Some(m)) if w_plus == 0.0 => Some(m),
                _ => None,
            }
        };
        let mut switchers = std::collections::BTreeSet::new();
        let mut n_mass = KahanSum::new();
        for h in per_l {
            for &g in h.switchers_in.iter().chain(h.switchers_out.iter()) {
                switchers.insert(g);
            }
            n_mass.add(h.n1 + h.n0);
        }
        AvgTotal {
            delta_plus,
            delta_minus,
            w_plus,
            delta,
            n: n_mass.value(),
            switcher_count: switchers.len(),
        }
    }
}

/// Per-horizon aggregate quantities.
#[derive(Debug, Clone)]
pub struct HorizonAgg {
    pub horizon: usize,
    pub estimable: bool,
    /// Weight mass of switchers-in (resp. -out) at the reached period.
    pub n1: f64,
    pub n0: f64,
    pub did_plus: Option<f64>,
    pub did_minus: Option<f64>,
    /// Side-combined estimate (respects the switcher filter).
    pub did: Option<f64>,
    /// Mean dose gap at the reached period, per side.
    pub delta_d_plus: f64,
    pub delta_d_minus: f64,
    /// Mean absolute cumulative incremental dose (normalization constant).
    pub delta_d_abs: f64,
    pub switchers_in: Vec<usize>,
    pub switchers_out: Vec<usize>,
    /// (group, group-level contrast) for every contributing switcher.
    pub group_effects: Vec<(usize, f64)>,
}

impl HorizonAgg {
    pub fn n_total(&self) -> f64 {
        self.n1 + self.n0
    }

    pub fn switcher_count(&self) -> usize {
        self.switchers_in.len() + self.switchers_out.len()
    }

    /// Normalized estimate: the combined estimate divided by the mean
    /// absolute incremental dose.
    pub fn normalized(&self) -> Option<f64> {
        match (self.did, self.delta_d_abs) {
            (Some(v), d) if d > 0.0 => Some(v / d),
            _ => None,
        }
    }
}

/// Average total effect per unit of treatment.
#[derive(Debug, Clone)]
pub struct AvgTotal {
    pub delta_plus: Option<f64>,
    pub delta_minus: Option<f64>,
    pub w_plus: f64,
    pub delta: Option<f64>,
    pub n: f64,
    pub switcher_count: usize,
}

/// Aggregated point estimates for all horizons.
#[derive(Debug, Clone)]
pub struct Aggregates {
    pub per_l: Vec<HorizonAgg>,
    pub per_l_pl: Vec<HorizonAgg>,
    pub avg_total: Option<AvgTotal>,
}

#[cfg(test)]
pub(crate) mod test_support {
    use crate::panel::{build_panel, Panel, PanelCell};

    /// Builds a unit-weight panel from per-group treatment and outcome rows.
    pub fn panel(ds: &[Vec<Option<f64>>], ys: &[Vec<Option<f64>>]) -> Panel {
        let mut cells = Vec::new();
        for (g, (drow, yrow)) in ds.iter().zip(ys.iter()).enumerate() {
            for (t, (&d, &y)) in drow.iter().zip(yrow.iter()).enumerate() {
                cells.push(PanelCell {
                    group: format!("{g:03}"),
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

    pub fn some(vals: &[f64]) -> Vec<Option<f64>> {
        vals.iter().map(|&v| Some(v)).collect()
    }

    /// The toy design: two never-switchers, one switcher at period 3, one at
    /// period 2, outcomes equal to five times the treatment.
    pub fn toy_panel() -> Panel {
        let d = vec![
            some(&[0.0, 0.0, 0.0, 0.0]),
            some(&[0.0, 0.0, 0.0, 0.0]),
            some(&[0.0, 0.0, 1.0, 1.0]),
            some(&[0.0, 1.0, 1.0, 1.0]),
        ];
        let y: Vec<Vec<Option<f64>>> = d
            .iter()
            .map(|row| row.iter().map(|v| v.map(|d| 5.0 * d)).collect())
            .collect();
        panel(&d, &y)
    }
}
