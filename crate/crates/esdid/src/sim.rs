//! Monte Carlo harness: synthetic base designs, outcome models built from
//! resampled first-difference rows, and coverage/rejection measurement.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::SwitcherFilter;
use crate::inference::BootstrapSpec;
use crate::panel::{MissingPolicy, Panel};
use crate::run::{estimate_prepared, EstimationResult, RunConfig};

/// Which synthetic base design a simulation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    /// Balanced worker panel, binary staggered treatment (545 x 8).
    StaggeredWorkers,
    /// Balanced state panel, binary absorbing treatment (40 x 31).
    AbsorbingStates,
    /// As above but recoded so each adoption year has exactly one state.
    AbsorbingStatesOnePerCohort,
    /// Imbalanced county panel, discrete treatment capped at 4 (1195 x 8).
    DiscreteCounties,
}

/// Trend in the status-quo outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    #[default]
    Quadratic,
    /// t^2 interacted with an education tercile.
    QuadraticByEduc,
    /// t^2 plus a group-specific linear trend by baseline-outcome quintile.
    QuadraticPlusQuintileLinear,
    /// t^2 plus a cluster-level AR(1) shock.
    ClusterAr1,
}

/// Treatment effect in the observed outcome.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    #[default]
    None,
    /// tau times the current dose gap D_gt - D_g1.
    CurrentDose(f64),
}

/// Estimator options a simulation runs with.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub effects: usize,
    pub placebos: usize,
    pub normalized: bool,
    pub use_controls: bool,
    pub trends_nonparam_educ: bool,
    pub trends_lin: bool,
    pub cluster: bool,
    pub more_granular_demeaning: bool,
    pub effects_equal: bool,
    pub bootstrap: Option<(usize, u64)>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            effects: 3,
            placebos: 3,
            normalized: false,
            use_controls: false,
            trends_nonparam_educ: false,
            trends_lin: false,
            cluster: false,
            more_granular_demeaning: false,
            effects_equal: false,
            bootstrap: None,
        }
    }
}

/// Full simulation specification (JSON-serializable for the CLI).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    pub name: String,
    pub base: BaseKind,
    #[serde(default)]
    pub trend: Trend,
    #[serde(default)]
    pub effect: EffectKind,
    /// Adds control-variable terms to the status-quo outcome, so parallel
    /// trends fails unless the controls are adjusted for.
    #[serde(default)]
    pub controls_confound: bool,
    /// Draws (switchers, never-switchers) afresh each replication.
    #[serde(default)]
    pub subsample: Option<(usize, usize)>,
    #[serde(default)]
    pub options: SimOptions,
}

/// The fixed synthetic design a DGP resamples outcomes onto.
pub struct BasePanel {
    pub t: usize,
    /// Fixed treatment paths (None = missing in the imbalanced design).
    pub d: Vec<Vec<Option<f64>>>,
    pub y1: Vec<f64>,
    /// First-difference rows (length t-1 each) drawn as wholes.
    pub diff_pool: Vec<Vec<f64>>,
    /// Education terciles (1..=3).
    pub educ: Vec<usize>,
    /// Hours and marriage paths for the controls DGP.
    pub hours: Vec<Vec<f64>>,
    pub married: Vec<Vec<f64>>,
    /// Fixed outcome-missingness mask (imbalanced design).
    pub y_missing: Vec<Vec<bool>>,
    /// sd of baseline outcomes and mean of hours, for the confound loadings.
    pub sd_y: f64,
    pub mean_hours: f64,
    /// sd of the pooled first differences (AR shock scale).
    pub sd_fd: f64,
    /// Whether group g ever switches (for subsampling).
    pub is_switcher: Vec<bool>,
}

impl BasePanel {
    pub fn n_groups(&self) -> usize {
        self.d.len()
    }
}

fn mixture_diff(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let wide = rng.gen_bool(0.15);
    let sd = if wide { 2.6 * scale } else { scale };
    Normal::new(0.0, sd).unwrap().sample(rng)
}

/// Deterministic synthetic stand-in for the worker panel: 545 groups over 8
/// periods, 245 adopters spread evenly over periods 2..=8.
fn workers_base() -> BasePanel {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_A001);
    let g_count = 545;
    let t = 8;
    let mut d = Vec::with_capacity(g_count);
    let mut is_switcher = Vec::with_capacity(g_count);
    for g in 0..g_count {
        // 35 adopters per adoption period, 245 total, rest never treated
        let f = if g < 245 { 2 + g / 35 } else { t + 1 };
        is_switcher.push(f <= t);
        d.push((1..=t).map(|p| Some(if p >= f { 1.0 } else { 0.0 })).collect());
    }
    let y1: Vec<f64> = (0..g_count)
        .map(|_| 1.6 + Normal::new(0.0, 0.5).unwrap().sample(&mut rng))
        .collect();
    let mut diff_pool = Vec::with_capacity(g_count);
    for _ in 0..g_count {
        let vol: f64 = (0.25f64).max(0.35 * (1.0 + 0.4 * rng.gen_range(-1.0..1.0f64)));
        diff_pool.push((0..t - 1).map(|_| mixture_diff(&mut rng, vol)).collect());
    }
    let educ: Vec<usize> = (0..g_count)
        .map(|_| *[1usize, 1, 2, 2, 2, 3, 3].choose(&mut rng).unwrap())
        .collect();
    // Hours drift up slightly and marriage becomes likelier around the
    // switch, so the confounded DGP biases unadjusted estimates.
    let mut hours = Vec::with_capacity(g_count);
    let mut married = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let f = if g < 245 { 2 + g / 35 } else { t + 1 };
        let base_h = 35.0 + rng.gen_range(-4.0..4.0);
        hours.push(
            (1..=t)
                .map(|p| base_h + rng.gen_range(-2.0..2.0) + if p + 1 >= f { 2.0 } else { 0.0 })
                .collect(),
        );
        let mut m_path = Vec::with_capacity(t);
        let mut m = rng.gen_bool(0.3);
        for p in 1..=t {
            let target = if p + 1 >= f { 0.7 } else { 0.3 };
            if rng.gen_bool(0.5) {
                m = rng.gen_bool(target);
            }
            m_path.push(if m { 1.0 } else { 0.0 });
        }
        married.push(m_path);
    }
    let sd_y = sd(&y1);
    let mean_hours = hours.iter().flatten().sum::<f64>() / (g_count * t) as f64;
    let sd_fd = sd(&diff_pool.iter().flatten().copied().collect::<Vec<_>>());
    BasePanel {
        t,
        d,
        y1,
        diff_pool,
        educ,
        hours,
        married,
        y_missing: vec![vec![false; t]; g_count],
        sd_y,
        mean_hours,
        sd_fd,
        is_switcher,
    }
}

/// Synthetic stand-in for the state panel: 40 groups over 31 periods with a
/// binary absorbing treatment.
fn states_base(one_per_cohort: bool) -> BasePanel {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_B002);
    let g_count = 40;
    let t = 31;
    let mut adoption: Vec<usize> = Vec::with_capacity(g_count);
    if one_per_cohort {
        // one state per adoption year 2..=31, ten never
        for f in 2..=31 {
            adoption.push(f);
        }
        for _ in 0..10 {
            adoption.push(t + 1);
        }
    } else {
        // published adoption counts (year 1956 = period 1)
        let counts = [(14, 1), (15, 2), (16, 6), (17, 2), (18, 8), (19, 2), (20, 1), (21, 1), (22, 1), (30, 1)];
        for (f, c) in counts {
            for _ in 0..c {
                adoption.push(f);
            }
        }
        while adoption.len() < g_count {
            adoption.push(t + 1);
        }
    }
    let d: Vec<Vec<Option<f64>>> = adoption
        .iter()
        .map(|&f| (1..=t).map(|p| Some(if p >= f { 1.0 } else { 0.0 })).collect())
        .collect();
    let y1: Vec<f64> = (0..g_count)
        .map(|_| 4.0 + Normal::new(0.0, 1.0).unwrap().sample(&mut rng))
        .collect();
    // Rate changes carry a strong transitory component, so the pool rows are
    // built as mean-reverting normal mixtures.
    let mut diff_pool = Vec::with_capacity(g_count);
    let theta = 1.0;
    for _ in 0..g_count {
        let vol: f64 = 0.22 * (1.0 + 0.8 * rng.gen_range(-1.0..1.0f64)).max(0.25);
        let innovations: Vec<f64> = (0..t).map(|_| mixture_diff(&mut rng, vol)).collect();
        diff_pool.push((1..t).map(|k| innovations[k] - theta * innovations[k - 1]).collect());
    }
    let educ: Vec<usize> = (0..g_count).map(|g| 1 + g % 3).collect();
    let sd_y = sd(&y1);
    let sd_fd = sd(&diff_pool.iter().flatten().copied().collect::<Vec<_>>());
    BasePanel {
        t,
        d,
        y1,
        diff_pool,
        educ,
        hours: vec![],
        married: vec![],
        y_missing: vec![vec![false; t]; g_count],
        sd_y,
        mean_hours: 1.0,
        sd_fd,
        is_switcher: adoption.iter().map(|&f| f <= t).collect(),
    }
}

/// Synthetic stand-in for the county panel: 1195 groups over 8 periods with a
/// discrete treatment in 0..=4 that changes at most once, and a fixed
/// missingness mask of 321 cells.
fn counties_base() -> BasePanel {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_C003);
    let g_count = 1195;
    let t = 8;
    let mut d = Vec::with_capacity(g_count);
    let mut is_switcher = Vec::with_capacity(g_count);
    for _ in 0..g_count {
        let base = *[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 3.0].choose(&mut rng).unwrap();
        let switches = rng.gen_bool(0.62);
        let f = if switches { rng.gen_range(2..=t) } else { t + 1 };
        let jump = *[-2.0f64, -1.0, -1.0, 1.0, 1.0, 1.0, 2.0].choose(&mut rng).unwrap();
        let after = (base + jump).clamp(0.0, 4.0);
        let real_switch = switches && after != base;
        is_switcher.push(real_switch);
        d.push(
            (1..=t)
                .map(|p| Some(if real_switch && p >= f { after } else { base }))
                .collect::<Vec<Option<f64>>>(),
        );
    }
    let y1: Vec<f64> = (0..g_count)
        .map(|_| (0.65f64 + Normal::new(0.0, 0.12).unwrap().sample(&mut rng)).clamp(0.15, 0.98))
        .collect();
    let mut diff_pool = Vec::with_capacity(g_count);
    for _ in 0..g_count {
        let vol: f64 = 0.05 * (1.0 + 0.5 * rng.gen_range(-1.0..1.0f64)).max(0.4);
        diff_pool.push((0..t - 1).map(|_| mixture_diff(&mut rng, vol)).collect());
    }
    // 321 missing outcomes, fixed positions
    let mut y_missing = vec![vec![false; t]; g_count];
    let mut placed = 0;
    while placed < 321 {
        let g = rng.gen_range(0..g_count);
        let p = rng.gen_range(0..t);
        if !y_missing[g][p] {
            y_missing[g][p] = true;
            placed += 1;
        }
    }
    let educ: Vec<usize> = (0..g_count).map(|g| 1 + g % 3).collect();
    let sd_y = sd(&y1);
    let sd_fd = sd(&diff_pool.iter().flatten().copied().collect::<Vec<_>>());
    BasePanel {
        t,
        d,
        y1,
        diff_pool,
        educ,
        hours: vec![],
        married: vec![],
        y_missing,
        sd_y,
        mean_hours: 1.0,
        sd_fd,
        is_switcher,
    }
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Builds (and caches per call) the base panel for a kind.
pub fn base_panel(kind: BaseKind) -> BasePanel {
    match kind {
        BaseKind::StaggeredWorkers => workers_base(),
        BaseKind::AbsorbingStates => states_base(false),
        BaseKind::AbsorbingStatesOnePerCohort => states_base(true),
        BaseKind::DiscreteCounties => counties_base(),
    }
}

/// Quintile thresholds of the baseline outcomes.
fn quintiles(y1: &[f64]) -> [f64; 5] {
    let mut s = y1.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| s[((s.len() as f64 * p) as usize).min(s.len() - 1)];
    [q(0.2), q(0.4), q(0.6), q(0.8), q(0.999)]
}

/// Cluster assignment for the AR(1) design: groups ranked by baseline
/// outcome, blocks of ten, first 500 groups kept.
fn cluster_blocks(base: &BasePanel) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..base.n_groups()).collect();
    order.sort_by(|&a, &b| base.y1[a].partial_cmp(&base.y1[b]).unwrap());
    let keep: Vec<usize> = order.into_iter().take(500).collect();
    let clusters: Vec<usize> = (0..keep.len()).map(|i| i / 10).collect();
    (keep, clusters)
}

/// One simulated panel: status-quo outcomes from resampled first-difference
/// rows plus the requested trend, then the treatment effect.
pub fn generate(spec: &SimSpec, base: &BasePanel, rep: u64, seed: u64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep.wrapping_add(1));
    let t = base.t;

    // Group selection.
    let (kept, cluster_of): (Vec<usize>, Option<Vec<usize>>) = match spec.trend {
        Trend::ClusterAr1 => {
            let (keep, clusters) = cluster_blocks(base);
            (keep, Some(clusters))
        }
        _ => match spec.subsample {
            Some((n_sw, n_never)) => {
                let switchers: Vec<usize> =
                    (0..base.n_groups()).filter(|&g| base.is_switcher[g]).collect();
                let nevers: Vec<usize> =
                    (0..base.n_groups()).filter(|&g| !base.is_switcher[g]).collect();
                let mut keep: Vec<usize> =
                    switchers.choose_multiple(&mut rng, n_sw).copied().collect();
                keep.extend(nevers.choose_multiple(&mut rng, n_never).copied());
                keep.sort_unstable();
                (keep, None)
            }
            None => ((0..base.n_groups()).collect(), None),
        },
    };
    let n = kept.len();

    // Outcome shocks: whole rows from the pool; whole cluster blocks under
    // the clustered design.
    let mut eps: Vec<&[f64]> = Vec::with_capacity(n);
    match &cluster_of {
        Some(clusters) => {
            let n_clusters = clusters.iter().max().unwrap() + 1;
            let (keep_full, _) = cluster_blocks(base);
            for c in 0..n_clusters {
                let src = rng.gen_range(0..n_clusters);
                for i in 0..10 {
                    let donor = keep_full[src * 10 + i];
                    let _ = c;
                    eps.push(&base.diff_pool[donor]);
                }
            }
        }
        None => {
            // Rows are assigned by permutation so that no two groups carry
            // identical shock paths in one replication.
            if n <= base.diff_pool.len() {
                let mut idx: Vec<usize> = (0..base.diff_pool.len()).collect();
                idx.shuffle(&mut rng);
                for &src in idx.iter().take(n) {
                    eps.push(&base.diff_pool[src]);
                }
            } else {
                for _ in 0..n {
                    let src = rng.gen_range(0..base.diff_pool.len());
                    eps.push(&base.diff_pool[src]);
                }
            }
        }
    }

    // Cluster AR(1) shock paths.
    let eta: Option<Vec<Vec<f64>>> = cluster_of.as_ref().map(|clusters| {
        let n_clusters = clusters.iter().max().unwrap() + 1;
        let v = base.sd_fd;
        let normal = Normal::new(0.0, v).unwrap();
        (0..n_clusters)
            .map(|_| {
                let mut path = Vec::with_capacity(t);
                let mut prev = normal.sample(&mut rng);
                path.push(prev);
                for _ in 1..t {
                    prev = (prev + normal.sample(&mut rng)) / std::f64::consts::SQRT_2;
                    path.push(prev);
                }
                path
            })
            .collect()
    });

    let quints = quintiles(&base.y1);
    let (sigma, mu) = (base.sd_y, base.mean_hours);

    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for (i, &g) in kept.iter().enumerate() {
        let mut yrow = Vec::with_capacity(t);
        let mut drow = Vec::with_capacity(t);
        let d1 = base.d[g].iter().flatten().next().copied().unwrap_or(0.0);
        let trend_g: f64 = quints.iter().filter(|&&q| base.y1[g] > q).count() as f64;
        let mut cum_eps = 0.0;
        for p in 1..=t {
            if p >= 2 {
                cum_eps += eps[i][p - 2];
            }
            let trend = match spec.trend {
                Trend::Quadratic => (p * p) as f64,
                Trend::QuadraticByEduc => (p * p) as f64 * base.educ[g] as f64,
                Trend::QuadraticPlusQuintileLinear => (p * p) as f64 + p as f64 * trend_g,
                Trend::ClusterAr1 => {
                    (p * p) as f64 + eta.as_ref().unwrap()[cluster_of.as_ref().unwrap()[i]][p - 1]
                }
            };
            let mut sq = base.y1[g] + cum_eps + trend;
            if spec.controls_confound {
                sq += sigma / mu * base.hours[g][p - 1] + 2.0 * sigma * base.married[g][p - 1];
            }
            let dval = base.d[g][p - 1];
            let observed = match (spec.effect, dval) {
                (EffectKind::None, _) => sq,
                (EffectKind::CurrentDose(tau), Some(dv)) => sq + tau * (dv - d1),
                (EffectKind::CurrentDose(_), None) => sq,
            };
            yrow.push((!base.y_missing[g][p - 1]).then_some(observed));
            drow.push(dval);
        }
        y.push(yrow);
        d.push(drow);
    }

    let mut panel = Panel::dense(y, d);
    if let Some(clusters) = cluster_of {
        panel.set_clusters(clusters);
    }
    if spec.options.trends_nonparam_educ {
        panel.set_supergroups(kept.iter().map(|&g| base.educ[g] - 1).collect());
    }
    if spec.options.use_controls || spec.controls_confound {
        let t_len = t;
        let mut hours_col = vec![None; n * t_len];
        let mut married_col = vec![None; n * t_len];
        for (i, &g) in kept.iter().enumerate() {
            for p in 0..t_len {
                hours_col[i * t_len + p] = Some(base.hours[g][p]);
                married_col[i * t_len + p] = Some(base.married[g][p]);
            }
        }
        panel.push_control("hours".into(), hours_col);
        panel.push_control("married".into(), married_col);
    }
    panel
}

/// Noise-free panel whose estimates are the estimands: the status-quo part
/// is removed, leaving only the treatment-effect term on the fixed design.
pub fn truth_panel(spec: &SimSpec, base: &BasePanel) -> Panel {
    let t = base.t;
    let n = base.n_groups();
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for g in 0..n {
        let d1 = base.d[g].iter().flatten().next().copied().unwrap_or(0.0);
        let mut yrow = Vec::with_capacity(t);
        for p in 1..=t {
            let v = match (spec.effect, base.d[g][p - 1]) {
                (EffectKind::CurrentDose(tau), Some(dv)) => tau * (dv - d1),
                _ => 0.0,
            };
            yrow.push((!base.y_missing[g][p - 1]).then_some(v));
        }
        y.push(yrow);
        d.push(base.d[g].clone());
    }
    Panel::dense(y, d)
}

fn run_config(opts: &SimOptions) -> RunConfig {
    RunConfig {
        effects: opts.effects,
        placebos: opts.placebos,
        normalized: opts.normalized,
        effects_equal: opts.effects_equal.then_some(crate::run::EffectsEqualSpec::All),
        controls: if opts.use_controls {
            vec!["hours".into(), "married".into()]
        } else {
            vec![]
        },
        trends_nonparam: opts.trends_nonparam_educ.then(|| "educ".into()),
        trends_lin: opts.trends_lin,
        cluster: opts.cluster.then(|| "cluster".into()),
        more_granular_demeaning: opts.more_granular_demeaning,
        switchers: SwitcherFilter::Both,
        missing_policy: MissingPolicy::Liberal,
        bootstrap: opts.bootstrap.map(|(replications, seed)| BootstrapSpec { replications, seed }),
        ..Default::default()
    }
}

/// The estimands of a spec, from a noise-free run on the full design.
pub fn truth(spec: &SimSpec, base: &BasePanel) -> Result<TruthValues> {
    let mut panel = truth_panel(spec, base);
    let mut opts = spec.options.clone();
    opts.use_controls = false;
    opts.effects_equal = false;
    opts.cluster = false;
    opts.trends_nonparam_educ = false;
    opts.bootstrap = None;
    let mut config = run_config(&opts);
    config.controls = vec![];
    let res = estimate_prepared(&mut panel, &config)?;
    Ok(TruthValues {
        effects: res.effects.iter().map(|r| r.estimate).collect(),
        placebos: res.placebos.iter().map(|r| r.estimate.or(Some(0.0))).collect(),
        average_total: res.average_total.and_then(|r| r.estimate),
    })
}

/// True values each replication's intervals are checked against.
#[derive(Debug, Clone, Serialize)]
pub struct TruthValues {
    pub effects: Vec<Option<f64>>,
    pub placebos: Vec<Option<f64>>,
    pub average_total: Option<f64>,
}

/// One coverage or rejection cell with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Cell {
    pub rate: f64,
    pub mc_se: f64,
    pub hits: usize,
    pub n: usize,
}

impl Cell {
    fn from_counts(hits: usize, n: usize) -> Cell {
        let rate = if n > 0 { hits as f64 / n as f64 } else { f64::NAN };
        let mc_se = if n > 0 { (rate * (1.0 - rate) / n as f64).sqrt() } else { f64::NAN };
        Cell { rate, mc_se, hits, n }
    }
}

/// Coverage/rejection report for one spec.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub name: String,
    pub replications: usize,
    pub failures: usize,
    pub truth: TruthValues,
    pub coverage_effects: Vec<Cell>,
    pub coverage_average_total: Option<Cell>,
    pub coverage_placebos: Vec<Cell>,
    /// Joint placebo test rejection at the 5% level.
    pub f_rejection: Option<Cell>,
    /// Equal-effects test rejection at the 5% level.
    pub equal_rejection: Option<Cell>,
    pub mean_effects: Vec<Option<f64>>,
    pub mean_placebos: Vec<Option<f64>>,
    pub se_mean_effects: Vec<Option<f64>>,
    pub se_mean_placebos: Vec<Option<f64>>,
    pub mean_analytic_se_effects: Vec<Option<f64>>,
    pub mean_bootstrap_se_effects: Vec<Option<f64>>,
}

struct RepOutcome {
    eff: Vec<Option<(f64, f64, f64)>>, // (estimate, ci_low, ci_high)
    avg: Option<(f64, f64, f64)>,
    pl: Vec<Option<(f64, f64, f64)>>,
    f_reject: Option<bool>,
    eq_reject: Option<bool>,
    se_eff: Vec<Option<f64>>,
    boot_se_eff: Vec<Option<f64>>,
}

fn extract(res: &EstimationResult) -> RepOutcome {
    let pick = |r: &crate::run::EffectRow| match (r.estimate, r.ci_low, r.ci_high) {
        (Some(e), Some(lo), Some(hi)) => Some((e, lo, hi)),
        _ => None,
    };
    RepOutcome {
        eff: res.effects.iter().map(pick).collect(),
        avg: res.average_total.as_ref().and_then(pick),
        pl: res.placebos.iter().map(pick).collect(),
        f_reject: res.joint_placebos.as_ref().map(|w| w.p_value < 0.05),
        eq_reject: res.effects_equal.as_ref().map(|w| w.p_value < 0.05),
        se_eff: res.effects.iter().map(|r| r.se).collect(),
        boot_se_eff: res.effects.iter().map(|r| r.se_bootstrap).collect(),
    }
}

/// Runs a spec for `reps` replications and measures coverage at the truth.
pub fn run_spec(spec: &SimSpec, reps: usize, seed: u64) -> Result<CoverageReport> {
    if reps < 2 {
        return Err(Error::Usage("at least two replications are needed".into()));
    }
    let base = base_panel(spec.base);
    let truth = truth(spec, &base)?;
    let config = run_config(&spec.options);

    let outcomes: Vec<Option<RepOutcome>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut panel = generate(spec, &base, rep, seed);
            estimate_prepared(&mut panel, &config).ok().map(|res| extract(&res))
        })
        .collect();

    let l_max = spec.options.effects;
    let pl_max = spec.options.placebos;
    let mut failures = 0usize;
    let mut cov_eff = vec![(0usize, 0usize); l_max];
    let mut cov_pl = vec![(0usize, 0usize); pl_max];
    let mut cov_avg = (0usize, 0usize);
    let mut f_counts = (0usize, 0usize);
    let mut eq_counts = (0usize, 0usize);
    let mut sums_eff = vec![(0.0, 0.0, 0usize); l_max]; // (sum, sumsq, n)
    let mut sums_pl = vec![(0.0, 0.0, 0usize); pl_max];
    let mut sum_se = vec![(0.0, 0usize); l_max];
    let mut sum_boot = vec![(0.0, 0usize); l_max];
    for o in outcomes.iter() {
        let Some(o) = o else {
            failures += 1;
            continue;
        };
        for (l, slot) in o.eff.iter().enumerate() {
            if let (Some((e, lo, hi)), Some(Some(tv))) = (slot, truth.effects.get(l)) {
                cov_eff[l].1 += 1;
                if lo <= tv && tv <= hi {
                    cov_eff[l].0 += 1;
                }
                sums_eff[l].0 += e;
                sums_eff[l].1 += e * e;
                sums_eff[l].2 += 1;
            }
        }
        for (l, slot) in o.pl.iter().enumerate() {
            let tv = truth.placebos.get(l).copied().flatten().unwrap_or(0.0);
            if let Some((e, lo, hi)) = slot {
                cov_pl[l].1 += 1;
                if *lo <= tv && tv <= *hi {
                    cov_pl[l].0 += 1;
                }
                sums_pl[l].0 += e;
                sums_pl[l].1 += e * e;
                sums_pl[l].2 += 1;
            }
        }
        if let (Some((_, lo, hi)), Some(tv)) = (o.avg, truth.average_total) {
            cov_avg.1 += 1;
            if lo <= tv && tv <= hi {
                cov_avg.0 += 1;
            }
        }
        if let Some(r) = o.f_reject {
            f_counts.1 += 1;
            if r {
                f_counts.0 += 1;
            }
        }
        if let Some(r) = o.eq_reject {
            eq_counts.1 += 1;
            if r {
                eq_counts.0 += 1;
            }
        }
        for (l, se) in o.se_eff.iter().enumerate() {
            if let Some(se) = se {
                sum_se[l].0 += se;
                sum_se[l].1 += 1;
            }
        }
        for (l, se) in o.boot_se_eff.iter().enumerate() {
            if let Some(se) = se {
                sum_boot[l].0 += se;
                sum_boot[l].1 += 1;
            }
        }
    }

    let mean_and_se = |s: &(f64, f64, usize)| -> (Option<f64>, Option<f64>) {
        if s.2 == 0 {
            return (None, None);
        }
        let n = s.2 as f64;
        let m = s.0 / n;
        let var = (s.1 / n - m * m).max(0.0);
        (Some(m), Some((var / n).sqrt()))
    };

    Ok(CoverageReport {
        name: spec.name.clone(),
        replications: reps,
        failures,
        truth,
        coverage_effects: cov_eff.iter().map(|&(h, n)| Cell::from_counts(h, n)).collect(),
        coverage_average_total: (cov_avg.1 > 0).then(|| Cell::from_counts(cov_avg.0, cov_avg.1)),
        coverage_placebos: cov_pl.iter().map(|&(h, n)| Cell::from_counts(h, n)).collect(),
        f_rejection: (f_counts.1 > 0).then(|| Cell::from_counts(f_counts.0, f_counts.1)),
        equal_rejection: (eq_counts.1 > 0).then(|| Cell::from_counts(eq_counts.0, eq_counts.1)),
        mean_effects: sums_eff.iter().map(|s| mean_and_se(s).0).collect(),
        mean_placebos: sums_pl.iter().map(|s| mean_and_se(s).0).collect(),
        se_mean_effects: sums_eff.iter().map(|s| mean_and_se(s).1).collect(),
        se_mean_placebos: sums_pl.iter().map(|s| mean_and_se(s).1).collect(),
        mean_analytic_se_effects: sum_se
            .iter()
            .map(|&(s, n)| (n > 0).then(|| s / n as f64))
            .collect(),
        mean_bootstrap_se_effects: sum_boot
            .iter()
            .map(|&(s, n)| (n > 0).then(|| s / n as f64))
            .collect(),
    })
}
