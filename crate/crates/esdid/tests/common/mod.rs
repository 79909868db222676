//! Shared test support: a randomized panel generator and an independent
//! brute-force implementation of the estimators, written directly from their
//! defining sums with no influence machinery.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use esdid::panel::{apply_missing_conventions, build_panel, collapse, MissingPolicy, Panel, RawRow};

/// Plain data view the oracle works from: everything indexed [g][t-1].
#[derive(Debug, Clone)]
pub struct Flat {
    pub g: usize,
    pub t: usize,
    pub d: Vec<Vec<Option<f64>>>,
    pub y: Vec<Vec<Option<f64>>>,
    pub n: Vec<Vec<f64>>,
    pub sg: Vec<usize>,
}

impl Flat {
    pub fn from_panel(p: &Panel) -> Flat {
        let mut d = vec![vec![None; p.n_periods]; p.n_groups];
        let mut y = vec![vec![None; p.n_periods]; p.n_groups];
        let mut n = vec![vec![0.0; p.n_periods]; p.n_groups];
        for g in 0..p.n_groups {
            for t in 1..=p.n_periods {
                d[g][t - 1] = p.d(g, t);
                y[g][t - 1] = p.y(g, t);
                n[g][t - 1] = p.weight(g, t);
            }
        }
        Flat { g: p.n_groups, t: p.n_periods, d, y, n, sg: p.supergroup_of.clone() }
    }
}

/// Estimates computed by the oracle.
#[derive(Debug, Clone)]
pub struct OracleOut {
    pub effects: Vec<Option<f64>>,
    pub normalized: Vec<Option<f64>>,
    pub placebos: Vec<Option<f64>>,
    pub avg_total: Option<f64>,
    /// Contributing switcher sets per horizon, for subset checks.
    pub effect_switchers: Vec<Vec<usize>>,
    pub placebo_switchers: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    In,
    Out,
    Never,
}

struct OracleSchedule {
    d1: f64,
    f: usize, // T+1 when never switches
    side: Side,
    t_g: usize,
}

/// Straight transcription of the estimator definitions. Cells are dropped
/// once a group's observed treatments have been strictly above and strictly
/// below its first observed treatment; switchers whose mean post-switch
/// treatment equals the baseline exactly are not switchers.
pub fn oracle(data: &Flat, l_max: usize, pl_max: usize) -> OracleOut {
    let t_len = data.t;
    let mut d = data.d.clone();
    let mut y = data.y.clone();
    let mut n = data.n.clone();

    // Larger-and-lower drop.
    for g in 0..data.g {
        let mut d1: Option<f64> = None;
        let (mut above, mut below) = (false, false);
        let mut cut: Option<usize> = None;
        for t in 0..t_len {
            if let Some(v) = d[g][t] {
                match d1 {
                    None => d1 = Some(v),
                    Some(b) => {
                        if v > b {
                            above = true;
                        }
                        if v < b {
                            below = true;
                        }
                    }
                }
                if above && below {
                    cut = Some(t);
                    break;
                }
            }
        }
        if let Some(c) = cut {
            for t in c..t_len {
                d[g][t] = None;
                y[g][t] = None;
                n[g][t] = 0.0;
            }
        }
    }

    // Schedules.
    let mut sched = Vec::with_capacity(data.g);
    for g in 0..data.g {
        let first_obs = (0..t_len).find(|&t| d[g][t].is_some());
        let (d1, f, side) = match first_obs {
            None => (f64::NAN, t_len + 1, Side::Never),
            Some(t0) => {
                let d1 = d[g][t0].unwrap();
                let f = (t0 + 1..t_len).find(|&t| d[g][t].is_some() && d[g][t] != Some(d1));
                match f {
                    None => (d1, t_len + 1, Side::Never),
                    Some(tf) => {
                        // mean post-switch treatment exactly at baseline: no first stage
                        let post: Vec<f64> = (tf..t_len).filter_map(|t| d[g][t]).collect();
                        let mean = post.iter().sum::<f64>() / post.len() as f64;
                        if mean == d1 {
                            (d1, t_len + 1, Side::Never)
                        } else if d[g][tf].unwrap() > d1 {
                            (d1, tf + 1, Side::In)
                        } else {
                            (d1, tf + 1, Side::Out)
                        }
                    }
                }
            }
        };
        sched.push(OracleSchedule { d1, f, side, t_g: 0 });
    }
    for g in 0..data.g {
        if sched[g].d1.is_nan() {
            continue;
        }
        let mut max_f = 0;
        for h in 0..data.g {
            if !sched[h].d1.is_nan()
                && sched[h].d1 == sched[g].d1
                && data.sg[h] == data.sg[g]
            {
                max_f = max_f.max(sched[h].f);
            }
        }
        sched[g].t_g = max_f.saturating_sub(1);
    }
    // The applicability restriction: some same-baseline pair switches at
    // different dates.
    let applicable = |g: usize| -> bool {
        if sched[g].d1.is_nan() {
            return false;
        }
        (0..data.g).any(|h| {
            !sched[h].d1.is_nan() && sched[h].d1 == sched[g].d1 && sched[h].f != sched[g].f
        })
    };

    let yv = |g: usize, t: usize| -> Option<f64> { y[g][t - 1] };

    // One switcher-level contrast. `t_hi`/`t_lo` are the switcher's own
    // difference periods; controls use the same two periods with weights at
    // the reached period `t_w`.
    let did_gl = |g: usize, t_hi: usize, t_lo: usize, t_w: usize| -> Option<f64> {
        let own = yv(g, t_hi)? - yv(g, t_lo)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for h in 0..data.g {
            if h == g
                || sched[h].d1.is_nan()
                || sched[h].d1 != sched[g].d1
                || data.sg[h] != data.sg[g]
            {
                continue;
            }
            if sched[h].f <= t_w {
                continue;
            }
            let w = n[h][t_w - 1];
            if w <= 0.0 {
                continue;
            }
            let (Some(hi), Some(lo)) = (yv(h, t_hi), yv(h, t_lo)) else { continue };
            num += w * (hi - lo);
            den += w;
        }
        if den > 0.0 {
            Some(own - num / den)
        } else {
            None
        }
    };

    let mut effects = vec![None; l_max];
    let mut normalized = vec![None; l_max];
    let mut placebos = vec![None; pl_max];
    let mut effect_switchers = vec![Vec::new(); l_max];
    let mut placebo_switchers = vec![Vec::new(); pl_max];

    // Per-horizon accumulators for the average-total ratio.
    let mut tot_num_plus = 0.0;
    let mut tot_den_plus = 0.0;
    let mut tot_num_minus = 0.0;
    let mut tot_den_minus = 0.0;
    let mut any_plus = false;
    let mut any_minus = false;

    for l in 1..=l_max {
        let mut n1 = 0.0;
        let mut n0 = 0.0;
        let mut sum_plus = 0.0;
        let mut sum_minus = 0.0;
        let mut dose_plus = 0.0;
        let mut dose_minus = 0.0;
        let mut dose_abs = 0.0;
        let mut pl_n1 = 0.0;
        let mut pl_n0 = 0.0;
        let mut pl_plus = 0.0;
        let mut pl_minus = 0.0;
        for g in 0..data.g {
            let s = &sched[g];
            if s.side == Side::Never || !applicable(g) {
                continue;
            }
            let t = s.f - 1 + l;
            if t > s.t_g || t > t_len {
                continue;
            }
            let w = n[g][t - 1];
            if w <= 0.0 {
                continue;
            }
            // dose path through t
            let doses: Option<Vec<f64>> = (0..l).map(|k| d[g][s.f + k - 1]).collect();
            let Some(doses) = doses else { continue };
            let Some(contrast) = did_gl(g, t, s.f - 1, t) else { continue };
            let cum: f64 = doses.iter().map(|v| v - s.d1).sum();
            let gap = doses[l - 1] - s.d1;
            effect_switchers[l - 1].push(g);
            dose_abs += w * cum.abs();
            match s.side {
                Side::In => {
                    n1 += w;
                    sum_plus += w * contrast;
                    dose_plus += w * gap;
                }
                Side::Out => {
                    n0 += w;
                    sum_minus += w * (-contrast);
                    dose_minus += w * (-gap);
                }
                Side::Never => unreachable!(),
            }
            // placebo: mirrored windows, same weights, same switcher
            if l <= pl_max && s.f >= l + 2 {
                if let Some(pl) = did_gl(g, s.f - 1 - l, s.f - 1, t) {
                    placebo_switchers[l - 1].push(g);
                    match s.side {
                        Side::In => {
                            pl_n1 += w;
                            pl_plus += w * pl;
                        }
                        Side::Out => {
                            pl_n0 += w;
                            pl_minus += w * (-pl);
                        }
                        Side::Never => unreachable!(),
                    }
                }
            }
        }
        if n1 + n0 > 0.0 {
            effects[l - 1] = Some((sum_plus + sum_minus) / (n1 + n0));
            let dd = dose_abs / (n1 + n0);
            if dd > 0.0 {
                normalized[l - 1] = Some((sum_plus + sum_minus) / (n1 + n0) / dd);
            }
        }
        if l <= pl_max && pl_n1 + pl_n0 > 0.0 {
            placebos[l - 1] = Some((pl_plus + pl_minus) / (pl_n1 + pl_n0));
        }
        if n1 > 0.0 {
            any_plus = true;
            tot_num_plus += sum_plus;
            tot_den_plus += dose_plus;
        }
        if n0 > 0.0 {
            any_minus = true;
            tot_num_minus += sum_minus;
            tot_den_minus += dose_minus;
        }
    }

    let delta_plus = (any_plus && tot_den_plus != 0.0).then(|| tot_num_plus / tot_den_plus);
    let delta_minus = (any_minus && tot_den_minus != 0.0).then(|| tot_num_minus / tot_den_minus);
    let avg_total = match (any_plus, any_minus) {
        (true, false) => delta_plus,
        (false, true) => delta_minus,
        (true, true) => {
            let tot = tot_den_plus + tot_den_minus;
            if tot > 0.0 {
                let w_plus = tot_den_plus / tot;
                match (delta_plus, delta_minus) {
                    (Some(p), Some(m)) => Some(w_plus * p + (1.0 - w_plus) * m),
                    _ => None,
                }
            } else {
                None
            }
        }
        (false, false) => None,
    };

    OracleOut {
        effects,
        normalized,
        placebos,
        avg_total,
        effect_switchers,
        placebo_switchers,
    }
}

/// Randomized panel family: discrete treatments, staggered-ish switch dates
/// with both directions, optional weights, missing outcomes and treatments,
/// optional supergroups.
pub struct GeneratedPanel {
    pub rows: Vec<RawRow>,
    pub seed: u64,
}

pub fn random_panel(seed: u64) -> GeneratedPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g_count = rng.gen_range(4..=30);
    let t_count = rng.gen_range(3..=8usize);
    let with_weights = rng.gen_bool(0.5);
    let with_sg = rng.gen_bool(0.3);
    let n_sg = if with_sg { rng.gen_range(1..=2usize) } else { 1 };
    let miss_y = rng.gen_bool(0.6);
    let miss_d = rng.gen_bool(0.4);

    let mut rows = Vec::new();
    for g in 0..g_count {
        let d1 = *[0.0, 0.0, 1.0, 2.0].choose(&mut rng).unwrap();
        let f = rng.gen_range(2..=t_count + 2); // > t_count means never
        let jump: f64 = *[-1.0, 1.0, 1.0, 2.0].choose(&mut rng).unwrap();
        let wander = rng.gen_bool(0.3);
        let sg = (g % n_sg).to_string();
        let alpha = rng.gen_range(-2.0..2.0);
        let tau = rng.gen_range(-1.0..3.0);
        let mut level: f64 = alpha;
        for t in 1..=t_count {
            level += rng.gen_range(-0.5..0.5);
            let mut dval = if t >= f { d1 + jump } else { d1 };
            if wander && t > f {
                dval += ((t - f) % 2) as f64 * jump.signum();
            }
            if dval < 0.0 {
                dval = 0.0;
            }
            let yval = level + tau * (dval - d1) + (t * t) as f64 * 0.1;
            let mut row = RawRow::new(format!("g{g:03}"), t as i64);
            row.supergroup = with_sg.then(|| sg.clone());
            row.weight = if with_weights { rng.gen_range(0.2..4.0) } else { 1.0 };
            row.outcome = (!(miss_y && rng.gen_bool(0.08))).then_some(yval);
            row.treatment = (!(miss_d && rng.gen_bool(0.05))).then_some(dval);
            // occasionally drop the whole cell
            if rng.gen_bool(0.03) {
                continue;
            }
            rows.push(row);
        }
    }
    GeneratedPanel { rows, seed }
}

/// Prepares a generated panel the same way the pipeline does (collapse,
/// conventions) and returns both the panel and the oracle's flat view.
pub fn prepare(gen: &GeneratedPanel) -> Option<(Panel, Flat)> {
    let cells = collapse(&gen.rows).ok()?;
    let (mut panel, _) = build_panel(&cells).ok()?;
    apply_missing_conventions(&mut panel, MissingPolicy::Liberal);
    let flat = Flat::from_panel(&panel);
    Some((panel, flat))
}
