//! Confidence intervals, the equal-effects Wald test, the joint placebo
//! test, and the resampling bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{chi2_sf, z_critical, KahanSum};
use crate::panel::Panel;

/// Normal-approximation confidence interval.
pub fn confidence_interval(point: f64, variance: f64, level: f64) -> (f64, f64) {
    debug_assert!(variance >= 0.0);
    let half = z_critical(level) * variance.sqrt();
    (point - half, point + half)
}

/// Wald chi-squared test result.
#[derive(Debug, Clone, Serialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Set when a singular covariance forced a rank adjustment.
    pub note: Option<String>,
}

/// Covariance of the estimate vector times G: (1/G) sum over clusters of the
/// cluster-summed influence rows' outer products.
fn scaled_covariance(
    rows: &[&[f64]],
    cluster_of: &[usize],
    n_clusters: usize,
) -> DMatrix<f64> {
    let k = rows.len();
    let g_count = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut sums = vec![vec![0.0; k]; n_clusters];
    for (j, row) in rows.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            sums[cluster_of[g]][j] += v;
        }
    }
    let mut v = DMatrix::zeros(k, k);
    for s in &sums {
        for i in 0..k {
            for j in i..k {
                v[(i, j)] += s[i] * s[j];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            v[(i, j)] = v[(j, i)];
        }
    }
    v / g_count as f64
}

/// Inverts a symmetric PSD matrix, falling back to an SVD pseudo-inverse.
/// Returns the inverse, the effective rank, and whether the fallback fired.
fn psd_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, usize, bool) {
    let k = m.nrows();
    if let Some(ch) = m.clone().cholesky() {
        return (ch.inverse(), k, false);
    }
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_sv * 1e-12 * k as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let inv = svd.pseudo_inverse(tol).unwrap_or_else(|_| DMatrix::zeros(k, k));
    (inv, rank, true)
}

/// The contrast matrix for the equality test: demeaned coordinates with the
/// last one omitted to keep the rows linearly independent.
pub fn equality_contrast(l: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(l - 1, l);
    for i in 0..l - 1 {
        for j in 0..l {
            d[(i, j)] = if i == j { 1.0 } else { 0.0 } - 1.0 / l as f64;
        }
    }
    d
}

/// Tests that all supplied estimates are equal, using their influence rows.
pub fn effects_equal_test(
    estimates: &[f64],
    rows: &[&[f64]],
    cluster_of: &[usize],
    n_clusters: usize,
) -> Result<WaldResult> {
    let l = estimates.len();
    if l < 2 {
        return Err(Error::Usage("the equality test needs at least two estimated effects".into()));
    }
    let g_count = rows[0].len() as f64;
    let v = scaled_covariance(rows, cluster_of, n_clusters);
    let d = equality_contrast(l);
    let dv = &d * &v * d.transpose();
    let (inv, rank, adjusted) = psd_inverse(&dv);
    let delta = DVector::from_column_slice(estimates);
    let contrast = &d * delta;
    let statistic = (g_count * contrast.transpose() * inv * contrast)[(0, 0)].max(0.0);
    let df = if adjusted { rank } else { l - 1 };
    Ok(WaldResult {
        statistic,
        df,
        p_value: if df == 0 { 1.0 } else { chi2_sf(statistic, df as f64) },
        note: adjusted.then(|| "singular contrast covariance: pseudo-inverse with rank-adjusted degrees of freedom".into()),
    })
}

/// Tests that all supplied estimates are jointly zero.
pub fn joint_zero_test(
    estimates: &[f64],
    rows: &[&[f64]],
    cluster_of: &[usize],
    n_clusters: usize,
) -> Result<WaldResult> {
    let l = estimates.len();
    if l == 0 {
        return Err(Error::Usage("the joint test needs at least one estimate".into()));
    }
    let g_count = rows[0].len() as f64;
    let v = scaled_covariance(rows, cluster_of, n_clusters);
    let (inv, rank, adjusted) = psd_inverse(&v);
    let delta = DVector::from_column_slice(estimates);
    let statistic = (g_count * delta.transpose() * inv * delta)[(0, 0)].max(0.0);
    let df = if adjusted { rank } else { l };
    Ok(WaldResult {
        statistic,
        df,
        p_value: if df == 0 { 1.0 } else { chi2_sf(statistic, df as f64) },
        note: adjusted.then(|| "singular covariance: pseudo-inverse with rank-adjusted degrees of freedom".into()),
    })
}

/// Bootstrap configuration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BootstrapSpec {
    pub replications: usize,
    pub seed: u64,
}

/// Point estimates one replication produces.
#[derive(Debug, Clone)]
pub struct ReplicationEstimates {
    pub effects: Vec<Option<f64>>,
    pub placebos: Vec<Option<f64>>,
    pub average_total: Option<f64>,
}

/// Bootstrap standard errors per estimate.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    pub se_effects: Vec<Option<f64>>,
    pub se_placebos: Vec<Option<f64>>,
    pub se_average_total: Option<f64>,
    pub replications: usize,
    pub skipped: usize,
}

fn sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mut mean = KahanSum::new();
    for &v in values {
        mean.add(v);
    }
    let m = mean.value() / n;
    let mut ss = KahanSum::new();
    for &v in values {
        ss.add((v - m) * (v - m));
    }
    Some((ss.value() / (n - 1.0)).sqrt())
}

/// Draws clusters (groups, when unclustered) with replacement and reruns the
/// point estimation on each resampled panel. Deterministic given the seed:
/// replication RNG streams are split by counter, so the result does not
/// depend on the thread schedule.
pub fn cluster_bootstrap<F>(
    panel: &Panel,
    spec: &BootstrapSpec,
    l_max: usize,
    pl_max: usize,
    run: F,
) -> Result<BootstrapResult>
where
    F: Fn(Panel) -> Option<ReplicationEstimates> + Sync,
{
    if spec.replications < 2 {
        return Err(Error::Usage("the bootstrap needs at least two replications".into()));
    }
    let n_clusters = panel.cluster_labels.len();
    let results: Vec<Option<ReplicationEstimates>> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(rep as u64 + 1);
            let draws: Vec<usize> =
                (0..n_clusters).map(|_| rng.gen_range(0..n_clusters)).collect();
            let resampled = panel.resample_clusters(&draws);
            run(resampled)
        })
        .collect();

    let mut skipped = 0usize;
    let mut eff: Vec<Vec<f64>> = vec![Vec::new(); l_max];
    let mut pl: Vec<Vec<f64>> = vec![Vec::new(); pl_max];
    let mut avg: Vec<f64> = Vec::new();
    for r in &results {
        match r {
            Some(r) => {
                for (l, v) in r.effects.iter().enumerate() {
                    if let (Some(v), Some(slot)) = (v, eff.get_mut(l)) {
                        slot.push(*v);
                    }
                }
                for (l, v) in r.placebos.iter().enumerate() {
                    if let (Some(v), Some(slot)) = (v, pl.get_mut(l)) {
                        slot.push(*v);
                    }
                }
                if let Some(v) = r.average_total {
                    avg.push(v);
                }
            }
            None => skipped += 1,
        }
    }
    Ok(BootstrapResult {
        se_effects: eff.iter().map(|v| sd(v)).collect(),
        se_placebos: pl.iter().map(|v| sd(v)).collect(),
        se_average_total: sd(&avg),
        replications: spec.replications,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ci_at_default_level() {
        assert_eq!(confidence_interval(0.0, 1.0, 0.95), (-1.96, 1.96));
        assert_eq!(confidence_interval(5.0, 0.0, 0.95), (5.0, 5.0));
    }

    #[test]
    fn contrast_matrix_rows() {
        let d = equality_contrast(3);
        let expect = [
            [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0],
            [-1.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0],
        ];
        for i in 0..2 {
            for j in 0..3 {
                assert_relative_eq!(d[(i, j)], expect[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn equal_estimates_give_zero_statistic() {
        let rows_a: Vec<f64> = vec![1.0, 3.0, 2.0, 0.5];
        let rows_b: Vec<f64> = vec![0.5, 2.0, 3.0, 1.2];
        let cluster: Vec<usize> = (0..4).collect();
        let r = effects_equal_test(
            &[1.5, 1.5],
            &[&rows_a, &rows_b],
            &cluster,
            4,
        )
        .unwrap();
        assert!(r.statistic < 1e-20);
        assert_relative_eq!(r.p_value, 1.0);
        assert_eq!(r.df, 1);
    }

    #[test]
    fn contrast_annihilates_common_shifts() {
        let rows_a: Vec<f64> = vec![1.0, 3.0, 2.0, 0.5];
        let rows_b: Vec<f64> = vec![0.5, 2.0, 3.0, 1.2];
        let cluster: Vec<usize> = (0..4).collect();
        let r1 = effects_equal_test(&[1.0, 2.0], &[&rows_a, &rows_b], &cluster, 4).unwrap();
        let r2 = effects_equal_test(&[11.0, 12.0], &[&rows_a, &rows_b], &cluster, 4).unwrap();
        assert_relative_eq!(r1.statistic, r2.statistic, epsilon = 1e-9);
    }

    #[test]
    fn p_value_monotone_in_statistic() {
        let p1 = chi2_sf(1.0, 3.0);
        let p2 = chi2_sf(2.0, 3.0);
        let p3 = chi2_sf(10.0, 3.0);
        assert!(p1 > p2 && p2 > p3);
    }

    #[test]
    fn bootstrap_deterministic_and_degenerate() {
        // constant estimator: bootstrap se = 0
        let p = crate::estimate::test_support::toy_panel();
        let spec = BootstrapSpec { replications: 8, seed: 42 };
        let run = |_panel: Panel| {
            Some(ReplicationEstimates {
                effects: vec![Some(5.0)],
                placebos: vec![],
                average_total: Some(5.0),
            })
        };
        let a = cluster_bootstrap(&p, &spec, 1, 0, run).unwrap();
        let b = cluster_bootstrap(&p, &spec, 1, 0, run).unwrap();
        assert_eq!(a.se_effects[0], Some(0.0));
        assert_eq!(a.se_average_total, b.se_average_total);
    }

    #[test]
    fn bootstrap_counts_skipped_replications() {
        let p = crate::estimate::test_support::toy_panel();
        let spec = BootstrapSpec { replications: 6, seed: 1 };
        let flip = std::sync::atomic::AtomicUsize::new(0);
        let run = |_panel: Panel| {
            let i = flip.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if i % 2 == 0 {
                None
            } else {
                Some(ReplicationEstimates {
                    effects: vec![Some(1.0)],
                    placebos: vec![],
                    average_total: None,
                })
            }
        };
        let r = cluster_bootstrap(&p, &spec, 1, 0, run).unwrap();
        assert_eq!(r.skipped, 3);
    }
}
