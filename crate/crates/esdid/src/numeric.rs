//! Numeric building blocks: compensated summation, weighted means,
//! treatment-value equivalence classes, and a small pivoted WLS solver.

use nalgebra::{DMatrix, DVector};

/// Kahan–Babuška compensated accumulator. Group weights in county-level
/// panels span several orders of magnitude, so plain summation loses digits
/// in the weighted means that every estimator is built from.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Weighted mean with compensated numerator and denominator.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightedMean {
    num: KahanSum,
    den: KahanSum,
}

impl WeightedMean {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, weight: f64, value: f64) {
        self.num.add(weight * value);
        self.den.add(weight);
    }

    pub fn total_weight(&self) -> f64 {
        self.den.value()
    }

    /// `None` when no mass has been accumulated.
    pub fn mean(&self) -> Option<f64> {
        let w = self.den.value();
        if w > 0.0 {
            Some(self.num.value() / w)
        } else {
            None
        }
    }
}

/// Equivalence classes over observed treatment values.
///
/// Baseline-treatment grouping, first-switch detection and path keys all
/// compare treatment values. Comparison is exact by default; a nonzero
/// absolute tolerance merges values whose consecutive gaps stay within the
/// tolerance, so that representation noise cannot manufacture a switch.
#[derive(Debug, Clone)]
pub struct ValueClasses {
    /// First member of each class, ascending.
    reps: Vec<f64>,
    tol: f64,
}

impl ValueClasses {
    pub fn build(values: impl IntoIterator<Item = f64>, tol: f64) -> Self {
        let mut vals: Vec<f64> = values
            .into_iter()
            .filter(|v| v.is_finite())
            .map(|v| if v == 0.0 { 0.0 } else { v }) // canonicalize -0.0
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        let mut reps: Vec<f64> = Vec::new();
        let mut uppers: Vec<f64> = Vec::new();
        for v in vals {
            match uppers.last_mut() {
                Some(u) if v - *u <= tol => *u = v,
                _ => {
                    reps.push(v);
                    uppers.push(v);
                }
            }
        }
        Self { reps, tol }
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    /// Class index of `v`. Values outside every class (possible only when the
    /// class table was built from a different sample) are assigned to the
    /// nearest class.
    pub fn class_of(&self, v: f64) -> usize {
        let v = if v == 0.0 { 0.0 } else { v };
        match self.reps.binary_search_by(|r| r.partial_cmp(&v).unwrap()) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => {
                if i < self.reps.len() && v >= self.reps[i] - self.tol {
                    i
                } else {
                    i - 1
                }
            }
        }
    }

    /// Representative value of class `i`.
    pub fn rep(&self, i: usize) -> f64 {
        self.reps[i]
    }

    pub fn same_class(&self, a: f64, b: f64) -> bool {
        self.class_of(a) == self.class_of(b)
    }
}

/// Result of a pivoted symmetric solve: coefficients (zero for dropped
/// columns) and the kept-column mask.
#[derive(Debug, Clone)]
pub struct PivotedSolve {
    pub coefs: DVector<f64>,
    pub kept: Vec<bool>,
}

/// Solves `gram * x = rhs` for a symmetric positive semidefinite `gram`,
/// dropping columns whose pivot falls below `1e-12 * max initial diagonal`.
/// Interacted time-trend controls are routinely collinear, so rank handling
/// is part of the contract rather than an error path.
pub fn solve_sym_pivoted(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> PivotedSolve {
    let k = gram.nrows();
    assert_eq!(gram.ncols(), k);
    assert_eq!(rhs.len(), k);
    let max_diag = (0..k).map(|i| gram[(i, i)].abs()).fold(0.0f64, f64::max);
    let tol = 1e-12 * max_diag.max(1e-300);

    // Augmented system [gram | rhs], symmetric Gaussian elimination with
    // diagonal pivot screening.
    let mut a = gram.clone();
    let mut b = rhs.clone();
    let mut kept = vec![true; k];
    for i in 0..k {
        if a[(i, i)] <= tol {
            kept[i] = false;
            for j in 0..k {
                a[(i, j)] = 0.0;
                a[(j, i)] = 0.0;
            }
            a[(i, i)] = 1.0;
            b[i] = 0.0;
            continue;
        }
        let piv = a[(i, i)];
        for r in (i + 1)..k {
            let f = a[(r, i)] / piv;
            if f == 0.0 {
                continue;
            }
            for c in i..k {
                a[(r, c)] -= f * a[(i, c)];
            }
            b[r] -= f * b[i];
        }
    }
    // Back substitution.
    let mut x = DVector::zeros(k);
    for i in (0..k).rev() {
        if !kept[i] {
            continue;
        }
        let mut s = b[i];
        for j in (i + 1)..k {
            s -= a[(i, j)] * x[j];
        }
        x[i] = s / a[(i, i)];
    }
    PivotedSolve { coefs: x, kept }
}

/// Upper tail of the chi-squared distribution via the regularized upper
/// incomplete gamma function.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    statrs::function::gamma::gamma_ur(df / 2.0, x / 2.0)
}

/// Two-sided critical value for a normal confidence interval. The 0.95 level
/// uses the conventional 1.96 exactly; other levels use the normal quantile.
pub fn z_critical(level: f64) -> f64 {
    if (level - 0.95).abs() < 1e-12 {
        1.96
    } else {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        n.inverse_cdf(0.5 + level / 2.0)
    }
}
