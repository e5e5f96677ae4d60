//! Multi-output linear leaf models.
//!
//! Each leaf of a model tree predicts every output as an affine function of
//! the inputs, `y_o = sum_f c[o][f] * x[f] + b[o]`. Fitting minimizes the sum
//! of squared residuals over all outputs with an optional ridge penalty on the
//! coefficients (never on the intercepts), solved through the normal
//! equations. Attribution splits a prediction into signed per-feature shares
//! normalized so the absolute shares sum to one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Affine model for one leaf: `n_outputs x n_features` coefficients plus one
/// intercept per output.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafModel {
    pub coefficients: DMatrix<f64>,
    pub intercepts: DVector<f64>,
    /// Number of samples the model was fitted on.
    pub n_train_samples: usize,
}

impl LeafModel {
    pub fn n_features(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.coefficients.nrows()
    }
}

/// Signed per-feature attribution of one prediction, one row per output.
/// An output whose shares sum to exactly zero magnitude is flagged degenerate
/// and its row is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub values: DMatrix<f64>,
    pub degenerate: Vec<bool>,
}

/// Fits a ridge-regularized least-squares model. `x` is `n x d` (one sample
/// per row), `y` is `n x m`. The penalty `ridge * ||c||^2` applies to the
/// coefficients only; intercepts are unpenalized.
pub fn fit_leaf(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<LeafModel> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("fit_leaf needs at least one sample".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "fit_leaf: {} feature rows vs {} target rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    check_finite(x, "fit_leaf features")?;
    check_finite(y, "fit_leaf targets")?;

    let mut gram = Gram::new(x.ncols(), y.ncols());
    for i in 0..x.nrows() {
        gram.add_row(x.row(i).iter().copied(), y.row(i).iter().copied());
    }
    let (coefficients, intercepts) = gram.solve(ridge);
    Ok(LeafModel {
        coefficients,
        intercepts,
        n_train_samples: x.nrows(),
    })
}

/// Unclamped affine prediction for one feature vector.
pub fn predict_leaf(model: &LeafModel, x: &[f64]) -> Vec<f64> {
    assert_eq!(
        x.len(),
        model.n_features(),
        "predict_leaf: expected {} features, got {}",
        model.n_features(),
        x.len()
    );
    let mut out = vec![0.0; model.n_outputs()];
    predict_leaf_into(model, x, &mut out);
    out
}

pub(crate) fn predict_leaf_into(model: &LeafModel, x: &[f64], out: &mut [f64]) {
    for o in 0..model.n_outputs() {
        let mut acc = model.intercepts[o];
        for (f, &xf) in x.iter().enumerate() {
            acc += model.coefficients[(o, f)] * xf;
        }
        out[o] = acc;
    }
}

/// Sum of squared residuals over every sample and output.
pub fn leaf_loss(model: &LeafModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    assert_eq!(x.nrows(), y.nrows(), "leaf_loss: row count mismatch");
    assert_eq!(x.ncols(), model.n_features(), "leaf_loss: feature count mismatch");
    assert_eq!(y.ncols(), model.n_outputs(), "leaf_loss: output count mismatch");
    let mut total = 0.0;
    let mut pred = vec![0.0; model.n_outputs()];
    let mut row = vec![0.0; model.n_features()];
    for i in 0..x.nrows() {
        for f in 0..x.ncols() {
            row[f] = x[(i, f)];
        }
        predict_leaf_into(model, &row, &mut pred);
        for o in 0..y.ncols() {
            let r = pred[o] - y[(i, o)];
            total += r * r;
        }
    }
    total
}

/// Signed relative importance of each feature for each output at `x`:
/// `I[o][f] = c[o][f] * x[f] / sum_j |c[o][j] * x[j]|`, intercepts excluded.
/// Computed on the unclamped linear output.
pub fn attribute(model: &LeafModel, x: &[f64]) -> Attribution {
    assert_eq!(
        x.len(),
        model.n_features(),
        "attribute: expected {} features, got {}",
        model.n_features(),
        x.len()
    );
    let m = model.n_outputs();
    let d = model.n_features();
    let mut values = DMatrix::zeros(m, d);
    let mut degenerate = vec![false; m];
    for o in 0..m {
        let mut denom = 0.0;
        for f in 0..d {
            denom += (model.coefficients[(o, f)] * x[f]).abs();
        }
        if denom == 0.0 {
            degenerate[o] = true;
            continue;
        }
        for f in 0..d {
            values[(o, f)] = model.coefficients[(o, f)] * x[f] / denom;
        }
    }
    Attribution { values, degenerate }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

// ============================================================================
// Gram accumulation
// ============================================================================

/// Running normal-equation sums over augmented rows `(x, 1)`. The split
/// search accumulates these in sorted-feature order so each candidate side
/// can be fitted and scored without another pass over the data.
#[derive(Debug, Clone)]
pub(crate) struct Gram {
    pub n: usize,
    /// `(d+1) x (d+1)` sum of outer products of augmented rows.
    pub sxx: DMatrix<f64>,
    /// `(d+1) x m` cross terms.
    pub sxy: DMatrix<f64>,
    /// Per-output sum of squared targets.
    pub syy: DVector<f64>,
}

impl Gram {
    pub fn new(d: usize, m: usize) -> Self {
        Gram {
            n: 0,
            sxx: DMatrix::zeros(d + 1, d + 1),
            sxy: DMatrix::zeros(d + 1, m),
            syy: DVector::zeros(m),
        }
    }

    pub fn d(&self) -> usize {
        self.sxx.nrows() - 1
    }

    pub fn m(&self) -> usize {
        self.sxy.ncols()
    }

    pub fn add_row<I, J>(&mut self, x: I, y: J)
    where
        I: Iterator<Item = f64>,
        J: Iterator<Item = f64>,
    {
        let d = self.d();
        let m = self.m();
        let mut aug = vec![0.0; d + 1];
        let mut yv = vec![0.0; m];
        let mut i = 0;
        for v in x {
            aug[i] = v;
            i += 1;
        }
        debug_assert_eq!(i, d);
        aug[d] = 1.0;
        let mut j = 0;
        for v in y {
            yv[j] = v;
            j += 1;
        }
        debug_assert_eq!(j, m);
        for a in 0..=d {
            let xa = aug[a];
            for b in 0..=d {
                self.sxx[(a, b)] += xa * aug[b];
            }
            for o in 0..m {
                self.sxy[(a, o)] += xa * yv[o];
            }
        }
        for o in 0..m {
            self.syy[o] += yv[o] * yv[o];
        }
        self.n += 1;
    }

    /// Componentwise difference, used to derive a right-side Gram from the
    /// node total and a left-side prefix.
    pub fn minus(&self, other: &Gram) -> Gram {
        Gram {
            n: self.n - other.n,
            sxx: &self.sxx - &other.sxx,
            sxy: &self.sxy - &other.sxy,
            syy: &self.syy - &other.syy,
        }
    }

    /// Solves the ridge normal equations. Returns (`m x d` coefficients,
    /// `m` intercepts). The intercept diagonal entry is unpenalized.
    pub fn solve(&self, ridge: f64) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.d();
        let m = self.m();
        let mut lhs = self.sxx.clone();
        for f in 0..d {
            lhs[(f, f)] += ridge;
        }
        let theta = solve_spd(lhs, &self.sxy);
        let mut coefficients = DMatrix::zeros(m, d);
        let mut intercepts = DVector::zeros(m);
        for o in 0..m {
            for f in 0..d {
                coefficients[(o, f)] = theta[(f, o)];
            }
            intercepts[o] = theta[(d, o)];
        }
        (coefficients, intercepts)
    }

    /// Sum of squared residuals of the given solution over the accumulated
    /// rows, evaluated algebraically from the sums. Clamped at zero to absorb
    /// cancellation on near-exact fits.
    pub fn sse(&self, coefficients: &DMatrix<f64>, intercepts: &DVector<f64>) -> f64 {
        let d = self.d();
        let m = self.m();
        let mut theta = DMatrix::zeros(d + 1, m);
        for o in 0..m {
            for f in 0..d {
                theta[(f, o)] = coefficients[(o, f)];
            }
            theta[(d, o)] = intercepts[o];
        }
        let mut total = 0.0;
        let sxx_theta = &self.sxx * &theta;
        for o in 0..m {
            let th = theta.column(o);
            let quad = th.dot(&sxx_theta.column(o));
            let cross = th.dot(&self.sxy.column(o));
            total += (self.syy[o] - 2.0 * cross + quad).max(0.0);
        }
        total
    }
}

/// Cholesky solve with LU and jittered-diagonal fallbacks so rank-deficient
/// unregularized fits still get a deterministic answer.
fn solve_spd(lhs: DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = lhs.clone().cholesky() {
        return chol.solve(rhs);
    }
    if let Some(sol) = lhs.clone().lu().solve(rhs) {
        if sol.iter().all(|v| v.is_finite()) {
            return sol;
        }
    }
    let n = lhs.nrows();
    let scale = lhs.diagonal().amax().max(1.0);
    let mut jittered = lhs;
    for i in 0..n {
        jittered[(i, i)] += 1e-10 * scale;
    }
    jittered
        .clone()
        .cholesky()
        .map(|c| c.solve(rhs))
        .unwrap_or_else(|| jittered.lu().solve(rhs).unwrap_or_else(|| DMatrix::zeros(n, rhs.ncols())))
}
