//! Evaluation metrics: PMD mean-squared error against an analytic kernel,
//! invariance error of a kernel, regression error and interval coverage.

use crate::error::{check_dim, EncpError, Result};
use crate::gmm::SymmetricGmmSpec;
use crate::group::GroupRepresentation;
use crate::model::{EncpModel, FittedOperator};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Largest number of test points used on each axis of the PMD grid.
pub const MAX_GRID: usize = 1024;

/// Anything that evaluates a PMD kernel `κ(x, y)`.
pub trait PmdKernel {
    /// `κ(x_a, y_b)` for every row pair.
    fn eval_grid(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// `κ(x_n, y_n)` row by row.
    fn eval_pairs(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_dim(xs.nrows(), ys.nrows(), "eval_pairs: row counts")?;
        let mut out = DVector::zeros(xs.nrows());
        for i in 0..xs.nrows() {
            out[i] = self.eval_grid(&xs.rows(i, 1).into_owned(), &ys.rows(i, 1).into_owned())?[(0, 0)];
        }
        Ok(out)
    }
}

impl PmdKernel for SymmetricGmmSpec {
    fn eval_grid(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.pmd_grid(xs, ys)
    }
}

/// `1 + Σ_i (u E)_i v_i` per row.
fn pair_products(u: DMatrix<f64>, e: &DMatrix<f64>, v: DMatrix<f64>) -> DVector<f64> {
    let ue = u * e;
    DVector::from_iterator(ue.nrows(), (0..ue.nrows()).map(|i| 1.0 + ue.row(i).dot(&v.row(i))))
}

impl PmdKernel for EncpModel {
    fn eval_grid(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.kernel_grid(xs, ys)
    }

    fn eval_pairs(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_dim(xs.nrows(), ys.nrows(), "eval_pairs: row counts")?;
        Ok(pair_products(self.features_x(xs)?, &self.operator_matrix(), self.features_y(ys)?))
    }
}

impl PmdKernel for FittedOperator {
    fn eval_grid(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.kernel_grid(xs, ys)
    }

    fn eval_pairs(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_dim(xs.nrows(), ys.nrows(), "eval_pairs: row counts")?;
        Ok(pair_products(self.features_x(xs)?, &self.operator(), self.features_y(ys)?))
    }
}

/// `(1/M²) Σ_{a,b} (κ(x_a, y_b) - κ_θ(x_a, y_b))²` over the first
/// `M = min(N, 1024)` test points on each axis.
pub fn pmd_mse<A, B>(oracle: &A, model: &B, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<f64>
where
    A: PmdKernel + ?Sized,
    B: PmdKernel + ?Sized,
{
    check_dim(xs.nrows(), ys.nrows(), "pmd_mse: row counts")?;
    let m = xs.nrows().min(MAX_GRID);
    if m == 0 {
        return Err(EncpError::InvalidParameter("pmd_mse on an empty test set".into()));
    }
    let (xs, ys) = (xs.rows(0, m).into_owned(), ys.rows(0, m).into_owned());
    let diff = oracle.eval_grid(&xs, &ys)? - model.eval_grid(&xs, &ys)?;
    Ok(diff.norm_squared() / (m * m) as f64)
}

/// Mean over samples and non-identity `g` of `(κ(g·x, g·y) - κ(x, y))²`.
/// Zero for the trivial group.
pub fn invariance_error<K>(
    kernel: &K,
    xs: &DMatrix<f64>,
    ys: &DMatrix<f64>,
    rep_x: &GroupRepresentation,
    rep_y: &GroupRepresentation,
) -> Result<f64>
where
    K: PmdKernel + ?Sized,
{
    if xs.nrows() == 0 {
        return Err(EncpError::InvalidParameter("invariance_error on an empty test set".into()));
    }
    let group = rep_x.group();
    let base = kernel.eval_pairs(xs, ys)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for g in group.elements().filter(|&g| g != group.identity()) {
        let moved = kernel.eval_pairs(&rep_x.act_rows(g, xs)?, &rep_y.act_rows(g, ys)?)?;
        total += (moved - &base).norm_squared();
        count += xs.nrows();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean over samples and coordinates of `(pred - truth)²`.
pub fn regression_mse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_dim(truth.nrows(), pred.nrows(), "regression_mse rows")?;
    check_dim(truth.ncols(), pred.ncols(), "regression_mse cols")?;
    if truth.is_empty() {
        return Err(EncpError::InvalidParameter("regression_mse on an empty set".into()));
    }
    Ok((pred - truth).norm_squared() / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    /// Fraction of points with every coordinate inside its interval.
    pub coverage: f64,
    /// Product over coordinates of the per-coordinate coverage.
    pub relaxed_coverage: f64,
    pub marginal_coverage: Vec<f64>,
    /// Mean product of interval widths.
    pub mean_set_size: f64,
}

/// Coverage of per-coordinate intervals `[lower, upper]` (one row per test
/// point) on the responses `ys`.
pub fn coverage_metrics(lower: &DMatrix<f64>, upper: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<CoverageMetrics> {
    check_dim(ys.nrows(), lower.nrows(), "coverage lower rows")?;
    check_dim(ys.nrows(), upper.nrows(), "coverage upper rows")?;
    check_dim(ys.ncols(), lower.ncols(), "coverage lower cols")?;
    check_dim(ys.ncols(), upper.ncols(), "coverage upper cols")?;
    let (n, q) = (ys.nrows(), ys.ncols());
    if n == 0 {
        return Err(EncpError::InvalidParameter("coverage on an empty test set".into()));
    }
    if lower.zip_map(upper, |l, u| l.is_finite() && u.is_finite() && l <= u).iter().any(|ok| !ok) {
        return Err(EncpError::InvalidParameter("intervals must be finite with lower <= upper".into()));
    }
    let inside = DMatrix::from_fn(n, q, |i, j| lower[(i, j)] <= ys[(i, j)] && ys[(i, j)] <= upper[(i, j)]);
    let joint = inside.row_iter().filter(|r| r.iter().all(|&b| b)).count();
    let marginal: Vec<f64> = inside
        .column_iter()
        .map(|c| c.iter().filter(|&&b| b).count() as f64 / n as f64)
        .collect();
    let size = (0..n)
        .map(|i| (0..q).map(|j| upper[(i, j)] - lower[(i, j)]).product::<f64>())
        .sum::<f64>()
        / n as f64;
    Ok(CoverageMetrics {
        coverage: joint as f64 / n as f64,
        relaxed_coverage: marginal.iter().product(),
        marginal_coverage: marginal,
        mean_set_size: size,
    })
}

/// Test-set metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub group: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub pmd_mse: Option<f64>,
    pub invariance_error: f64,
    pub regression_mse: Option<f64>,
    pub coverage: Option<CoverageMetrics>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub final_train_l0: Option<f64>,
}

impl EvalReport {
    /// Every metric finite and nonnegative, coverages in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| EncpError::InvalidParameter(format!("metric {name} = {v} is not valid"));
        let mut metrics = vec![("invariance_error", self.invariance_error)];
        metrics.extend(self.pmd_mse.map(|v| ("pmd_mse", v)));
        metrics.extend(self.regression_mse.map(|v| ("regression_mse", v)));
        if let Some(c) = &self.coverage {
            metrics.push(("mean_set_size", c.mean_set_size));
            for (name, v) in [("coverage", c.coverage), ("relaxed_coverage", c.relaxed_coverage)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(name, v));
                }
            }
        }
        for (name, v) in metrics {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(name, v));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::build_spec;
    use crate::group::{data_representation, FiniteGroup};
    use crate::model::tests::model;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn c2_spec() -> SymmetricGmmSpec {
        let g = FiniteGroup::from_label("C2").unwrap();
        let r = data_representation(&g, 1).unwrap();
        build_spec(&r, &r, 3, 5).unwrap()
    }

    /// Kernel defined by a closure, used to check the trait defaults.
    struct Closure<F>(F);

    impl<F: Fn(&[f64], &[f64]) -> f64> PmdKernel for Closure<F> {
        fn eval_grid(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_fn(xs.nrows(), ys.nrows(), |a, b| {
                let x: Vec<f64> = xs.row(a).iter().copied().collect();
                let y: Vec<f64> = ys.row(b).iter().copied().collect();
                (self.0)(&x, &y)
            }))
        }
    }

    #[test]
    fn oracle_plug_in_has_zero_error() {
        let spec = c2_spec();
        let data = spec.sample(200, 1).unwrap();
        assert_eq!(pmd_mse(&spec, &spec, &data.x, &data.y).unwrap(), 0.0);
    }

    #[test]
    fn unit_kernel_on_independent_spec_has_zero_error() {
        let g = FiniteGroup::trivial();
        let r = GroupRepresentation::trivial(&g, 1);
        let mean = DVector::from_vec(vec![0.3, -0.4]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.7]));
        let spec = SymmetricGmmSpec::from_base(&r, &r, vec![mean], vec![cov]).unwrap();
        let data = spec.sample(300, 2).unwrap();
        let one = Closure(|_: &[f64], _: &[f64]| 1.0);
        assert!(pmd_mse(&spec, &one, &data.x, &data.y).unwrap() < 1e-24);
    }

    #[test]
    fn pmd_mse_matches_double_loop() {
        let spec = c2_spec();
        let data = spec.sample(64, 3).unwrap();
        let m = model("C2", 1, 1, Some(4), 4);
        let mut naive = 0.0;
        for a in 0..64 {
            for b in 0..64 {
                let x = [data.x[(a, 0)]];
                let y = [data.y[(b, 0)]];
                naive += (spec.pmd_ratio(&x, &y).unwrap() - m.kernel_eval(&x, &y).unwrap()).powi(2);
            }
        }
        naive /= 64.0 * 64.0;
        let fast = pmd_mse(&spec, &m, &data.x, &data.y).unwrap();
        assert!((fast - naive).abs() <= 1e-12 * naive.max(1.0));
    }

    #[test]
    fn grid_is_capped() {
        let spec = c2_spec();
        let data = spec.sample(1100, 5).unwrap();
        let counter = std::cell::Cell::new(0usize);
        let k = Closure(|_: &[f64], _: &[f64]| {
            counter.set(counter.get() + 1);
            1.0
        });
        pmd_mse(&spec, &k, &data.x, &data.y).unwrap();
        assert_eq!(counter.get(), MAX_GRID * MAX_GRID);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn pmd_mse_ignores_test_order(seed in 0u64..500) {
            let spec = c2_spec();
            let data = spec.sample(40, seed).unwrap();
            let m = model("C2", 1, 1, Some(4), 6);
            let mut idx: Vec<usize> = (0..40).collect();
            idx.shuffle(&mut stream(seed, "perm"));
            let shuffled = data.select(&idx);
            let a = pmd_mse(&spec, &m, &data.x, &data.y).unwrap();
            let b = pmd_mse(&spec, &m, &shuffled.x, &shuffled.y).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn equivariant_model_and_oracle_are_invariant() {
        for (label, p, q) in [("C2", 1, 1), ("D3", 2, 2), ("C4", 2, 3)] {
            let m = model(label, p, q, None, 7);
            let mut rng = stream(8, "inv");
            let xs = DMatrix::from_fn(100, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ys = DMatrix::from_fn(100, q, |_, _| rng.sample::<f64, _>(StandardNormal));
            assert!(invariance_error(&m, &xs, &ys, m.rep_x(), m.rep_y()).unwrap() <= 1e-12, "{label}");
            let spec = build_spec(m.rep_x(), m.rep_y(), 2, 9).unwrap();
            assert!(invariance_error(&spec, &xs, &ys, m.rep_x(), m.rep_y()).unwrap() <= 1e-20, "{label}");
        }
    }

    #[test]
    fn agnostic_model_is_not_invariant() {
        let ncp = model("trivial", 1, 1, Some(8), 10);
        let mut m = ncp.clone();
        let blocks = m.blocks().iter().map(|b| b.map(|_| 0.5)).collect();
        m.set_blocks(blocks).unwrap();
        let spec = c2_spec();
        let data = spec.sample(200, 11).unwrap();
        // zero biases and centers make the untrained network odd, which is
        // invariant under the joint sign flip; plain data means break that
        m.refresh_centers(&data.x.map(|v| v + 1.0), &data.y.map(|v| v - 1.0)).unwrap();
        let err = invariance_error(&m, &data.x, &data.y, spec.rep_x(), spec.rep_y()).unwrap();
        assert!(err > 0.0);
        // the trivial action has nothing to compare
        assert_eq!(invariance_error(&m, &data.x, &data.y, m.rep_x(), m.rep_y()).unwrap(), 0.0);
    }

    #[test]
    fn pair_evaluation_matches_grid_diagonal() {
        let m = model("D3", 2, 2, None, 12);
        let mut rng = stream(13, "pairs");
        let xs = DMatrix::from_fn(9, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ys = DMatrix::from_fn(9, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let grid = PmdKernel::eval_grid(&m, &xs, &ys).unwrap();
        let pairs = PmdKernel::eval_pairs(&m, &xs, &ys).unwrap();
        assert!((grid.diagonal() - pairs).amax() < 1e-12);
    }

    #[test]
    fn full_range_intervals_cover_everything() {
        let spec = c2_spec();
        let data = spec.sample(500, 14).unwrap();
        let lo = DMatrix::from_element(500, 1, data.y.min());
        let hi = DMatrix::from_element(500, 1, data.y.max());
        let c = coverage_metrics(&lo, &hi, &data.y).unwrap();
        assert_eq!((c.coverage, c.relaxed_coverage), (1.0, 1.0));
        assert!((c.mean_set_size - (data.y.max() - data.y.min())).abs() < 1e-12);
    }

    #[test]
    fn exact_gaussian_intervals_reach_nominal_coverage() {
        let n = 5000;
        let mut rng = stream(15, "cover");
        let mu = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let ys = mu.map(|m| m + rng.sample::<f64, _>(StandardNormal) * 0.5);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let (a, b) = (normal.inverse_cdf(0.05), normal.inverse_cdf(0.95));
        let c = coverage_metrics(&mu.add_scalar(a), &mu.add_scalar(b), &ys).unwrap();
        let se = (0.9 * 0.1 / n as f64).sqrt();
        assert!((c.coverage - 0.9).abs() <= 3.0 * se, "{c:?}");
    }

    proptest! {
        #[test]
        fn joint_coverage_never_exceeds_a_marginal(seed in 0u64..1000, q in 1usize..4) {
            let mut rng = stream(seed, "cover-prop");
            let n = 50;
            let ys = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let lo = DMatrix::from_fn(n, q, |_, _| rng.random_range(-2.0..0.0));
            let hi = lo.map(|l| l + rng.random_range(0.0..2.5));
            let c = coverage_metrics(&lo, &hi, &ys).unwrap();
            let min = c.marginal_coverage.iter().copied().fold(1.0, f64::min);
            prop_assert!(c.coverage <= min);
            prop_assert!((0.0..=1.0).contains(&c.relaxed_coverage));
        }
    }

    #[test]
    fn bad_intervals_are_rejected() {
        let ys = DMatrix::from_element(2, 1, 0.0);
        let lo = DMatrix::from_element(2, 1, 1.0);
        let hi = DMatrix::from_element(2, 1, 0.0);
        assert!(coverage_metrics(&lo, &hi, &ys).is_err());
        let inf = DMatrix::from_element(2, 1, f64::INFINITY);
        assert!(coverage_metrics(&hi, &inf, &ys).is_err());
    }

    #[test]
    fn report_validation() {
        let mut r = EvalReport {
            group: "C2".into(),
            seed: 0,
            n_train: 10,
            n_valid: 2,
            n_test: 3,
            pmd_mse: Some(0.1),
            invariance_error: 0.0,
            regression_mse: None,
            coverage: None,
            best_epoch: None,
            final_train_l0: None,
        };
        assert!(r.validate().is_ok());
        r.pmd_mse = Some(f64::NAN);
        assert!(r.validate().is_err());
    }
}
