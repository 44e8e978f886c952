//! Estimators built on a [`FittedOperator`]: regression of observables,
//! conditional probabilities, quantiles from a regressed conditional CDF,
//! G-invariant empirical means and the symmetry index of a set.

use crate::error::{check_dim, EncpError, Result};
use crate::group::{FiniteGroup, GroupRepresentation};
use crate::model::fit::Coefficients;
use crate::model::FittedOperator;
use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

/// Number of bins of the conditional CDF grid unless configured otherwise.
pub const DEFAULT_BINS: usize = 100;

/// `(1/(|G| N)) Σ_g Σ_n f(g·x_n)`, expanding the orbit of every sample.
pub fn invariant_mean<F>(xs: &DMatrix<f64>, action: &GroupRepresentation, f: F) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    check_dim(action.dim(), xs.ncols(), "invariant_mean: sample dim")?;
    if xs.nrows() == 0 {
        return Err(EncpError::InvalidParameter("invariant_mean of an empty sample".into()));
    }
    let mut acc: Option<DVector<f64>> = None;
    for g in action.group().elements() {
        let moved = action.act_rows(g, xs)?;
        for row in moved.row_iter() {
            let val = DVector::from_vec(f(&row.iter().copied().collect::<Vec<_>>()));
            match acc.as_mut() {
                None => acc = Some(val),
                Some(a) => {
                    check_dim(a.len(), val.len(), "invariant_mean: output dim")?;
                    *a += val;
                }
            }
        }
    }
    let count = (xs.nrows() * action.group().order()) as f64;
    Ok(acc.expect("nonempty sample") / count)
}

#[derive(Debug, Clone, PartialEq)]
enum OrbitValues {
    /// `h(g·y) = ρ_Z(g) h(y)`; `None` means `h` is G-invariant.
    Equivariant(Option<GroupRepresentation>),
    /// Values on every orbit point, row `g * N + n`.
    Explicit(DMatrix<f64>),
}

/// Values of an observable `h` on the fitting sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSamples {
    values: DMatrix<f64>,
    orbit: OrbitValues,
}

impl ObservableSamples {
    /// `values` holds `h(y_n)` row by row. With a representation `h` is taken
    /// to be equivariant, without one invariant.
    pub fn new(values: DMatrix<f64>, rep: Option<GroupRepresentation>) -> Result<Self> {
        if let Some(r) = &rep {
            check_dim(r.dim(), values.ncols(), "observable output dim")?;
        }
        Ok(Self {
            values,
            orbit: OrbitValues::Equivariant(rep),
        })
    }

    /// Evaluates `h` on every point of every orbit of `points`.
    pub fn evaluate<F>(points: &DMatrix<f64>, action: &GroupRepresentation, h: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let n = points.nrows();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n * action.group().order());
        for g in action.group().elements() {
            let moved = action.act_rows(g, points)?;
            for row in moved.row_iter() {
                rows.push(h(&row.iter().copied().collect::<Vec<_>>()));
            }
        }
        let dz = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dz) {
            return Err(EncpError::InvalidParameter("observable output dim varies".into()));
        }
        let orbit = DMatrix::from_fn(rows.len(), dz, |i, j| rows[i][j]);
        Ok(Self {
            values: orbit.rows(0, n).into_owned(),
            orbit: OrbitValues::Explicit(orbit),
        })
    }

    /// Indicator of the set `{y : pred(y)}`.
    pub fn indicator<P>(points: &DMatrix<f64>, action: &GroupRepresentation, pred: P) -> Result<Self>
    where
        P: Fn(&[f64]) -> bool,
    {
        Self::evaluate(points, action, |y| vec![if pred(y) { 1.0 } else { 0.0 }])
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn output_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    fn orbit_values(&self, group: &FiniteGroup) -> Result<DMatrix<f64>> {
        let n = self.len();
        match &self.orbit {
            OrbitValues::Explicit(m) => {
                check_dim(group.order() * n, m.nrows(), "observable orbit size")?;
                Ok(m.clone())
            }
            OrbitValues::Equivariant(rep) => {
                if let Some(r) = rep {
                    check_dim(group.order(), r.group().order(), "observable group order")?;
                }
                let mut out = DMatrix::zeros(group.order() * n, self.output_dim());
                for g in group.elements() {
                    let block = match rep {
                        Some(r) => r.act_rows(g, &self.values)?,
                        None => self.values.clone(),
                    };
                    out.rows_mut(g * n, n).copy_from(&block);
                }
                Ok(out)
            }
        }
    }
}

fn is_indicator(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// `Ê[h]` and `Ê[f ⊗ (h - Ê[h])]` over orbit rows.
fn orbit_statistics(features: &DMatrix<f64>, values: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let count = values.nrows() as f64;
    let mean = DVector::from_iterator(values.ncols(), values.column_iter().map(|c| c.sum() / count));
    let mut centered = values.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    (mean, features.transpose() * centered / count)
}

impl FittedOperator {
    /// Caches the G-invariant statistics of `h` on the fitting sample under
    /// `name`, replacing any previous entry.
    pub fn register_observable(&mut self, name: &str, h: &ObservableSamples) -> Result<()> {
        check_dim(self.fit_data().len(), h.len(), "observable sample count")?;
        let orbit = h.orbit_values(self.model().group())?;
        let (mean, coef) = orbit_statistics(&self.orbit_v, &orbit);
        self.observables.insert(
            name.to_string(),
            Coefficients {
                mean,
                coef,
                is_indicator: is_indicator(&orbit),
            },
        );
        Ok(())
    }

    pub fn has_observable(&self, name: &str) -> bool {
        self.observables.contains_key(name)
    }

    fn coefficients(&self, name: &str) -> Result<&Coefficients> {
        self.observables
            .get(name)
            .ok_or_else(|| EncpError::UnregisteredObservable(name.to_string()))
    }
}

/// `ẑ(x) = Ê_y[h] + u(x)ᵀ E Ê_y[v ⊗ h]` for every row of `xs`.
pub fn regress(op: &FittedOperator, name: &str, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = op.coefficients(name)?;
    let mut out = op.features_x(xs)? * op.operator() * &c.coef;
    for mut row in out.row_iter_mut() {
        row += c.mean.transpose();
    }
    Ok(out)
}

/// What a conditional probability is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum Condition<'a> {
    Point(&'a [f64]),
    /// Indicator of a set `A` evaluated on the fitting sample's `x` values.
    Set(&'a ObservableSamples),
}

/// Raw estimate of `P(y ∈ B | condition)` for a registered indicator `B`.
/// The value is not clamped; see [`clamp_probability`].
pub fn conditional_probability(op: &FittedOperator, b: &str, cond: Condition<'_>) -> Result<f64> {
    let c = op.coefficients(b)?;
    if !c.is_indicator || c.mean.len() != 1 {
        return Err(EncpError::InvalidParameter(format!("observable `{b}` is not a set indicator")));
    }
    let lift = match cond {
        Condition::Point(x) => {
            check_dim(op.model().x_dim(), x.len(), "conditional_probability: x")?;
            op.features_x(&DMatrix::from_row_slice(1, x.len(), x))?
        }
        Condition::Set(a) => {
            check_dim(op.fit_data().len(), a.len(), "conditioning set sample count")?;
            let ind = a.orbit_values(op.model().group())?;
            if ind.ncols() != 1 || !is_indicator(&ind) {
                return Err(EncpError::InvalidParameter("conditioning set is not an indicator".into()));
            }
            let mass = ind.sum() / ind.nrows() as f64;
            if mass == 0.0 {
                return Err(EncpError::EmptyConditioningSet);
            }
            ind.transpose() * &op.orbit_u / (ind.nrows() as f64 * mass)
        }
    };
    Ok(c.mean[0] + (lift * op.operator() * &c.coef)[(0, 0)])
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileOptions {
    pub n_bins: usize,
    /// Defaults to `[min - 3σ, max + 3σ]` of the fitting sample.
    pub range: Option<(f64, f64)>,
}

impl Default for QuantileOptions {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            range: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileEstimate {
    pub value: f64,
    /// The crossing fell outside the binned range and `value` is an edge.
    pub out_of_range: bool,
}

/// `[min - 3σ, max + 3σ]` of coordinate `j` of the fitting sample's `y`.
pub fn default_range(op: &FittedOperator, j: usize) -> Result<(f64, f64)> {
    let y = &op.fit_data().y;
    if j >= y.ncols() {
        return Err(EncpError::InvalidParameter(format!("response dim {j} out of range")));
    }
    let col = y.column(j);
    let n = col.len() as f64;
    let mean = col.mean();
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok((col.min() - 3.0 * sd, col.max() + 3.0 * sd))
}

/// Regressed conditional CDF of one response coordinate on a fixed grid:
/// the indicators of the nested sets `{y_j <= t_i}` share one coefficient
/// matrix so a query costs a single encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CcdfTable {
    dim: usize,
    edges: Vec<f64>,
    mean: DVector<f64>,
    /// `E Ê[v ⊗ (h - Ê h)]` with one column per edge.
    coef: DMatrix<f64>,
}

impl CcdfTable {
    pub fn new(op: &FittedOperator, dim: usize, opts: &QuantileOptions) -> Result<Self> {
        if opts.n_bins < 2 {
            return Err(EncpError::InvalidParameter(format!("n_bins must be >= 2, got {}", opts.n_bins)));
        }
        let (lo, hi) = match opts.range {
            Some(r) => r,
            None => default_range(op, dim)?,
        };
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(EncpError::InvalidParameter(format!("bad quantile range [{lo}, {hi}]")));
        }
        let edges: Vec<f64> = (0..=opts.n_bins)
            .map(|i| lo + (hi - lo) * i as f64 / opts.n_bins as f64)
            .collect();
        let rep_y = op.model().rep_y();
        let data = &op.fit_data().y;
        let n = data.nrows();
        let mut ind = DMatrix::zeros(n * rep_y.group().order(), edges.len());
        for g in rep_y.group().elements() {
            let moved = rep_y.act_rows(g, data)?;
            for (a, &yj) in moved.column(dim).iter().enumerate() {
                for (i, &t) in edges.iter().enumerate() {
                    if yj <= t {
                        ind[(g * n + a, i)] = 1.0;
                    }
                }
            }
        }
        let (mean, coef) = orbit_statistics(&op.orbit_v, &ind);
        Ok(Self {
            dim,
            edges,
            mean,
            coef: op.operator() * coef,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Unprojected estimates of `P(y_j <= t_i | x)`, one row per `x`.
    pub fn raw_ccdf(&self, op: &FittedOperator, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = op.features_x(xs)? * &self.coef;
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }

    /// [`Self::raw_ccdf`] clamped to `[0, 1]` and made nondecreasing by a
    /// running maximum.
    pub fn ccdf(&self, op: &FittedOperator, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut f = self.raw_ccdf(op, xs)?;
        let mut repair = 0.0_f64;
        for i in 0..f.nrows() {
            let mut row: Vec<f64> = f.row(i).iter().copied().collect();
            repair = repair.max(project_monotone(&mut row));
            f.set_row(i, &RowDVector::from_vec(row));
        }
        if repair > 0.0 {
            log::debug!("dim {}: monotone projection moved the CDF by up to {repair:.3e}", self.dim);
        }
        Ok(f)
    }

    pub fn quantiles(&self, op: &FittedOperator, xs: &DMatrix<f64>, alpha: f64) -> Result<Vec<QuantileEstimate>> {
        check_alpha(alpha)?;
        let f = self.ccdf(op, xs)?;
        Ok(f.row_iter()
            .map(|row| self.search(&row.iter().copied().collect::<Vec<_>>(), alpha))
            .collect())
    }

    /// First crossing of `alpha` with linear interpolation inside the bin.
    fn search(&self, cdf: &[f64], alpha: f64) -> QuantileEstimate {
        if cdf[0] >= alpha {
            return QuantileEstimate {
                value: self.edges[0],
                out_of_range: true,
            };
        }
        for i in 1..cdf.len() {
            if cdf[i] >= alpha {
                let (f0, f1) = (cdf[i - 1], cdf[i]);
                let (t0, t1) = (self.edges[i - 1], self.edges[i]);
                let value = t0 + (alpha - f0) / (f1 - f0) * (t1 - t0);
                return QuantileEstimate {
                    value,
                    out_of_range: false,
                };
            }
        }
        QuantileEstimate {
            value: *self.edges.last().expect("at least two edges"),
            out_of_range: true,
        }
    }
}

/// Clamps to `[0, 1]` and applies a running maximum in place. Returns the
/// largest change made by the running maximum.
pub fn project_monotone(values: &mut [f64]) -> f64 {
    let mut run = 0.0_f64;
    let mut moved = 0.0_f64;
    for v in values {
        let c = v.clamp(0.0, 1.0);
        if c < run {
            moved = moved.max(run - c);
        }
        run = run.max(c);
        *v = run;
    }
    moved
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(EncpError::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Conditional `alpha`-quantile of `y_j` given `x`.
pub fn quantile(op: &FittedOperator, x: &[f64], dim: usize, alpha: f64, opts: &QuantileOptions) -> Result<QuantileEstimate> {
    check_alpha(alpha)?;
    check_dim(op.model().x_dim(), x.len(), "quantile: x")?;
    let table = CcdfTable::new(op, dim, opts)?;
    let xs = DMatrix::from_row_slice(1, x.len(), x);
    Ok(table.quantiles(op, &xs, alpha)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryIndex {
    pub value: f64,
    /// Binomial standard error given the number of samples inside `A`.
    pub std_error: f64,
    pub in_set: usize,
}

/// Monte-Carlo estimate of `(1/(|G'|-1)) Σ_{g≠e} P(A ∩ g·A) / P(A)` over
/// the elements `subset` of the group acting through `action`.
pub fn symmetry_index<P>(xs: &DMatrix<f64>, action: &GroupRepresentation, subset: &[usize], in_a: P) -> Result<SymmetryIndex>
where
    P: Fn(&[f64]) -> bool,
{
    check_dim(action.dim(), xs.ncols(), "symmetry_index: sample dim")?;
    let group = action.group();
    let mut others: Vec<usize> = subset.iter().copied().filter(|&g| g != group.identity()).collect();
    others.sort_unstable();
    others.dedup();
    if let Some(&g) = others.iter().find(|&&g| g >= group.order()) {
        return Err(EncpError::InvalidParameter(format!("group element {g} out of range")));
    }
    if others.is_empty() {
        return Err(EncpError::InvalidParameter("symmetry index needs at least two group elements".into()));
    }
    let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
    let members: Vec<usize> = (0..xs.nrows()).filter(|&i| in_a(&row(xs, i))).collect();
    if members.is_empty() {
        return Err(EncpError::EmptyConditioningSet);
    }
    let inside = xs.select_rows(&members);
    let mut total = 0.0;
    for &g in &others {
        // x ∈ g·A exactly when g⁻¹·x ∈ A
        let moved = action.act_rows(group.inverse(g), &inside)?;
        let hits = (0..moved.nrows()).filter(|&i| in_a(&row(&moved, i))).count();
        total += hits as f64 / members.len() as f64;
    }
    let value = total / others.len() as f64;
    let m = members.len() as f64;
    Ok(SymmetryIndex {
        value,
        std_error: (value * (1.0 - value) / m).sqrt(),
        in_set: members.len(),
    })
}
