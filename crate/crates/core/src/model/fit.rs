use super::{copies, row_vec, BlockLayout, EncpModel};
use crate::data::Dataset;
use crate::error::{check_dim, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::collections::BTreeMap;

/// Whitening is skipped for blocks whose covariance is worse conditioned.
pub const MAX_CONDITION: f64 = 1e10;

/// Second moment of one feature block averaged over the group orbit of every
/// sample: `Σ_i (M_i / d) ⊗ E_i` with `M_i = mean_a A_a E_i A_aᵀ`.
///
/// Features are centered at the G-invariant mean, so this is the G-invariant
/// covariance of the block.
pub fn orbit_second_moment(f: &DMatrix<f64>, layout: &BlockLayout) -> DMatrix<f64> {
    let (m, d) = (layout.multiplicity(), layout.dim());
    let n = f.nrows();
    let mut out = DMatrix::zeros(m * d, m * d);
    for e in &layout.commutant {
        let mut acc = DMatrix::<f64>::zeros(m, m);
        for a in 0..n {
            let am = copies(&row_vec(f, a, layout.block.offset, m * d), m, d);
            acc += &am * e * am.transpose();
        }
        acc /= (n * d) as f64;
        out += acc.kronecker(e);
    }
    out
}

/// G-invariant statistics of one registered observable `h`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Coefficients {
    /// `Ê_y[h]`.
    pub mean: DVector<f64>,
    /// `Ê_y[v ⊗ (h - Ê_y[h])]`, `r × dim h`.
    pub coef: DMatrix<f64>,
    pub is_indicator: bool,
}

/// A trained model frozen together with statistics of its features on a
/// fitting sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedOperator {
    model: EncpModel,
    fit: Dataset,
    /// Whitened features of every orbit point `g·x_n`, row `g * N + n`.
    pub(crate) orbit_u: DMatrix<f64>,
    pub(crate) orbit_v: DMatrix<f64>,
    pub(crate) observables: BTreeMap<String, Coefficients>,
    cov_x: Vec<DMatrix<f64>>,
    cov_y: Vec<DMatrix<f64>>,
    whiten_x: Vec<DMatrix<f64>>,
    whiten_y: Vec<DMatrix<f64>>,
    whitened: Vec<(bool, bool)>,
    op_blocks: Vec<DMatrix<f64>>,
    singular_values: Vec<Vec<f64>>,
}

/// `(C^{-1/2}, C^{1/2})`, or `None` when `C` is too badly conditioned.
fn inverse_sqrt(c: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return None;
    }
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * v.transpose();
    let sqrt = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
    Some((inv, sqrt))
}

/// Freezes `model`, sets its centers to the G-invariant means on `data`,
/// computes per-block orbit-averaged covariances and, when `whiten` is set,
/// whitens each block and conjugates the operator accordingly. Singular
/// values of every operator block are computed last.
pub fn fit_statistics(model: &EncpModel, data: &Dataset, whiten: bool) -> Result<FittedOperator> {
    check_dim(model.x_dim(), data.x_dim(), "fit data x")?;
    check_dim(model.y_dim(), data.y_dim(), "fit data y")?;
    let mut model = model.clone();
    model.refresh_centers(&data.x, &data.y)?;
    let u = model.features_x(&data.x)?;
    let v = model.features_y(&data.y)?;
    let mut fitted = FittedOperator {
        cov_x: Vec::new(),
        cov_y: Vec::new(),
        whiten_x: Vec::new(),
        whiten_y: Vec::new(),
        whitened: Vec::new(),
        op_blocks: Vec::new(),
        singular_values: Vec::new(),
        model: model.clone(),
        fit: data.clone(),
        orbit_u: DMatrix::zeros(0, 0),
        orbit_v: DMatrix::zeros(0, 0),
        observables: BTreeMap::new(),
    };
    for (o, l) in model.blocks().iter().zip(model.layout()) {
        let size = l.block.size();
        let eye = DMatrix::<f64>::identity(size, size);
        let cx = orbit_second_moment(&u, l);
        let cy = orbit_second_moment(&v, l);
        let pick = |c: &DMatrix<f64>, side: &str| -> (DMatrix<f64>, DMatrix<f64>, bool) {
            if !whiten {
                return (eye.clone(), eye.clone(), false);
            }
            match inverse_sqrt(c) {
                Some((inv, sqrt)) => (inv, sqrt, true),
                None => {
                    log::warn!(
                        "block {} ({side}): covariance condition number above {MAX_CONDITION:e}; whitening skipped",
                        l.block.irrep_id
                    );
                    (eye.clone(), eye.clone(), false)
                }
            }
        };
        let (wx, sx, okx) = pick(&cx, "x");
        let (wy, sy, oky) = pick(&cy, "y");
        let ok = o.kronecker(&DMatrix::<f64>::identity(l.dim(), l.dim()));
        let op = &sx * ok * &sy;
        let mut sv: Vec<f64> = op.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        fitted.cov_x.push(cx);
        fitted.cov_y.push(cy);
        fitted.whiten_x.push(wx);
        fitted.whiten_y.push(wy);
        fitted.whitened.push((okx, oky));
        fitted.op_blocks.push(op);
        fitted.singular_values.push(sv);
    }
    let (n, r) = (data.len(), model.latent_dim());
    let g_count = model.group().order();
    fitted.orbit_u = DMatrix::zeros(g_count * n, r);
    fitted.orbit_v = DMatrix::zeros(g_count * n, r);
    for g in model.group().elements() {
        let u = fitted.features_x(&model.rep_x().act_rows(g, &data.x)?)?;
        let v = fitted.features_y(&model.rep_y().act_rows(g, &data.y)?)?;
        fitted.orbit_u.rows_mut(g * n, n).copy_from(&u);
        fitted.orbit_v.rows_mut(g * n, n).copy_from(&v);
    }
    Ok(fitted)
}

impl FittedOperator {
    pub fn model(&self) -> &EncpModel {
        &self.model
    }

    /// The sample the statistics were computed on.
    pub fn fit_data(&self) -> &Dataset {
        &self.fit
    }

    pub fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    pub fn layout(&self) -> &[BlockLayout] {
        self.model.layout()
    }

    /// Orbit-averaged covariances of the unwhitened features, per block.
    pub fn covariances(&self) -> (&[DMatrix<f64>], &[DMatrix<f64>]) {
        (&self.cov_x, &self.cov_y)
    }

    /// Whether each block's `x` and `y` features were whitened.
    pub fn whitened(&self) -> &[(bool, bool)] {
        &self.whitened
    }

    /// Singular values of each operator block in decreasing order.
    pub fn singular_values(&self) -> &[Vec<f64>] {
        &self.singular_values
    }

    pub fn operator_blocks(&self) -> &[DMatrix<f64>] {
        &self.op_blocks
    }

    fn apply(&self, f: DMatrix<f64>, w: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut out = f.clone();
        for (l, wk) in self.layout().iter().zip(w) {
            let (off, size) = (l.block.offset, l.block.size());
            let block = f.columns(off, size) * wk;
            out.columns_mut(off, size).copy_from(&block);
        }
        out
    }

    /// Whitened features of the `x` encoder.
    pub fn features_x(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.apply(self.model.features_x(xs)?, &self.whiten_x))
    }

    pub fn features_y(&self, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.apply(self.model.features_y(ys)?, &self.whiten_y))
    }

    /// Dense operator in whitened coordinates.
    pub fn operator(&self) -> DMatrix<f64> {
        let r = self.latent_dim();
        let mut e = DMatrix::zeros(r, r);
        for (l, op) in self.layout().iter().zip(&self.op_blocks) {
            let (off, size) = (l.block.offset, l.block.size());
            e.view_mut((off, off), (size, size)).copy_from(op);
        }
        e
    }

    pub fn kernel_grid(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let u = self.features_x(xs)?;
        let v = self.features_y(ys)?;
        Ok((u * self.operator() * v.transpose()).add_scalar(1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::model;
    use crate::rng::stream;
    use nalgebra::DVector;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn dataset(n: usize, p: usize, q: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, "fit-test");
        Dataset::new(
            DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal)),
            DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal)),
            seed,
            String::new(),
        )
        .unwrap()
    }

    #[test]
    fn orbit_moment_matches_explicit_orbit_sum() {
        for label in ["C3", "D3", "C4", "C2xC2"] {
            let m = model(label, 2, 2, None, 1);
            let data = dataset(40, 2, 2, 2);
            let u = m.features_x(&data.x).unwrap();
            for l in m.layout() {
                let size = l.block.size();
                let mut c = DMatrix::<f64>::zeros(size, size);
                for g in m.group().elements() {
                    let f = m.features_x(&m.rep_x().act_rows(g, &data.x).unwrap()).unwrap();
                    let fb = f.columns(l.block.offset, size);
                    c += fb.transpose() * fb;
                }
                c /= (40 * m.group().order()) as f64;
                assert!((orbit_second_moment(&u, l) - c).amax() < 1e-12, "{label}");
            }
        }
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let m = model("D3", 2, 2, Some(12), 3);
        let data = dataset(300, 2, 2, 4);
        let fit = fit_statistics(&m, &data, true).unwrap();
        let u = fit.features_x(&data.x).unwrap();
        let v = fit.features_y(&data.y).unwrap();
        for (k, l) in fit.layout().iter().enumerate() {
            let eye = DMatrix::<f64>::identity(l.block.size(), l.block.size());
            if fit.whitened()[k].0 {
                assert!((orbit_second_moment(&u, l) - &eye).amax() < 1e-8);
            }
            if fit.whitened()[k].1 {
                assert!((orbit_second_moment(&v, l) - &eye).amax() < 1e-8);
            }
        }
        // whitening is a reparametrization of the same kernel
        let xs = data.x.rows(0, 5).into_owned();
        let ys = data.y.rows(0, 7).into_owned();
        let mut refreshed = m.clone();
        refreshed.refresh_centers(&data.x, &data.y).unwrap();
        let a = fit.kernel_grid(&xs, &ys).unwrap();
        let b = refreshed.kernel_grid(&xs, &ys).unwrap();
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn singular_values_repeat_with_irrep_dim() {
        let m = model("D6", 2, 2, Some(24), 5);
        let fit = fit_statistics(&m, &dataset(200, 2, 2, 6), true).unwrap();
        for (sv, l) in fit.singular_values().iter().zip(fit.layout()) {
            assert_eq!(sv.len(), l.block.size());
            for chunk in sv.chunks(l.dim()) {
                assert!(chunk.iter().all(|s| (s - chunk[0]).abs() < 1e-9 * chunk[0].max(1.0)), "{sv:?}");
            }
        }
    }

    #[test]
    fn trivial_group_uses_plain_statistics() {
        let m = model("trivial", 2, 2, Some(3), 7);
        let data = dataset(50, 2, 2, 8);
        let fit = fit_statistics(&m, &data, false).unwrap();
        let phi = m.enc_x().backbone(&data.x).unwrap();
        let mean = DVector::from_iterator(3, phi.column_iter().map(|c| c.mean()));
        assert!((fit.model().enc_x().center() - &mean).amax() < 1e-12);
        let mut centered = phi.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / 50.0;
        assert!((&fit.covariances().0[0] - cov).amax() < 1e-12);
    }

    #[test]
    fn degenerate_features_skip_whitening() {
        let m = model("C2", 1, 1, None, 9);
        // every sample identical: zero covariance
        let data = Dataset::new(DMatrix::from_element(10, 1, 0.5), DMatrix::from_element(10, 1, -0.2), 0, String::new()).unwrap();
        let fit = fit_statistics(&m, &data, true).unwrap();
        assert!(fit.whitened().iter().all(|w| !w.0 && !w.1));
    }
}
