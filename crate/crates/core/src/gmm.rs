//! Symmetric Gaussian mixtures with closed-form densities, and the moons
//! benchmark.
//!
//! Each of `n_g` base Gaussians on `z = x ⊕ y` is copied along its group
//! orbit, `N(ρ_Z(g) μ, ρ_Z(g) Σ ρ_Z(g)ᵀ)`, and all `|G| n_g` copies carry the
//! weight `1 / (|G| n_g)`. Covariances are block diagonal, so within a
//! component `x` and `y` are independent and every marginal, conditional and
//! density ratio is a finite mixture evaluated in log space.

use crate::data::{DataSource, Dataset};
use crate::error::{check_dim, EncpError, Result};
use crate::group::{FiniteGroup, GroupRepresentation};
use crate::rng::{digest_hex, stream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;
use std::f64::consts::{PI, TAU};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MIN_EIGENVALUE: f64 = 1e-6;

/// One Gaussian factor `N(mean, L Lᵀ)`.
#[derive(Debug, Clone, PartialEq)]
struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| EncpError::InvalidParameter("covariance is not positive definite".into()))?
            .unpack();
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_norm = -0.5 * (mean.len() as f64 * LN_2PI + log_det);
        Ok(Self {
            mean,
            chol,
            log_norm,
        })
    }

    fn log_pdf(&self, v: &[f64]) -> f64 {
        let diff = DVector::from_iterator(v.len(), v.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let w = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * w.norm_squared()
    }

    fn std(&self, j: usize) -> f64 {
        self.chol.row(j).norm()
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.mean.len(), (0..self.mean.len()).map(|_| StandardNormal.sample(rng)));
        &self.mean + &self.chol * z
    }
}

/// `log Σ exp(v)` with the maximum factored out.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricGmmSpec {
    group: FiniteGroup,
    rep_x: GroupRepresentation,
    rep_y: GroupRepresentation,
    base_means: Vec<DVector<f64>>,
    base_covs: Vec<DMatrix<f64>>,
    source: Option<DataSource>,
    comp_x: Vec<Gaussian>,
    comp_y: Vec<Gaussian>,
}

/// Random symmetric mixture with `n_g` base components.
///
/// Means are `Unif(-2, 2)` and each covariance block is `A Aᵀ + 0.05 I` with
/// `A_ij ~ N(0, 1) / √dim`.
pub fn build_spec(
    rep_x: &GroupRepresentation,
    rep_y: &GroupRepresentation,
    n_g: usize,
    seed: u64,
) -> Result<SymmetricGmmSpec> {
    if n_g == 0 {
        return Err(EncpError::InvalidParameter("n_g must be at least 1".into()));
    }
    let (p, q) = (rep_x.dim(), rep_y.dim());
    let mut rng = stream(seed, "gmm-spec");
    let mut random_block = |dim: usize| -> DMatrix<f64> {
        let scale = (dim as f64).sqrt();
        let a = DMatrix::from_fn(dim, dim, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v / scale
        });
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.05
    };
    let mut means = Vec::with_capacity(n_g);
    let mut covs = Vec::with_capacity(n_g);
    for _ in 0..n_g {
        let cx = random_block(p);
        let cy = random_block(q);
        let mut cov = DMatrix::zeros(p + q, p + q);
        cov.view_mut((0, 0), (p, p)).copy_from(&cx);
        cov.view_mut((p, p), (q, q)).copy_from(&cy);
        covs.push(cov);
    }
    let mut rng = stream(seed, "gmm-spec-means");
    for _ in 0..n_g {
        means.push(DVector::from_fn(p + q, |_, _| rng.random_range(-2.0..2.0)));
    }
    let mut spec = SymmetricGmmSpec::from_base(rep_x, rep_y, means, covs)?;
    spec.source = Some(DataSource::Gmm {
        group: rep_x.group().label(),
        px: p,
        qy: q,
        n_g,
        seed,
    });
    Ok(spec)
}

impl SymmetricGmmSpec {
    /// Mixture from explicit base components; each covariance must be
    /// symmetric, block diagonal across the `x`/`y` split and have smallest
    /// eigenvalue at least `1e-6`.
    pub fn from_base(
        rep_x: &GroupRepresentation,
        rep_y: &GroupRepresentation,
        base_means: Vec<DVector<f64>>,
        base_covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if rep_x.group() != rep_y.group() {
            return Err(EncpError::InvalidParameter(
                "rep_x and rep_y must act by the same group".into(),
            ));
        }
        if base_means.is_empty() {
            return Err(EncpError::InvalidParameter("at least one base component is required".into()));
        }
        check_dim(base_means.len(), base_covs.len(), "one covariance per base mean")?;
        let (p, q) = (rep_x.dim(), rep_y.dim());
        let group = rep_x.group().clone();
        let mut comp_x = Vec::new();
        let mut comp_y = Vec::new();
        for (mean, cov) in base_means.iter().zip(&base_covs) {
            check_dim(p + q, mean.len(), "base mean dimension")?;
            check_dim(p + q, cov.nrows(), "base covariance rows")?;
            check_dim(p + q, cov.ncols(), "base covariance columns")?;
            if (cov - cov.transpose()).amax() > 1e-12 {
                return Err(EncpError::InvalidParameter("base covariance is not symmetric".into()));
            }
            if cov.view((0, p), (p, q)).amax() != 0.0 {
                return Err(EncpError::InvalidParameter(
                    "base covariance must be block diagonal across x and y".into(),
                ));
            }
            let min_eig = cov.clone().symmetric_eigenvalues().min();
            if min_eig < MIN_EIGENVALUE {
                return Err(EncpError::InvalidParameter(format!(
                    "base covariance has eigenvalue {min_eig:e} below {MIN_EIGENVALUE:e}"
                )));
            }
            let (mx, my) = (mean.rows(0, p).into_owned(), mean.rows(p, q).into_owned());
            let (cx, cy) = (
                cov.view((0, 0), (p, p)).into_owned(),
                cov.view((p, p), (q, q)).into_owned(),
            );
            for g in group.elements() {
                let (gx, gy) = (rep_x.matrix(g), rep_y.matrix(g));
                comp_x.push(Gaussian::new(gx * &mx, &(gx * &cx * gx.transpose()))?);
                comp_y.push(Gaussian::new(gy * &my, &(gy * &cy * gy.transpose()))?);
            }
        }
        Ok(Self {
            group,
            rep_x: rep_x.clone(),
            rep_y: rep_y.clone(),
            base_means,
            base_covs,
            source: None,
            comp_x,
            comp_y,
        })
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn rep_x(&self) -> &GroupRepresentation {
        &self.rep_x
    }

    pub fn rep_y(&self) -> &GroupRepresentation {
        &self.rep_y
    }

    pub fn x_dim(&self) -> usize {
        self.rep_x.dim()
    }

    pub fn y_dim(&self) -> usize {
        self.rep_y.dim()
    }

    pub fn base_means(&self) -> &[DVector<f64>] {
        &self.base_means
    }

    pub fn base_covs(&self) -> &[DMatrix<f64>] {
        &self.base_covs
    }

    /// `|G| n_g` orbit copies.
    pub fn num_components(&self) -> usize {
        self.comp_x.len()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.num_components() as f64
    }

    /// Means `(μ_x, μ_y)` of every orbit copy; copy `c * |G| + g` is base
    /// component `c` moved by `g`.
    pub fn component_means(&self) -> Vec<(DVector<f64>, DVector<f64>)> {
        self.comp_x
            .iter()
            .zip(&self.comp_y)
            .map(|(a, b)| (a.mean.clone(), b.mean.clone()))
            .collect()
    }

    pub fn source(&self) -> Option<&DataSource> {
        self.source.as_ref()
    }

    /// Digest of the generator config, or of the base parameters for
    /// hand-built specs.
    pub fn digest(&self) -> String {
        match &self.source {
            Some(src) => source_digest(src),
            None => {
                let mut bytes = self.group.label().into_bytes();
                for v in self.base_means.iter().flat_map(|m| m.iter()).chain(self.base_covs.iter().flat_map(|c| c.iter())) {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                digest_hex(&bytes)
            }
        }
    }

    fn log_weight(&self) -> f64 {
        -(self.num_components() as f64).ln()
    }

    /// `log N(x; μ_{x,c}, Σ_{x,c})` for every component.
    pub fn component_log_pdf_x(&self, x: &[f64]) -> Vec<f64> {
        self.comp_x.iter().map(|c| c.log_pdf(x)).collect()
    }

    pub fn component_log_pdf_y(&self, y: &[f64]) -> Vec<f64> {
        self.comp_y.iter().map(|c| c.log_pdf(y)).collect()
    }

    pub fn log_px(&self, x: &[f64]) -> f64 {
        self.log_weight() + log_sum_exp(&self.component_log_pdf_x(x))
    }

    pub fn log_py(&self, y: &[f64]) -> f64 {
        self.log_weight() + log_sum_exp(&self.component_log_pdf_y(y))
    }

    pub fn log_pxy(&self, x: &[f64], y: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .component_log_pdf_x(x)
            .iter()
            .zip(self.component_log_pdf_y(y))
            .map(|(a, b)| a + b)
            .collect();
        self.log_weight() + log_sum_exp(&terms)
    }

    /// `log κ(x, y) = log p_xy − log p_x − log p_y`.
    pub fn log_pmd_ratio(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.x_dim(), x.len(), "pmd_ratio x")?;
        check_dim(self.y_dim(), y.len(), "pmd_ratio y")?;
        Ok(ratio_from_tables(
            &self.component_log_pdf_x(x),
            &self.component_log_pdf_y(y),
            self.log_weight(),
        ))
    }

    /// `κ(x, y) = p_xy(x, y) / (p_x(x) p_y(y))`.
    pub fn pmd_ratio(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.log_pmd_ratio(x, y)?.exp())
    }

    /// `κ(x_a, y_b)` for every row `a` of `xs` and row `b` of `ys`.
    pub fn pmd_grid(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.x_dim(), xs.ncols(), "pmd grid x")?;
        check_dim(self.y_dim(), ys.ncols(), "pmd grid y")?;
        let tx: Vec<Vec<f64>> = rows(xs).iter().map(|x| self.component_log_pdf_x(x)).collect();
        let ty: Vec<Vec<f64>> = rows(ys).iter().map(|y| self.component_log_pdf_y(y)).collect();
        let lw = self.log_weight();
        Ok(DMatrix::from_fn(xs.nrows(), ys.nrows(), |a, b| {
            ratio_from_tables(&tx[a], &ty[b], lw).exp()
        }))
    }

    /// Posterior component probabilities given `x`.
    pub fn posterior_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.x_dim(), x.len(), "conditioning x")?;
        Ok(softmax(&self.component_log_pdf_x(x)))
    }

    /// `E[y | x] = Σ_c w_c(x) μ_{y,c}`.
    pub fn conditional_mean(&self, x: &[f64]) -> Result<DVector<f64>> {
        let w = self.posterior_weights(x)?;
        Ok(self
            .comp_y
            .iter()
            .zip(&w)
            .fold(DVector::zeros(self.y_dim()), |acc, (c, wc)| acc + &c.mean * *wc))
    }

    /// `P(y_j ≤ t | x)`.
    pub fn conditional_cdf(&self, x: &[f64], j: usize, t: f64) -> Result<f64> {
        if j >= self.y_dim() {
            return Err(EncpError::InvalidParameter(format!(
                "y coordinate {j} out of range for dimension {}",
                self.y_dim()
            )));
        }
        let w = self.posterior_weights(x)?;
        let p: f64 = self
            .comp_y
            .iter()
            .zip(&w)
            .map(|(c, wc)| wc * std_normal_cdf((t - c.mean[j]) / c.std(j)))
            .sum();
        Ok(p.clamp(0.0, 1.0))
    }

    /// `n` i.i.d. draws from the joint.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(EncpError::InvalidParameter("sample size must be at least 1".into()));
        }
        let mut rng = stream(seed, "gmm-sample");
        let (p, q) = (self.x_dim(), self.y_dim());
        let mut x = DMatrix::zeros(n, p);
        let mut y = DMatrix::zeros(n, q);
        for i in 0..n {
            let c = rng.random_range(0..self.num_components());
            x.row_mut(i).copy_from(&self.comp_x[c].draw(&mut rng).transpose());
            y.row_mut(i).copy_from(&self.comp_y[c].draw(&mut rng).transpose());
        }
        Dataset::new(x, y, seed, self.digest())
    }

    /// `n` draws from `p_x` alone.
    pub fn sample_x(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, "gmm-sample-x");
        let mut x = DMatrix::zeros(n, self.x_dim());
        for i in 0..n {
            let c = rng.random_range(0..self.num_components());
            x.row_mut(i).copy_from(&self.comp_x[c].draw(&mut rng).transpose());
        }
        x
    }

    /// `n` draws from `p_y` alone.
    pub fn sample_y(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, "gmm-sample-y");
        let mut y = DMatrix::zeros(n, self.y_dim());
        for i in 0..n {
            let c = rng.random_range(0..self.num_components());
            y.row_mut(i).copy_from(&self.comp_y[c].draw(&mut rng).transpose());
        }
        y
    }

    /// `n` draws from `p(y | x)`.
    pub fn sample_y_given_x(&self, x: &[f64], n: usize, seed: u64) -> Result<DMatrix<f64>> {
        let w = self.posterior_weights(x)?;
        let mut cumulative = Vec::with_capacity(w.len());
        let mut acc = 0.0;
        for wc in &w {
            acc += wc;
            cumulative.push(acc);
        }
        let mut rng = stream(seed, "gmm-sample-conditional");
        let mut y = DMatrix::zeros(n, self.y_dim());
        for i in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let c = cumulative.partition_point(|&cw| cw < u).min(w.len() - 1);
            y.row_mut(i).copy_from(&self.comp_y[c].draw(&mut rng).transpose());
        }
        Ok(y)
    }
}

fn ratio_from_tables(lx: &[f64], ly: &[f64], log_weight: f64) -> f64 {
    let joint: Vec<f64> = lx.iter().zip(ly).map(|(a, b)| a + b).collect();
    let v = log_sum_exp(&joint) - log_weight - log_sum_exp(lx) - log_sum_exp(ly);
    if v.is_nan() {
        // both marginals underflowed; the ratio is uninformative there
        0.0
    } else {
        v
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn source_digest(source: &DataSource) -> String {
    digest_hex(&serde_json::to_vec(source).expect("data source serializes"))
}

/// The heteroskedastic two-moons benchmark with scale `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoonsSpec {
    beta: f64,
}

pub const MOONS_X_RANGE: (f64, f64) = (0.8, 3.2);
pub const MOONS_R_RANGE: (f64, f64) = (-0.1, 0.1);

impl MoonsSpec {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(EncpError::InvalidParameter(format!("moons beta must be positive, got {beta}")));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for MoonsSpec {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

/// `y` for covariate `x` and latents `(z, φ, r)`.
pub fn moons_response(beta: f64, x: f64, z: f64, phi: f64, r: f64) -> [f64; 2] {
    [
        z / (beta * x) + r * phi.cos(),
        0.5 * (1.0 - z.cos()) + r * phi.sin() + x.sin(),
    ]
}

/// `E[y | x]`: the noise terms average out, leaving `(0, 1/2 + sin x)`.
pub fn moons_conditional_mean(x: f64) -> [f64; 2] {
    [0.0, 0.5 + x.sin()]
}

pub fn sample_moons(spec: MoonsSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(EncpError::InvalidParameter("sample size must be at least 1".into()));
    }
    let mut rng = stream(seed, "moons-sample");
    let mut x = DMatrix::zeros(n, 1);
    let mut y = DMatrix::zeros(n, 2);
    for i in 0..n {
        let xi = rng.random_range(MOONS_X_RANGE.0..MOONS_X_RANGE.1);
        let z = rng.random_range(-PI..PI);
        let phi = rng.random_range(0.0..TAU);
        let r = rng.random_range(MOONS_R_RANGE.0..MOONS_R_RANGE.1);
        let [y0, y1] = moons_response(spec.beta, xi, z, phi, r);
        x[(i, 0)] = xi;
        y[(i, 0)] = y0;
        y[(i, 1)] = y1;
    }
    let source = DataSource::Moons {
        beta: spec.beta,
        seed,
    };
    Dataset::new(x, y, seed, source_digest(&source))
}

/// `C2` acting trivially on `x` and by `y ↦ (−y₀, y₁)` on `y`.
pub fn moons_representations() -> (GroupRepresentation, GroupRepresentation) {
    let group = FiniteGroup::from_label("C2").expect("C2 is supported");
    let rep_x = GroupRepresentation::trivial(&group, 1);
    let flip = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0]));
    let rep_y = GroupRepresentation::new(group, vec![DMatrix::identity(2, 2), flip])
        .expect("reflection is a representation");
    (rep_x, rep_y)
}
