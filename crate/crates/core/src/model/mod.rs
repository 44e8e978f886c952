//! The bilinear G-invariant kernel model
//! `κ_θ(x, y) = 1 + Σ_k u^(k)(x)ᵀ (O^(k) ⊗ I_{d_k}) v^(k)(y)`
//! and its disentangled contrastive loss.
//!
//! With the trivial group there is a single block and the model is the plain
//! (symmetry-agnostic) bilinear model.

mod checkpoint;
pub(crate) mod fit;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use fit::{fit_statistics, orbit_second_moment, FittedOperator};
pub use train::{train, EpochRecord, TrainConfig, TrainHistory};

use crate::equivariant::EquivariantEncoder;
use crate::error::{check_dim, EncpError, Result};
use crate::group::{real_irreps, FiniteGroup, GroupRepresentation, IsoBlock};
use crate::nn::{flatten_layers, Activation};
use crate::rng::stream;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Smallest batch accepted by the loss.
pub const MIN_BATCH: usize = 4;

/// Encoder architecture shared by the `x` and `y` networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_layers: usize,
    /// Rounded up to a multiple of `|G|`.
    pub hidden_width: usize,
    /// Latent dimension; defaults to `4 |G|`.
    pub r: Option<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: 64,
            r: None,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self, group: &FiniteGroup) -> usize {
        self.r.unwrap_or(4 * group.order())
    }

    pub fn hidden_dims(&self, group: &FiniteGroup) -> Vec<usize> {
        let order = group.order();
        let width = self.hidden_width.div_ceil(order).max(1) * order;
        vec![width; self.hidden_layers]
    }
}

/// One isotypic block of the latent space with the commutant basis of its
/// irrep (`[I]` or `[I, J]`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub block: IsoBlock,
    pub commutant: Vec<DMatrix<f64>>,
    pub trivial: bool,
}

impl BlockLayout {
    pub fn multiplicity(&self) -> usize {
        self.block.multiplicity
    }

    pub fn dim(&self) -> usize {
        self.block.dim
    }
}

fn block_layouts(group: &FiniteGroup, blocks: &[IsoBlock]) -> Result<Vec<BlockLayout>> {
    let irreps = real_irreps(group)?;
    blocks
        .iter()
        .map(|b| {
            let irrep = irreps
                .get(b.irrep_id)
                .ok_or_else(|| EncpError::InvalidParameter(format!("unknown irrep id {}", b.irrep_id)))?;
            Ok(BlockLayout {
                block: *b,
                commutant: irrep.commutant_basis(),
                trivial: irrep.is_trivial(),
            })
        })
        .collect()
}

/// Values of the loss terms on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Unregularized contrastive part, summed over blocks.
    pub l0: f64,
    pub l0_blocks: Vec<f64>,
    /// Orthonormality deviation per block, `x` and `y` parts summed.
    pub omega_blocks: Vec<f64>,
    pub centering: f64,
}

/// Loss gradients with respect to the features and the operator blocks.
#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub du: DMatrix<f64>,
    pub dv: DMatrix<f64>,
    pub d_blocks: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncpModel {
    enc_x: EquivariantEncoder,
    enc_y: EquivariantEncoder,
    blocks: Vec<DMatrix<f64>>,
    layout: Vec<BlockLayout>,
    config: ModelConfig,
}

impl EncpModel {
    /// Random model; operator blocks start at small Gaussian values.
    pub fn new(
        rep_x: &GroupRepresentation,
        rep_y: &GroupRepresentation,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        if rep_x.group() != rep_y.group() {
            return Err(EncpError::InvalidParameter(
                "x and y representations must share a group".into(),
            ));
        }
        let group = rep_x.group();
        let r = config.latent_dim(group);
        let hidden = config.hidden_dims(group);
        let enc_x = EquivariantEncoder::new(
            rep_x.clone(),
            &hidden,
            r,
            config.activation,
            &mut stream(seed, "init-encoder-x"),
        )?;
        let enc_y = EquivariantEncoder::new(
            rep_y.clone(),
            &hidden,
            r,
            config.activation,
            &mut stream(seed, "init-encoder-y"),
        )?;
        let mut rng = stream(seed, "init-operator");
        let blocks = enc_x
            .iso()
            .blocks()
            .iter()
            .map(|b| {
                let m = b.multiplicity;
                let scale = 0.1 / (m as f64).sqrt();
                DMatrix::from_fn(m, m, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        Self::from_parts(enc_x, enc_y, blocks, config.clone())
    }

    pub fn from_parts(
        enc_x: EquivariantEncoder,
        enc_y: EquivariantEncoder,
        blocks: Vec<DMatrix<f64>>,
        config: ModelConfig,
    ) -> Result<Self> {
        if enc_x.group() != enc_y.group() {
            return Err(EncpError::InvalidParameter("encoders act by different groups".into()));
        }
        if enc_x.iso().blocks() != enc_y.iso().blocks() {
            return Err(EncpError::InvalidParameter(
                "encoders must share isotypic multiplicities".into(),
            ));
        }
        let layout = block_layouts(enc_x.group(), enc_x.iso().blocks())?;
        check_dim(layout.len(), blocks.len(), "one operator block per isotypic type")?;
        for (b, l) in blocks.iter().zip(&layout) {
            check_dim(l.multiplicity(), b.nrows(), "operator block rows")?;
            check_dim(l.multiplicity(), b.ncols(), "operator block columns")?;
        }
        Ok(Self {
            enc_x,
            enc_y,
            blocks,
            layout,
            config,
        })
    }

    pub fn group(&self) -> &FiniteGroup {
        self.enc_x.group()
    }

    pub fn rep_x(&self) -> &GroupRepresentation {
        self.enc_x.input_rep()
    }

    pub fn rep_y(&self) -> &GroupRepresentation {
        self.enc_y.input_rep()
    }

    pub fn x_dim(&self) -> usize {
        self.enc_x.input_dim()
    }

    pub fn y_dim(&self) -> usize {
        self.enc_y.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_x.output_dim()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn enc_x(&self) -> &EquivariantEncoder {
        &self.enc_x
    }

    pub fn enc_y(&self) -> &EquivariantEncoder {
        &self.enc_y
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn layout(&self) -> &[BlockLayout] {
        &self.layout
    }

    pub fn set_blocks(&mut self, blocks: Vec<DMatrix<f64>>) -> Result<()> {
        check_dim(self.blocks.len(), blocks.len(), "operator block count")?;
        for (b, l) in blocks.iter().zip(&self.layout) {
            check_dim(l.multiplicity(), b.nrows(), "operator block rows")?;
            check_dim(l.multiplicity(), b.ncols(), "operator block columns")?;
        }
        self.blocks = blocks;
        Ok(())
    }

    /// Centered isotypic features `u(x)`, one row per input row.
    pub fn features_x(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.enc_x.encode_batch(xs)
    }

    pub fn features_y(&self, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.enc_y.encode_batch(ys)
    }

    /// Dense `E_θ = ⊕_k O^(k) ⊗ I_{d_k}`.
    pub fn operator_matrix(&self) -> DMatrix<f64> {
        let r = self.latent_dim();
        let mut e = DMatrix::zeros(r, r);
        for (o, l) in self.blocks.iter().zip(&self.layout) {
            let size = l.block.size();
            e.view_mut((l.block.offset, l.block.offset), (size, size))
                .copy_from(&o.kronecker(&DMatrix::<f64>::identity(l.dim(), l.dim())));
        }
        e
    }

    /// `κ_θ(x_a, y_b)` for every row pair.
    pub fn kernel_grid(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let u = self.features_x(xs)?;
        let v = self.features_y(ys)?;
        Ok((u * self.operator_matrix() * v.transpose()).add_scalar(1.0))
    }

    pub fn kernel_eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.x_dim(), x.len(), "kernel x")?;
        check_dim(self.y_dim(), y.len(), "kernel y")?;
        let xs = DMatrix::from_row_slice(1, x.len(), x);
        let ys = DMatrix::from_row_slice(1, y.len(), y);
        Ok(self.kernel_grid(&xs, &ys)?[(0, 0)])
    }

    /// Resets both encoder centers to the G-invariant means on the given data.
    pub fn refresh_centers(&mut self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<()> {
        self.enc_x.refresh_center(xs)?;
        self.enc_y.refresh_center(ys)
    }

    pub fn set_centers(&mut self, cx: DVector<f64>, cy: DVector<f64>) -> Result<()> {
        self.enc_x.set_center(cx)?;
        self.enc_y.set_center(cy)
    }

    pub fn num_params(&self) -> usize {
        self.enc_x.num_params() + self.enc_y.num_params() + self.blocks.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Encoder `x`, encoder `y`, then the operator blocks (column-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.enc_x.flatten();
        out.extend(self.enc_y.flatten());
        for b in &self.blocks {
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    /// Loads flat parameters; encoder weights are projected on load.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_params(), flat.len(), "flat model parameters")?;
        let nx = self.enc_x.num_params();
        let ny = self.enc_y.num_params();
        self.enc_x.assign_flat(&flat[..nx])?;
        self.enc_y.assign_flat(&flat[nx..nx + ny])?;
        let mut pos = nx + ny;
        for b in &mut self.blocks {
            let len = b.len();
            b.as_mut_slice().copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        Ok(())
    }

    /// Loss value and its gradient with respect to [`flatten`](Self::flatten).
    pub fn empirical_loss(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>, gamma: f64) -> Result<(LossTerms, Vec<f64>)> {
        self.check_batch(xs, ys)?;
        let (u, cache_x) = self.enc_x.encode_cached(xs)?;
        let (v, cache_y) = self.enc_y.encode_cached(ys)?;
        let (terms, grads) = structured_loss(&u, &v, &self.blocks, &self.layout, gamma, true);
        let grads = grads.expect("requested");
        let mut flat = flatten_layers(&self.enc_x.backward(&cache_x, &grads.du)?);
        flat.extend(flatten_layers(&self.enc_y.backward(&cache_y, &grads.dv)?));
        for g in &grads.d_blocks {
            flat.extend_from_slice(g.as_slice());
        }
        Ok((terms, flat))
    }

    /// Loss value only.
    pub fn loss_terms(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>, gamma: f64) -> Result<LossTerms> {
        self.check_batch(xs, ys)?;
        let u = self.features_x(xs)?;
        let v = self.features_y(ys)?;
        Ok(structured_loss(&u, &v, &self.blocks, &self.layout, gamma, false).0)
    }

    fn check_batch(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<()> {
        check_dim(xs.nrows(), ys.nrows(), "batch x/y rows")?;
        check_dim(self.x_dim(), xs.ncols(), "batch x columns")?;
        check_dim(self.y_dim(), ys.ncols(), "batch y columns")?;
        if xs.nrows() < MIN_BATCH {
            return Err(EncpError::BatchTooSmall {
                min: MIN_BATCH,
                got: xs.nrows(),
            });
        }
        Ok(())
    }
}

/// `m x d` matrix of copies for one sample: row `s` is copy `s`.
fn copies(row: &[f64], m: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, d, row)
}

fn row_vec(f: &DMatrix<f64>, a: usize, start: usize, len: usize) -> Vec<f64> {
    (start..start + len).map(|c| f[(a, c)]).collect()
}

/// Unbiased orbit-averaged estimate of `‖C^(k) − I‖²_F` for one block of
/// features, where `C^(k)` is the second moment of the block averaged over
/// the group orbit of every sample. Returns the value and its gradient with
/// respect to the block features.
///
/// With `A_a` the `m x d` copy matrix of sample `a` and `E_i` the commutant
/// basis, the orbit average is `Σ_i (M_i / d) ⊗ E_i` with
/// `M_i = mean_a A_a E_i A_aᵀ`. Squared norms of `M_i` are replaced by their
/// distinct-pair U-statistics.
pub fn orbit_omega(
    f: &DMatrix<f64>,
    layout: &BlockLayout,
    need_grad: bool,
) -> (f64, Option<DMatrix<f64>>) {
    let (m, d) = (layout.multiplicity(), layout.dim());
    let (n, off) = (f.nrows(), layout.block.offset);
    let nf = n as f64;
    let pair_norm = d as f64 * nf * (nf - 1.0);
    let a_mats: Vec<DMatrix<f64>> = (0..n).map(|a| copies(&row_vec(f, a, off, m * d), m, d)).collect();
    let mut value = d as f64 * m as f64;
    let mut grads = need_grad.then(|| vec![DMatrix::<f64>::zeros(m, d); n]);
    for (i, e) in layout.commutant.iter().enumerate() {
        let p: Vec<DMatrix<f64>> = a_mats.iter().map(|a| a * e * a.transpose()).collect();
        let s = p.iter().fold(DMatrix::zeros(m, m), |acc, pa| acc + pa);
        let diag_sq: f64 = p.iter().map(|pa| pa.norm_squared()).sum();
        value += (s.norm_squared() - diag_sq) / pair_norm;
        if i == 0 {
            value -= 2.0 * s.trace() / nf;
        }
        if let Some(g) = grads.as_mut() {
            for (a, ga) in a_mats.iter().zip(g.iter_mut()) {
                let pa = a * e * a.transpose();
                let num = (&s - &pa) * a * e.transpose() + (s.transpose() - pa.transpose()) * a * e;
                *ga += num * (2.0 / pair_norm);
                if i == 0 {
                    *ga -= a * (4.0 / nf);
                }
            }
        }
    }
    let grad = grads.map(|g| {
        let mut out = DMatrix::zeros(n, f.ncols());
        for (a, ga) in g.iter().enumerate() {
            for s in 0..m {
                for j in 0..d {
                    out[(a, off + s * d + j)] = ga[(s, j)];
                }
            }
        }
        out
    });
    (value, grad)
}

/// The disentangled loss on precomputed features:
/// `Σ_k [L0^(k) + γ Ω^(k)] + 2γ (‖ū^(1)‖² + ‖v̄^(1)‖²)` with
/// `L0^(k) = −(2/N) Σ_n κ^(k)_nn + (1/(N(N−1))) Σ_{a≠b} [(κ^(k)_ab)² + 2 κ^(k)_ab]`.
///
/// The linear pair term is the cross term of `E_x E_y κ_θ²`. It vanishes for
/// centered features but keeps features that drift away from a stale center
/// from being rewarded for a constant offset.
pub fn structured_loss(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    blocks: &[DMatrix<f64>],
    layout: &[BlockLayout],
    gamma: f64,
    need_grad: bool,
) -> (LossTerms, Option<FeatureGrads>) {
    let n = u.nrows();
    let nf = n as f64;
    let mut l0_blocks = Vec::with_capacity(layout.len());
    let mut omega_blocks = Vec::with_capacity(layout.len());
    let mut grads = need_grad.then(|| FeatureGrads {
        du: DMatrix::zeros(n, u.ncols()),
        dv: DMatrix::zeros(n, v.ncols()),
        d_blocks: Vec::with_capacity(layout.len()),
    });
    let mut centering = 0.0;
    for (o, l) in blocks.iter().zip(layout) {
        let (off, size, d) = (l.block.offset, l.block.size(), l.dim());
        let ub = u.columns(off, size).into_owned();
        let vb = v.columns(off, size).into_owned();
        let ok = o.kronecker(&DMatrix::<f64>::identity(d, d));
        let tv = &vb * ok.transpose();
        let k = &ub * tv.transpose();
        let trace = k.trace();
        let off_sq = k.norm_squared() - k.diagonal().norm_squared();
        let off_sum = k.sum() - trace;
        l0_blocks.push(-2.0 * trace / nf + (off_sq + 2.0 * off_sum) / (nf * (nf - 1.0)));

        let (om_x, gx) = orbit_omega(u, l, need_grad);
        let (om_y, gy) = orbit_omega(v, l, need_grad);
        omega_blocks.push(om_x + om_y);

        if let Some(g) = grads.as_mut() {
            let mut gk = k.add_scalar(1.0) * (2.0 / (nf * (nf - 1.0)));
            gk.fill_diagonal(-2.0 / nf);
            let du = &gk * &tv;
            let dv = gk.transpose() * &ub * &ok;
            let big = ub.transpose() * &gk * &vb;
            let m = l.multiplicity();
            let d_o = DMatrix::from_fn(m, m, |s, t| (0..d).map(|j| big[(s * d + j, t * d + j)]).sum());
            let mut du_view = g.du.columns_mut(off, size);
            du_view += du;
            let mut dv_view = g.dv.columns_mut(off, size);
            dv_view += dv;
            g.du += gx.expect("requested") * gamma;
            g.dv += gy.expect("requested") * gamma;
            g.d_blocks.push(d_o);
        }

        if l.trivial {
            let ubar = DVector::from_iterator(size, ub.column_iter().map(|c| c.sum() / nf));
            let vbar = DVector::from_iterator(size, vb.column_iter().map(|c| c.sum() / nf));
            centering += 2.0 * gamma * (ubar.norm_squared() + vbar.norm_squared());
            if let Some(g) = grads.as_mut() {
                for a in 0..n {
                    for c in 0..size {
                        g.du[(a, off + c)] += 4.0 * gamma * ubar[c] / nf;
                        g.dv[(a, off + c)] += 4.0 * gamma * vbar[c] / nf;
                    }
                }
            }
        }
    }
    let l0: f64 = l0_blocks.iter().sum();
    let total = l0 + gamma * omega_blocks.iter().sum::<f64>() + centering;
    (
        LossTerms {
            total,
            l0,
            l0_blocks,
            omega_blocks,
            centering,
        },
        grads,
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::group::data_representation;

    pub(crate) fn model(label: &str, p: usize, q: usize, r: Option<usize>, seed: u64) -> EncpModel {
        let g = FiniteGroup::from_label(label).unwrap();
        let rx = data_representation(&g, p).unwrap();
        let ry = data_representation(&g, q).unwrap();
        let cfg = ModelConfig {
            hidden_layers: 1,
            hidden_width: 2 * g.order(),
            r,
            activation: Activation::Tanh,
        };
        EncpModel::new(&rx, &ry, &cfg, seed).unwrap()
    }

    fn random_batch(n: usize, p: usize, q: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = stream(seed, "test-batch");
        (
            DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal)),
            DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal)),
        )
    }

    fn randomize_blocks(m: &mut EncpModel, seed: u64) {
        let mut rng = stream(seed, "test-blocks");
        let blocks = m
            .blocks()
            .iter()
            .map(|b| DMatrix::from_fn(b.nrows(), b.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        m.set_blocks(blocks).unwrap();
    }

    #[test]
    fn zero_operator_gives_unit_kernel_and_zero_l0() {
        let mut m = model("C3", 2, 2, None, 1);
        let zeros = m.blocks().iter().map(|b| DMatrix::zeros(b.nrows(), b.ncols())).collect();
        m.set_blocks(zeros).unwrap();
        let (x, y) = random_batch(8, 2, 2, 1);
        assert_eq!(m.kernel_grid(&x, &y).unwrap(), DMatrix::from_element(8, 8, 1.0));
        assert_eq!(m.loss_terms(&x, &y, 0.1).unwrap().l0, 0.0);
    }

    #[test]
    fn kernel_is_invariant() {
        for (label, p, q) in [("C2", 1, 1), ("C3", 2, 3), ("D3", 2, 2), ("C2xC2", 2, 2)] {
            let mut m = model(label, p, q, None, 2);
            randomize_blocks(&mut m, 2);
            let (x, y) = random_batch(50, p, q, 3);
            m.refresh_centers(&x, &y).unwrap();
            let k = m.kernel_grid(&x, &y).unwrap();
            for g in m.group().elements() {
                let gx = m.rep_x().act_rows(g, &x).unwrap();
                let gy = m.rep_y().act_rows(g, &y).unwrap();
                let kg = m.kernel_grid(&gx, &gy).unwrap();
                assert!((&kg - &k).amax() <= 1e-10, "{label}");
            }
        }
    }

    #[test]
    fn kernel_matches_dense_operator_oracle() {
        let mut m = model("D3", 2, 2, Some(12), 4);
        randomize_blocks(&mut m, 4);
        let x = [0.3, -1.2];
        let y = [0.7, 0.1];
        let u = m.enc_x().encode(&DVector::from_column_slice(&x)).unwrap();
        let v = m.enc_y().encode(&DVector::from_column_slice(&y)).unwrap();
        // assemble E entry by entry from the copy-major layout
        let r = m.latent_dim();
        let mut e = DMatrix::zeros(r, r);
        for (o, l) in m.blocks().iter().zip(m.layout()) {
            let d = l.dim();
            for s in 0..l.multiplicity() {
                for t in 0..l.multiplicity() {
                    for j in 0..d {
                        e[(l.block.offset + s * d + j, l.block.offset + t * d + j)] = o[(s, t)];
                    }
                }
            }
        }
        let oracle = 1.0 + (u.transpose() * e * v)[(0, 0)];
        assert!((m.kernel_eval(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    // naive per-block double loop
    fn brute_force_l0(m: &EncpModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
        let u = m.features_x(x).unwrap();
        let v = m.features_y(y).unwrap();
        let n = x.nrows();
        let nf = n as f64;
        m.blocks()
            .iter()
            .zip(m.layout())
            .map(|(o, l)| {
                let d = l.dim();
                let kappa = |a: usize, b: usize| {
                    let mut acc = 0.0;
                    for s in 0..l.multiplicity() {
                        for t in 0..l.multiplicity() {
                            for j in 0..d {
                                acc += o[(s, t)] * u[(a, l.block.offset + s * d + j)] * v[(b, l.block.offset + t * d + j)];
                            }
                        }
                    }
                    acc
                };
                let mut diag = 0.0;
                let mut off = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        if a == b {
                            diag += kappa(a, a);
                        } else {
                            off += kappa(a, b).powi(2) + 2.0 * kappa(a, b);
                        }
                    }
                }
                -2.0 * diag / nf + off / (nf * (nf - 1.0))
            })
            .collect()
    }

    #[test]
    fn u_statistics_match_double_loop() {
        for label in ["C2", "C3", "D3"] {
            let mut m = model(label, 2, 2, None, 5);
            randomize_blocks(&mut m, 5);
            let (x, y) = random_batch(8, 2, 2, 6);
            let terms = m.loss_terms(&x, &y, 0.0).unwrap();
            let oracle = brute_force_l0(&m, &x, &y);
            for (a, b) in terms.l0_blocks.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{label}: {a} vs {b}");
            }
            // separability: the total is the sum of independent block terms
            assert_eq!(terms.l0, terms.l0_blocks.iter().sum::<f64>());
        }
    }

    // orbit-averaged second moment by explicit enumeration of g·x
    fn omega_by_orbit(m: &EncpModel, feats_of: impl Fn(&DMatrix<f64>) -> DMatrix<f64>, data: &DMatrix<f64>, rep: &GroupRepresentation, l: &BlockLayout) -> f64 {
        let g = m.group();
        let size = l.block.size();
        let n = data.nrows();
        let mut c = DMatrix::<f64>::zeros(size, size);
        for e in g.elements() {
            let f = feats_of(&rep.act_rows(e, data).unwrap());
            let fb = f.columns(l.block.offset, size);
            c += fb.transpose() * fb;
        }
        c /= (n * g.order()) as f64;
        (c - DMatrix::<f64>::identity(size, size)).norm_squared()
    }

    #[test]
    fn omega_is_consistent_with_orbit_enumeration() {
        // the U-statistic and the plug-in estimate differ by O(1/N); check the
        // plug-in limit through the V-statistic identity on a large batch
        for label in ["C3", "D3", "C2xC2"] {
            let m = model(label, 2, 2, None, 7);
            let (x, _) = random_batch(400, 2, 2, 8);
            let u = m.features_x(&x).unwrap();
            for l in m.layout() {
                let (om, _) = orbit_omega(&u, l, false);
                let plug = omega_by_orbit(&m, |d| m.features_x(d).unwrap(), &x, m.rep_x(), l);
                // U-statistic minus plug-in equals the removed diagonal terms
                let (mm, d) = (l.multiplicity(), l.dim());
                let nf = 400.0;
                let mut diag_corr = 0.0;
                let mut s_sq = 0.0;
                for e in &l.commutant {
                    let mut s = DMatrix::<f64>::zeros(mm, mm);
                    let mut dsq = 0.0;
                    for a in 0..400 {
                        let am = copies(&row_vec(&u, a, l.block.offset, mm * d), mm, d);
                        let p = &am * e * am.transpose();
                        dsq += p.norm_squared();
                        s += p;
                    }
                    diag_corr += dsq;
                    s_sq += s.norm_squared();
                }
                let u_stat_part = (s_sq - diag_corr) / (d as f64 * nf * (nf - 1.0));
                let v_stat_part = s_sq / (d as f64 * nf * nf);
                let expected = plug - v_stat_part + u_stat_part;
                assert!((om - expected).abs() < 1e-9 * plug.max(1.0), "{label}: {om} vs {expected}");
            }
        }
    }

    #[test]
    fn trivial_group_matches_flat_contrastive_loss() {
        let m = {
            let mut m = model("trivial", 2, 3, Some(5), 9);
            randomize_blocks(&mut m, 9);
            m
        };
        let (x, y) = random_batch(12, 2, 3, 10);
        let terms = m.loss_terms(&x, &y, 0.0).unwrap();
        // unstructured: κ_ab = 1 + u_aᵀ E v_b with a dense E and the plain
        // contrastive loss −2 mean κ_nn + mean_{a≠b} κ_ab²
        let u = m.features_x(&x).unwrap();
        let v = m.features_y(&y).unwrap();
        let e = m.blocks()[0].clone();
        let n = 12;
        let mut pos = 0.0;
        let mut neg = 0.0;
        for a in 0..n {
            for b in 0..n {
                let kappa = 1.0 + (u.row(a) * &e * v.row(b).transpose())[(0, 0)];
                if a == b {
                    pos += kappa;
                } else {
                    neg += kappa * kappa;
                }
            }
        }
        let flat = -2.0 * pos / n as f64 + neg / (n * (n - 1)) as f64;
        // the structured loss drops the constant term E_x E_y 1 − 2 = −1
        assert!((terms.total - (flat + 1.0)).abs() < 1e-12, "{} vs {flat}", terms.total);
    }

    #[test]
    fn trivial_group_omega_is_plain_covariance_deviation() {
        let m = model("trivial", 2, 2, Some(3), 11);
        let (x, _) = random_batch(30, 2, 2, 12);
        let u = m.features_x(&x).unwrap();
        let (om, _) = orbit_omega(&u, &m.layout()[0], false);
        let n = 30.0;
        let s = u.transpose() * &u;
        let diag: f64 = (0..30).map(|a| (u.row(a).transpose() * u.row(a)).norm_squared()).sum();
        let expected = (s.norm_squared() - diag) / (n * (n - 1.0)) - 2.0 * s.trace() / n + 3.0;
        assert!((om - expected).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (label, p, q) in [("C3", 2, 2), ("trivial", 1, 2), ("C2xC2", 2, 1)] {
            let mut m = model(label, p, q, None, 13);
            randomize_blocks(&mut m, 13);
            let (x, y) = random_batch(4, p, q, 14);
            m.refresh_centers(&x, &y).unwrap();
            let gamma = 0.3;
            let (_, grad) = m.empirical_loss(&x, &y, gamma).unwrap();
            let theta = m.flatten();
            let h = 1e-6;
            let mut checked = 0;
            for i in (0..theta.len()).step_by(3) {
                let mut plus = m.clone();
                let mut tp = theta.clone();
                tp[i] += h;
                plus.assign_flat(&tp).unwrap();
                let mut minus = m.clone();
                let mut tm = theta.clone();
                tm[i] -= h;
                minus.assign_flat(&tm).unwrap();
                let fd = (plus.loss_terms(&x, &y, gamma).unwrap().total - minus.loss_terms(&x, &y, gamma).unwrap().total) / (2.0 * h);
                let scale = fd.abs().max(grad[i].abs()).max(1e-3);
                assert!((fd - grad[i]).abs() / scale < 1e-4, "{label} param {i}: fd {fd} vs {}", grad[i]);
                checked += 1;
            }
            assert!(checked > 10);
        }
    }

    #[test]
    fn batch_too_small_is_rejected() {
        let m = model("C2", 1, 1, None, 1);
        let (x, y) = random_batch(3, 1, 1, 1);
        assert!(matches!(m.loss_terms(&x, &y, 0.0), Err(EncpError::BatchTooSmall { min: 4, got: 3 })));
    }

    #[test]
    fn operator_singular_values_repeat_with_irrep_dim() {
        let mut m = model("D3", 2, 2, Some(12), 15);
        randomize_blocks(&mut m, 15);
        for (o, l) in m.blocks().iter().zip(m.layout()) {
            let ok = o.kronecker(&DMatrix::<f64>::identity(l.dim(), l.dim()));
            let mut sv: Vec<f64> = ok.singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for chunk in sv.chunks(l.dim()) {
                assert!(chunk.iter().all(|s| (s - chunk[0]).abs() < 1e-10));
            }
        }
    }
}
