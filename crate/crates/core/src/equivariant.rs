//! G-equivariant MLP encoders with centered outputs in isotypic coordinates.
//!
//! Hidden and output layers carry copies of the regular representation, so
//! their group actions are permutations and pointwise activations commute
//! with them. Each weight matrix is kept in the commutant of its input and
//! output actions by the averaging projection; biases live in the fixed
//! subspace of the output action. The final features are
//! `u(x) = q (phi(x) - mu)`, with `mu` a G-invariant mean of the backbone.

use crate::error::{check_dim, EncpError, Result};
use crate::group::{isotypic_decomposition, real_irreps, regular_representation, FiniteGroup, GroupRepresentation, IsotypicBasis};
use crate::nn::{Activation, Dense, ForwardCache, MlpGrads, MlpParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// `(1/|G|) sum_g rho_out(g)^T w rho_in(g)`, the orthogonal projection of `w`
/// onto maps satisfying `rho_out(g) w = w rho_in(g)`.
pub fn project_equivariant(
    w: &DMatrix<f64>,
    rep_in: &GroupRepresentation,
    rep_out: &GroupRepresentation,
) -> Result<DMatrix<f64>> {
    check_dim(rep_in.dim(), w.ncols(), "projection input dimension")?;
    check_dim(rep_out.dim(), w.nrows(), "projection output dimension")?;
    if rep_in.group() != rep_out.group() {
        return Err(EncpError::InvalidParameter(
            "projection between representations of different groups".into(),
        ));
    }
    let group = rep_in.group();
    if group.is_trivial() {
        return Ok(w.clone());
    }
    let mut acc = DMatrix::<f64>::zeros(w.nrows(), w.ncols());
    for g in group.elements() {
        acc += rep_out.matrix(g).transpose() * w * rep_in.matrix(g);
    }
    Ok(acc / group.order() as f64)
}

/// Projection of a bias onto the subspace fixed by `rep`.
pub fn project_invariant(b: &DVector<f64>, rep: &GroupRepresentation) -> DVector<f64> {
    if rep.group().is_trivial() {
        return b.clone();
    }
    rep.invariant_projector() * b
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivariantEncoder {
    mlp: MlpParams,
    layer_reps: Vec<GroupRepresentation>,
    iso: IsotypicBasis,
    center: DVector<f64>,
}

impl EquivariantEncoder {
    /// Random encoder `rep_in -> hidden... -> out_dim`; every width after the
    /// input must be a multiple of `|G|`.
    pub fn new<R: Rng + ?Sized>(
        rep_in: GroupRepresentation,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let group = rep_in.group().clone();
        let order = group.order();
        let mut dims = vec![rep_in.dim()];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let mut layer_reps = vec![rep_in];
        let regular = regular_representation(&group);
        for &width in &dims[1..] {
            if width == 0 || width % order != 0 {
                return Err(EncpError::InvalidParameter(format!(
                    "layer width {width} is not a positive multiple of |G| = {order}"
                )));
            }
            layer_reps.push(regular.repeat(width / order)?);
        }
        let mlp = MlpParams::init(&dims, activation, rng);
        Self::from_parts(mlp, layer_reps, DVector::zeros(out_dim))
    }

    /// Assembles an encoder from stored pieces; parameters are projected.
    pub fn from_parts(mlp: MlpParams, layer_reps: Vec<GroupRepresentation>, center: DVector<f64>) -> Result<Self> {
        let mut enc = Self::assemble(mlp, layer_reps, center)?;
        enc.project_params();
        enc.center = project_invariant(&enc.center, enc.output_rep());
        Ok(enc)
    }

    /// Assembles an encoder from parameters that are already equivariant,
    /// keeping them bit for bit. Fails if they are not equivariant to `tol`.
    pub fn from_stored(
        mlp: MlpParams,
        layer_reps: Vec<GroupRepresentation>,
        center: DVector<f64>,
        tol: f64,
    ) -> Result<Self> {
        let enc = Self::assemble(mlp, layer_reps, center)?;
        let projected = enc.project_layers(&enc.mlp.layers);
        let drift = enc
            .mlp
            .layers
            .iter()
            .zip(&projected)
            .map(|(a, b)| (&a.weight - &b.weight).amax().max((&a.bias - &b.bias).amax()))
            .fold(0.0, f64::max);
        let center_drift = (&enc.center - project_invariant(&enc.center, enc.output_rep())).amax();
        if drift.max(center_drift) > tol {
            return Err(EncpError::InvalidParameter(format!(
                "stored encoder parameters are not equivariant (deviation {:e})",
                drift.max(center_drift)
            )));
        }
        Ok(enc)
    }

    fn assemble(mlp: MlpParams, layer_reps: Vec<GroupRepresentation>, center: DVector<f64>) -> Result<Self> {
        let dims = mlp.dims();
        check_dim(dims.len(), layer_reps.len(), "one representation per layer boundary")?;
        for (d, rep) in dims.iter().zip(&layer_reps) {
            check_dim(*d, rep.dim(), "layer width vs representation")?;
        }
        let out_rep = layer_reps.last().expect("at least input and output");
        let irreps = real_irreps(out_rep.group())?;
        let iso = isotypic_decomposition(out_rep, &irreps)?;
        check_dim(out_rep.dim(), center.len(), "center length")?;
        Ok(Self {
            mlp,
            layer_reps,
            iso,
            center,
        })
    }

    pub fn group(&self) -> &FiniteGroup {
        self.layer_reps[0].group()
    }

    pub fn input_rep(&self) -> &GroupRepresentation {
        &self.layer_reps[0]
    }

    pub fn output_rep(&self) -> &GroupRepresentation {
        self.layer_reps.last().expect("nonempty")
    }

    pub fn layer_reps(&self) -> &[GroupRepresentation] {
        &self.layer_reps
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn mlp(&self) -> &MlpParams {
        &self.mlp
    }

    pub fn iso(&self) -> &IsotypicBasis {
        &self.iso
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn activation(&self) -> Activation {
        self.mlp.activation
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    /// Projects every layer onto the equivariant subspace.
    pub fn project_params(&mut self) {
        let layers = self.project_layers(&self.mlp.layers);
        self.mlp.layers = layers;
    }

    fn project_layers(&self, layers: &[Dense]) -> Vec<Dense> {
        layers
            .iter()
            .enumerate()
            .map(|(l, layer)| Dense {
                weight: project_equivariant(&layer.weight, &self.layer_reps[l], &self.layer_reps[l + 1])
                    .expect("layer shapes validated at construction"),
                bias: project_invariant(&layer.bias, &self.layer_reps[l + 1]),
            })
            .collect()
    }

    /// Gradients with respect to unconstrained parameters map to the same
    /// projection, since the projection is self-adjoint.
    pub fn project_grads(&self, grads: &MlpGrads) -> MlpGrads {
        self.project_layers(grads)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.mlp.flatten()
    }

    /// Loads flat parameters and projects them.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.mlp.assign_flat(flat)?;
        self.project_params();
        Ok(())
    }

    /// Raw backbone outputs `phi(x)` in the regular basis.
    pub fn backbone(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.mlp.forward(x)
    }

    /// Centered isotypic features, one row per input row.
    pub fn encode_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let phi = self.backbone(x)?;
        Ok(self.to_features(phi))
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let row = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        Ok(self.encode_batch(&row)?.row(0).transpose())
    }

    fn to_features(&self, mut phi: DMatrix<f64>) -> DMatrix<f64> {
        for mut row in phi.row_iter_mut() {
            row -= self.center.transpose();
        }
        phi * self.iso.q().transpose()
    }

    pub fn encode_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        let cache = self.mlp.forward_cached(x)?;
        let features = self.to_features(cache.output().clone());
        Ok((features, cache))
    }

    /// Projected parameter gradients for an upstream gradient on the features.
    pub fn backward(&self, cache: &ForwardCache, feature_grad: &DMatrix<f64>) -> Result<MlpGrads> {
        let phi_grad = feature_grad * self.iso.q();
        let (grads, _) = self.mlp.backward(cache, &phi_grad)?;
        Ok(self.project_grads(&grads))
    }

    /// Sets `mu` to the G-invariant empirical mean of the backbone on `x`,
    /// i.e. the orbit-averaged sample mean.
    pub fn refresh_center(&mut self, x: &DMatrix<f64>) -> Result<()> {
        let phi = self.backbone(x)?;
        let n = phi.nrows().max(1) as f64;
        let mean = DVector::from_iterator(phi.ncols(), phi.column_iter().map(|c| c.sum() / n));
        self.center = project_invariant(&mean, self.output_rep());
        Ok(())
    }

    pub fn set_center(&mut self, center: DVector<f64>) -> Result<()> {
        check_dim(self.output_dim(), center.len(), "center length")?;
        self.center = project_invariant(&center, self.output_rep());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::data_representation;
    use crate::rng::stream;
    use rand_distr::StandardNormal;

    #[test]
    fn trivial_group_projection_is_identity() {
        let g = FiniteGroup::trivial();
        let w = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let out = project_equivariant(&w, &GroupRepresentation::trivial(&g, 2), &GroupRepresentation::trivial(&g, 3)).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn c2_regular_projection_of_unit_matrix() {
        let g = FiniteGroup::from_label("C2").unwrap();
        let reg = regular_representation(&g);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = project_equivariant(&w, &reg, &reg).unwrap();
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]));
    }

    #[test]
    fn projection_is_idempotent_and_equivariant() {
        let g = FiniteGroup::from_label("D3").unwrap();
        let rin = data_representation(&g, 3).unwrap();
        let rout = regular_representation(&g).repeat(2).unwrap();
        let mut rng = stream(3, "proj");
        let w = DMatrix::from_fn(12, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = project_equivariant(&w, &rin, &rout).unwrap();
        let pp = project_equivariant(&p, &rin, &rout).unwrap();
        assert!((&pp - &p).amax() < 1e-14);
        for e in g.elements() {
            assert!((rout.matrix(e) * &p - &p * rin.matrix(e)).amax() < 1e-12);
        }
        assert!(project_equivariant(&w, &rout, &rin).is_err());
    }

    #[test]
    fn encoder_is_equivariant_for_random_parameters() {
        for (label, dim) in [("C2", 1), ("C3", 2), ("D6", 2), ("C2xC2", 3)] {
            let g = FiniteGroup::from_label(label).unwrap();
            let rep = data_representation(&g, dim).unwrap();
            let mut rng = stream(11, label);
            let n = g.order();
            let mut enc = EquivariantEncoder::new(rep.clone(), &[4 * n, 2 * n], 2 * n, Activation::Tanh, &mut rng).unwrap();
            let sample = DMatrix::from_fn(50, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            enc.refresh_center(&sample).unwrap();
            assert_eq!(enc.output_dim(), enc.iso().total_dim());
            for _ in 0..50 {
                let x = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let u = enc.encode(&x).unwrap();
                for e in g.elements() {
                    let ugx = enc.encode(&rep.act(e, &x).unwrap()).unwrap();
                    let expected = enc.iso().iso_rep().act(e, &u).unwrap();
                    assert!((ugx - expected).amax() < 1e-10, "{label}");
                }
            }
        }
    }

    #[test]
    fn trivial_group_features_are_centered_mlp_outputs() {
        let g = FiniteGroup::trivial();
        let mut rng = stream(4, "triv");
        let mut enc = EquivariantEncoder::new(GroupRepresentation::trivial(&g, 2), &[5], 3, Activation::Tanh, &mut rng).unwrap();
        let x = DMatrix::from_fn(20, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        enc.refresh_center(&x).unwrap();
        assert_eq!(enc.iso().q(), &DMatrix::<f64>::identity(3, 3));
        let u = enc.encode_batch(&x).unwrap();
        let phi = enc.backbone(&x).unwrap();
        for j in 0..3 {
            assert!(u.column(j).sum().abs() < 1e-12);
            assert!((u[(0, j)] - (phi[(0, j)] - phi.column(j).mean())).abs() < 1e-14);
        }
    }

    #[test]
    fn widths_must_be_group_multiples() {
        let g = FiniteGroup::from_label("C3").unwrap();
        let mut rng = stream(0, "w");
        let rep = data_representation(&g, 2).unwrap();
        assert!(EquivariantEncoder::new(rep, &[4], 6, Activation::Tanh, &mut rng).is_err());
    }
}
