use super::{FiniteGroup, GroupKind, GroupRepresentation};
use crate::error::{EncpError, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::PI;

/// Commutant structure of a real irrep.
///
/// Real-type irreps commute only with scalars. Complex-type irreps (e.g. the
/// 2D rotation irreps of `C_n`, `n >= 3`) also commute with a complex
/// structure `J`, `J^2 = -I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrrepType {
    Real,
    Complex,
}

impl IrrepType {
    /// Dimension of the commutant algebra, which equals `<chi, chi>`.
    pub fn endomorphism_dim(self) -> usize {
        match self {
            IrrepType::Real => 1,
            IrrepType::Complex => 2,
        }
    }
}

/// A real irreducible representation with its character.
#[derive(Debug, Clone, PartialEq)]
pub struct RealIrrep {
    id: usize,
    name: String,
    kind: IrrepType,
    rep: GroupRepresentation,
    character: Vec<f64>,
}

impl RealIrrep {
    fn new(id: usize, name: String, kind: IrrepType, rep: GroupRepresentation) -> Self {
        let character = rep.character();
        Self {
            id,
            name,
            kind,
            rep,
            character,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.rep.dim()
    }

    pub fn irrep_type(&self) -> IrrepType {
        self.kind
    }

    pub fn matrix(&self, g: usize) -> &DMatrix<f64> {
        self.rep.matrix(g)
    }

    pub fn representation(&self) -> &GroupRepresentation {
        &self.rep
    }

    pub fn character(&self) -> &[f64] {
        &self.character
    }

    pub fn is_trivial(&self) -> bool {
        self.dim() == 1 && self.character.iter().all(|&c| c == 1.0)
    }

    /// Orthogonal basis of the commutant: `[I]`, or `[I, J]` for complex
    /// type. Every element has squared Frobenius norm `dim`.
    pub fn commutant_basis(&self) -> Vec<DMatrix<f64>> {
        let d = self.dim();
        let mut basis = vec![DMatrix::identity(d, d)];
        if self.kind == IrrepType::Complex {
            basis.push(complex_structure(&self.rep).expect("complex-type irreps carry a complex structure"));
        }
        basis
    }
}

/// Group-averaged inner product of two real characters.
pub fn character_inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// Complete list of real irreps, trivial first.
pub fn real_irreps(group: &FiniteGroup) -> Result<Vec<RealIrrep>> {
    let raw = irreps_for_kind(group, group.kind())?;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(id, (name, kind, rep))| RealIrrep::new(id, name, kind, rep))
        .collect())
}

type RawIrrep = (String, IrrepType, GroupRepresentation);

fn irreps_for_kind(group: &FiniteGroup, kind: &GroupKind) -> Result<Vec<RawIrrep>> {
    match kind {
        GroupKind::Cyclic(n) => Ok(cyclic_irreps(group, *n)),
        GroupKind::Dihedral(n) => Ok(dihedral_irreps(group, *n)),
        GroupKind::Product(a, b) => product_irreps(group, a, b),
    }
}

fn rotation(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

fn one_dim(group: &FiniteGroup, value: impl Fn(usize) -> f64) -> GroupRepresentation {
    let matrices = group
        .elements()
        .map(|g| DMatrix::from_element(1, 1, value(g)))
        .collect();
    GroupRepresentation::new(group.clone(), matrices).expect("well-formed 1D irrep")
}

fn cyclic_irreps(group: &FiniteGroup, n: usize) -> Vec<RawIrrep> {
    let mut out = vec![("trivial".to_string(), IrrepType::Real, one_dim(group, |_| 1.0))];
    if n % 2 == 0 {
        out.push((
            "sign".to_string(),
            IrrepType::Real,
            one_dim(group, |b| if b % 2 == 0 { 1.0 } else { -1.0 }),
        ));
    }
    // counterclockwise rotation by 2*pi*j/n for the generator
    for j in 1..=(n.saturating_sub(1) / 2) {
        let matrices = group
            .elements()
            .map(|b| rotation(2.0 * PI * (j * b) as f64 / n as f64))
            .collect();
        out.push((
            format!("rot{j}/{n}"),
            IrrepType::Complex,
            GroupRepresentation::new(group.clone(), matrices).expect("well-formed 2D irrep"),
        ));
    }
    out
}

fn dihedral_irreps(group: &FiniteGroup, n: usize) -> Vec<RawIrrep> {
    let parity = |x: usize| if x % 2 == 0 { 1.0 } else { -1.0 };
    let refl = |g: usize| g / n;
    let rot = |g: usize| g % n;
    let mut out = vec![
        ("trivial".to_string(), IrrepType::Real, one_dim(group, |_| 1.0)),
        (
            "reflection-sign".to_string(),
            IrrepType::Real,
            one_dim(group, |g| parity(refl(g))),
        ),
    ];
    if n % 2 == 0 {
        out.push((
            "rotation-sign".to_string(),
            IrrepType::Real,
            one_dim(group, |g| parity(rot(g))),
        ));
        out.push((
            "joint-sign".to_string(),
            IrrepType::Real,
            one_dim(group, |g| parity(refl(g) + rot(g))),
        ));
    }
    let mirror = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    for j in 1..=(n.saturating_sub(1) / 2) {
        let matrices = group
            .elements()
            .map(|g| {
                let r = rotation(2.0 * PI * (j * rot(g)) as f64 / n as f64);
                if refl(g) == 1 {
                    &mirror * r
                } else {
                    r
                }
            })
            .collect();
        out.push((
            format!("dihedral{j}/{n}"),
            IrrepType::Real,
            GroupRepresentation::new(group.clone(), matrices).expect("well-formed 2D irrep"),
        ));
    }
    out
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Normalized complex structure commuting with a complex-type irrep.
fn complex_structure(rep: &GroupRepresentation) -> Result<DMatrix<f64>> {
    let d = rep.dim();
    for i in 0..d {
        for j in (i + 1)..d {
            let mut x = DMatrix::<f64>::zeros(d, d);
            x[(i, j)] = 1.0;
            x[(j, i)] = -1.0;
            let mut avg = DMatrix::<f64>::zeros(d, d);
            for m in rep.matrices() {
                avg += m * &x * m.transpose();
            }
            avg /= rep.group().order() as f64;
            let sq = &avg * &avg;
            let scale = -sq[(0, 0)];
            if scale > 1e-10 {
                return Ok(avg / scale.sqrt());
            }
        }
    }
    Err(EncpError::DecompositionFailure(
        "complex-type irrep without a complex structure".into(),
    ))
}

fn product_irreps(group: &FiniteGroup, a: &GroupKind, b: &GroupKind) -> Result<Vec<RawIrrep>> {
    let ga = super::make_group(a.clone())?;
    let gb = super::make_group(b.clone())?;
    let left = irreps_for_kind(&ga, a)?;
    let right = irreps_for_kind(&gb, b)?;
    let nb = gb.order();
    let mut out = Vec::new();
    for (na, ka, ra) in &left {
        for (nb_name, kb, rb) in &right {
            let matrices: Vec<_> = group
                .elements()
                .map(|g| kron(ra.matrix(g / nb), rb.matrix(g % nb)))
                .collect();
            let rep = GroupRepresentation::new(group.clone(), matrices)?;
            let name = format!("{na}*{nb_name}");
            match (ka, kb) {
                (IrrepType::Complex, IrrepType::Complex) => {
                    // J_a (x) J_b is a symmetric involution commuting with the
                    // product; its eigenspaces carry two inequivalent irreps.
                    let ja = complex_structure(ra)?;
                    let jb = complex_structure(rb)?;
                    let m = kron(&ja, &jb);
                    let eig = SymmetricEigen::new(m);
                    for (sign, tag) in [(1.0, "+"), (-1.0, "-")] {
                        let cols: Vec<_> = (0..eig.eigenvalues.len())
                            .filter(|&i| (eig.eigenvalues[i] - sign).abs() < 1e-8)
                            .map(|i| eig.eigenvectors.column(i).into_owned())
                            .collect();
                        let basis = DMatrix::from_columns(&cols);
                        let sub = rep
                            .matrices()
                            .iter()
                            .map(|m| basis.transpose() * m * &basis)
                            .collect();
                        out.push((
                            format!("{name}{tag}"),
                            IrrepType::Complex,
                            GroupRepresentation::new(group.clone(), sub)?,
                        ));
                    }
                }
                (IrrepType::Real, IrrepType::Real) => out.push((name, IrrepType::Real, rep)),
                _ => out.push((name, IrrepType::Complex, rep)),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::regular_representation;

    fn irreps(label: &str) -> (FiniteGroup, Vec<RealIrrep>) {
        let g = FiniteGroup::from_label(label).unwrap();
        let irr = real_irreps(&g).unwrap();
        (g, irr)
    }

    /// Dimension of the commutant, from Schur-averaging a spanning set of
    /// matrices and measuring the rank of the results.
    fn commutant_dim(irrep: &RealIrrep) -> usize {
        let d = irrep.dim();
        let mut vecs = Vec::new();
        for i in 0..d {
            for j in 0..d {
                let mut x = DMatrix::<f64>::zeros(d, d);
                x[(i, j)] = 1.0;
                let mut avg = DMatrix::<f64>::zeros(d, d);
                for m in irrep.representation().matrices() {
                    avg += m * &x * m.transpose();
                }
                vecs.push(DMatrix::from_column_slice(d * d, 1, avg.as_slice()));
            }
        }
        let stacked = DMatrix::from_columns(
            &vecs.iter().map(|v| v.column(0).into_owned()).collect::<Vec<_>>(),
        );
        stacked.rank(1e-9)
    }

    #[test]
    fn c3_has_trivial_and_rotation() {
        let (_, irr) = irreps("C3");
        assert_eq!(irr.len(), 2);
        assert!(irr[0].is_trivial());
        assert_eq!(irr[1].dim(), 2);
        let expected = rotation(2.0 * PI / 3.0);
        assert!((irr[1].matrix(1) - expected).amax() < 1e-15);
    }

    #[test]
    fn commutant_basis_commutes_and_is_orthogonal() {
        for label in ["C3", "C6", "D6", "C3xC3", "C4xC2"] {
            let (g, irr) = irreps(label);
            for irrep in &irr {
                let basis = irrep.commutant_basis();
                assert_eq!(basis.len(), commutant_dim(irrep), "{label}");
                let d = irrep.dim() as f64;
                for (i, a) in basis.iter().enumerate() {
                    for e in g.elements() {
                        let m = irrep.matrix(e);
                        assert!((m * a - a * m).amax() < 1e-10);
                    }
                    for (j, b) in basis.iter().enumerate() {
                        let want = if i == j { d } else { 0.0 };
                        assert!((a.dot(b) - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn c2_has_trivial_and_sign() {
        let (_, irr) = irreps("C2");
        assert_eq!(irr.len(), 2);
        assert_eq!(irr[1].character(), &[1.0, -1.0]);
    }

    #[test]
    fn d6_table_shape() {
        let (g, irr) = irreps("D6");
        let dims: Vec<_> = irr.iter().map(|i| i.dim()).collect();
        assert_eq!(dims.iter().filter(|&&d| d == 1).count(), 4);
        assert_eq!(dims.iter().filter(|&&d| d == 2).count(), 2);
        assert_eq!(dims.iter().map(|d| d * d).sum::<usize>(), g.order());
    }

    #[test]
    fn irreps_are_complete_orthogonal_and_irreducible() {
        for label in ["trivial", "C2", "C3", "C4", "C5", "C6", "D1", "D3", "D4", "D6", "C2xC2", "C3xC3", "C3xD3", "C4xC3xC2"] {
            let (g, irr) = irreps(label);
            assert!(irr[0].is_trivial(), "{label}");
            // sum d^2 / <chi, chi> = |G|
            let total: f64 = irr
                .iter()
                .map(|i| (i.dim() * i.dim()) as f64 / i.irrep_type().endomorphism_dim() as f64)
                .sum();
            assert!((total - g.order() as f64).abs() < 1e-9, "{label}: {total}");
            for a in &irr {
                assert!(a.representation().homomorphism_error() < 1e-12, "{label}");
                assert!(a.representation().orthogonality_error() < 1e-12, "{label}");
                assert_eq!(commutant_dim(a), a.irrep_type().endomorphism_dim(), "{label} {}", a.name());
                for b in &irr {
                    let ip = character_inner(a.character(), b.character());
                    let expected = if a.id() == b.id() {
                        a.irrep_type().endomorphism_dim() as f64
                    } else {
                        0.0
                    };
                    assert!((ip - expected).abs() < 1e-9, "{label}: {} vs {}", a.name(), b.name());
                }
            }
        }
    }

    #[test]
    fn regular_multiplicities_from_characters() {
        for label in ["C3", "C6", "D6", "C2xC2"] {
            let (g, irr) = irreps(label);
            let chi = regular_representation(&g).character();
            let total: usize = irr
                .iter()
                .map(|i| {
                    let m = character_inner(&chi, i.character())
                        / i.irrep_type().endomorphism_dim() as f64;
                    m.round() as usize * i.dim()
                })
                .sum();
            assert_eq!(total, g.order(), "{label}");
        }
    }
}
