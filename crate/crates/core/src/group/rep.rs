use super::{real_irreps, FiniteGroup};
use crate::error::{check_dim, EncpError, Result};
use nalgebra::{DMatrix, DVector};

/// A real orthogonal representation: one `dim x dim` matrix per element.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRepresentation {
    group: FiniteGroup,
    dim: usize,
    matrices: Vec<DMatrix<f64>>,
}

impl GroupRepresentation {
    pub fn new(group: FiniteGroup, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        check_dim(group.order(), matrices.len(), "one matrix per group element")?;
        let dim = matrices.first().map_or(0, |m| m.nrows());
        if dim == 0 {
            return Err(EncpError::InvalidParameter(
                "representation dimension must be positive".into(),
            ));
        }
        for m in &matrices {
            check_dim(dim, m.nrows(), "representation rows")?;
            check_dim(dim, m.ncols(), "representation columns")?;
        }
        Ok(Self {
            group,
            dim,
            matrices,
        })
    }

    /// Every element acts as the identity on `R^dim`.
    pub fn trivial(group: &FiniteGroup, dim: usize) -> Self {
        let matrices = vec![DMatrix::identity(dim, dim); group.order()];
        Self {
            group: group.clone(),
            dim,
            matrices,
        }
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self, g: usize) -> &DMatrix<f64> {
        &self.matrices[g]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn character(&self) -> Vec<f64> {
        self.matrices.iter().map(|m| m.trace()).collect()
    }

    /// `rho(g) v`.
    pub fn act(&self, g: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim, v.len(), "act: vector length")?;
        Ok(&self.matrices[g] * v)
    }

    /// Applies `rho(g)` to every row of `rows` (samples stored as rows).
    pub fn act_rows(&self, g: usize, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim, rows.ncols(), "act_rows: row length")?;
        Ok(rows * self.matrices[g].transpose())
    }

    /// Block-diagonal sum of representations of the same group.
    pub fn direct_sum(parts: &[GroupRepresentation]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| EncpError::InvalidParameter("empty direct sum".into()))?;
        let group = first.group.clone();
        if parts.iter().any(|p| p.group != group) {
            return Err(EncpError::InvalidParameter(
                "direct sum of representations of different groups".into(),
            ));
        }
        let dim: usize = parts.iter().map(|p| p.dim).sum();
        let matrices = group
            .elements()
            .map(|g| {
                let mut m = DMatrix::zeros(dim, dim);
                let mut offset = 0;
                for p in parts {
                    m.view_mut((offset, offset), (p.dim, p.dim))
                        .copy_from(&p.matrices[g]);
                    offset += p.dim;
                }
                m
            })
            .collect();
        Ok(Self {
            group,
            dim,
            matrices,
        })
    }

    /// `copies` stacked copies of this representation.
    pub fn repeat(&self, copies: usize) -> Result<Self> {
        Self::direct_sum(&vec![self.clone(); copies])
    }

    /// Largest deviation of `rho(a) rho(b)` from `rho(ab)` over all pairs.
    pub fn homomorphism_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in self.group.elements() {
            for b in self.group.elements() {
                let lhs = &self.matrices[a] * &self.matrices[b];
                let rhs = &self.matrices[self.group.compose(a, b)];
                worst = worst.max((lhs - rhs).amax());
            }
        }
        worst.max((&self.matrices[self.group.identity()] - DMatrix::identity(self.dim, self.dim)).amax())
    }

    pub fn orthogonality_error(&self) -> f64 {
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        self.matrices
            .iter()
            .map(|m| (m * m.transpose() - &eye).amax())
            .fold(0.0, f64::max)
    }

    /// Orthogonal projector onto the subspace fixed by every element.
    pub fn invariant_projector(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.dim, self.dim);
        for m in &self.matrices {
            p += m;
        }
        p / self.group.order() as f64
    }

    /// Serializable form: row-major matrices in element order.
    pub fn to_rows(&self) -> Vec<Vec<Vec<f64>>> {
        self.matrices
            .iter()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect()
    }

    pub fn from_rows(group: FiniteGroup, rows: &[Vec<Vec<f64>>]) -> Result<Self> {
        let matrices = rows
            .iter()
            .map(|m| {
                let n = m.len();
                if m.iter().any(|r| r.len() != n) {
                    return Err(EncpError::InvalidParameter(
                        "representation matrix is not square".into(),
                    ));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| m[i][j]))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(group, matrices)
    }
}

/// The right regular representation: `rho(g) e_h = e_{h g^-1}`.
///
/// Entry `(i, j)` of `rho(g)` is one exactly when `j = i g`, so every matrix
/// is a permutation matrix read off the Cayley table.
pub fn regular_representation(group: &FiniteGroup) -> GroupRepresentation {
    let n = group.order();
    let matrices = group
        .elements()
        .map(|g| {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                m[(i, group.compose(i, g))] = 1.0;
            }
            m
        })
        .collect();
    GroupRepresentation {
        group: group.clone(),
        dim: n,
        matrices,
    }
}

/// A representation on `R^dim` assembled from non-trivial irreps.
///
/// Non-trivial irreps are tried largest first and reused cyclically; when none
/// fits the remaining dimension the trivial irrep fills the gap. For example
/// `C2` on `R` is the sign action and `D6` on `R^2` is the standard action on
/// the plane.
pub fn data_representation(group: &FiniteGroup, dim: usize) -> Result<GroupRepresentation> {
    if dim == 0 {
        return Err(EncpError::InvalidParameter(
            "data space dimension must be positive".into(),
        ));
    }
    let irreps = real_irreps(group)?;
    let mut candidates: Vec<_> = irreps.iter().skip(1).collect();
    candidates.sort_by(|a, b| b.dim().cmp(&a.dim()));
    let mut parts = Vec::new();
    let mut remaining = dim;
    let mut cursor = 0;
    while remaining > 0 {
        let pick = (0..candidates.len())
            .map(|i| candidates[(cursor + i) % candidates.len()])
            .position(|irrep| irrep.dim() <= remaining);
        match pick {
            Some(offset) => {
                let irrep = candidates[(cursor + offset) % candidates.len()];
                parts.push(irrep.representation().clone());
                remaining -= irrep.dim();
                cursor = (cursor + offset + 1) % candidates.len();
            }
            None => {
                parts.push(GroupRepresentation::trivial(group, remaining));
                remaining = 0;
            }
        }
    }
    GroupRepresentation::direct_sum(&parts)
}
