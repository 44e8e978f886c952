use super::{character_inner, real_irreps, FiniteGroup, GroupRepresentation, IrrepType, RealIrrep};
use crate::error::{check_dim, EncpError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// One isotypic block: `multiplicity` copies of irrep `irrep_id`, laid out
/// copy-major starting at `offset` (coordinate `offset + s * dim + j` is
/// component `j` of copy `s`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsoBlock {
    pub irrep_id: usize,
    pub multiplicity: usize,
    pub dim: usize,
    pub offset: usize,
}

impl IsoBlock {
    pub fn size(&self) -> usize {
        self.multiplicity * self.dim
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size()
    }
}

/// Orthogonal change of basis exposing the isotypic blocks of a
/// representation: `q rho(g) q^T = (+)_k I_{m_k} (x) pi_k(g)`.
///
/// Isotypic coordinates of a vector `v` are `q v`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotypicBasis {
    q: DMatrix<f64>,
    blocks: Vec<IsoBlock>,
    iso_rep: GroupRepresentation,
}

impl IsotypicBasis {
    /// Rebuilds a basis from a stored `q` and block layout; the block-diagonal
    /// target representation is regenerated from the irrep table.
    pub fn from_parts(group: &FiniteGroup, q: DMatrix<f64>, blocks: Vec<IsoBlock>) -> Result<Self> {
        let irreps = real_irreps(group)?;
        let iso_rep = block_representation(&irreps, &blocks)?;
        check_dim(iso_rep.dim(), q.nrows(), "isotypic basis rows")?;
        check_dim(iso_rep.dim(), q.ncols(), "isotypic basis columns")?;
        Ok(Self { q, blocks, iso_rep })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn blocks(&self) -> &[IsoBlock] {
        &self.blocks
    }

    pub fn total_dim(&self) -> usize {
        self.q.nrows()
    }

    /// The block-diagonal representation acting on isotypic coordinates.
    pub fn iso_rep(&self) -> &GroupRepresentation {
        &self.iso_rep
    }

    /// Block belonging to the trivial irrep, if present.
    pub fn trivial_block(&self) -> Option<&IsoBlock> {
        self.blocks.iter().find(|b| b.irrep_id == 0)
    }

    pub fn to_iso(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.q * v
    }

    /// Largest `|q q^T - I|` entry.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.q.nrows();
        (&self.q * self.q.transpose() - DMatrix::<f64>::identity(n, n)).amax()
    }

    /// Largest Frobenius residual `|q rho(g) q^T - iso(g)|` over `g`.
    pub fn block_residual(&self, rep: &GroupRepresentation) -> f64 {
        rep.group()
            .elements()
            .map(|g| (&self.q * rep.matrix(g) * self.q.transpose() - self.iso_rep.matrix(g)).norm())
            .fold(0.0, f64::max)
    }
}

fn block_representation(irreps: &[RealIrrep], blocks: &[IsoBlock]) -> Result<GroupRepresentation> {
    let mut parts = Vec::new();
    for block in blocks {
        let irrep = irreps.get(block.irrep_id).ok_or_else(|| {
            EncpError::InvalidParameter(format!("unknown irrep id {}", block.irrep_id))
        })?;
        check_dim(irrep.dim(), block.dim, "isotypic block irrep dimension")?;
        for _ in 0..block.multiplicity {
            parts.push(irrep.representation().clone());
        }
    }
    GroupRepresentation::direct_sum(&parts)
}

/// Orthogonal projector onto the isotypic component of `irrep` in `rep`:
/// `(d_k / c_k |G|) sum_g chi_k(g) rho(g)`, with `c_k = <chi_k, chi_k>`.
pub fn character_projector(rep: &GroupRepresentation, irrep: &RealIrrep) -> DMatrix<f64> {
    let n = rep.dim();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for (g, chi) in irrep.character().iter().enumerate() {
        p += rep.matrix(g) * *chi;
    }
    let scale = irrep.dim() as f64
        / (irrep.irrep_type().endomorphism_dim() as f64 * rep.group().order() as f64);
    p * scale
}

/// Schur average `(1/|G|) sum_g pi(g) r rho(g)^T`, an intertwiner from `rep`
/// into `irrep`.
fn schur_average(irrep: &RealIrrep, rep: &GroupRepresentation, r: &DMatrix<f64>) -> DMatrix<f64> {
    let mut acc = DMatrix::<f64>::zeros(irrep.dim(), rep.dim());
    for g in rep.group().elements() {
        acc += irrep.matrix(g) * r * rep.matrix(g).transpose();
    }
    acc / rep.group().order() as f64
}

/// Fixes the residual freedom of one copy so the result is deterministic.
fn canonicalize_copy(copy: &mut DMatrix<f64>, irrep: &RealIrrep) {
    let lead = (0..copy.ncols()).find(|&c| copy.column(c).norm() > 1e-9);
    let Some(c) = lead else { return };
    if irrep.irrep_type() == IrrepType::Complex && irrep.dim() == 2 {
        // 2D complex-type irreps commute with every rotation: rotate so the
        // leading column points along +e1.
        let theta = copy[(1, c)].atan2(copy[(0, c)]);
        let (s, co) = theta.sin_cos();
        let undo = DMatrix::from_row_slice(2, 2, &[co, s, -s, co]);
        *copy = undo * &*copy;
        copy[(1, c)] = 0.0;
    } else {
        let first = (0..copy.ncols())
            .map(|j| copy[(0, j)])
            .find(|x| x.abs() > 1e-9)
            .unwrap_or(1.0);
        if first < 0.0 {
            *copy *= -1.0;
        }
    }
}

/// Computes the isotypic change of basis of `rep`.
///
/// For each irrep the character projector selects the isotypic component;
/// inside it, orthonormal copies of the irrep are found by Schur-averaging
/// elementary matrices against everything found so far. Blocks are ordered
/// by irrep id and each copy is sign (or rotation) normalized.
pub fn isotypic_decomposition(rep: &GroupRepresentation, irreps: &[RealIrrep]) -> Result<IsotypicBasis> {
    let n = rep.dim();
    let chi = rep.character();
    let mut rows: Vec<DMatrix<f64>> = Vec::new();
    let mut blocks = Vec::new();
    let mut offset = 0;
    for irrep in irreps {
        let c = irrep.irrep_type().endomorphism_dim() as f64;
        let raw = character_inner(&chi, irrep.character()) / c;
        let multiplicity = raw.round() as usize;
        if (raw - raw.round()).abs() > 1e-6 {
            return Err(EncpError::DecompositionFailure(format!(
                "non-integer multiplicity {raw} for irrep {}",
                irrep.name()
            )));
        }
        if multiplicity == 0 {
            continue;
        }
        let d = irrep.dim();
        let mut p = character_projector(rep, irrep);
        let trace = p.trace();
        p *= (multiplicity * d) as f64 / trace;

        let mut copies: Vec<DMatrix<f64>> = Vec::new();
        let mut complement = DMatrix::<f64>::identity(n, n);
        'search: for col in 0..n {
            for row in 0..d {
                if copies.len() == multiplicity {
                    break 'search;
                }
                let mut r = DMatrix::<f64>::zeros(d, n);
                r[(row, col)] = 1.0;
                let r = r * &p * &complement;
                let b = schur_average(irrep, rep, &r);
                let gram = &b * b.transpose();
                let scale = gram.trace() / d as f64;
                if scale < 1e-8 {
                    continue;
                }
                let b = b / scale.sqrt();
                let gram = &b * b.transpose();
                if (gram - DMatrix::<f64>::identity(d, d)).amax() > 1e-8 {
                    continue;
                }
                complement -= b.transpose() * &b;
                copies.push(b);
            }
        }
        if copies.len() < multiplicity {
            return Err(EncpError::DecompositionFailure(format!(
                "found {} of {} copies of irrep {}",
                copies.len(),
                multiplicity,
                irrep.name()
            )));
        }
        for mut copy in copies {
            canonicalize_copy(&mut copy, irrep);
            rows.push(copy);
        }
        blocks.push(IsoBlock {
            irrep_id: irrep.id(),
            multiplicity,
            dim: d,
            offset,
        });
        offset += multiplicity * d;
    }
    check_dim(n, offset, "isotypic blocks must cover the representation")?;

    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut at = 0;
    for r in &rows {
        q.view_mut((at, 0), (r.nrows(), n)).copy_from(r);
        at += r.nrows();
    }
    let iso_rep = block_representation(irreps, &blocks)?;
    let basis = IsotypicBasis { q, blocks, iso_rep };
    let residual = basis.block_residual(rep);
    if residual > 1e-8 || basis.orthogonality_error() > 1e-8 {
        return Err(EncpError::DecompositionFailure(format!(
            "block residual {residual:e} exceeds tolerance"
        )));
    }
    Ok(basis)
}
