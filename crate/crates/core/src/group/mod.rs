//! Finite groups, real representations and isotypic decompositions.
//!
//! Groups are stored concretely as Cayley tables over element indices
//! `0..order`. Alongside the table every group remembers how it was built
//! ([`GroupKind`]) so that its real irreducible representations can be
//! written down in closed form rather than searched for.

mod irreps;
mod isotypic;
mod rep;

pub use irreps::{character_inner, real_irreps, IrrepType, RealIrrep};
pub use isotypic::{character_projector, isotypic_decomposition, IsoBlock, IsotypicBasis};
pub use rep::{data_representation, regular_representation, GroupRepresentation};

use crate::error::{EncpError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Construction recipe for a supported group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    /// Rotations `r^b`, `b in 0..n`.
    Cyclic(usize),
    /// Order `2n` symmetries of the regular n-gon, elements `s^a r^b`.
    Dihedral(usize),
    /// Direct product; element `(i, j)` is stored at `i * |G2| + j`.
    Product(Box<GroupKind>, Box<GroupKind>),
}

impl GroupKind {
    pub fn order(&self) -> usize {
        match self {
            GroupKind::Cyclic(n) => *n,
            GroupKind::Dihedral(n) => 2 * n,
            GroupKind::Product(a, b) => a.order() * b.order(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            GroupKind::Cyclic(0) | GroupKind::Dihedral(0) => Err(EncpError::InvalidParameter(
                "group parameter n must be at least 1".into(),
            )),
            GroupKind::Product(a, b) => {
                a.validate()?;
                b.validate()
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKind::Cyclic(1) => write!(f, "trivial"),
            GroupKind::Cyclic(n) => write!(f, "C{n}"),
            GroupKind::Dihedral(n) => write!(f, "D{n}"),
            GroupKind::Product(a, b) => {
                // Products of trivial groups still print something parseable.
                let left = a.to_string().replace("trivial", "C1");
                let right = b.to_string().replace("trivial", "C1");
                write!(f, "{left}x{right}")
            }
        }
    }
}

impl FromStr for GroupKind {
    type Err = EncpError;

    /// Parses labels such as `trivial`, `C1`, `C6`, `D3`, `C2xC2`, `C2xC2xC2`.
    fn from_str(label: &str) -> Result<Self> {
        let label = label.trim();
        if label.eq_ignore_ascii_case("trivial") {
            return Ok(GroupKind::Cyclic(1));
        }
        let mut factors = label.split(['x', 'X']).map(parse_factor);
        let first = factors
            .next()
            .ok_or_else(|| EncpError::UnsupportedGroup(label.to_string()))??;
        factors.try_fold(first, |acc, next| {
            Ok(GroupKind::Product(Box::new(acc), Box::new(next?)))
        })
    }
}

fn parse_factor(token: &str) -> Result<GroupKind> {
    let unsupported = || EncpError::UnsupportedGroup(token.to_string());
    let mut chars = token.chars();
    let head = chars.next().ok_or_else(unsupported)?;
    let n: usize = chars.as_str().parse().map_err(|_| unsupported())?;
    let kind = match head {
        'C' | 'c' => GroupKind::Cyclic(n),
        'D' | 'd' => GroupKind::Dihedral(n),
        _ => return Err(unsupported()),
    };
    kind.validate()?;
    Ok(kind)
}

/// A finite group as an indexed Cayley table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteGroup {
    kind: GroupKind,
    cayley: Vec<Vec<usize>>,
    inverse: Vec<usize>,
    identity: usize,
}

/// Builds the group described by `kind`.
pub fn make_group(kind: GroupKind) -> Result<FiniteGroup> {
    kind.validate()?;
    let cayley = cayley_table(&kind);
    let order = cayley.len();
    let identity = 0;
    let inverse = (0..order)
        .map(|a| {
            (0..order)
                .find(|&b| cayley[a][b] == identity)
                .expect("every element of a group has an inverse")
        })
        .collect();
    Ok(FiniteGroup {
        kind,
        cayley,
        inverse,
        identity,
    })
}

fn cayley_table(kind: &GroupKind) -> Vec<Vec<usize>> {
    match kind {
        GroupKind::Cyclic(n) => (0..*n)
            .map(|a| (0..*n).map(|b| (a + b) % n).collect())
            .collect(),
        GroupKind::Dihedral(n) => {
            let n = *n;
            // s^a1 r^b1 * s^a2 r^b2 = s^(a1+a2) r^((-1)^a2 b1 + b2)
            let compose = |x: usize, y: usize| {
                let (a1, b1) = (x / n, x % n);
                let (a2, b2) = (y / n, y % n);
                let b1 = if a2 == 1 { (n - b1) % n } else { b1 };
                ((a1 + a2) % 2) * n + (b1 + b2) % n
            };
            (0..2 * n)
                .map(|x| (0..2 * n).map(|y| compose(x, y)).collect())
                .collect()
        }
        GroupKind::Product(a, b) => {
            let ta = cayley_table(a);
            let tb = cayley_table(b);
            let nb = tb.len();
            let order = ta.len() * nb;
            (0..order)
                .map(|x| {
                    (0..order)
                        .map(|y| ta[x / nb][y / nb] * nb + tb[x % nb][y % nb])
                        .collect()
                })
                .collect()
        }
    }
}

impl FiniteGroup {
    pub fn trivial() -> Self {
        make_group(GroupKind::Cyclic(1)).expect("C1 is valid")
    }

    pub fn from_label(label: &str) -> Result<Self> {
        make_group(label.parse()?)
    }

    pub fn kind(&self) -> &GroupKind {
        &self.kind
    }

    pub fn label(&self) -> String {
        self.kind.to_string()
    }

    pub fn order(&self) -> usize {
        self.cayley.len()
    }

    pub fn identity(&self) -> usize {
        self.identity
    }

    pub fn is_trivial(&self) -> bool {
        self.order() == 1
    }

    /// Index of `a * b`.
    pub fn compose(&self, a: usize, b: usize) -> usize {
        self.cayley[a][b]
    }

    pub fn inverse(&self, a: usize) -> usize {
        self.inverse[a]
    }

    pub fn cayley(&self) -> &[Vec<usize>] {
        &self.cayley
    }

    pub fn elements(&self) -> std::ops::Range<usize> {
        0..self.order()
    }

    /// Checks identity, inverse and associativity axioms on the full table.
    pub fn check_axioms(&self) -> bool {
        let n = self.order();
        let e = self.identity;
        let unit = (0..n).all(|j| self.cayley[e][j] == j && self.cayley[j][e] == j);
        let inv = (0..n).all(|j| self.cayley[j][self.inverse[j]] == e);
        let assoc = (0..n).all(|a| {
            (0..n).all(|b| {
                (0..n).all(|c| {
                    self.cayley[self.cayley[a][b]][c] == self.cayley[a][self.cayley[b][c]]
                })
            })
        });
        unit && inv && assoc
    }
}
