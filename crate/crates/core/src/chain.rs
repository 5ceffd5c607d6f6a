//! Chain geometry shared by the lattice and model layers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Open,
    Periodic,
}

/// Which alternate sites a population probe addresses, named by their
/// 1-based labels: `Even` is sites 2, 4, 6, ... (0-based indices 1, 3, 5, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sublattice {
    #[default]
    Even,
    Odd,
}

impl Sublattice {
    /// Whether the 0-based site index belongs to this sublattice.
    pub fn contains(self, site: usize) -> bool {
        match self {
            Sublattice::Even => site % 2 == 1,
            Sublattice::Odd => site.is_multiple_of(2),
        }
    }

    pub fn sites(self, num_sites: usize) -> Vec<usize> {
        (0..num_sites).filter(|&j| self.contains(j)).collect()
    }
}

/// Nearest-neighbour bonds `(j, j+1)`. The periodic wrap bond is only added
/// for `L >= 3`; for two sites it would double the single bond.
pub fn bonds(num_sites: usize, boundary: Boundary) -> Vec<(usize, usize)> {
    let mut out: Vec<_> = (0..num_sites.saturating_sub(1))
        .map(|j| (j, j + 1))
        .collect();
    if boundary == Boundary::Periodic && num_sites >= 3 {
        out.push((num_sites - 1, 0));
    }
    out
}
