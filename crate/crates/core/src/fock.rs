//! Bosonic Fock space for a fixed number of particles on a finite chain, and
//! sparse second-quantized one- and two-body operators acting on it.
//!
//! States are occupation vectors `(n_0, ..., n_{L-1})` with `sum n_j = N`,
//! ordered lexicographically descending: `(N, 0, ..., 0)` comes first and
//! `(0, ..., 0, N)` last. Sites are 0-based throughout the crate.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the Hilbert-space dimension accepted by [`FockBasis::build`].
pub const DEFAULT_DIMENSION_CAP: usize = 50_000;

/// Tag written into serialized artifacts to identify the state ordering.
pub const ORDERING_TAG: &str = "lexicographic-descending";

/// Relative tolerance for the Hermiticity check.
pub const HERMITICITY_TOLERANCE: f64 = 1e-12;

pub type Occupation = Vec<u16>;

/// `binomial(n, k)` in 128-bit arithmetic; `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Number of ways to place `num_particles` bosons on `num_sites` sites.
pub fn fock_dimension(num_sites: usize, num_particles: usize) -> Option<u128> {
    if num_sites == 0 {
        return Some(0);
    }
    binomial(
        (num_particles + num_sites - 1) as u64,
        (num_sites - 1) as u64,
    )
}

/// Lightweight identity of a basis, carried by every operator so that
/// operators and states from different bases are never mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisShape {
    pub num_sites: usize,
    pub num_particles: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct FockBasis {
    num_sites: usize,
    num_particles: usize,
    states: Vec<Occupation>,
    index_of: HashMap<Occupation, usize>,
}

impl FockBasis {
    pub fn build(num_sites: usize, num_particles: usize) -> Result<Self> {
        Self::build_with_cap(num_sites, num_particles, DEFAULT_DIMENSION_CAP)
    }

    pub fn build_with_cap(num_sites: usize, num_particles: usize, cap: usize) -> Result<Self> {
        if num_sites == 0 {
            return Err(Error::InvalidSpec("a chain needs at least one site".into()));
        }
        if num_particles > u16::MAX as usize {
            return Err(Error::InvalidSpec(format!(
                "particle number {num_particles} exceeds the occupation range"
            )));
        }
        let dim = fock_dimension(num_sites, num_particles).unwrap_or(u128::MAX);
        if dim > cap as u128 {
            return Err(Error::Capacity { dim, cap });
        }

        let mut states = Vec::with_capacity(dim as usize);
        let mut current = vec![0u16; num_sites];
        enumerate(&mut current, 0, num_particles as u16, &mut states);
        debug_assert_eq!(states.len() as u128, dim);

        let index_of = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();

        Ok(Self {
            num_sites,
            num_particles,
            states,
            index_of,
        })
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn num_particles(&self) -> usize {
        self.num_particles
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn shape(&self) -> BasisShape {
        BasisShape {
            num_sites: self.num_sites,
            num_particles: self.num_particles,
            dim: self.dim(),
        }
    }

    pub fn states(&self) -> &[Occupation] {
        &self.states
    }

    pub fn state(&self, index: usize) -> &[u16] {
        &self.states[index]
    }

    pub fn index_of(&self, occupation: &[u16]) -> Option<usize> {
        self.index_of.get(occupation).copied()
    }

    /// Unit vector for the Fock state with the given occupations.
    pub fn fock_state(&self, occupation: &[u16]) -> Result<Vec<Complex64>> {
        let idx = self.index_of(occupation).ok_or_else(|| {
            Error::InvalidSpec(format!("{occupation:?} is not a state of this basis"))
        })?;
        let mut v = vec![Complex64::new(0.0, 0.0); self.dim()];
        v[idx] = Complex64::new(1.0, 0.0);
        Ok(v)
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.num_sites {
            return Err(Error::SiteOutOfRange {
                site,
                num_sites: self.num_sites,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> BasisJson {
        BasisJson {
            num_sites: self.num_sites,
            num_particles: self.num_particles,
            dim: self.dim(),
            ordering: ORDERING_TAG.to_string(),
            states: self.states.clone(),
        }
    }
}

fn enumerate(current: &mut [u16], site: usize, remaining: u16, out: &mut Vec<Occupation>) {
    if site + 1 == current.len() {
        current[site] = remaining;
        out.push(current.to_vec());
        return;
    }
    for n in (0..=remaining).rev() {
        current[site] = n;
        enumerate(current, site + 1, remaining - n, out);
    }
    current[site] = 0;
}

/// Serialized basis layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisJson {
    pub num_sites: usize,
    pub num_particles: usize,
    pub dim: usize,
    pub ordering: String,
    pub states: Vec<Occupation>,
}

/// Real symmetric sparse operator in compressed-row storage.
///
/// Every operator of the model (hopping, interaction, populations,
/// coherences) has real matrix elements in the Fock basis, so Hermitian here
/// means real symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    shape: BasisShape,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    hermitian: bool,
}

impl HermitianOperator {
    /// Assemble from `(row, col, value)` triplets. Duplicates are summed and
    /// exact zeros dropped. Fails if the result is not symmetric to
    /// [`HERMITICITY_TOLERANCE`] relative to its largest entry.
    pub fn from_triplets(
        shape: BasisShape,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let op = Self::assemble(shape, triplets)?;
        let deviation = op.asymmetry();
        let scale = op.max_abs().max(1.0);
        if deviation > HERMITICITY_TOLERANCE * scale {
            return Err(Error::NotHermitian { deviation });
        }
        Ok(op)
    }

    fn assemble(
        shape: BasisShape,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let dim = shape.dim;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for (r, c, v) in triplets {
            if r >= dim || c >= dim {
                return Err(Error::BasisMismatch {
                    expected: dim,
                    found: r.max(c) + 1,
                });
            }
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut iter = row.into_iter().peekable();
            while let Some((c, mut v)) = iter.next() {
                while let Some(&(c2, v2)) = iter.peek() {
                    if c2 != c {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            shape,
            row_ptr,
            col_idx,
            values,
            hermitian: true,
        })
    }

    pub fn zeros(shape: BasisShape) -> Self {
        Self {
            shape,
            row_ptr: vec![0; shape.dim + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
            hermitian: true,
        }
    }

    pub fn identity(shape: BasisShape) -> Self {
        Self {
            shape,
            row_ptr: (0..=shape.dim).collect(),
            col_idx: (0..shape.dim).collect(),
            values: vec![1.0; shape.dim],
            hermitian: true,
        }
    }

    pub fn from_diagonal(shape: BasisShape, diag: &[f64]) -> Result<Self> {
        if diag.len() != shape.dim {
            return Err(Error::BasisMismatch {
                expected: shape.dim,
                found: diag.len(),
            });
        }
        Self::from_triplets(shape, diag.iter().enumerate().map(|(i, &d)| (i, i, d)))
    }

    pub fn shape(&self) -> BasisShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim()).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|A_rc - A_cr|`.
    pub fn asymmetry(&self) -> f64 {
        self.triplets()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }

    /// Diagonal entries if the operator has no off-diagonal elements.
    pub fn as_diagonal(&self) -> Option<Vec<f64>> {
        let mut diag = vec![0.0; self.dim()];
        for (r, c, v) in self.triplets() {
            if r != c {
                return None;
            }
            diag[r] = v;
        }
        Some(diag)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// `y = A x` for complex vectors.
    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(y.len(), self.dim());
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += x[self.col_idx[k]] * self.values[k];
            }
            *out = acc;
        }
    }

    pub fn apply_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); x.len()];
        self.apply(x, &mut y);
        y
    }

    /// `y = A x` for real vectors.
    pub fn apply_real(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += x[self.col_idx[k]] * self.values[k];
            }
            *out = acc;
        }
    }

    /// `<psi|A|psi>` (real for a Hermitian operator); `psi` need not be normalized.
    pub fn expectation(&self, psi: &[Complex64]) -> f64 {
        let mut acc = 0.0;
        for (r, pr) in psi.iter().enumerate() {
            let mut row = Complex64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row += psi[self.col_idx[k]] * self.values[k];
            }
            acc += (pr.conj() * row).re;
        }
        acc
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// `sum_i c_i A_i`; all terms must share a basis.
    pub fn linear_combination(terms: &[(f64, &HermitianOperator)]) -> Result<Self> {
        let shape = terms
            .first()
            .map(|(_, op)| op.shape)
            .ok_or_else(|| Error::InvalidSpec("empty linear combination".into()))?;
        for (_, op) in terms {
            if op.shape != shape {
                return Err(Error::BasisMismatch {
                    expected: shape.dim,
                    found: op.dim(),
                });
            }
        }
        Self::from_triplets(
            shape,
            terms
                .iter()
                .flat_map(|&(c, op)| op.triplets().map(move |(r, k, v)| (r, k, c * v))),
        )
    }

    /// Sparse product `A B` (not Hermitian in general, so the symmetry check
    /// is skipped and the flag reflects the actual result).
    pub fn matmul(&self, other: &HermitianOperator) -> Result<HermitianOperator> {
        if self.shape != other.shape {
            return Err(Error::BasisMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let dim = self.dim();
        let mut acc = vec![0.0; dim];
        let mut seen = vec![false; dim];
        let mut touched = Vec::new();
        let mut triplets = Vec::new();
        for r in 0..dim {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            for &c in &touched {
                triplets.push((r, c, acc[c]));
                acc[c] = 0.0;
                seen[c] = false;
            }
            touched.clear();
        }
        let mut out = Self::assemble(self.shape, triplets)?;
        let scale = out.max_abs().max(1.0);
        out.hermitian = out.asymmetry() <= HERMITICITY_TOLERANCE * scale;
        Ok(out)
    }

    /// Largest absolute entry of `[A, B] = AB - BA`.
    pub fn commutator_norm(&self, other: &HermitianOperator) -> Result<f64> {
        let ab = self.matmul(other)?;
        let ba = other.matmul(self)?;
        let mut max: f64 = 0.0;
        for (r, c, v) in ab.triplets() {
            max = max.max((v - ba.get(r, c)).abs());
        }
        for (r, c, v) in ba.triplets() {
            max = max.max((v - ab.get(r, c)).abs());
        }
        Ok(max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v;
        }
        m
    }

    pub fn to_json(&self) -> OperatorJson {
        OperatorJson {
            num_sites: self.shape.num_sites,
            num_particles: self.shape.num_particles,
            dim: self.dim(),
            ordering: ORDERING_TAG.to_string(),
            hermitian: self.hermitian,
            triplets: self.triplets().map(|(r, c, v)| (r, c, v, 0.0)).collect(),
        }
    }

    pub fn from_json(json: &OperatorJson) -> Result<Self> {
        if json.ordering != ORDERING_TAG {
            return Err(Error::Parse(format!(
                "unknown ordering `{}`",
                json.ordering
            )));
        }
        if json.triplets.iter().any(|t| t.3 != 0.0) {
            return Err(Error::Parse(
                "complex matrix elements are not supported".into(),
            ));
        }
        let shape = BasisShape {
            num_sites: json.num_sites,
            num_particles: json.num_particles,
            dim: json.dim,
        };
        Self::from_triplets(shape, json.triplets.iter().map(|&(r, c, v, _)| (r, c, v)))
    }
}

/// Serialized operator layout: sparse `(row, col, re, im)` triplets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OperatorJson {
    pub num_sites: usize,
    pub num_particles: usize,
    pub dim: usize,
    pub ordering: String,
    pub hermitian: bool,
    pub triplets: Vec<(usize, usize, f64, f64)>,
}

/// `b_j^dag b_k + b_k^dag b_j` for `j != k`, and the number operator `n_j`
/// for `j == k`.
pub fn hopping_operator(basis: &FockBasis, j: usize, k: usize) -> Result<HermitianOperator> {
    basis.check_site(j)?;
    basis.check_site(k)?;
    if j == k {
        return number_operator(basis, j);
    }
    let mut triplets = Vec::new();
    let mut target = vec![0u16; basis.num_sites()];
    for (col, state) in basis.states().iter().enumerate() {
        for &(to, from) in &[(j, k), (k, j)] {
            if let Some((row, amp)) = transfer(basis, state, to, from, &mut target) {
                triplets.push((row, col, amp));
            }
        }
    }
    HermitianOperator::from_triplets(basis.shape(), triplets)
}

/// Row index and amplitude of `b_to^dag b_from |state>`, or `None` if the
/// source site is empty.
fn transfer(
    basis: &FockBasis,
    state: &[u16],
    to: usize,
    from: usize,
    scratch: &mut Vec<u16>,
) -> Option<(usize, f64)> {
    let n_from = state[from];
    if n_from == 0 {
        return None;
    }
    let n_to = state[to];
    scratch.clear();
    scratch.extend_from_slice(state);
    scratch[from] -= 1;
    scratch[to] += 1;
    let row = basis.index_of(scratch)?;
    Some((row, ((n_to as f64 + 1.0) * n_from as f64).sqrt()))
}

pub fn number_operator(basis: &FockBasis, j: usize) -> Result<HermitianOperator> {
    basis.check_site(j)?;
    let diag: Vec<f64> = basis.states().iter().map(|s| s[j] as f64).collect();
    HermitianOperator::from_diagonal(basis.shape(), &diag)
}

pub fn total_number_operator(basis: &FockBasis) -> HermitianOperator {
    let diag: Vec<f64> = basis
        .states()
        .iter()
        .map(|s| s.iter().map(|&n| n as f64).sum())
        .collect();
    HermitianOperator::from_diagonal(basis.shape(), &diag).expect("diagonal matches basis")
}

/// Diagonal operator with entries `sum_j n_j (n_j - 1)`.
pub fn interaction_operator(basis: &FockBasis) -> HermitianOperator {
    let diag: Vec<f64> = basis
        .states()
        .iter()
        .map(|s| s.iter().map(|&n| n as f64 * (n as f64 - 1.0)).sum())
        .collect();
    HermitianOperator::from_diagonal(basis.shape(), &diag).expect("diagonal matches basis")
}

/// General one-body operator `sum_jk m_jk b_j^dag b_k` for a real symmetric
/// site matrix `m` (row-major, `L x L`).
pub fn one_body_operator(basis: &FockBasis, m: &[Vec<f64>]) -> Result<HermitianOperator> {
    let l = basis.num_sites();
    if m.len() != l || m.iter().any(|row| row.len() != l) {
        return Err(Error::InvalidSpec(format!(
            "site matrix must be {l}x{l} to match the basis"
        )));
    }
    let mut triplets = Vec::new();
    let mut scratch = vec![0u16; l];
    for (col, state) in basis.states().iter().enumerate() {
        for j in 0..l {
            for k in 0..l {
                let mjk = m[j][k];
                if mjk == 0.0 {
                    continue;
                }
                if j == k {
                    triplets.push((col, col, mjk * state[j] as f64));
                } else if let Some((row, amp)) = transfer(basis, state, j, k, &mut scratch) {
                    triplets.push((row, col, mjk * amp));
                }
            }
        }
    }
    HermitianOperator::from_triplets(basis.shape(), triplets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn dimensions() {
        assert_eq!(FockBasis::build(1, 1).unwrap().dim(), 1);
        assert_eq!(FockBasis::build(2, 2).unwrap().dim(), 3);
        assert_eq!(FockBasis::build(6, 6).unwrap().dim(), 462);
        assert_eq!(FockBasis::build(3, 0).unwrap().dim(), 1);
        assert_eq!(fock_dimension(6, 6), Some(462));
    }

    #[test]
    fn two_site_ordering_is_descending() {
        let b = FockBasis::build(2, 2).unwrap();
        assert_eq!(b.states(), &[vec![2, 0], vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn index_map_inverts_states() {
        let b = FockBasis::build(4, 5).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (i, s) in b.states().iter().enumerate() {
            assert_eq!(s.iter().map(|&n| n as usize).sum::<usize>(), 5);
            assert_eq!(b.index_of(s), Some(i));
            assert!(seen.insert(s.clone()));
        }
        for w in b.states().windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn capacity_error_not_truncation() {
        let err = FockBasis::build_with_cap(6, 6, 100).unwrap_err();
        assert!(matches!(err, Error::Capacity { dim: 462, cap: 100 }));
        assert!(FockBasis::build(0, 3).is_err());
    }

    #[test]
    fn hopping_on_singly_occupied_pair() {
        let b = FockBasis::build(2, 2).unwrap();
        let op = hopping_operator(&b, 0, 1).unwrap();
        let out = op.apply_vec(&b.fock_state(&[1, 1]).unwrap());
        let s2 = 2f64.sqrt();
        assert!((out[b.index_of(&[2, 0]).unwrap()] - c(s2)).norm() < 1e-14);
        assert!((out[b.index_of(&[0, 2]).unwrap()] - c(s2)).norm() < 1e-14);
        assert!(out[b.index_of(&[1, 1]).unwrap()].norm() < 1e-14);
    }

    #[test]
    fn hopping_from_empty_site_vanishes() {
        let b = FockBasis::build(3, 2).unwrap();
        // (2,0,0): b_0^dag b_1 annihilates, only b_1^dag b_0 survives
        let op = hopping_operator(&b, 0, 1).unwrap();
        let out = op.apply_vec(&b.fock_state(&[2, 0, 0]).unwrap());
        let norm2: f64 = out.iter().map(|z| z.norm_sqr()).sum();
        assert!((out[b.index_of(&[1, 1, 0]).unwrap()].re - 2f64.sqrt()).abs() < 1e-14);
        assert!((norm2 - 2.0).abs() < 1e-14);
    }

    #[test]
    fn equal_sites_give_number_operator() {
        let b = FockBasis::build(3, 3).unwrap();
        let op = hopping_operator(&b, 1, 1).unwrap();
        for (i, s) in b.states().iter().enumerate() {
            assert_eq!(op.get(i, i), s[1] as f64);
        }
        assert!(op.as_diagonal().is_some());
    }

    #[test]
    fn site_out_of_range() {
        let b = FockBasis::build(3, 1).unwrap();
        assert!(matches!(
            hopping_operator(&b, 0, 3),
            Err(Error::SiteOutOfRange {
                site: 3,
                num_sites: 3
            })
        ));
    }

    #[test]
    fn interaction_entries() {
        let b = FockBasis::build(2, 2).unwrap();
        let op = interaction_operator(&b);
        assert_eq!(
            op.get(b.index_of(&[2, 0]).unwrap(), b.index_of(&[2, 0]).unwrap()),
            2.0
        );
        assert_eq!(op.get(1, 1), 0.0);
        let b6 = FockBasis::build(6, 6).unwrap();
        let i = b6.index_of(&[6, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(interaction_operator(&b6).get(i, i), 30.0);
    }

    #[test]
    fn hopping_conserves_particle_number() {
        for (l, n) in [(2, 3), (3, 3), (4, 2), (5, 3)] {
            let b = FockBasis::build(l, n).unwrap();
            let ntot = total_number_operator(&b);
            for j in 0..l {
                for k in 0..l {
                    let h = hopping_operator(&b, j, k).unwrap();
                    assert_eq!(ntot.commutator_norm(&h).unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn sparse_square_matches_dense_product() {
        let b = FockBasis::build(3, 4).unwrap();
        assert!(b.dim() <= 50);
        let h = hopping_operator(&b, 0, 1).unwrap();
        let g = hopping_operator(&b, 1, 2).unwrap();
        let sparse = h.matmul(&g).unwrap().to_dense();
        let dense = h.to_dense() * g.to_dense();
        assert!((sparse - dense).abs().max() < 1e-12);
        let sq = h.matmul(&h).unwrap();
        assert!(sq.is_hermitian());
        assert!((sq.to_dense() - h.to_dense() * h.to_dense()).abs().max() < 1e-12);
    }

    #[test]
    fn one_body_reproduces_hopping() {
        let b = FockBasis::build(3, 3).unwrap();
        let m = vec![
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ];
        let op = one_body_operator(&b, &m).unwrap();
        let direct = HermitianOperator::linear_combination(&[
            (1.0, &hopping_operator(&b, 0, 1).unwrap()),
            (1.0, &hopping_operator(&b, 1, 2).unwrap()),
        ])
        .unwrap();
        assert!((op.to_dense() - direct.to_dense()).abs().max() < 1e-14);
    }

    #[test]
    fn asymmetric_triplets_rejected() {
        let shape = FockBasis::build(2, 1).unwrap().shape();
        assert!(matches!(
            HermitianOperator::from_triplets(shape, [(0, 1, 1.0)]),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn json_layout_round_trip() {
        let b = FockBasis::build(3, 2).unwrap();
        let op = hopping_operator(&b, 0, 2).unwrap();
        let text = serde_json::to_string(&op.to_json()).unwrap();
        let back: OperatorJson = serde_json::from_str(&text).unwrap();
        assert_eq!(HermitianOperator::from_json(&back).unwrap(), op);
        assert_eq!(b.to_json().ordering, ORDERING_TAG);
    }

    proptest::proptest! {
        #[test]
        fn dimension_and_index_are_consistent(sites in 1usize..6, particles in 0usize..6) {
            let b = FockBasis::build(sites, particles).unwrap();
            proptest::prop_assert_eq!(Some(b.dim() as u128), binomial((sites + particles - 1) as u64, particles as u64));
            for (i, s) in b.states().iter().enumerate() {
                proptest::prop_assert_eq!(b.index_of(s), Some(i));
            }
        }

        #[test]
        fn hopping_pairs_are_adjoint(sites in 2usize..5, particles in 1usize..5, j in 0usize..5, k in 0usize..5) {
            let b = FockBasis::build(sites, particles).unwrap();
            let (j, k) = (j % sites, k % sites);
            let op = hopping_operator(&b, j, k).unwrap();
            proptest::prop_assert!(op.is_hermitian());
            proptest::prop_assert!(op.commutator_norm(&total_number_operator(&b)).unwrap() < 1e-12);
        }
    }
}
