//! Bose-Hubbard Hamiltonian and the population/coherence measurement
//! operators in the Fock basis, with exact diagonalization.
//!
//! The couplings are parameterized by `r = U/J` alone: internally
//! `J = 1/sqrt(1 + r^2)`, `U = r/sqrt(1 + r^2)` (so `r = inf` is `J = 0`),
//! and the Hamiltonian is then multiplied by `c = span / (E_max - E_min)` so
//! its spectrum always spans the same width. Only eigenvalue differences
//! enter the spectra, so no shift is applied.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::chain::{bonds, Boundary, Sublattice};
use crate::error::{Error, Result};
use crate::fock::{
    hopping_operator, interaction_operator, number_operator, one_body_operator, FockBasis,
    HermitianOperator,
};
use crate::lattice::MeasurementMatrix;

pub const DEFAULT_RESCALE_SPAN: f64 = 20.0;
pub const DENSE_SOLVER_CAP: usize = 5000;
pub const GROUND_STATE_DEGENERACY_TOLERANCE: f64 = 1e-10;
pub const COMMUTATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasurementKind {
    /// Populations of one sublattice, `sum_{j in sub} n_j`.
    Population {
        #[serde(default)]
        sublattice: Sublattice,
    },
    /// Nearest-neighbour coherences, `sum_j b_j^dag b_{j+1} + h.c.`.
    Coherence,
}

impl MeasurementKind {
    pub fn population() -> Self {
        MeasurementKind::Population {
            sublattice: Sublattice::Even,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            MeasurementKind::Population { .. } => "pop",
            MeasurementKind::Coherence => "coh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_sites: usize,
    pub num_particles: usize,
    /// `U/J`; `inf` (or the string `"inf"` in JSON) switches hopping off.
    #[serde(with = "ratio_serde")]
    pub u_over_j: f64,
    /// Target `E_max - E_min`; `null` disables rescaling.
    #[serde(default = "default_span")]
    pub rescale_span: Option<f64>,
    #[serde(default)]
    pub boundary: Boundary,
    pub measurement: MeasurementKind,
    /// Overrides the idealized measurement operator when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement_matrix: Option<MeasurementMatrix>,
}

fn default_span() -> Option<f64> {
    Some(DEFAULT_RESCALE_SPAN)
}

/// Serde adapters that write an infinite `U/J` as the string `"inf"`.
pub mod ratio_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Ratio {
            Num(f64),
            Text(String),
        }
        match Ratio::deserialize(d)? {
            Ratio::Num(v) => Ok(v),
            Ratio::Text(t) if t == "inf" || t == "infinity" => Ok(f64::INFINITY),
            Ratio::Text(t) => Err(serde::de::Error::custom(format!("invalid U/J `{t}`"))),
        }
    }

    #[derive(Serialize, Deserialize)]
    #[serde(transparent)]
    struct Item(#[serde(with = "super::ratio_serde")] f64);

    /// The same encoding for a list of ratios.
    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|&x| Item(x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?
                .into_iter()
                .map(|i| i.0)
                .collect())
        }
    }
}

impl ModelSpec {
    pub fn new(
        num_sites: usize,
        num_particles: usize,
        u_over_j: f64,
        measurement: MeasurementKind,
    ) -> Self {
        Self {
            num_sites,
            num_particles,
            u_over_j,
            rescale_span: default_span(),
            boundary: Boundary::Open,
            measurement,
            measurement_matrix: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sites == 0 {
            return Err(Error::InvalidSpec("need at least one site".into()));
        }
        if self.u_over_j.is_nan() || self.u_over_j < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "U/J must be >= 0, got {}",
                self.u_over_j
            )));
        }
        if let Some(span) = self.rescale_span {
            if !(span > 0.0 && span.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "rescale span must be > 0, got {span}"
                )));
            }
        }
        if let Some(m) = &self.measurement_matrix {
            if m.num_sites() != self.num_sites {
                return Err(Error::InvalidSpec(format!(
                    "measurement matrix is {}x{} but the chain has {} sites",
                    m.num_sites(),
                    m.num_sites(),
                    self.num_sites
                )));
            }
        }
        Ok(())
    }

    /// `(J, U)` before rescaling, with `J^2 + U^2 = 1`.
    pub fn couplings(&self) -> (f64, f64) {
        if self.u_over_j.is_infinite() {
            (0.0, 1.0)
        } else {
            let norm = (1.0 + self.u_over_j * self.u_over_j).sqrt();
            (1.0 / norm, self.u_over_j / norm)
        }
    }

    pub fn basis(&self) -> Result<FockBasis> {
        FockBasis::build(self.num_sites, self.num_particles)
    }
}

fn check_basis(spec: &ModelSpec, basis: &FockBasis) -> Result<()> {
    if basis.num_sites() != spec.num_sites || basis.num_particles() != spec.num_particles {
        return Err(Error::InvalidSpec(format!(
            "basis is (L={}, N={}) but the model is (L={}, N={})",
            basis.num_sites(),
            basis.num_particles(),
            spec.num_sites,
            spec.num_particles
        )));
    }
    Ok(())
}

/// `sum_<jk> (b_j^dag b_k + h.c.)` over nearest-neighbour bonds.
pub fn kinetic_operator(basis: &FockBasis, boundary: Boundary) -> Result<HermitianOperator> {
    let terms = bonds(basis.num_sites(), boundary)
        .into_iter()
        .map(|(a, b)| hopping_operator(basis, a, b))
        .collect::<Result<Vec<_>>>()?;
    if terms.is_empty() {
        return Ok(HermitianOperator::zeros(basis.shape()));
    }
    let weighted: Vec<_> = terms.iter().map(|t| (1.0, t)).collect();
    HermitianOperator::linear_combination(&weighted)
}

/// `-J sum_<jk>(b_j^dag b_k + h.c.) + (U/2) sum_j n_j (n_j - 1)`.
pub fn bose_hubbard(
    basis: &FockBasis,
    hopping: f64,
    interaction: f64,
    boundary: Boundary,
) -> Result<HermitianOperator> {
    let kinetic = kinetic_operator(basis, boundary)?;
    let onsite = interaction_operator(basis);
    HermitianOperator::linear_combination(&[(-hopping, &kinetic), (interaction / 2.0, &onsite)])
}

#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub operator: HermitianOperator,
    /// `J` and `U` after rescaling.
    pub hopping: f64,
    pub interaction: f64,
    pub rescale_factor: f64,
    /// `E_max - E_min` before rescaling.
    pub bare_span: f64,
}

pub fn build_hamiltonian(spec: &ModelSpec, basis: &FockBasis) -> Result<Hamiltonian> {
    spec.validate()?;
    check_basis(spec, basis)?;
    let (j, u) = spec.couplings();
    let bare = bose_hubbard(basis, j, u, spec.boundary)?;
    let eig = eigenvalues(&bare)?;
    let bare_span = eig.last().copied().unwrap_or(0.0) - eig.first().copied().unwrap_or(0.0);
    let rescale_factor = match spec.rescale_span {
        Some(target) => {
            if !(bare_span > 1e-12) {
                return Err(Error::ZeroSpan);
            }
            target / bare_span
        }
        None => 1.0,
    };
    Ok(Hamiltonian {
        operator: bare.scaled(rescale_factor),
        hopping: j * rescale_factor,
        interaction: u * rescale_factor,
        rescale_factor,
        bare_span,
    })
}

#[derive(Debug, Clone)]
pub struct Measurement {
    pub kind: MeasurementKind,
    /// Unit operator norm.
    pub operator: HermitianOperator,
    /// Operator norm before normalization.
    pub raw_norm: f64,
    /// Largest entry of the commutator with the part of `H` the operator is
    /// meant to commute with.
    pub commutator_check: f64,
}

pub fn build_measurement(spec: &ModelSpec, basis: &FockBasis) -> Result<Measurement> {
    spec.validate()?;
    check_basis(spec, basis)?;
    let kinetic = kinetic_operator(basis, spec.boundary)?;
    let onsite = interaction_operator(basis);

    let (raw, commutes_with, strict) = match (&spec.measurement_matrix, spec.measurement) {
        (Some(matrix), kind) => {
            // drop the total-population offset: min diagonal entry times N
            let shift = matrix
                .entries
                .iter()
                .enumerate()
                .map(|(j, row)| row[j])
                .fold(f64::INFINITY, f64::min);
            let mut entries = matrix.entries.clone();
            for (j, row) in entries.iter_mut().enumerate() {
                row[j] -= shift;
            }
            let partner = match kind {
                MeasurementKind::Population { .. } => &onsite,
                MeasurementKind::Coherence => &kinetic,
            };
            (one_body_operator(basis, &entries)?, partner, false)
        }
        (None, MeasurementKind::Population { sublattice }) => {
            let sites = sublattice.sites(spec.num_sites);
            let ops = sites
                .iter()
                .map(|&j| number_operator(basis, j))
                .collect::<Result<Vec<_>>>()?;
            let op = if ops.is_empty() {
                HermitianOperator::zeros(basis.shape())
            } else {
                let terms: Vec<_> = ops.iter().map(|o| (1.0, o)).collect();
                HermitianOperator::linear_combination(&terms)?
            };
            (op, &onsite, true)
        }
        (None, MeasurementKind::Coherence) => (kinetic.clone(), &kinetic, true),
    };

    let commutator_check = raw.commutator_norm(commutes_with)?;
    if strict && commutator_check > COMMUTATION_TOLERANCE {
        return Err(Error::Commutation {
            what: format!("{} measurement", spec.measurement.tag()),
            norm: commutator_check,
        });
    }
    let raw_norm = operator_norm(&raw)?;
    if !(raw_norm > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "{} measurement operator vanishes on this chain",
            spec.measurement.tag()
        )));
    }
    Ok(Measurement {
        kind: spec.measurement,
        operator: raw.scaled(1.0 / raw_norm),
        raw_norm,
        commutator_check,
    })
}

/// Spectral norm `max |lambda|` of a Hermitian operator.
pub fn operator_norm(op: &HermitianOperator) -> Result<f64> {
    if let Some(diag) = op.as_diagonal() {
        return Ok(diag.iter().fold(0.0, |m, d| m.max(d.abs())));
    }
    let eig = eigenvalues(op)?;
    Ok(eig.iter().fold(0.0, |m, e| m.max(e.abs())))
}

fn dense_checked(op: &HermitianOperator) -> Result<DMatrix<f64>> {
    if op.dim() > DENSE_SOLVER_CAP {
        return Err(Error::Capacity {
            dim: op.dim() as u128,
            cap: DENSE_SOLVER_CAP,
        });
    }
    Ok(op.to_dense())
}

/// Ascending eigenvalues.
pub fn eigenvalues(op: &HermitianOperator) -> Result<Vec<f64>> {
    if let Some(mut diag) = op.as_diagonal() {
        diag.sort_by(f64::total_cmp);
        return Ok(diag);
    }
    let dense = dense_checked(op)?;
    let mut values: Vec<f64> = dense.symmetric_eigenvalues().iter().copied().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver("non-finite eigenvalue".into()));
    }
    values.sort_by(f64::total_cmp);
    Ok(values)
}

#[derive(Debug, Clone)]
pub struct SpectralData {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal columns, real. Sign fixed so the largest-magnitude
    /// component of each column is positive.
    pub eigenvectors: DMatrix<f64>,
    pub rescale_factor: f64,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vector(&self, i: usize) -> Vec<Complex64> {
        self.eigenvectors
            .column(i)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect()
    }

    /// Index ranges of eigenvalues equal to within `tolerance`.
    pub fn degenerate_blocks(&self, tolerance: f64) -> Vec<std::ops::Range<usize>> {
        let mut blocks = Vec::new();
        let mut start = 0;
        for i in 1..=self.dim() {
            if i == self.dim() || self.eigenvalues[i] - self.eigenvalues[i - 1] > tolerance {
                if i - start > 1 {
                    blocks.push(start..i);
                }
                start = i;
            }
        }
        blocks
    }

    /// Rotate every degenerate block so that `op` is diagonal inside it.
    /// The eigenvalue equation is untouched; only the choice of basis within
    /// each degenerate subspace changes. Returns the number of rotated blocks.
    pub fn diagonalize_within_blocks(
        &mut self,
        op: &HermitianOperator,
        tolerance: f64,
    ) -> Result<usize> {
        let blocks = self.degenerate_blocks(tolerance);
        for block in &blocks {
            let cols = self
                .eigenvectors
                .columns(block.start, block.len())
                .into_owned();
            let mut applied = DMatrix::zeros(cols.nrows(), cols.ncols());
            let mut out = vec![0.0; cols.nrows()];
            for c in 0..cols.ncols() {
                let col: Vec<f64> = cols.column(c).iter().copied().collect();
                op.apply_real(&col, &mut out);
                applied.column_mut(c).copy_from_slice(&out);
            }
            let projected = cols.transpose() * applied;
            let sym = (&projected + projected.transpose()) * 0.5;
            let eig = SymmetricEigen::try_new(sym, 1e-15, 10_000)
                .ok_or_else(|| Error::Eigensolver("block diagonalization failed".into()))?;
            let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let rotation = DMatrix::from_fn(order.len(), order.len(), |r, c| {
                eig.eigenvectors[(r, order[c])]
            });
            let rotated = cols * rotation;
            for (c, col) in rotated.column_iter().enumerate() {
                let mut v: Vec<f64> = col.iter().copied().collect();
                fix_sign(&mut v);
                self.eigenvectors
                    .column_mut(block.start + c)
                    .copy_from_slice(&v);
            }
        }
        Ok(blocks.len())
    }
}

/// Largest-magnitude component made positive; ties within 1e-8 go to the
/// lowest index so mirror-symmetric columns get a reproducible sign.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() + 1e-8 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Polish an approximate eigenbasis with cyclic Jacobi sweeps on `V^T A V`.
/// The QR solver alone leaves residuals near 1e-9 ||A|| at a few hundred
/// dimensions; the refined basis is accurate to round-off.
fn jacobi_refine(matrix: &DMatrix<f64>, basis: &mut DMatrix<f64>) -> Vec<f64> {
    let dim = matrix.nrows();
    let mut a = basis.transpose() * matrix * &*basis;
    let a_sym = (&a + a.transpose()) * 0.5;
    a = a_sym;
    let scale = a.abs().max().max(f64::MIN_POSITIVE);
    for _sweep in 0..12 {
        let mut rotated = false;
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-17 * scale {
                    continue;
                }
                rotated = true;
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..dim {
                    let vkp = basis[(k, p)];
                    let vkq = basis[(k, q)];
                    basis[(k, p)] = c * vkp - s * vkq;
                    basis[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (0..dim).map(|i| a[(i, i)]).collect()
}

pub fn diagonalize(op: &HermitianOperator) -> Result<SpectralData> {
    diagonalize_scaled(op, 1.0)
}

/// As [`diagonalize`], recording the rescale factor carried by `op`.
pub fn diagonalize_scaled(op: &HermitianOperator, rescale_factor: f64) -> Result<SpectralData> {
    let dense = dense_checked(op)?;
    let dim = dense.nrows();
    let eig = SymmetricEigen::try_new(dense.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigensolver("symmetric eigensolver did not converge".into()))?;
    let mut basis = eig.eigenvectors;
    let values = jacobi_refine(&dense, &mut basis);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver("non-finite eigenvalue".into()));
    }
    let mut eigenvectors = DMatrix::zeros(dim, dim);
    for (c, &i) in order.iter().enumerate() {
        let mut v: Vec<f64> = basis.column(i).iter().copied().collect();
        fix_sign(&mut v);
        eigenvectors.column_mut(c).copy_from_slice(&v);
    }

    let scale = eigenvalues
        .iter()
        .fold(0.0f64, |m, e| m.max(e.abs()))
        .max(f64::MIN_POSITIVE);
    let residual = (&dense * &eigenvectors
        - &eigenvectors
            * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigenvalues.clone())))
    .column_iter()
    .map(|c| c.norm())
    .fold(0.0, f64::max);
    if residual > 1e-9 * scale {
        return Err(Error::Eigensolver(format!(
            "residual {residual:e} exceeds 1e-9 ||H||"
        )));
    }
    let gram = eigenvectors.transpose() * &eigenvectors;
    let ortho = (gram - DMatrix::identity(dim, dim)).abs().max();
    if ortho > 1e-10 {
        return Err(Error::Eigensolver(format!(
            "eigenvectors not orthonormal ({ortho:e})"
        )));
    }
    Ok(SpectralData {
        eigenvalues,
        eigenvectors,
        rescale_factor,
    })
}

#[derive(Debug, Clone)]
pub struct GroundState {
    pub energy: f64,
    pub gap: f64,
    pub vector: Vec<Complex64>,
}

pub fn ground_state(op: &HermitianOperator) -> Result<GroundState> {
    ground_state_from(&diagonalize(op)?)
}

pub fn ground_state_from(spectral: &SpectralData) -> Result<GroundState> {
    let e = &spectral.eigenvalues;
    let gap = if e.len() > 1 {
        e[1] - e[0]
    } else {
        f64::INFINITY
    };
    if gap < GROUND_STATE_DEGENERACY_TOLERANCE {
        return Err(Error::DegenerateGroundState {
            gap,
            tolerance: GROUND_STATE_DEGENERACY_TOLERANCE,
        });
    }
    Ok(GroundState {
        energy: e[0],
        gap,
        vector: spectral.vector(0),
    })
}

/// Everything the dynamics and spectra need for one parameter point.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub basis: FockBasis,
    pub hamiltonian: Hamiltonian,
    pub measurement: Measurement,
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let basis = spec.basis()?;
        let hamiltonian = build_hamiltonian(spec, &basis)?;
        let measurement = build_measurement(spec, &basis)?;
        Ok(Self {
            spec: spec.clone(),
            basis,
            hamiltonian,
            measurement,
        })
    }

    pub fn spectral(&self) -> Result<SpectralData> {
        diagonalize_scaled(&self.hamiltonian.operator, self.hamiltonian.rescale_factor)
    }
}
