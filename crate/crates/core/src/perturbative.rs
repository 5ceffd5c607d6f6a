//! Weak-measurement PSD from the exact spectrum: a Lorentzian at every
//! transition frequency `w_ij = E_i - E_j` with width
//! `G_ij = <M^2>_i + <M^2>_j - 2 <M>_i <M>_j` and weight `|<j|M|i>|^2`,
//! all eigenstates equally populated.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::HermitianOperator;
use crate::io::CsvTable;
use crate::model::{MeasurementKind, Model, ModelSpec, SpectralData};
use crate::spectrum::{maximize_overlap_with, LorentzFit, Normalization, OverlapSearch, Spectrum};

pub const DELTA_WIDTH_THRESHOLD: f64 = 1e-9;
pub const DEGENERACY_TOLERANCE: f64 = 1e-10;
/// Components lighter than this fraction of the heaviest are dropped.
pub const WEIGHT_FLOOR: f64 = 1e-24;
/// The width scan for perturbative spectra starts at this fraction of a
/// bin: their lines can be genuinely narrower than the rendering grid.
pub const SUB_BIN_WIDTH_FRACTION: f64 = 0.01;

pub fn default_search(grid: &FrequencyGrid) -> OverlapSearch {
    OverlapSearch {
        width_lower: Some(grid.spacing * SUB_BIN_WIDTH_FRACTION),
        ..OverlapSearch::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyGrid {
    pub cap: f64,
    pub spacing: f64,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self {
            cap: 40.0,
            spacing: 0.01,
        }
    }
}

impl FrequencyGrid {
    pub fn bins_per_side(&self) -> usize {
        (self.cap / self.spacing).round() as usize
    }

    pub fn len(&self) -> usize {
        2 * self.bins_per_side() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frequency(&self, k: usize) -> f64 {
        (k as f64 - self.bins_per_side() as f64) * self.spacing
    }

    fn nearest_bin(&self, omega: f64) -> Option<usize> {
        let k = (omega / self.spacing).round() as i64 + self.bins_per_side() as i64;
        (0..self.len() as i64).contains(&k).then_some(k as usize)
    }

    fn validate(&self) -> Result<()> {
        if !(self.cap > 0.0 && self.spacing > 0.0 && self.spacing <= self.cap) {
            return Err(Error::InvalidSpec(format!("bad frequency grid {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineComponent {
    pub i: usize,
    pub j: usize,
    pub omega: f64,
    pub width: f64,
    pub weight: f64,
}

impl LineComponent {
    pub fn is_delta(&self) -> bool {
        self.width < DELTA_WIDTH_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbativeSpectrum {
    /// `UnitSquare`-normalized, even in frequency.
    pub spectrum: Spectrum,
    /// `tr(M)/D`, subtracted from the diagonal when `spectrum.mean_removed`.
    pub stationary_mean: f64,
    pub components: Vec<LineComponent>,
    pub delta_weight: f64,
    pub total_weight: f64,
    /// Number of degenerate eigenvalue blocks in which the basis was
    /// rotated to diagonalize `M`.
    pub rotated_blocks: usize,
    pub warnings: Vec<String>,
}

impl PerturbativeSpectrum {
    pub fn delta_fraction(&self) -> f64 {
        if self.total_weight > 0.0 {
            self.delta_weight / self.total_weight
        } else {
            0.0
        }
    }

    pub fn components_csv(&self, header: serde_json::Value) -> CsvTable {
        let mut table = CsvTable::new(header, &["i", "j", "omega_ij", "Gamma_ij", "weight"]);
        for c in &self.components {
            table.push(vec![c.i as f64, c.j as f64, c.omega, c.width, c.weight]);
        }
        table
    }
}

/// `M` in the Hamiltonian eigenbasis (`V^T M V`) and the diagonal
/// `<i|M^2|i> = ||M v_i||^2`.
fn eigenbasis_matrix(
    spectral: &SpectralData,
    measurement: &HermitianOperator,
) -> (DMatrix<f64>, Vec<f64>) {
    let dim = spectral.dim();
    let mut applied = DMatrix::zeros(dim, dim);
    let mut out = vec![0.0; dim];
    for c in 0..dim {
        let col: Vec<f64> = spectral.eigenvectors.column(c).iter().copied().collect();
        measurement.apply_real(&col, &mut out);
        applied.column_mut(c).copy_from_slice(&out);
    }
    let second: Vec<f64> = applied.column_iter().map(|c| c.norm_squared()).collect();
    (spectral.eigenvectors.transpose() * applied, second)
}

/// `spectral` is rotated in place inside degenerate blocks so that `M` is
/// diagonal there; outside those blocks it is left untouched. The
/// equal-population mean `tr(M)/D` is removed, mirroring mean removal on
/// records.
pub fn perturbative_psd(
    spectral: &mut SpectralData,
    measurement: &HermitianOperator,
    grid: &FrequencyGrid,
) -> Result<PerturbativeSpectrum> {
    perturbative_psd_with(spectral, measurement, grid, true)
}

/// As [`perturbative_psd`]; `remove_mean = false` keeps the stationary mean
/// in the diagonal weights. Widths do not depend on it.
pub fn perturbative_psd_with(
    spectral: &mut SpectralData,
    measurement: &HermitianOperator,
    grid: &FrequencyGrid,
    remove_mean: bool,
) -> Result<PerturbativeSpectrum> {
    grid.validate()?;
    if measurement.dim() != spectral.dim() {
        return Err(Error::BasisMismatch {
            expected: spectral.dim(),
            found: measurement.dim(),
        });
    }
    let rotated_blocks = spectral.diagonalize_within_blocks(measurement, DEGENERACY_TOLERANCE)?;
    let (mut m_eig, second) = eigenbasis_matrix(spectral, measurement);
    let dim = spectral.dim();
    let stationary_mean = measurement.trace() / dim as f64;
    let diagonal: Vec<f64> = (0..dim).map(|i| m_eig[(i, i)]).collect();
    if remove_mean {
        for i in 0..dim {
            m_eig[(i, i)] -= stationary_mean;
        }
    }
    let energies = &spectral.eigenvalues;

    let max_weight = m_eig.iter().fold(0.0f64, |m, v| m.max(v * v));
    let mut components = Vec::new();
    for i in 0..dim {
        for j in 0..dim {
            let weight = m_eig[(j, i)].powi(2);
            if weight <= WEIGHT_FLOOR * max_weight || weight == 0.0 {
                continue;
            }
            let width = (second[i] + second[j] - 2.0 * diagonal[i] * diagonal[j]).max(0.0);
            components.push(LineComponent {
                i,
                j,
                omega: energies[i] - energies[j],
                width,
                weight,
            });
        }
    }
    if components.is_empty() {
        return Err(Error::InvalidSpec(
            "measurement operator has no matrix elements".into(),
        ));
    }

    let mut warnings = Vec::new();
    let min_width = components
        .iter()
        .filter(|c| !c.is_delta())
        .map(|c| c.width)
        .fold(f64::INFINITY, f64::min);
    if min_width < grid.spacing {
        warnings.push(format!(
            "narrowest line width {min_width:e} is below the grid spacing {}",
            grid.spacing
        ));
    }
    if rotated_blocks > 0 {
        warnings.push(format!(
            "{rotated_blocks} degenerate eigenvalue blocks rotated to diagonalize the measurement"
        ));
    }

    let (deltas, lines): (Vec<&LineComponent>, Vec<&LineComponent>) =
        components.iter().partition(|c| c.is_delta());
    let mut values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let omega = grid.frequency(k);
            lines
                .iter()
                .map(|c| c.weight * c.width / ((omega - c.omega).powi(2) + c.width * c.width))
                .sum()
        })
        .collect();
    // a Lorentzian of weight w integrates to pi w; deltas keep that area
    let mut outside = 0usize;
    for c in &deltas {
        match grid.nearest_bin(c.omega) {
            Some(k) => values[k] += std::f64::consts::PI * c.weight / grid.spacing,
            None => outside += 1,
        }
    }
    if outside > 0 {
        warnings.push(format!(
            "{outside} delta lines fall outside the frequency grid"
        ));
    }
    let n = values.len();
    let even: Vec<f64> = (0..n)
        .map(|k| 0.5 * (values[k] + values[n - 1 - k]))
        .collect();
    let spectrum = Spectrum::new(
        grid.frequency(0),
        grid.spacing,
        even,
        Normalization::Raw,
        remove_mean,
    )?
    .normalized(Normalization::UnitSquare)?;

    let delta_weight = deltas.iter().fold(0.0, |acc, c| acc + c.weight);
    let total_weight = components.iter().fold(0.0, |acc, c| acc + c.weight);
    Ok(PerturbativeSpectrum {
        spectrum,
        stationary_mean,
        components,
        delta_weight,
        total_weight,
        rotated_blocks,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub kind: MeasurementKind,
    #[serde(with = "crate::model::ratio_serde")]
    pub u_over_j: f64,
    pub psd: PerturbativeSpectrum,
    pub fit: LorentzFit,
}

/// Perturbative spectra and their Lorentzian fits over a `U/J` grid for each
/// measurement kind. `template` supplies size, boundary and span.
pub fn ratio_scan(
    template: &ModelSpec,
    u_over_j: &[f64],
    kinds: &[MeasurementKind],
    grid: &FrequencyGrid,
) -> Result<Vec<ScanEntry>> {
    let mut entries = Vec::new();
    for &kind in kinds {
        for &ratio in u_over_j {
            let mut spec = template.clone();
            spec.u_over_j = ratio;
            spec.measurement = kind;
            let model = Model::build(&spec)?;
            let mut spectral = model.spectral()?;
            let psd = perturbative_psd(&mut spectral, &model.measurement.operator, grid)?;
            let fit = maximize_overlap_with(&psd.spectrum, &default_search(grid))?;
            log::info!(
                "{} U/J={ratio}: F={:.4} Gamma_max={:.4} delta={:.3}",
                kind.tag(),
                fit.overlap,
                fit.gamma_max,
                psd.delta_fraction()
            );
            entries.push(ScanEntry {
                kind,
                u_over_j: ratio,
                psd,
                fit,
            });
        }
    }
    Ok(entries)
}

/// `(u_over_j, omega, S)` rows for one measurement kind.
pub fn scan_spectra_csv(
    entries: &[ScanEntry],
    kind: MeasurementKind,
    header: serde_json::Value,
) -> CsvTable {
    let mut table = CsvTable::new(header, &["u_over_j", "omega", "S"]);
    for e in entries.iter().filter(|e| e.kind == kind) {
        for (k, &v) in e.psd.spectrum.values.iter().enumerate() {
            table.push(vec![e.u_over_j, e.psd.spectrum.frequency(k), v]);
        }
    }
    table
}

/// One row per scan point: delta bookkeeping, normalization check and fit.
pub fn scan_summary_csv(
    entries: &[ScanEntry],
    kind: MeasurementKind,
    header: serde_json::Value,
) -> CsvTable {
    let mut table = CsvTable::new(
        header,
        &[
            "u_over_j",
            "delta_weight",
            "total_weight",
            "delta_fraction",
            "square_integral",
            "F",
            "Gamma_max",
            "boundary_flag",
        ],
    );
    for e in entries.iter().filter(|e| e.kind == kind) {
        table.push(vec![
            e.u_over_j,
            e.psd.delta_weight,
            e.psd.total_weight,
            e.psd.delta_fraction(),
            e.psd.spectrum.square_integral(),
            e.fit.overlap,
            e.fit.gamma_max,
            e.fit.boundary_flag as u8 as f64,
        ]);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::FockBasis;
    use crate::model::diagonalize;

    fn model(l: usize, n: usize, r: f64, kind: MeasurementKind) -> Model {
        Model::build(&ModelSpec::new(l, n, r, kind)).unwrap()
    }

    fn coarse() -> FrequencyGrid {
        FrequencyGrid {
            cap: 40.0,
            spacing: 0.05,
        }
    }

    #[test]
    fn commuting_limits_are_pure_deltas_at_zero() {
        for (r, kind) in [
            (f64::INFINITY, MeasurementKind::population()),
            (0.0, MeasurementKind::Coherence),
        ] {
            let m = model(4, 4, r, kind);
            let mut sd = m.spectral().unwrap();
            let psd = perturbative_psd(&mut sd, &m.measurement.operator, &coarse()).unwrap();
            assert!(
                (psd.delta_fraction() - 1.0).abs() < 1e-12,
                "{kind:?}: {}",
                psd.delta_fraction()
            );
            assert!(psd.components.iter().all(|c| c.omega.abs() < 1e-9));
            let zero = psd.spectrum.len() / 2;
            assert!(psd
                .spectrum
                .values
                .iter()
                .enumerate()
                .all(|(k, v)| k == zero || *v == 0.0));
        }
    }

    #[test]
    fn diagonal_widths_are_twice_the_variance() {
        let m = model(3, 3, 2.0, MeasurementKind::Coherence);
        let mut sd = m.spectral().unwrap();
        let psd = perturbative_psd(&mut sd, &m.measurement.operator, &coarse()).unwrap();
        let op = &m.measurement.operator;
        let squared = op.matmul(op).unwrap();
        for c in psd.components.iter().filter(|c| c.i == c.j) {
            let v = sd.vector(c.i);
            let var = squared.expectation(&v) - op.expectation(&v).powi(2);
            assert!((c.width - 2.0 * var).abs() < 1e-10);
            assert_eq!(c.omega, 0.0);
        }
    }

    #[test]
    fn shared_eigenbasis_gives_squared_gaps() {
        // M = f(H) for a diagonal H with distinct entries
        let basis = FockBasis::build(3, 1).unwrap();
        let h = HermitianOperator::from_diagonal(basis.shape(), &[0.0, 1.0, 3.0]).unwrap();
        let m = HermitianOperator::from_diagonal(basis.shape(), &[0.2, -0.5, 0.9]).unwrap();
        let mut sd = diagonalize(&h).unwrap();
        let psd = perturbative_psd(&mut sd, &m, &coarse()).unwrap();
        let mvals: [f64; 3] = [0.2, -0.5, 0.9];
        for c in &psd.components {
            assert!((c.width - (mvals[c.i] - mvals[c.j]).powi(2)).abs() < 1e-14);
        }
    }

    #[test]
    fn hermitian_symmetry_and_normalization() {
        let m = model(3, 3, 1.5, MeasurementKind::Coherence);
        let mut sd = m.spectral().unwrap();
        let psd = perturbative_psd(&mut sd, &m.measurement.operator, &coarse()).unwrap();
        for c in &psd.components {
            let mirror = psd
                .components
                .iter()
                .find(|d| d.i == c.j && d.j == c.i)
                .unwrap();
            assert!((mirror.omega + c.omega).abs() < 1e-12);
            assert!((mirror.width - c.width).abs() < 1e-12);
            assert!((mirror.weight - c.weight).abs() < 1e-12);
        }
        let v = &psd.spectrum.values;
        for k in 0..v.len() {
            assert!((v[k] - v[v.len() - 1 - k]).abs() <= 1e-10 * v[k].max(1.0));
        }
        assert!((psd.spectrum.square_integral() - 1.0).abs() < 1e-6);
        assert!(v.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn zero_hopping_coherence_peaks_sit_at_interaction_gaps() {
        let m = model(3, 3, f64::INFINITY, MeasurementKind::Coherence);
        let mut sd = m.spectral().unwrap();
        let psd = perturbative_psd(&mut sd, &m.measurement.operator, &coarse()).unwrap();
        // single hops between Fock states change sum n(n-1)/2 by integer
        // multiples of the rescaled U
        let u = m.hamiltonian.interaction;
        let mut allowed = Vec::new();
        let basis = &m.basis;
        for a in basis.states() {
            for (x, y) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
                if a[x] == 0 {
                    continue;
                }
                let mut b = a.clone();
                b[x] -= 1;
                b[y] += 1;
                let e = |s: &[u16]| {
                    s.iter()
                        .map(|&n| 0.5 * u * n as f64 * (n as f64 - 1.0))
                        .sum::<f64>()
                };
                allowed.push(e(&b) - e(a));
            }
        }
        let off: Vec<_> = psd.components.iter().filter(|c| c.i != c.j).collect();
        assert!(!off.is_empty());
        for c in off {
            assert!(
                allowed.iter().any(|w| (w - c.omega).abs() < 1e-9),
                "{}",
                c.omega
            );
        }
        assert!(psd
            .components
            .iter()
            .any(|c| c.omega.abs() > 1.0 && c.weight > 1e-3));
    }

    #[test]
    fn mean_removal_only_changes_diagonal_weights() {
        let m = model(3, 3, 2.0, MeasurementKind::population());
        let mut sd = m.spectral().unwrap();
        let op = &m.measurement.operator;
        let kept = perturbative_psd_with(&mut sd, op, &coarse(), false).unwrap();
        let removed = perturbative_psd_with(&mut sd, op, &coarse(), true).unwrap();
        assert!(removed.spectrum.mean_removed && !kept.spectrum.mean_removed);
        let mean = op.trace() / m.basis.dim() as f64;
        for c in &kept.components {
            let d = removed.components.iter().find(|d| d.i == c.i && d.j == c.j);
            if c.i == c.j {
                let expected = (c.weight.sqrt() - mean).powi(2);
                if let Some(d) = d {
                    assert!((d.weight - expected).abs() < 1e-12);
                    assert!((d.width - c.width).abs() < 1e-12);
                }
            } else {
                let d = d.unwrap();
                assert_eq!((d.weight, d.width), (c.weight, c.width));
            }
        }
    }

    #[test]
    fn coarse_grid_warns() {
        let m = model(3, 3, 1.0, MeasurementKind::Coherence);
        let mut sd = m.spectral().unwrap();
        let grid = FrequencyGrid {
            cap: 40.0,
            spacing: 2.0,
        };
        let psd = perturbative_psd(&mut sd, &m.measurement.operator, &grid).unwrap();
        assert!(!psd.warnings.is_empty());
        assert!(perturbative_psd(
            &mut sd,
            &m.measurement.operator,
            &FrequencyGrid {
                cap: 1.0,
                spacing: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn scan_tables() {
        let template = ModelSpec::new(3, 3, 1.0, MeasurementKind::Coherence);
        let kinds = [MeasurementKind::Coherence, MeasurementKind::population()];
        let entries = ratio_scan(&template, &[0.0, 1.0], &kinds, &coarse()).unwrap();
        assert_eq!(entries.len(), 4);
        let table = scan_summary_csv(&entries, MeasurementKind::Coherence, serde_json::json!({}));
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.column("delta_fraction").unwrap()[0], 1.0);
        let spectra = scan_spectra_csv(&entries, kinds[1], serde_json::json!({}));
        assert_eq!(spectra.rows.len(), 2 * coarse().len());
    }
}
