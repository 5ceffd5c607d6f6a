//! Lowest band of the 1D optical lattice `V(x) = V0 sin^2(k_l x)`, its
//! Wannier functions, and the overlap integrals that set the hopping `J`,
//! on-site interaction `U` and cavity measurement matrix `M_jk`.
//!
//! Units: energies in recoil energies `E_r = hbar^2 k_l^2 / 2m`, positions
//! in units of `1/k_l`. The lattice period is then `pi`, the reciprocal
//! lattice vector is `2`, and the single-particle Hamiltonian reads
//! `-d^2/dx^2 + V0 sin^2(x)`. Site `j` sits at `x_j = j * pi`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::chain::{bonds, Boundary, Sublattice};
use crate::error::{Error, Result};
use crate::io::{version_stamp, CsvTable};

/// Relative change under grid halving above which an integral is rejected.
pub const QUADRATURE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    /// Lattice depth `V0` in recoil energies.
    pub depth: f64,
    /// `k_l` of the trapping light; only rescales reported physical lengths.
    #[serde(default = "default_wavenumber")]
    pub lattice_wavenumber: f64,
    pub num_sites: usize,
    /// Plane waves `exp(i (q + 2n) x)` with `|n| <= plane_wave_cutoff`.
    #[serde(default = "default_cutoff")]
    pub plane_wave_cutoff: usize,
    /// Quadrature points per lattice period.
    #[serde(default = "default_points_per_period")]
    pub points_per_period: usize,
    /// Quasi-momenta sampled in the Brillouin zone.
    #[serde(default = "default_quasi_momenta")]
    pub num_quasi_momenta: usize,
    /// Wannier support half-width, in lattice periods.
    #[serde(default = "default_support")]
    pub support_periods: usize,
}

fn default_wavenumber() -> f64 {
    1.0
}
fn default_cutoff() -> usize {
    15
}
fn default_points_per_period() -> usize {
    128
}
fn default_quasi_momenta() -> usize {
    64
}
fn default_support() -> usize {
    5
}

impl LatticeSpec {
    pub fn new(depth: f64, num_sites: usize) -> Self {
        Self {
            depth,
            lattice_wavenumber: default_wavenumber(),
            num_sites,
            plane_wave_cutoff: default_cutoff(),
            points_per_period: default_points_per_period(),
            num_quasi_momenta: default_quasi_momenta(),
            support_periods: default_support(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return bad("lattice depth must be positive");
        }
        if !(self.lattice_wavenumber > 0.0) {
            return bad("lattice wavenumber must be positive");
        }
        if self.num_sites == 0 {
            return bad("need at least one site");
        }
        if self.plane_wave_cutoff < 8 {
            return bad("plane-wave cutoff must be at least 8");
        }
        // The half-period probe has period 2*pi; 16 points per probe period
        // means at least 8 per lattice period, and the even-grid subsampling
        // used for the convergence check halves that again.
        if self.points_per_period < 32 || !self.points_per_period.is_multiple_of(2) {
            return bad("points per period must be even and at least 32");
        }
        if self.num_quasi_momenta < 2 * self.support_periods + 2 {
            return bad("quasi-momentum grid too coarse for the Wannier support");
        }
        Ok(())
    }

    pub fn lattice_period(&self) -> f64 {
        PI / self.lattice_wavenumber
    }
}

/// `V0 sin^2(x)`.
pub fn lattice_potential(depth: f64, x: f64) -> f64 {
    depth * x.sin().powi(2)
}

fn central_matrix(depth: f64, cutoff: usize, q: f64) -> DMatrix<f64> {
    let size = 2 * cutoff + 1;
    DMatrix::from_fn(size, size, |r, c| {
        let n = r as f64 - cutoff as f64;
        if r == c {
            (q + 2.0 * n).powi(2) + depth / 2.0
        } else if r.abs_diff(c) == 1 {
            -depth / 4.0
        } else {
            0.0
        }
    })
}

/// Lowest two band energies and the lowest-band plane-wave coefficients at
/// quasi-momentum `q`, phase-fixed so the periodic part is positive at the
/// site centre `x = 0`.
fn solve_at(depth: f64, cutoff: usize, q: f64) -> Result<(f64, f64, Vec<f64>)> {
    let fail = |reason: &str| Error::BandSolver {
        momentum: q,
        reason: reason.to_string(),
    };
    let eig = SymmetricEigen::try_new(central_matrix(depth, cutoff, q), 1e-15, 10_000)
        .ok_or_else(|| fail("symmetric eigensolver did not converge"))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (e0, e1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !e0.is_finite() || !e1.is_finite() {
        return Err(fail("non-finite band energy"));
    }
    if e1 - e0 < 1e-10 {
        return Err(fail("lowest band is degenerate with the next"));
    }
    let mut coeffs: Vec<f64> = eig.eigenvectors.column(order[0]).iter().copied().collect();
    let at_centre: f64 = coeffs.iter().sum();
    if at_centre.abs() < 1e-12 {
        return Err(fail(
            "periodic part vanishes at the site centre; phase is ambiguous",
        ));
    }
    if at_centre < 0.0 {
        coeffs.iter_mut().for_each(|c| *c = -*c);
    }
    Ok((e0, e1, coeffs))
}

/// Lowest-band energy at an arbitrary quasi-momentum (in units of `k_l`).
pub fn band_energy(depth: f64, cutoff: usize, q: f64) -> Result<f64> {
    solve_at(depth, cutoff, q).map(|(e, _, _)| e)
}

#[derive(Debug, Clone)]
pub struct BlochData {
    pub spec: LatticeSpec,
    /// Symmetric grid `q_m = -1 + (2m + 1)/N_k` over the zone `[-1, 1)`.
    pub quasi_momenta: Vec<f64>,
    pub energies: Vec<f64>,
    pub second_band: Vec<f64>,
    /// Coefficients `c_n(q)`, index `n + cutoff`.
    pub coefficients: Vec<Vec<f64>>,
}

impl BlochData {
    pub fn bandwidth(&self) -> f64 {
        let (lo, hi) = min_max(&self.energies);
        hi - lo
    }

    /// Gap between the top of the lowest band and the bottom of the next.
    pub fn band_gap(&self) -> f64 {
        let (_, top) = min_max(&self.energies);
        let (bottom, _) = min_max(&self.second_band);
        bottom - top
    }

    /// Hopping from the Bloch sum `-(1/N_k) sum_q E(q) cos(q pi)`.
    pub fn hopping_from_band(&self) -> f64 {
        let nk = self.quasi_momenta.len() as f64;
        -self
            .quasi_momenta
            .iter()
            .zip(&self.energies)
            .map(|(q, e)| e * (q * PI).cos())
            .sum::<f64>()
            / nk
    }

    /// `(1/(N_k pi)) sum_q |psi_q(x)|^2`, the lowest-band projector density.
    pub fn projector_density(&self, x: f64) -> f64 {
        let cutoff = self.spec.plane_wave_cutoff as f64;
        let nk = self.quasi_momenta.len() as f64;
        let mut acc = 0.0;
        for (q, c) in self.quasi_momenta.iter().zip(&self.coefficients) {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, cn) in c.iter().enumerate() {
                let k = q + 2.0 * (i as f64 - cutoff);
                re += cn * (k * x).cos();
                im += cn * (k * x).sin();
            }
            acc += re * re + im * im;
        }
        acc / (nk * PI)
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        })
}

pub fn solve_bands(spec: &LatticeSpec) -> Result<BlochData> {
    spec.validate()?;
    let nk = spec.num_quasi_momenta;
    let quasi_momenta: Vec<f64> = (0..nk)
        .map(|m| -1.0 + (2 * m + 1) as f64 / nk as f64)
        .collect();
    let mut energies = Vec::with_capacity(nk);
    let mut second_band = Vec::with_capacity(nk);
    let mut coefficients = Vec::with_capacity(nk);
    for &q in &quasi_momenta {
        let (e0, e1, c) = solve_at(spec.depth, spec.plane_wave_cutoff, q)?;
        energies.push(e0);
        second_band.push(e1);
        coefficients.push(c);
    }
    Ok(BlochData {
        spec: spec.clone(),
        quasi_momenta,
        energies,
        second_band,
        coefficients,
    })
}

/// The site-0 Wannier function sampled on `x_i = (i - R P) h`, `h = pi/P`,
/// `R` the support half-width in periods. `w_j` is `w_0` shifted by `j P`
/// samples, so translation is exact on the grid.
#[derive(Debug, Clone)]
pub struct WannierData {
    pub spec: LatticeSpec,
    pub step: f64,
    pub samples: Vec<f64>,
    /// `(-d^2/dx^2 + V) w_0` on the same grid.
    pub hamiltonian_samples: Vec<f64>,
    pub energies: Vec<f64>,
}

pub fn wannier_function(bloch: &BlochData) -> Result<WannierData> {
    let spec = &bloch.spec;
    let p = spec.points_per_period;
    let half = spec.support_periods * p;
    let h = PI / p as f64;
    let cutoff = spec.plane_wave_cutoff as f64;
    let norm = 1.0 / (bloch.quasi_momenta.len() as f64 * PI.sqrt());

    let mut samples = vec![0.0; 2 * half + 1];
    let mut kinetic = vec![0.0; 2 * half + 1];
    for (i, (w, t)) in samples.iter_mut().zip(kinetic.iter_mut()).enumerate() {
        let x = (i as f64 - half as f64) * h;
        let (mut acc_w, mut acc_t) = (0.0, 0.0);
        for (q, c) in bloch.quasi_momenta.iter().zip(&bloch.coefficients) {
            for (n, cn) in c.iter().enumerate() {
                let k = q + 2.0 * (n as f64 - cutoff);
                let wave = cn * (k * x).cos();
                acc_w += wave;
                acc_t += k * k * wave;
            }
        }
        *w = norm * acc_w;
        *t = norm * acc_t;
    }
    let hamiltonian_samples = samples
        .iter()
        .zip(&kinetic)
        .enumerate()
        .map(|(i, (w, t))| {
            let x = (i as f64 - half as f64) * h;
            t + lattice_potential(spec.depth, x) * w
        })
        .collect();

    Ok(WannierData {
        spec: spec.clone(),
        step: h,
        samples,
        hamiltonian_samples,
        energies: bloch.energies.clone(),
    })
}

impl WannierData {
    fn half_width(&self) -> i64 {
        (self.spec.support_periods * self.spec.points_per_period) as i64
    }

    fn period_points(&self) -> i64 {
        self.spec.points_per_period as i64
    }

    /// `w_j` at global grid index `g` (position `g h`).
    pub fn value(&self, site: i64, g: i64) -> f64 {
        sample_at(
            &self.samples,
            self.half_width(),
            g - site * self.period_points(),
        )
    }

    pub fn position(&self, g: i64) -> f64 {
        g as f64 * self.step
    }

    /// Samples of `w_j` over its whole support as `(x, w_j(x))`.
    pub fn sampled(&self, site: i64) -> Vec<(f64, f64)> {
        let r = self.half_width();
        let c = site * self.period_points();
        (c - r..=c + r)
            .map(|g| (self.position(g), self.value(site, g)))
            .collect()
    }

    /// `sum_g weight(g) a(g) b(g) * h * stride` restricted to every
    /// `stride`-th grid point.
    fn integrate(
        &self,
        a: (i64, &[f64]),
        b: (i64, &[f64]),
        weight: &dyn Fn(f64) -> f64,
        stride: i64,
    ) -> f64 {
        let r = self.half_width();
        let p = self.period_points();
        let (ca, cb) = (a.0 * p, b.0 * p);
        let lo = (ca - r).max(cb - r);
        let hi = (ca + r).min(cb + r);
        let mut acc = 0.0;
        let mut g = lo;
        while g <= hi {
            if g.rem_euclid(stride) == 0 {
                acc += weight(self.position(g))
                    * sample_at(a.1, r, g - ca)
                    * sample_at(b.1, r, g - cb);
            }
            g += 1;
        }
        acc * self.step * stride as f64
    }

    /// Integral evaluated at step `h` and at `2h`; errors if they disagree by
    /// more than [`QUADRATURE_TOLERANCE`] relative to `scale`.
    fn converged_integral(
        &self,
        quantity: &str,
        a: (i64, &[f64]),
        b: (i64, &[f64]),
        weight: &dyn Fn(f64) -> f64,
        scale: f64,
    ) -> Result<f64> {
        let fine = self.integrate(a, b, weight, 1);
        let coarse = self.integrate(a, b, weight, 2);
        let denom = fine.abs().max(scale).max(f64::MIN_POSITIVE);
        let change = (fine - coarse).abs() / denom;
        if change > QUADRATURE_TOLERANCE {
            return Err(Error::Quadrature {
                quantity: quantity.to_string(),
                change,
            });
        }
        Ok(fine)
    }

    /// `int w_j w_k dx`.
    pub fn overlap(&self, j: i64, k: i64) -> f64 {
        self.integrate((j, &self.samples), (k, &self.samples), &|_| 1.0, 1)
    }

    /// `-int w_j (p^2/2m + V) w_k dx` with the kinetic term applied spectrally.
    pub fn hopping(&self, j: i64, k: i64) -> Result<f64> {
        let v = self.converged_integral(
            "J",
            (j, &self.samples),
            (k, &self.hamiltonian_samples),
            &|_| 1.0,
            1e-12,
        )?;
        Ok(-v)
    }

    /// `int |w_j|^4 dx`.
    pub fn quartic_overlap(&self, j: i64) -> Result<f64> {
        let sq: Vec<f64> = self.samples.iter().map(|w| w * w).collect();
        self.converged_integral("U", (j, &sq), (j, &sq), &|_| 1.0, 0.0)
    }

    /// `int |f(x)|^2 w_j w_k dx` for a probe intensity profile.
    pub fn weighted_overlap(&self, j: i64, k: i64, intensity: &dyn Fn(f64) -> f64) -> Result<f64> {
        // |f|^2 <= 1 and the w_j are normalized, so entries are judged
        // relative to the matrix scale rather than their own magnitude
        self.converged_integral(
            "M_jk",
            (j, &self.samples),
            (k, &self.samples),
            intensity,
            1.0,
        )
    }
}

fn sample_at(samples: &[f64], half: i64, offset: i64) -> f64 {
    let idx = offset + half;
    if idx < 0 || idx as usize >= samples.len() {
        0.0
    } else {
        samples[idx as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HubbardParameters {
    /// Nearest-neighbour tunnelling in `E_r`.
    pub j: f64,
    /// On-site interaction in `E_r`.
    pub u: f64,
}

/// `J` between sites 0 and 1 and `U` on site 0 for a 1D coupling `g_s`
/// (in units of `E_r / k_l`).
pub fn hubbard_parameters(wannier: &WannierData, g_s: f64) -> Result<HubbardParameters> {
    let j = wannier.hopping(0, 1)?;
    let u = if g_s == 0.0 {
        0.0
    } else {
        g_s * wannier.quartic_overlap(0)? * wannier.spec.lattice_wavenumber
    };
    Ok(HubbardParameters { j, u })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Cavity mode intensity with twice the lattice period.
    HalfPeriod,
    /// Same period as the lattice, intensity nodes on the sites.
    ShiftedSamePeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub mode: ProbeMode,
    /// Sites lit by the half-period probe.
    #[serde(default)]
    pub sublattice: Sublattice,
    /// `g^2 / Delta`; normalized out of the reported matrix and absorbed into
    /// the measurement strength.
    #[serde(default = "default_coupling")]
    pub coupling_scale: f64,
}

fn default_coupling() -> f64 {
    1.0
}

impl ProbeSpec {
    pub fn new(mode: ProbeMode) -> Self {
        Self {
            mode,
            sublattice: Sublattice::default(),
            coupling_scale: 1.0,
        }
    }

    /// `|f_a(x)|^2` for the Fabry-Perot standing wave.
    pub fn intensity(&self, x: f64) -> f64 {
        match self.mode {
            ProbeMode::HalfPeriod => match self.sublattice {
                // bright at x = (2m+1) pi, i.e. 0-based odd sites
                Sublattice::Even => (x / 2.0).sin().powi(2),
                Sublattice::Odd => (x / 2.0).cos().powi(2),
            },
            ProbeMode::ShiftedSamePeriod => x.sin().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixProvenance {
    ComputedFromWannier,
    Idealized,
}

/// Real symmetric `L x L` site matrix of the measurement operator
/// `sum_jk M_jk b_j^dag b_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMatrix {
    pub entries: Vec<Vec<f64>>,
    pub provenance: MatrixProvenance,
    /// Factor the raw overlap integrals were divided by (largest diagonal).
    #[serde(default)]
    pub normalization: f64,
}

impl MeasurementMatrix {
    pub fn num_sites(&self) -> usize {
        self.entries.len()
    }

    /// `m_pop sum_{j in sublattice} n_j` with `m_pop = 1`.
    pub fn idealized_population(num_sites: usize, sublattice: Sublattice) -> Self {
        let mut entries = vec![vec![0.0; num_sites]; num_sites];
        for j in sublattice.sites(num_sites) {
            entries[j][j] = 1.0;
        }
        Self {
            entries,
            provenance: MatrixProvenance::Idealized,
            normalization: 1.0,
        }
    }

    /// `v sum_j (b_j^dag b_{j+1} + h.c.)` with `v = 1`.
    pub fn idealized_coherence(num_sites: usize, boundary: Boundary) -> Self {
        let mut entries = vec![vec![0.0; num_sites]; num_sites];
        for (a, b) in bonds(num_sites, boundary) {
            entries[a][b] = 1.0;
            entries[b][a] = 1.0;
        }
        Self {
            entries,
            provenance: MatrixProvenance::Idealized,
            normalization: 1.0,
        }
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.num_sites();
        let mut max: f64 = 0.0;
        for j in 0..n {
            for k in 0..n {
                max = max.max((self.entries[j][k] - self.entries[k][j]).abs());
            }
        }
        max
    }

    /// One `(j, k, M_jk)` row per entry.
    pub fn to_csv(&self, header: serde_json::Value) -> CsvTable {
        let mut table = CsvTable::new(header, &["j", "k", "M_jk"]);
        for (j, row) in self.entries.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                table.push(vec![j as f64, k as f64, v]);
            }
        }
        table
    }
}

pub fn measurement_matrix(wannier: &WannierData, probe: &ProbeSpec) -> Result<MeasurementMatrix> {
    let l = wannier.spec.num_sites;
    let intensity = |x: f64| probe.intensity(x);
    let mut raw = vec![vec![0.0; l]; l];
    for j in 0..l {
        for k in j..l {
            let v = wannier.weighted_overlap(j as i64, k as i64, &intensity)?;
            raw[j][k] = v;
            raw[k][j] = v;
        }
    }
    let scale = (0..l).map(|j| raw[j][j].abs()).fold(0.0, f64::max);
    if scale <= 0.0 {
        return Err(Error::Normalization(
            "measurement matrix has an empty diagonal".into(),
        ));
    }
    let entries = raw
        .into_iter()
        .map(|row| row.into_iter().map(|v| v / scale).collect())
        .collect();
    Ok(MeasurementMatrix {
        entries,
        provenance: MatrixProvenance::ComputedFromWannier,
        normalization: scale * probe.coupling_scale,
    })
}

/// Metadata header for lattice artifacts.
pub fn lattice_header(spec: &LatticeSpec, probe: &ProbeSpec) -> serde_json::Value {
    json!({
        "kind": "measurement_matrix",
        "lattice": spec,
        "probe": probe,
        "units": {"energy": "recoil", "length": "1/k_l"},
        "normalization": "max diagonal entry = 1",
        "version": version_stamp(),
    })
}
