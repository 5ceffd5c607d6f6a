use nalgebra::DMatrix;
use num_complex::Complex64;
use phasescope::chain::Boundary;
use phasescope::model::{eigenvalues, ground_state, MeasurementKind, Model, ModelSpec};
use phasescope::perturbative::{perturbative_psd, FrequencyGrid};
use phasescope::spectrum::{periodogram, PeriodogramOptions, Spectrum};
use phasescope::trajectory::{run_trajectory, Scheme, TrajectoryConfig};

/// Annihilator on one site truncated at `cap` bosons.
fn annihilator(cap: usize) -> DMatrix<f64> {
    DMatrix::from_fn(cap + 1, cap + 1, |r, c| {
        if c == r + 1 {
            (c as f64).sqrt()
        } else {
            0.0
        }
    })
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Site operator embedded in the full truncated tensor-product space.
fn embed(op: &DMatrix<f64>, site: usize, sites: usize) -> DMatrix<f64> {
    let id = DMatrix::identity(op.nrows(), op.nrows());
    let mut out = DMatrix::identity(1, 1);
    for s in 0..sites {
        out = kron(&out, if s == site { op } else { &id });
    }
    out
}

/// Bose-Hubbard spectrum in the `particles` sector, built without any Fock
/// basis enumeration: a number penalty pushes other sectors out of range.
fn ladder_oracle(
    sites: usize,
    particles: usize,
    hopping: f64,
    interaction: f64,
    boundary: Boundary,
) -> Vec<f64> {
    let a = annihilator(particles);
    let ops: Vec<DMatrix<f64>> = (0..sites).map(|s| embed(&a, s, sites)).collect();
    let full = ops[0].nrows();
    let mut h = DMatrix::zeros(full, full);
    let mut total = DMatrix::zeros(full, full);
    let bonds: Vec<(usize, usize)> = match boundary {
        Boundary::Open => (0..sites - 1).map(|j| (j, j + 1)).collect(),
        Boundary::Periodic => (0..sites).map(|j| (j, (j + 1) % sites)).collect(),
    };
    for &(i, j) in &bonds {
        let hop = ops[i].transpose() * &ops[j];
        h -= hopping * (&hop + hop.transpose());
    }
    for b in &ops {
        let n = b.transpose() * b;
        h += 0.5 * interaction * (&n * &n - &n);
        total += n;
    }
    let shift = &total - DMatrix::identity(full, full) * particles as f64;
    let penalized = h + 1e4 * (&shift * &shift);
    let mut e: Vec<f64> = penalized.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    let dim = (1..=particles).fold(1usize, |acc, k| acc * (sites + k - 1) / k);
    e.truncate(dim);
    e
}

#[test]
fn hamiltonian_matches_ladder_construction() {
    for (sites, particles, ratio, boundary) in [
        (3, 3, 2.5, Boundary::Open),
        (4, 2, 0.7, Boundary::Periodic),
        (2, 3, 10.0, Boundary::Open),
    ] {
        let mut spec = ModelSpec::new(sites, particles, ratio, MeasurementKind::Coherence);
        spec.rescale_span = None;
        spec.boundary = boundary;
        let (hopping, interaction) = spec.couplings();
        let model = Model::build(&spec).unwrap();
        let ours = eigenvalues(&model.hamiltonian.operator).unwrap();
        let oracle = ladder_oracle(sites, particles, hopping, interaction, boundary);
        assert_eq!(ours.len(), oracle.len());
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "L={sites} N={particles}: {a} vs {b}");
        }
    }
}

#[test]
fn record_spectrum_shows_perturbative_lines() {
    // Two sites, M_pop at U/J = 2: the seed-averaged record spectrum rises
    // above the white level at both predicted transition frequencies, more
    // at the line with the larger perturbative weight.
    let spec = ModelSpec::new(2, 2, 2.0, MeasurementKind::population());
    let model = Model::build(&spec).unwrap();
    let mut spectral = model.spectral().unwrap();
    let psd = perturbative_psd(
        &mut spectral,
        &model.measurement.operator,
        &FrequencyGrid::default(),
    )
    .unwrap();
    let mut lines: Vec<(f64, f64)> = psd
        .components
        .iter()
        .filter(|c| c.omega > 1.0 && c.weight > 1e-6)
        .map(|c| (c.omega, c.weight))
        .collect();
    lines.sort_by(|a, b| b.1.total_cmp(&a.1));
    assert_eq!(lines.len(), 2);

    let gs = ground_state(&model.hamiltonian.operator).unwrap();
    let h = &model.hamiltonian.operator;
    let m = &model.measurement.operator;
    let spectra: Vec<Spectrum> = (0..8)
        .map(|seed| {
            let config =
                TrajectoryConfig::new(0.001, 400.0, 1.0, seed, Scheme::SplitStepExponential);
            let (record, _) = run_trajectory(h, m, &gs.vector, &config, &[]).unwrap();
            periodogram(&record, &PeriodogramOptions::default()).unwrap()
        })
        .collect();
    let mean = Spectrum::average(&spectra).unwrap();
    let band = |center: f64| {
        let values: Vec<f64> = (0..mean.len())
            .filter(|&k| (mean.frequency(k) - center).abs() < 1.0)
            .map(|k| mean.values[k])
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    let white = band(34.0);
    let strong = band(lines[0].0) - white;
    let weak = band(lines[1].0) - white;
    assert!((white - 1.0).abs() < 0.1, "white level {white}");
    assert!(
        weak > 0.03 && strong > weak,
        "excess {strong} at {}, {weak} at {}",
        lines[0].0,
        lines[1].0
    );
}

#[test]
fn ground_state_is_stationary_without_measurement() {
    let spec = ModelSpec::new(4, 4, 3.0, MeasurementKind::population());
    let model = Model::build(&spec).unwrap();
    let gs = ground_state(&model.hamiltonian.operator).unwrap();
    let config = TrajectoryConfig::new(0.01, 5.0, 0.0, 0, Scheme::SplitStepExponential);
    let (_, log) = run_trajectory(
        &model.hamiltonian.operator,
        &model.measurement.operator,
        &gs.vector,
        &config,
        &[],
    )
    .unwrap();
    let overlap: Complex64 = gs
        .vector
        .iter()
        .zip(&log.final_state)
        .map(|(a, b)| a.conj() * b)
        .sum();
    assert!((overlap.norm() - 1.0).abs() < 1e-10);
}
