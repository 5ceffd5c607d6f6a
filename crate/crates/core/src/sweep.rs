//! Parameter sweeps over `(U/J, gamma)`: one seeded trajectory per cell and
//! seed, starting from the ground state, reduced to the Lorentzian-overlap
//! criterion plus coherence and ground-state residence.
//!
//! Cells are checkpointed as JSON under `cells/<plan-hash>/` and skipped on
//! resume. Nothing time-dependent is written, so a resumed sweep reproduces
//! its outputs byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{version_stamp, write_json, CsvTable};
use crate::model::{build_measurement, ground_state, MeasurementKind, Model, ModelSpec};
use crate::spectrum::{maximize_overlap, periodogram, periodogram_of, PeriodogramOptions};
use crate::trajectory::{
    check_step_size, run_trajectory, time_average_expectation, LoggedObservable, Scheme, StepCheck,
    TrajectoryConfig,
};

pub const SIGNIFICANCE_THRESHOLD: f64 = 5.0;
pub const MIN_POINTS_PER_SIDE: usize = 4;
const SEED_MASK: u64 = (1 << 53) - 1;

pub fn log_spaced(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    (0..points)
        .map(|k| lo * (hi / lo).powf(k as f64 / (points - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryTemplate {
    pub total_time: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// `None` applies the scheme's step policy.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_log_stride")]
    pub log_stride: usize,
    /// Run the pilot halving check before each trajectory.
    #[serde(default = "default_true")]
    pub step_check: bool,
}

fn default_scheme() -> Scheme {
    Scheme::SplitStepExponential
}

fn default_log_stride() -> usize {
    crate::trajectory::DEFAULT_LOG_STRIDE
}

fn default_true() -> bool {
    true
}

impl Default for TrajectoryTemplate {
    fn default() -> Self {
        Self {
            total_time: 2000.0,
            scheme: Scheme::SplitStepExponential,
            dt: None,
            log_stride: default_log_stride(),
            step_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    /// Size, boundary and span; `u_over_j` and `measurement` are overridden.
    pub model: ModelSpec,
    #[serde(with = "crate::model::ratio_serde::list")]
    pub u_over_j: Vec<f64>,
    pub gamma: Vec<f64>,
    pub measurements: Vec<MeasurementKind>,
    #[serde(default = "default_seeds")]
    pub seeds_per_cell: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub trajectory: TrajectoryTemplate,
    #[serde(default)]
    pub spectrum: PeriodogramOptions,
    /// Leading fraction dropped for the transient check and for
    /// post-measurement averages.
    #[serde(default = "default_discard")]
    pub discard_fraction: f64,
    #[serde(default)]
    pub save_records: bool,
}

fn default_seeds() -> usize {
    4
}

fn default_discard() -> f64 {
    0.1
}

impl SweepPlan {
    /// Desk-scale grid: 12 `U/J` points on [0.2, 50], 8 `gamma` points on
    /// [1e-3, 1], both operators, 4 seeds, `T = 2000`.
    pub fn desk_scale(num_sites: usize, num_particles: usize) -> Self {
        Self {
            model: ModelSpec::new(num_sites, num_particles, 1.0, MeasurementKind::Coherence),
            u_over_j: log_spaced(0.2, 50.0, 12),
            gamma: log_spaced(1e-3, 1.0, 8),
            measurements: vec![MeasurementKind::population(), MeasurementKind::Coherence],
            seeds_per_cell: default_seeds(),
            base_seed: 0,
            trajectory: TrajectoryTemplate::default(),
            spectrum: PeriodogramOptions::default(),
            discard_fraction: default_discard(),
            save_records: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.u_over_j.is_empty() || !sorted(&self.u_over_j) {
            return Err(Error::InvalidSpec(
                "u_over_j grid must be nonempty and strictly ascending".into(),
            ));
        }
        if self.u_over_j.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::InvalidSpec("u_over_j values must be >= 0".into()));
        }
        if self.gamma.is_empty()
            || !sorted(&self.gamma)
            || self.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite()))
        {
            return Err(Error::InvalidSpec(
                "gamma grid must be nonempty, positive and strictly ascending".into(),
            ));
        }
        if self.measurements.is_empty() {
            return Err(Error::InvalidSpec("no measurement kinds".into()));
        }
        if self.seeds_per_cell == 0 {
            return Err(Error::InvalidSpec("seeds_per_cell must be >= 1".into()));
        }
        if !(self.trajectory.total_time > 0.0) || self.trajectory.log_stride == 0 {
            return Err(Error::InvalidSpec(
                "trajectory template needs T > 0 and stride >= 1".into(),
            ));
        }
        if let Some(dt) = self.trajectory.dt {
            if !(dt > 0.0 && dt <= self.trajectory.total_time) {
                return Err(Error::InvalidSpec(format!("dt {dt} out of range")));
            }
        }
        if !(0.0..1.0).contains(&self.discard_fraction) {
            return Err(Error::InvalidSpec(
                "discard_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical plan JSON and the software version.
    pub fn plan_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).unwrap_or_default());
        hasher.update(version_stamp().as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn cells(&self) -> Vec<CellIndex> {
        let mut out = Vec::new();
        for kind in 0..self.measurements.len() {
            for u in 0..self.u_over_j.len() {
                for g in 0..self.gamma.len() {
                    for seed in 0..self.seeds_per_cell {
                        out.push(CellIndex { kind, u, g, seed });
                    }
                }
            }
        }
        out
    }

    /// Deterministic per-cell seed mixed from the base seed and the grid
    /// indices; masked to 53 bits so it survives a float CSV column.
    pub fn derived_seed(&self, cell: &CellIndex) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.base_seed.to_le_bytes());
        for idx in [cell.kind, cell.u, cell.g, cell.seed] {
            hasher.update((idx as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes) & SEED_MASK
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub kind: usize,
    pub u: usize,
    pub g: usize,
    pub seed: usize,
}

impl CellIndex {
    fn file_stem(&self) -> String {
        format!("k{}_u{}_g{}_s{}", self.kind, self.u, self.g, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: CellIndex,
    pub kind: MeasurementKind,
    #[serde(with = "crate::model::ratio_serde")]
    pub u_over_j: f64,
    pub gamma: f64,
    pub seed: u64,
    pub dt: f64,
    pub overlap: f64,
    pub gamma_max: f64,
    pub boundary_flag: bool,
    /// Same fit with the leading `discard_fraction` of the record dropped.
    pub overlap_discarded: f64,
    pub gamma_max_discarded: f64,
    /// Ground-state `<M_coh>` (unit-norm operator).
    pub coherence_before: f64,
    /// Time average of `<M_coh>` after the discard window.
    pub coherence_after: f64,
    /// Time average of `|<GS|psi>|^2` over the whole run.
    pub residence: f64,
    pub record_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_check: Option<StepCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub index: CellIndex,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub version: String,
    pub plan_hash: String,
    pub plan: SweepPlan,
    /// Ground-state `<M_coh>` at `U/J = 0`, the coherence normalization.
    pub coherence_reference: f64,
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            while end + 1 < order.len() && v[order[end + 1]] == v[order[start]] {
                end += 1;
            }
            let rank = 0.5 * (start + end) as f64 + 1.0;
            for &i in &order[start..=end] {
                out[i] = rank;
            }
            start = end + 1;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

impl PhaseDiagram {
    fn kind_index(&self, kind: MeasurementKind) -> Result<usize> {
        self.plan
            .measurements
            .iter()
            .position(|k| *k == kind)
            .ok_or_else(|| {
                Error::MissingObservable(format!("measurement {} not in the plan", kind.tag()))
            })
    }

    fn gamma_index(&self, gamma: f64) -> Result<usize> {
        self.plan
            .gamma
            .iter()
            .position(|g| (g - gamma).abs() <= 1e-12 * gamma.abs().max(1.0))
            .ok_or_else(|| Error::MissingObservable(format!("gamma {gamma} not in the plan")))
    }

    /// Per-seed overlap values for each `U/J` at fixed kind and `gamma`.
    pub fn overlap_slice(&self, kind: MeasurementKind, gamma: f64) -> Result<Vec<(f64, Vec<f64>)>> {
        let (k, g) = (self.kind_index(kind)?, self.gamma_index(gamma)?);
        Ok(self
            .plan
            .u_over_j
            .iter()
            .enumerate()
            .map(|(u, &ratio)| {
                let values = self
                    .cells
                    .iter()
                    .filter(|c| c.index.kind == k && c.index.u == u && c.index.g == g)
                    .map(|c| c.overlap)
                    .collect();
                (ratio, values)
            })
            .collect())
    }

    /// Seed-mean overlap along the `gamma` axis at fixed kind and `U/J` index.
    pub fn gamma_row(&self, kind: MeasurementKind, u_index: usize) -> Result<Vec<(f64, f64)>> {
        let k = self.kind_index(kind)?;
        let mut row = Vec::new();
        for (g, &gamma) in self.plan.gamma.iter().enumerate() {
            let values: Vec<f64> = self
                .cells
                .iter()
                .filter(|c| c.index.kind == k && c.index.u == u_index && c.index.g == g)
                .map(|c| c.overlap)
                .collect();
            if !values.is_empty() {
                row.push((gamma, mean_std(&values).0));
            }
        }
        Ok(row)
    }

    pub fn to_csv(&self) -> CsvTable {
        let header = serde_json::json!({
            "version": self.version,
            "plan_hash": self.plan_hash,
            "kind_codes": self.plan.measurements.iter().map(|k| k.tag()).collect::<Vec<_>>(),
            "coherence_reference": self.coherence_reference,
        });
        let mut table = CsvTable::new(
            header,
            &[
                "kind",
                "u_over_j",
                "gamma",
                "seed_index",
                "seed",
                "F",
                "Gamma_max",
                "boundary_flag",
                "F_discarded",
                "coherence_before",
                "coherence_after",
                "residence",
                "dt",
            ],
        );
        for c in &self.cells {
            table.push(vec![
                c.index.kind as f64,
                c.u_over_j,
                c.gamma,
                c.index.seed as f64,
                c.seed as f64,
                c.overlap,
                c.gamma_max,
                c.boundary_flag as u8 as f64,
                c.overlap_discarded,
                c.coherence_before,
                c.coherence_after,
                c.residence,
                c.dt,
            ]);
        }
        table
    }

    /// Cells whose discarded-transient overlap moves by more than the
    /// across-seed standard deviation of their grid point.
    pub fn transient_violations(&self) -> Vec<CellIndex> {
        let mut groups: BTreeMap<(usize, usize, usize), Vec<&CellResult>> = BTreeMap::new();
        for c in &self.cells {
            groups
                .entry((c.index.kind, c.index.u, c.index.g))
                .or_default()
                .push(c);
        }
        let mut out = Vec::new();
        for cells in groups.values() {
            let values: Vec<f64> = cells.iter().map(|c| c.overlap).collect();
            let (_, sigma) = mean_std(&values);
            for c in cells {
                if (c.overlap - c.overlap_discarded).abs() > sigma && cells.len() > 1 {
                    out.push(c.index);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub kind: MeasurementKind,
    pub gamma: f64,
    /// The jump lies between `u_over_j[boundary_index - 1]` and
    /// `u_over_j[boundary_index]`.
    pub boundary_index: usize,
    pub boundary_interval: (f64, f64),
    pub jump: f64,
    pub pooled_sigma: f64,
    pub significance: f64,
    pub significant: bool,
    pub mean_overlap: Vec<f64>,
}

/// Largest jump of the seed-mean overlap between consecutive `U/J` points,
/// in units of the within-phase standard deviation pooled over the seeds of
/// up to four neighbouring cells on each side.
pub fn transition_report(
    diagram: &PhaseDiagram,
    kind: MeasurementKind,
    gamma: f64,
) -> Result<TransitionReport> {
    let slice = diagram.overlap_slice(kind, gamma)?;
    let slice: Vec<(f64, Vec<f64>)> = slice.into_iter().filter(|(_, v)| !v.is_empty()).collect();
    if slice.len() < 2 * MIN_POINTS_PER_SIDE {
        return Err(Error::Insufficient(format!(
            "{} populated U/J points; need {} per side",
            slice.len(),
            MIN_POINTS_PER_SIDE
        )));
    }
    let means: Vec<f64> = slice.iter().map(|(_, v)| mean_std(v).0).collect();
    let mut best = MIN_POINTS_PER_SIDE;
    for b in MIN_POINTS_PER_SIDE..=(slice.len() - MIN_POINTS_PER_SIDE) {
        if (means[b] - means[b - 1]).abs() > (means[best] - means[best - 1]).abs() {
            best = b;
        }
    }
    let jump = (means[best] - means[best - 1]).abs();
    let side = |range: std::ops::Range<usize>| -> Vec<f64> {
        slice[range].iter().flat_map(|(_, v)| v.clone()).collect()
    };
    let left = side(best - MIN_POINTS_PER_SIDE..best);
    let right = side(best..best + MIN_POINTS_PER_SIDE);
    let (_, sl) = mean_std(&left);
    let (_, sr) = mean_std(&right);
    let dof = (left.len() + right.len()).saturating_sub(2).max(1) as f64;
    let pooled_sigma = ((sl * sl * (left.len().max(1) - 1) as f64
        + sr * sr * (right.len().max(1) - 1) as f64)
        / dof)
        .sqrt();
    let significance = if pooled_sigma > 0.0 {
        jump / pooled_sigma
    } else if jump > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(TransitionReport {
        kind,
        gamma,
        boundary_index: best,
        boundary_interval: (slice[best - 1].0, slice[best].0),
        jump,
        pooled_sigma,
        significance,
        significant: significance > SIGNIFICANCE_THRESHOLD,
        mean_overlap: means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRow {
    #[serde(with = "crate::model::ratio_serde")]
    pub u_over_j: f64,
    pub before: f64,
    pub after: f64,
}

/// Ground-state and post-measurement `<M_coh>` per `U/J`, both divided by
/// the `U/J = 0` ground-state value.
pub fn coherence_report(
    diagram: &PhaseDiagram,
    kind: MeasurementKind,
    gamma: f64,
    reference: f64,
) -> Result<Vec<CoherenceRow>> {
    if !(reference.abs() > 0.0) {
        return Err(Error::MissingObservable(
            "superfluid coherence reference is zero".into(),
        ));
    }
    let (k, g) = (diagram.kind_index(kind)?, diagram.gamma_index(gamma)?);
    let mut rows = Vec::new();
    for (u, &ratio) in diagram.plan.u_over_j.iter().enumerate() {
        let cells: Vec<&CellResult> = diagram
            .cells
            .iter()
            .filter(|c| c.index.kind == k && c.index.u == u && c.index.g == g)
            .collect();
        if cells.is_empty() {
            continue;
        }
        let before = cells[0].coherence_before / reference;
        let after =
            mean_std(&cells.iter().map(|c| c.coherence_after).collect::<Vec<_>>()).0 / reference;
        rows.push(CoherenceRow {
            u_over_j: ratio,
            before,
            after,
        });
    }
    if rows.is_empty() {
        return Err(Error::MissingObservable(
            "no cells for the coherence report".into(),
        ));
    }
    Ok(rows)
}

/// `<M_coh>` (unit norm) in the `U/J = 0` ground state of the template.
pub fn superfluid_reference(template: &ModelSpec) -> Result<f64> {
    let mut spec = template.clone();
    spec.u_over_j = 0.0;
    spec.measurement = MeasurementKind::Coherence;
    spec.measurement_matrix = None;
    let model = Model::build(&spec)?;
    let gs = ground_state(&model.hamiltonian.operator)?;
    Ok(model.measurement.operator.expectation(&gs.vector))
}

/// One cell: model, ground state, trajectory, periodogram, fit.
pub fn run_cell(plan: &SweepPlan, index: CellIndex) -> Result<(CellResult, Option<CsvTable>)> {
    let kind = plan.measurements[index.kind];
    let mut spec = plan.model.clone();
    spec.u_over_j = plan.u_over_j[index.u];
    spec.measurement = kind;
    let gamma = plan.gamma[index.g];
    let seed = plan.derived_seed(&index);

    let model = Model::build(&spec)?;
    let h = &model.hamiltonian.operator;
    let m = &model.measurement.operator;
    let gs = ground_state(h)?.vector;
    let mut coh_spec = spec.clone();
    coh_spec.measurement = MeasurementKind::Coherence;
    coh_spec.measurement_matrix = None;
    let coherence = build_measurement(&coh_spec, &model.basis)?.operator;
    let coherence_before = coherence.expectation(&gs);

    let span = spec.rescale_span.unwrap_or(model.hamiltonian.bare_span);
    let dt = plan
        .trajectory
        .dt
        .unwrap_or_else(|| plan.trajectory.scheme.default_dt(span, gamma));
    let mut config = TrajectoryConfig::new(
        dt,
        plan.trajectory.total_time,
        gamma,
        seed,
        plan.trajectory.scheme,
    );
    config.log_stride = plan.trajectory.log_stride;
    config.observables = vec!["coh".into(), "gs".into()];
    let step_check = if plan.trajectory.step_check {
        let (accepted, check) = check_step_size(h, m, &gs, &config, 20.0, 0.05, 4)?;
        config = accepted;
        Some(check)
    } else {
        None
    };
    let observables = [
        LoggedObservable::operator("coh", coherence),
        LoggedObservable::overlap("gs", gs.clone()),
    ];
    let (mut record, log) = run_trajectory(h, m, &gs, &config, &observables)?;
    record.operator = kind.tag().to_string();

    let spectrum = periodogram(&record, &plan.spectrum)?;
    let fit = maximize_overlap(&spectrum)?;
    let start = (plan.discard_fraction * record.len() as f64).ceil() as usize;
    let trimmed = periodogram_of(
        &record.increments[start..],
        record.dt,
        gamma,
        &plan.spectrum,
    )?;
    let fit_trimmed = maximize_overlap(&trimmed)?;

    let records = plan.save_records.then(|| {
        record.to_csv(serde_json::json!({
            "version": version_stamp(),
            "model": spec,
            "cell": index,
        }))
    });
    let result = CellResult {
        index,
        kind,
        u_over_j: spec.u_over_j,
        gamma,
        seed,
        dt: config.dt,
        overlap: fit.overlap,
        gamma_max: fit.gamma_max,
        boundary_flag: fit.boundary_flag,
        overlap_discarded: fit_trimmed.overlap,
        gamma_max_discarded: fit_trimmed.gamma_max,
        coherence_before,
        coherence_after: time_average_expectation(&log, "coh", plan.discard_fraction)?,
        residence: time_average_expectation(&log, "gs", 0.0)?,
        record_hash: record.content_hash(),
        step_check,
    };
    Ok((result, records))
}

fn cell_path(dir: &Path, plan_hash: &str, index: &CellIndex) -> PathBuf {
    dir.join("cells")
        .join(plan_hash)
        .join(format!("{}.json", index.file_stem()))
}

/// Run (or resume) a sweep, writing checkpoints and final artifacts under
/// `out`. `workers` bounds the thread pool; `None` uses rayon's default.
pub fn run_sweep(plan: &SweepPlan, out: &Path, workers: Option<usize>) -> Result<PhaseDiagram> {
    plan.validate()?;
    let plan_hash = plan.plan_hash();
    fs::create_dir_all(out.join("cells").join(&plan_hash))?;
    let coherence_reference = superfluid_reference(&plan.model)?;

    let mut done: BTreeMap<CellIndex, CellResult> = BTreeMap::new();
    let mut pending = Vec::new();
    for index in plan.cells() {
        let path = cell_path(out, &plan_hash, &index);
        let cached = fs::read_to_string(&path)
            .ok()
            .and_then(|text| serde_json::from_str::<CellResult>(&text).ok())
            .filter(|c| c.index == index);
        match cached {
            Some(c) => {
                done.insert(index, c);
            }
            None => pending.push(index),
        }
    }
    log::info!(
        "sweep {}: {} cells cached, {} to run",
        &plan_hash[..12],
        done.len(),
        pending.len()
    );

    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = workers {
            builder = builder.num_threads(n.max(1));
        }
        builder
            .build()
            .map_err(|e| Error::InvalidSpec(format!("thread pool: {e}")))?
    };
    let (sender, receiver) = mpsc::channel();
    let mut failures = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        let pending = &pending;
        scope.spawn(move || {
            pool.install(|| {
                pending.par_iter().for_each_with(sender, |tx, &index| {
                    let _ = tx.send((index, run_cell(plan, index)));
                });
            });
        });
        // single writer: checkpoints are written as results arrive
        for (index, outcome) in receiver {
            match outcome {
                Ok((result, record)) => {
                    write_json(&cell_path(out, &plan_hash, &index), &result)?;
                    if let Some(table) = record {
                        table.write(
                            &out.join("records")
                                .join(format!("{}.csv", index.file_stem())),
                        )?;
                    }
                    log::info!(
                        "cell {} U/J={} gamma={} F={:.4}",
                        index.file_stem(),
                        result.u_over_j,
                        result.gamma,
                        result.overlap
                    );
                    done.insert(index, result);
                }
                Err(e) => {
                    log::warn!("cell {} failed: {e}", index.file_stem());
                    failures.push(CellFailure {
                        index,
                        error: e.to_string(),
                    });
                }
            }
        }
        Ok(())
    })?;
    failures.sort_by_key(|f| f.index);

    let diagram = PhaseDiagram {
        version: version_stamp(),
        plan_hash,
        plan: plan.clone(),
        coherence_reference,
        cells: done.into_values().collect(),
        failures,
    };
    write_json(&out.join("diagram.json"), &diagram)?;
    diagram.to_csv().write(&out.join("diagram.csv"))?;
    fs::write(out.join("report.md"), report_markdown(&diagram))?;
    Ok(diagram)
}

/// Transition, coherence, Zeno-trend and transient summaries.
pub fn report_markdown(diagram: &PhaseDiagram) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Sweep report\n");
    let _ = writeln!(md, "- software: {}", diagram.version);
    let _ = writeln!(md, "- plan hash: `{}`", diagram.plan_hash);
    let _ = writeln!(
        md,
        "- cells: {} completed, {} failed",
        diagram.cells.len(),
        diagram.failures.len()
    );
    let _ = writeln!(
        md,
        "- within-phase sigma: pooled over seeds of up to {MIN_POINTS_PER_SIDE} neighbouring U/J cells on each side; significance threshold {SIGNIFICANCE_THRESHOLD} sigma\n"
    );

    let _ = writeln!(md, "## Transitions\n");
    let _ = writeln!(
        md,
        "| operator | gamma | boundary U/J | jump | sigma | jump/sigma | significant |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    for &kind in &diagram.plan.measurements {
        for &gamma in &diagram.plan.gamma {
            match transition_report(diagram, kind, gamma) {
                Ok(r) => {
                    let _ = writeln!(
                        md,
                        "| {} | {gamma:.4} | {:.3} - {:.3} | {:.4} | {:.4} | {:.2} | {} |",
                        kind.tag(),
                        r.boundary_interval.0,
                        r.boundary_interval.1,
                        r.jump,
                        r.pooled_sigma,
                        r.significance,
                        r.significant
                    );
                }
                Err(e) => {
                    let _ = writeln!(md, "| {} | {gamma:.4} | n/a ({e}) | | | | |", kind.tag());
                }
            }
        }
    }

    let _ = writeln!(
        md,
        "\n## Coherence before/after (normalized to U/J = 0 ground state)\n"
    );
    for &kind in &diagram.plan.measurements {
        for &gamma in &diagram.plan.gamma {
            if let Ok(rows) = coherence_report(diagram, kind, gamma, diagram.coherence_reference) {
                let _ = writeln!(md, "### {} at gamma = {gamma:.4}\n", kind.tag());
                let _ = writeln!(md, "| U/J | before | after |");
                let _ = writeln!(md, "|---|---|---|");
                for r in rows {
                    let _ = writeln!(
                        md,
                        "| {:.3} | {:.4} | {:.4} |",
                        r.u_over_j, r.before, r.after
                    );
                }
                let _ = writeln!(md);
            }
        }
    }

    let _ = writeln!(
        md,
        "## Gamma trend (Spearman rho of seed-mean F along gamma)\n"
    );
    let _ = writeln!(md, "| operator | U/J | rho |");
    let _ = writeln!(md, "|---|---|---|");
    for &kind in &diagram.plan.measurements {
        for (u, &ratio) in diagram.plan.u_over_j.iter().enumerate() {
            if let Ok(row) = diagram.gamma_row(kind, u) {
                if row.len() >= 2 {
                    let (g, f): (Vec<f64>, Vec<f64>) = row.into_iter().unzip();
                    let _ = writeln!(
                        md,
                        "| {} | {ratio:.3} | {:.3} |",
                        kind.tag(),
                        spearman(&g, &f)
                    );
                }
            }
        }
    }

    let violations = diagram.transient_violations();
    let _ = writeln!(
        md,
        "\n## Transient check\n\n{} cells change F by more than the across-seed sigma when the first {:.0}% of the record is dropped.",
        violations.len(),
        100.0 * diagram.plan.discard_fraction
    );
    if !diagram.failures.is_empty() {
        let _ = writeln!(md, "\n## Failed cells\n");
        for f in &diagram.failures {
            let _ = writeln!(md, "- {}: {}", f.index.file_stem(), f.error);
        }
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan() -> SweepPlan {
        let mut plan = SweepPlan::desk_scale(2, 2);
        plan.u_over_j = vec![0.5, 2.0];
        plan.gamma = vec![0.1];
        plan.measurements = vec![MeasurementKind::Coherence];
        plan.seeds_per_cell = 2;
        plan.trajectory.total_time = 20.0;
        plan.trajectory.step_check = false;
        plan
    }

    fn synthetic(means: &[f64], noise: f64) -> PhaseDiagram {
        let mut plan = tiny_plan();
        plan.u_over_j = log_spaced(0.2, 50.0, means.len());
        plan.seeds_per_cell = 4;
        let mut cells = Vec::new();
        for (u, &m) in means.iter().enumerate() {
            for seed in 0..4 {
                let wiggle = noise * [1.0, -1.0, 0.5, -0.5][seed];
                cells.push(CellResult {
                    index: CellIndex {
                        kind: 0,
                        u,
                        g: 0,
                        seed,
                    },
                    kind: MeasurementKind::Coherence,
                    u_over_j: plan.u_over_j[u],
                    gamma: 0.1,
                    seed: seed as u64,
                    dt: 0.01,
                    overlap: m + wiggle,
                    gamma_max: 1.0,
                    boundary_flag: false,
                    overlap_discarded: m + wiggle,
                    gamma_max_discarded: 1.0,
                    coherence_before: 1.0 - u as f64 * 0.05,
                    coherence_after: 0.5,
                    residence: 0.1,
                    record_hash: String::new(),
                    step_check: None,
                });
            }
        }
        PhaseDiagram {
            version: version_stamp(),
            plan_hash: plan.plan_hash(),
            plan,
            coherence_reference: 1.0,
            cells,
            failures: vec![],
        }
    }

    #[test]
    fn step_is_located_and_significant() {
        let means = [0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let d = synthetic(&means, 0.01);
        let r = transition_report(&d, MeasurementKind::Coherence, 0.1).unwrap();
        assert_eq!(r.boundary_index, 6);
        assert!(r.significant && r.significance > 20.0);
    }

    #[test]
    fn constant_diagram_has_no_transition() {
        let d = synthetic(&[0.7; 12], 0.01);
        let r = transition_report(&d, MeasurementKind::Coherence, 0.1).unwrap();
        assert!(!r.significant);
        assert_eq!(r.jump, 0.0);
    }

    #[test]
    fn short_slices_are_rejected() {
        let d = synthetic(&[0.7; 7], 0.01);
        assert!(matches!(
            transition_report(&d, MeasurementKind::Coherence, 0.1),
            Err(Error::Insufficient(_))
        ));
        assert!(transition_report(&d, MeasurementKind::population(), 0.1).is_err());
    }

    #[test]
    fn coherence_normalization() {
        let template = ModelSpec::new(4, 4, 1.0, MeasurementKind::Coherence);
        let reference = superfluid_reference(&template).unwrap();
        assert!(reference > 0.0);
        let d = synthetic(&[0.7; 4], 0.0);
        let rows = coherence_report(&d, MeasurementKind::Coherence, 0.1, 2.0).unwrap();
        assert_eq!(rows[0].before, 0.5);
        assert!(coherence_report(&d, MeasurementKind::Coherence, 0.1, 0.0).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let plan = tiny_plan();
        let cells = plan.cells();
        assert_eq!(cells.len(), 4);
        let seeds: Vec<u64> = cells.iter().map(|c| plan.derived_seed(c)).collect();
        assert_eq!(
            seeds,
            cells
                .iter()
                .map(|c| plan.derived_seed(c))
                .collect::<Vec<_>>()
        );
        let mut unique = seeds.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), seeds.len());
        assert!(seeds.iter().all(|&s| s <= SEED_MASK));
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut plan = tiny_plan();
        plan.u_over_j = vec![2.0, 1.0];
        assert!(plan.validate().is_err());
        let mut plan = tiny_plan();
        plan.gamma = vec![];
        assert!(plan.validate().is_err());
        let mut plan = tiny_plan();
        plan.seeds_per_cell = 0;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn resume_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan();
        let first = run_sweep(&plan, dir.path(), Some(1)).unwrap();
        assert!(first.failures.is_empty());
        let json = fs::read(dir.path().join("diagram.json")).unwrap();
        let csv = fs::read(dir.path().join("diagram.csv")).unwrap();
        // drop one checkpoint so the resume recomputes it
        let victim = cell_path(dir.path(), &first.plan_hash, &plan.cells()[1]);
        fs::remove_file(victim).unwrap();
        let second = run_sweep(&plan, dir.path(), Some(1)).unwrap();
        assert_eq!(first, second);
        assert_eq!(json, fs::read(dir.path().join("diagram.json")).unwrap());
        assert_eq!(csv, fs::read(dir.path().join("diagram.csv")).unwrap());
        assert!(first.cells.iter().all(|c| (0.0..=1.0).contains(&c.overlap)));
    }

    #[test]
    fn failing_cells_do_not_abort() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan();
        // J = 0 with three sites and two bosons has a threefold degenerate ground level
        plan.model = ModelSpec::new(3, 2, 1.0, MeasurementKind::Coherence);
        plan.u_over_j = vec![1.0, f64::INFINITY];
        let d = run_sweep(&plan, dir.path(), Some(1)).unwrap();
        assert_eq!(d.failures.len(), 2);
        assert_eq!(d.cells.len(), 2);
        let report = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(report.contains("Failed cells"));
    }
}
