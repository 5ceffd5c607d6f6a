//! Diffusive quantum trajectories: the state conditioned on a continuous
//! weak measurement of a Hermitian operator, and the measurement record.
//!
//! The record increment is `dI = gamma <M> dt + sqrt(gamma) dW`. The linear
//! state update is driven by `dI + gamma <M> dt`, which with the
//! `-(gamma/2) M^2` damping and per-step renormalization reproduces the
//! normalized Ito equation
//! `d psi = [-i H - (gamma/2)(M - <M>)^2] psi dt + sqrt(gamma)(M - <M>) psi dW`.
//! Driving with `dI` alone would bias the state toward the record and break
//! the martingale property of QND populations.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fock::HermitianOperator;
use crate::io::CsvTable;

pub const NORM_COLLAPSE_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_LOG_STRIDE: usize = 10;
pub const EULER_SPAN_DT: f64 = 0.01;
pub const SPLIT_SPAN_DT: f64 = 0.1;
pub const SPLIT_GAMMA_DT: f64 = 1e-3;
const TAYLOR_TOLERANCE: f64 = 1e-16;
const TAYLOR_MAX_TERMS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    /// Measurement factor `exp(M dI' - gamma M^2 dt)` followed by the exact
    /// unitary `exp(-i H dt)`.
    SplitStepExponential,
}

impl Scheme {
    /// Default step for a Hamiltonian of the given spectral span.
    pub fn default_dt(self, span: f64, gamma: f64) -> f64 {
        match self {
            Scheme::EulerMaruyama => EULER_SPAN_DT / span,
            Scheme::SplitStepExponential => {
                let by_span = SPLIT_SPAN_DT / span;
                if gamma > 0.0 {
                    by_span.min(SPLIT_GAMMA_DT / gamma)
                } else {
                    by_span
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub total_time: f64,
    pub gamma: f64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Tags that must be supplied to [`run_trajectory`]; `M` and `H` are
    /// always available.
    #[serde(default)]
    pub observables: Vec<String>,
    #[serde(default = "default_stride")]
    pub log_stride: usize,
    /// Keep full state vectors every this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
}

fn default_stride() -> usize {
    DEFAULT_LOG_STRIDE
}

impl TrajectoryConfig {
    pub fn new(dt: f64, total_time: f64, gamma: f64, seed: u64, scheme: Scheme) -> Self {
        Self {
            dt,
            total_time,
            gamma,
            seed,
            scheme,
            observables: Vec::new(),
            log_stride: DEFAULT_LOG_STRIDE,
            snapshot_stride: None,
        }
    }

    pub fn num_steps(&self) -> usize {
        (self.total_time / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "dt must be > 0, got {}",
                self.dt
            )));
        }
        if !(self.total_time >= self.dt && self.total_time.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "total time {} must be >= dt {}",
                self.total_time, self.dt
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.log_stride == 0 || self.snapshot_stride == Some(0) {
            return Err(Error::InvalidSpec("strides must be >= 1".into()));
        }
        Ok(())
    }
}

/// Something whose value is logged along the trajectory.
#[derive(Debug, Clone)]
pub enum Probe {
    /// `<psi|A|psi>`.
    Operator(HermitianOperator),
    /// `|<v|psi>|^2`.
    Overlap(Vec<Complex64>),
}

#[derive(Debug, Clone)]
pub struct LoggedObservable {
    pub tag: String,
    pub probe: Probe,
}

impl LoggedObservable {
    pub fn operator(tag: &str, op: HermitianOperator) -> Self {
        Self {
            tag: tag.to_string(),
            probe: Probe::Operator(op),
        }
    }

    pub fn overlap(tag: &str, state: Vec<Complex64>) -> Self {
        Self {
            tag: tag.to_string(),
            probe: Probe::Overlap(state),
        }
    }

    fn evaluate(&self, psi: &[Complex64]) -> f64 {
        match &self.probe {
            Probe::Operator(op) => op.expectation(psi),
            Probe::Overlap(v) => inner(v, psi).norm_sqr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub gamma: f64,
    pub dt: f64,
    pub total_time: f64,
    pub seed: u64,
    pub scheme: Scheme,
    /// Measured-operator tag, e.g. `pop` or `coh`.
    pub operator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    pub increments: Vec<f64>,
}

impl MeasurementRecord {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// SHA-256 over the increments' little-endian bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.increments {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "gamma": self.gamma,
            "dt": self.dt,
            "total_time": self.total_time,
            "seed": self.seed,
            "scheme": self.scheme,
            "operator": self.operator,
            "model_hash": self.model_hash,
            "record_hash": self.content_hash(),
        })
    }

    /// `extra` is merged into the header (resolved config, version stamp).
    pub fn to_csv(&self, extra: serde_json::Value) -> CsvTable {
        let mut header = self.header();
        merge(&mut header, extra);
        let mut table = CsvTable::new(header, &["dI"]);
        for &v in &self.increments {
            table.push(vec![v]);
        }
        table
    }

    pub fn from_csv(table: &CsvTable) -> Result<Self> {
        let h = &table.header;
        let field = |k: &str| {
            h.get(k)
                .ok_or_else(|| Error::Parse(format!("record header lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            field(k)?
                .as_f64()
                .ok_or_else(|| Error::Parse(format!("record header `{k}` is not a number")))
        };
        let record = Self {
            gamma: num("gamma")?,
            dt: num("dt")?,
            total_time: num("total_time")?,
            seed: field("seed")?
                .as_u64()
                .ok_or_else(|| Error::Parse("record header `seed` is not an integer".into()))?,
            scheme: serde_json::from_value(field("scheme")?.clone())?,
            operator: field("operator")?.as_str().unwrap_or_default().to_string(),
            model_hash: h
                .get("model_hash")
                .and_then(|v| v.as_str())
                .map(str::to_string),
            increments: table.column("dI")?,
        };
        if let Some(hash) = h.get("record_hash").and_then(|v| v.as_str()) {
            if hash != record.content_hash() {
                return Err(Error::Parse(
                    "record hash does not match its increments".into(),
                ));
            }
        }
        Ok(record)
    }
}

pub(crate) fn merge(base: &mut serde_json::Value, extra: serde_json::Value) {
    if let (Some(b), serde_json::Value::Object(e)) = (base.as_object_mut(), extra) {
        for (k, v) in e {
            b.insert(k, v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub tags: Vec<String>,
    /// `values[k]` is the series for `tags[k]`.
    pub values: Vec<Vec<f64>>,
    #[serde(skip)]
    pub final_state: Vec<Complex64>,
    #[serde(skip)]
    pub snapshots: Vec<(f64, Vec<Complex64>)>,
    /// Largest `| ||psi~|| - 1 |` seen before renormalization.
    pub max_norm_drift: f64,
}

impl TrajectoryLog {
    pub fn series(&self, tag: &str) -> Result<&[f64]> {
        self.tags
            .iter()
            .position(|t| t == tag)
            .map(|k| self.values[k].as_slice())
            .ok_or_else(|| Error::MissingObservable(tag.to_string()))
    }

    pub fn to_csv(&self, header: serde_json::Value) -> CsvTable {
        let mut columns = vec!["t"];
        columns.extend(self.tags.iter().map(String::as_str));
        let mut table = CsvTable::new(header, &columns);
        for (n, &t) in self.times.iter().enumerate() {
            let mut row = vec![t];
            row.extend(self.values.iter().map(|s| s[n]));
            table.push(row);
        }
        table
    }
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm_sqr(psi: &[Complex64]) -> f64 {
    psi.iter().map(|z| z.norm_sqr()).sum()
}

/// Gershgorin enclosure `[lo, hi]` of the spectrum.
fn spectral_bounds(op: &HermitianOperator) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..op.dim() {
        let mut diag = 0.0;
        let mut radius = 0.0;
        for (c, v) in op.row(r) {
            if c == r {
                diag = v;
            } else {
                radius += v.abs();
            }
        }
        lo = lo.min(diag - radius);
        hi = hi.max(diag + radius);
    }
    (lo, hi)
}

/// `psi <- exp(A) psi` by a truncated Taylor series, where `apply(x, y)`
/// writes `A x` into `y` and `bound >= ||A||`. The exponent is split into
/// substeps of norm <= 1 so the series never cancels catastrophically.
fn taylor_apply(
    psi: &mut [Complex64],
    bound: f64,
    work: &mut [Vec<Complex64>; 2],
    mut apply: impl FnMut(&[Complex64], &mut [Complex64]),
) {
    let substeps = bound.ceil().max(1.0) as usize;
    let frac = 1.0 / substeps as f64;
    for _ in 0..substeps {
        let [term, next] = work;
        term.copy_from_slice(psi);
        for k in 1..=TAYLOR_MAX_TERMS {
            apply(term, next);
            let scale = frac / k as f64;
            let mut size = 0.0;
            for (t, n) in term.iter_mut().zip(next.iter()) {
                *t = n * scale;
                size += t.norm_sqr();
            }
            for (p, t) in psi.iter_mut().zip(term.iter()) {
                *p += t;
            }
            if size.sqrt() <= TAYLOR_TOLERANCE {
                break;
            }
        }
    }
}

/// One-step kernel shared by the trajectory driver and by tests that feed
/// their own Wiener increments.
pub struct Stepper<'a> {
    hamiltonian: &'a HermitianOperator,
    measurement: &'a HermitianOperator,
    measurement_diagonal: Option<Vec<f64>>,
    gamma: f64,
    dt: f64,
    scheme: Scheme,
    shift: f64,
    radius: f64,
    measurement_bound: f64,
    hpsi: Vec<Complex64>,
    mpsi: Vec<Complex64>,
    m2psi: Vec<Complex64>,
    work: [Vec<Complex64>; 2],
    pub max_norm_drift: f64,
    step_index: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(
        hamiltonian: &'a HermitianOperator,
        measurement: &'a HermitianOperator,
        gamma: f64,
        dt: f64,
        scheme: Scheme,
    ) -> Result<Self> {
        if hamiltonian.shape() != measurement.shape() {
            return Err(Error::BasisMismatch {
                expected: hamiltonian.dim(),
                found: measurement.dim(),
            });
        }
        let dim = hamiltonian.dim();
        let (lo, hi) = spectral_bounds(hamiltonian);
        let (mlo, mhi) = spectral_bounds(measurement);
        Ok(Self {
            hamiltonian,
            measurement,
            measurement_diagonal: measurement.as_diagonal(),
            gamma,
            dt,
            scheme,
            shift: 0.5 * (lo + hi),
            radius: 0.5 * (hi - lo),
            measurement_bound: mlo.abs().max(mhi.abs()),
            hpsi: vec![Complex64::default(); dim],
            mpsi: vec![Complex64::default(); dim],
            m2psi: vec![Complex64::default(); dim],
            work: [
                vec![Complex64::default(); dim],
                vec![Complex64::default(); dim],
            ],
            max_norm_drift: 0.0,
            step_index: 0,
        })
    }

    /// Advance `psi` (normalized) by one step with Wiener increment `dw`
    /// (variance `dt`). Returns the record increment; at `gamma = 0` that is
    /// the noiseless signal `<M> dt`, the zero-strength limit of `dI / gamma`.
    pub fn step(&mut self, psi: &mut [Complex64], dw: f64) -> Result<f64> {
        let (gamma, dt) = (self.gamma, self.dt);
        self.measurement.apply(psi, &mut self.mpsi);
        let mean = inner(psi, &self.mpsi).re;
        let record = gamma * mean * dt + gamma.sqrt() * dw;
        let drive = record + gamma * mean * dt;
        let record = if gamma == 0.0 { mean * dt } else { record };

        match self.scheme {
            Scheme::EulerMaruyama => {
                self.hamiltonian.apply(psi, &mut self.hpsi);
                self.measurement.apply(&self.mpsi, &mut self.m2psi);
                let minus_i_dt = Complex64::new(0.0, -dt);
                for k in 0..psi.len() {
                    psi[k] += minus_i_dt * self.hpsi[k] - self.m2psi[k] * (0.5 * gamma * dt)
                        + self.mpsi[k] * drive;
                }
            }
            Scheme::SplitStepExponential => {
                if let Some(diag) = &self.measurement_diagonal {
                    for (p, &m) in psi.iter_mut().zip(diag) {
                        *p *= (m * drive - gamma * dt * m * m).exp();
                    }
                } else {
                    let bound = self.measurement_bound * drive.abs()
                        + gamma * dt * self.measurement_bound * self.measurement_bound;
                    let m = self.measurement;
                    let scratch = &mut self.m2psi;
                    taylor_apply(psi, bound, &mut self.work, |x, y| {
                        m.apply(x, scratch);
                        m.apply(scratch, y);
                        for (yk, sk) in y.iter_mut().zip(scratch.iter()) {
                            *yk = *sk * drive - *yk * (gamma * dt);
                        }
                    });
                }
                self.renormalize(psi)?;
                let h = self.hamiltonian;
                let shift = self.shift;
                let minus_i_dt = Complex64::new(0.0, -dt);
                taylor_apply(psi, self.radius * dt, &mut self.work, |x, y| {
                    h.apply(x, y);
                    for (yk, xk) in y.iter_mut().zip(x) {
                        *yk = (*yk - xk * shift) * minus_i_dt;
                    }
                });
                let phase = Complex64::from_polar(1.0, -shift * dt);
                psi.iter_mut().for_each(|p| *p *= phase);
            }
        }
        self.renormalize(psi)?;
        self.step_index += 1;
        Ok(record)
    }

    fn renormalize(&mut self, psi: &mut [Complex64]) -> Result<()> {
        let norm = norm_sqr(psi).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step_index,
            });
        }
        if norm < NORM_COLLAPSE_THRESHOLD {
            return Err(Error::NormCollapse {
                norm,
                step: self.step_index,
            });
        }
        self.max_norm_drift = self.max_norm_drift.max((norm - 1.0).abs());
        let inv = 1.0 / norm;
        psi.iter_mut().for_each(|p| *p *= inv);
        Ok(())
    }
}

fn check_state(hamiltonian: &HermitianOperator, initial: &[Complex64]) -> Result<()> {
    if initial.len() != hamiltonian.dim() {
        return Err(Error::BasisMismatch {
            expected: hamiltonian.dim(),
            found: initial.len(),
        });
    }
    let norm = norm_sqr(initial).sqrt();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::Normalization(format!(
            "initial state has norm {norm}"
        )));
    }
    Ok(())
}

/// Integrate one seeded realization. `observables` must cover every tag in
/// `config.observables` other than the built-in `M` (measured operator) and
/// `H` (energy).
pub fn run_trajectory(
    hamiltonian: &HermitianOperator,
    measurement: &HermitianOperator,
    initial: &[Complex64],
    config: &TrajectoryConfig,
    observables: &[LoggedObservable],
) -> Result<(MeasurementRecord, TrajectoryLog)> {
    config.validate()?;
    check_state(hamiltonian, initial)?;
    let mut logged: Vec<LoggedObservable> = Vec::new();
    for tag in &config.observables {
        let obs = match tag.as_str() {
            "M" => LoggedObservable::operator("M", measurement.clone()),
            "H" => LoggedObservable::operator("H", hamiltonian.clone()),
            _ => observables
                .iter()
                .find(|o| &o.tag == tag)
                .cloned()
                .ok_or_else(|| Error::MissingObservable(tag.clone()))?,
        };
        if let Probe::Overlap(v) = &obs.probe {
            if v.len() != hamiltonian.dim() {
                return Err(Error::BasisMismatch {
                    expected: hamiltonian.dim(),
                    found: v.len(),
                });
            }
        }
        if let Probe::Operator(op) = &obs.probe {
            if op.dim() != hamiltonian.dim() {
                return Err(Error::BasisMismatch {
                    expected: hamiltonian.dim(),
                    found: op.dim(),
                });
            }
        }
        logged.push(obs);
    }

    let steps = config.num_steps();
    let mut stepper = Stepper::new(
        hamiltonian,
        measurement,
        config.gamma,
        config.dt,
        config.scheme,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sqrt_dt = config.dt.sqrt();
    let mut psi = initial.to_vec();
    let mut increments = Vec::with_capacity(steps);
    let mut log = TrajectoryLog {
        times: Vec::new(),
        tags: logged.iter().map(|o| o.tag.clone()).collect(),
        values: vec![Vec::new(); logged.len()],
        final_state: Vec::new(),
        snapshots: Vec::new(),
        max_norm_drift: 0.0,
    };
    let record_sample = |n: usize, psi: &[Complex64], log: &mut TrajectoryLog| {
        let t = n as f64 * config.dt;
        if n.is_multiple_of(config.log_stride) {
            log.times.push(t);
            for (k, obs) in logged.iter().enumerate() {
                log.values[k].push(obs.evaluate(psi));
            }
        }
        if let Some(stride) = config.snapshot_stride {
            if n.is_multiple_of(stride) {
                log.snapshots.push((t, psi.to_vec()));
            }
        }
    };

    record_sample(0, &psi, &mut log);
    for n in 0..steps {
        let z: f64 = StandardNormal.sample(&mut rng);
        increments.push(stepper.step(&mut psi, z * sqrt_dt)?);
        record_sample(n + 1, &psi, &mut log);
    }
    log.final_state = psi;
    log.max_norm_drift = stepper.max_norm_drift;
    let record = MeasurementRecord {
        gamma: config.gamma,
        dt: config.dt,
        total_time: config.total_time,
        seed: config.seed,
        scheme: config.scheme,
        operator: String::new(),
        model_hash: None,
        increments,
    };
    Ok((record, log))
}

/// Independent realizations for each seed, run in parallel.
pub fn run_ensemble(
    hamiltonian: &HermitianOperator,
    measurement: &HermitianOperator,
    initial: &[Complex64],
    config: &TrajectoryConfig,
    observables: &[LoggedObservable],
    seeds: &[u64],
) -> Result<Vec<(MeasurementRecord, TrajectoryLog)>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            run_trajectory(hamiltonian, measurement, initial, &cfg, observables)
        })
        .collect()
}

/// Mean of the logged series after discarding the leading `discard`
/// fraction of samples.
pub fn time_average_expectation(log: &TrajectoryLog, tag: &str, discard: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&discard) {
        return Err(Error::InvalidSpec(format!(
            "discard fraction {discard} outside [0, 1]"
        )));
    }
    let series = log.series(tag)?;
    let start = (discard * series.len() as f64).ceil() as usize;
    let window = series.get(start..).unwrap_or(&[]);
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

/// Time-averaged `|<GS|psi(t)>|^2` over the stored snapshots.
pub fn ground_state_residence(log: &TrajectoryLog, ground: &[Complex64]) -> Result<f64> {
    if log.snapshots.is_empty() {
        return Err(Error::MissingObservable("state snapshots".into()));
    }
    let mut total = 0.0;
    for (_, psi) in &log.snapshots {
        if psi.len() != ground.len() {
            return Err(Error::BasisMismatch {
                expected: ground.len(),
                found: psi.len(),
            });
        }
        total += inner(ground, psi).norm_sqr();
    }
    Ok(total / log.snapshots.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub dt: f64,
    pub pilot_time: f64,
    /// Largest `|<M>_dt - <M>_{dt/2}|` along a pilot driven by the same
    /// Brownian path.
    pub max_deviation: f64,
    pub tolerance: f64,
    pub halvings: usize,
    pub passed: bool,
}

/// Halve `config.dt` until a pilot run agrees with its own half-step
/// refinement (same Brownian path) to `tolerance` in `<M>`, up to
/// `max_halvings` times. The returned config carries the accepted step.
pub fn check_step_size(
    hamiltonian: &HermitianOperator,
    measurement: &HermitianOperator,
    initial: &[Complex64],
    config: &TrajectoryConfig,
    pilot_time: f64,
    tolerance: f64,
    max_halvings: usize,
) -> Result<(TrajectoryConfig, StepCheck)> {
    config.validate()?;
    check_state(hamiltonian, initial)?;
    let mut cfg = config.clone();
    let pilot_time = pilot_time.min(config.total_time);
    let mut halvings = 0;
    loop {
        let fine_dt = cfg.dt / 2.0;
        let coarse_steps = (pilot_time / cfg.dt).round().max(1.0) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c4ec);
        let mut coarse = Stepper::new(hamiltonian, measurement, cfg.gamma, cfg.dt, cfg.scheme)?;
        let mut fine = Stepper::new(hamiltonian, measurement, cfg.gamma, fine_dt, cfg.scheme)?;
        let mut psi_c = initial.to_vec();
        let mut psi_f = initial.to_vec();
        let mut deviation: f64 = 0.0;
        for _ in 0..coarse_steps {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let (dw1, dw2) = (a * fine_dt.sqrt(), b * fine_dt.sqrt());
            coarse.step(&mut psi_c, dw1 + dw2)?;
            fine.step(&mut psi_f, dw1)?;
            fine.step(&mut psi_f, dw2)?;
            let diff = measurement.expectation(&psi_c) - measurement.expectation(&psi_f);
            deviation = deviation.max(diff.abs());
        }
        let passed = deviation <= tolerance;
        if passed || halvings >= max_halvings {
            let check = StepCheck {
                dt: cfg.dt,
                pilot_time,
                max_deviation: deviation,
                tolerance,
                halvings,
                passed,
            };
            if !passed {
                log::warn!(
                    "step check failed after {halvings} halvings: deviation {deviation:e} > {tolerance:e} at dt {}",
                    cfg.dt
                );
            }
            return Ok((cfg, check));
        }
        cfg.dt = fine_dt;
        halvings += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::FockBasis;
    use crate::model::{ground_state, MeasurementKind, Model, ModelSpec};

    fn two_site(r: f64, kind: MeasurementKind) -> Model {
        Model::build(&ModelSpec::new(2, 2, r, kind)).unwrap()
    }

    #[test]
    fn closed_system_conserves_energy() {
        let model = two_site(1.0, MeasurementKind::Coherence);
        let h = &model.hamiltonian.operator;
        let psi0 = model.basis.fock_state(&[2, 0]).unwrap();
        let drift = |dt: f64, scheme: Scheme| {
            let mut cfg = TrajectoryConfig::new(dt, 1.0, 0.0, 3, scheme);
            cfg.observables = vec!["H".into()];
            let (record, log) =
                run_trajectory(h, &model.measurement.operator, &psi0, &cfg, &[]).unwrap();
            assert_eq!(record.len(), (1.0 / dt).round() as usize);
            // zero strength: the record is the bare signal <M> dt, |<M>| <= 1
            assert!(record
                .increments
                .iter()
                .all(|&v| v.abs() <= dt * (1.0 + 1e-12)));
            assert!((norm_sqr(&log.final_state) - 1.0).abs() < 1e-12);
            let e = log.series("H").unwrap();
            e.iter().map(|x| (x - e[0]).abs()).fold(0.0, f64::max)
        };
        // Euler: O(dt^2) per step, so the drift over fixed time halves with dt
        let ratio = drift(1e-4, Scheme::EulerMaruyama) / drift(5e-5, Scheme::EulerMaruyama);
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
        assert!(drift(1e-2, Scheme::SplitStepExponential) < 1e-10);
    }

    #[test]
    fn split_step_unitary_is_exact() {
        // gamma = 0: split-step should match exp(-iHt) from the spectrum
        let model = two_site(2.0, MeasurementKind::Coherence);
        let h = &model.hamiltonian.operator;
        let psi0 = model.basis.fock_state(&[1, 1]).unwrap();
        let cfg = TrajectoryConfig::new(0.01, 1.0, 0.0, 0, Scheme::SplitStepExponential);
        let (_, log) = run_trajectory(h, &model.measurement.operator, &psi0, &cfg, &[]).unwrap();
        let sd = model.spectral().unwrap();
        let mut exact = vec![Complex64::default(); psi0.len()];
        for (i, &e) in sd.eigenvalues.iter().enumerate() {
            let v = sd.vector(i);
            let amp = inner(&v, &psi0) * Complex64::from_polar(1.0, -e * 1.0);
            for (x, vk) in exact.iter_mut().zip(&v) {
                *x += amp * vk;
            }
        }
        let err: f64 = exact
            .iter()
            .zip(&log.final_state)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-11, "{err}");
    }

    #[test]
    fn qnd_eigenstate_is_stationary() {
        let model = two_site(f64::INFINITY, MeasurementKind::population());
        let psi0 = model.basis.fock_state(&[1, 1]).unwrap();
        let m = model.measurement.operator.expectation(&psi0);
        for scheme in [Scheme::EulerMaruyama, Scheme::SplitStepExponential] {
            let mut cfg = TrajectoryConfig::new(0.01, 50.0, 0.1, 11, scheme);
            cfg.observables = vec!["M".into()];
            let (record, log) = run_trajectory(
                &model.hamiltonian.operator,
                &model.measurement.operator,
                &psi0,
                &cfg,
                &[],
            )
            .unwrap();
            let avg = time_average_expectation(&log, "M", 0.0).unwrap();
            assert!((avg - m).abs() < 1e-10);
            let mean = record.increments.iter().sum::<f64>() / record.total_time;
            let se = (cfg.gamma / record.total_time).sqrt();
            assert!((mean - cfg.gamma * m).abs() < 4.0 * se);
        }
    }

    #[test]
    fn identical_seeds_give_identical_records() {
        let model = two_site(1.0, MeasurementKind::Coherence);
        let psi0 = ground_state(&model.hamiltonian.operator).unwrap().vector;
        let cfg = TrajectoryConfig::new(1e-3, 2.0, 0.3, 99, Scheme::SplitStepExponential);
        let h = &model.hamiltonian.operator;
        let m = &model.measurement.operator;
        let (a, _) = run_trajectory(h, m, &psi0, &cfg, &[]).unwrap();
        let (b, _) = run_trajectory(h, m, &psi0, &cfg, &[]).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let mut other = cfg.clone();
        other.seed = 100;
        let (c, _) = run_trajectory(h, m, &psi0, &other, &[]).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn norm_drift_shrinks_with_dt() {
        let model = two_site(1.0, MeasurementKind::Coherence);
        let psi0 = model.basis.fock_state(&[2, 0]).unwrap();
        let drift = |dt: f64| {
            let cfg = TrajectoryConfig::new(dt, 0.5, 0.5, 5, Scheme::EulerMaruyama);
            run_trajectory(
                &model.hamiltonian.operator,
                &model.measurement.operator,
                &psi0,
                &cfg,
                &[],
            )
            .unwrap()
            .1
            .max_norm_drift
        };
        let (coarse, fine) = (drift(1e-3), drift(2.5e-4));
        assert!(fine < coarse);
    }

    #[test]
    fn averages_and_residence() {
        let log = TrajectoryLog {
            times: vec![0.0, 1.0, 2.0, 3.0],
            tags: vec!["x".into()],
            values: vec![vec![2.0; 4]],
            final_state: vec![],
            snapshots: vec![],
            max_norm_drift: 0.0,
        };
        assert_eq!(time_average_expectation(&log, "x", 0.5).unwrap(), 2.0);
        assert!(matches!(
            time_average_expectation(&log, "x", 1.0),
            Err(Error::EmptyWindow)
        ));
        assert!(time_average_expectation(&log, "y", 0.0).is_err());
        assert!(ground_state_residence(&log, &[]).is_err());
    }

    #[test]
    fn ground_state_stays_put_without_measurement() {
        let model = two_site(1.0, MeasurementKind::Coherence);
        let sd = model.spectral().unwrap();
        let gs = sd.vector(0);
        let excited = sd.vector(2);
        let mut cfg = TrajectoryConfig::new(0.01, 5.0, 0.0, 1, Scheme::SplitStepExponential);
        cfg.snapshot_stride = Some(50);
        let h = &model.hamiltonian.operator;
        let m = &model.measurement.operator;
        let (_, log) = run_trajectory(h, m, &gs, &cfg, &[]).unwrap();
        assert!((ground_state_residence(&log, &gs).unwrap() - 1.0).abs() < 1e-9);
        let (_, log) = run_trajectory(h, m, &excited, &cfg, &[]).unwrap();
        assert!(ground_state_residence(&log, &gs).unwrap() < 1e-20);
        assert!(ground_state_residence(&log, &[Complex64::default(); 2]).is_err());
    }

    #[test]
    fn missing_observables_and_bad_inputs() {
        let model = two_site(1.0, MeasurementKind::Coherence);
        let h = &model.hamiltonian.operator;
        let m = &model.measurement.operator;
        let psi0 = model.basis.fock_state(&[2, 0]).unwrap();
        let mut cfg = TrajectoryConfig::new(0.01, 0.1, 0.1, 1, Scheme::EulerMaruyama);
        cfg.observables = vec!["gs".into()];
        assert!(matches!(
            run_trajectory(h, m, &psi0, &cfg, &[]),
            Err(Error::MissingObservable(_))
        ));
        let gs = LoggedObservable::overlap("gs", psi0.clone());
        let (_, log) = run_trajectory(h, m, &psi0, &cfg, &[gs]).unwrap();
        assert_eq!(log.series("gs").unwrap()[0], 1.0);

        cfg.observables.clear();
        let unnormalized: Vec<_> = psi0.iter().map(|z| z * 2.0).collect();
        assert!(run_trajectory(h, m, &unnormalized, &cfg, &[]).is_err());
        let other = FockBasis::build(3, 2).unwrap();
        assert!(run_trajectory(h, m, &other.fock_state(&[1, 1, 0]).unwrap(), &cfg, &[]).is_err());
        cfg.dt = 0.0;
        assert!(run_trajectory(h, m, &psi0, &cfg, &[]).is_err());
    }

    #[test]
    fn collapse_and_non_finite_steps_are_errors() {
        let basis = FockBasis::build(2, 2).unwrap();
        let m = crate::fock::number_operator(&basis, 1).unwrap().scaled(0.5);
        let h = HermitianOperator::zeros(basis.shape());
        let (gamma, dt) = (0.5, 0.01);
        let mut stepper = Stepper::new(&h, &m, gamma, dt, Scheme::EulerMaruyama).unwrap();
        // eigenvalue 1 state; this increment zeroes 1 - gamma dt/2 + drive
        let mut psi = basis.fock_state(&[0, 2]).unwrap();
        let dw = -(1.0 + 1.5 * gamma * dt) / gamma.sqrt();
        assert!(matches!(
            stepper.step(&mut psi, dw),
            Err(Error::NormCollapse { .. })
        ));
        let mut psi = basis.fock_state(&[0, 2]).unwrap();
        assert!(matches!(
            stepper.step(&mut psi, f64::NAN),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn record_csv_round_trip() {
        let model = two_site(1.0, MeasurementKind::Coherence);
        let psi0 = model.basis.fock_state(&[2, 0]).unwrap();
        let cfg = TrajectoryConfig::new(0.01, 1.0, 0.2, 8, Scheme::EulerMaruyama);
        let (mut record, _) = run_trajectory(
            &model.hamiltonian.operator,
            &model.measurement.operator,
            &psi0,
            &cfg,
            &[],
        )
        .unwrap();
        record.operator = "coh".into();
        let table = record.to_csv(serde_json::json!({"extra": true}));
        let back = MeasurementRecord::from_csv(&CsvTable::parse(&table.render()).unwrap()).unwrap();
        assert_eq!(back, record);
    }

    #[test]
    fn step_check_halves_until_agreement() {
        let model = two_site(1.0, MeasurementKind::Coherence);
        let psi0 = model.basis.fock_state(&[2, 0]).unwrap();
        let cfg = TrajectoryConfig::new(0.05, 10.0, 0.1, 4, Scheme::EulerMaruyama);
        let h = &model.hamiltonian.operator;
        let m = &model.measurement.operator;
        let (accepted, check) = check_step_size(h, m, &psi0, &cfg, 2.0, 0.02, 6).unwrap();
        assert!(check.passed);
        assert!(check.halvings > 0);
        assert_eq!(accepted.dt, 0.05 / 2f64.powi(check.halvings as i32));
    }
}
