//! Record periodograms and the Lorentzian-overlap phase criterion.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::trajectory::MeasurementRecord;

pub const DEFAULT_FREQUENCY_CAP: f64 = 40.0;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-8;
/// Upper end of the width scan: the rescaled spectral span.
pub const DEFAULT_WIDTH_UPPER: f64 = 20.0;
pub const DEFAULT_SCAN_POINTS: usize = 64;
pub const GOLDEN_RELATIVE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    /// `int |S'|^2 d omega = 1`, used for record spectra.
    UnitL2,
    /// `int S^2 d omega = 1`, used for perturbative spectra.
    UnitSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Rectangular,
    /// Hann taper rescaled by its mean square so white noise keeps unit level.
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodogramOptions {
    pub remove_mean: bool,
    #[serde(default = "default_cap")]
    pub frequency_cap: f64,
    #[serde(default)]
    pub window: Window,
}

fn default_cap() -> f64 {
    DEFAULT_FREQUENCY_CAP
}

impl Default for PeriodogramOptions {
    fn default() -> Self {
        Self {
            remove_mean: true,
            frequency_cap: DEFAULT_FREQUENCY_CAP,
            window: Window::Rectangular,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Angular frequency of the first bin.
    pub omega_start: f64,
    pub spacing: f64,
    pub values: Vec<f64>,
    pub normalization: Normalization,
    pub mean_removed: bool,
    #[serde(default)]
    pub window: Window,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
}

/// Trapezoid weights for a uniform grid.
fn trapezoid_weight(k: usize, len: usize, spacing: f64) -> f64 {
    if len == 1 {
        spacing
    } else if k == 0 || k + 1 == len {
        0.5 * spacing
    } else {
        spacing
    }
}

impl Spectrum {
    pub fn new(
        omega_start: f64,
        spacing: f64,
        values: Vec<f64>,
        normalization: Normalization,
        mean_removed: bool,
    ) -> Result<Self> {
        let spectrum = Self {
            omega_start,
            spacing,
            values,
            normalization,
            mean_removed,
            window: Window::Rectangular,
            source_hash: None,
        };
        spectrum.validate()?;
        Ok(spectrum)
    }

    /// Build from explicit frequencies, which must be uniformly spaced.
    pub fn from_samples(
        frequencies: &[f64],
        values: Vec<f64>,
        normalization: Normalization,
        mean_removed: bool,
    ) -> Result<Self> {
        if frequencies.len() != values.len() || frequencies.len() < 2 {
            return Err(Error::InvalidSpec(
                "need >= 2 matching frequency/value samples".into(),
            ));
        }
        let spacing =
            (frequencies[frequencies.len() - 1] - frequencies[0]) / (frequencies.len() - 1) as f64;
        for (k, w) in frequencies.iter().enumerate() {
            let expect = frequencies[0] + k as f64 * spacing;
            if (w - expect).abs() > 1e-9 * spacing.abs().max(w.abs()) {
                return Err(Error::InvalidSpec("frequency grid is not uniform".into()));
            }
        }
        Self::new(frequencies[0], spacing, values, normalization, mean_removed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "grid spacing {} must be > 0",
                self.spacing
            )));
        }
        if self.values.is_empty() {
            return Err(Error::InvalidSpec("empty spectrum".into()));
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidSpec(format!(
                "spectrum value {v} is negative or non-finite"
            )));
        }
        if self.normalization != Normalization::Raw {
            let norm = self.square_integral();
            if (norm - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::Normalization(format!(
                    "declared {:?} but int S^2 = {norm}",
                    self.normalization
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frequency(&self, k: usize) -> f64 {
        self.omega_start + k as f64 * self.spacing
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.frequency(k)).collect()
    }

    fn weight(&self, k: usize) -> f64 {
        trapezoid_weight(k, self.len(), self.spacing)
    }

    /// Trapezoidal `int S d omega`.
    pub fn integral(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| self.weight(k) * v)
            .sum()
    }

    /// Trapezoidal `int S^2 d omega`.
    pub fn square_integral(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| self.weight(k) * v * v)
            .sum()
    }

    /// Rescale to `int S^2 d omega = 1`.
    pub fn normalized(&self, target: Normalization) -> Result<Self> {
        if target == Normalization::Raw {
            let mut out = self.clone();
            out.normalization = Normalization::Raw;
            return Ok(out);
        }
        let norm = self.square_integral().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Normalization(
                "all-zero spectrum cannot be normalized".into(),
            ));
        }
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v /= norm);
        out.normalization = target;
        out.validate()?;
        Ok(out)
    }

    /// Pointwise mean of spectra on the same grid.
    pub fn average(spectra: &[Spectrum]) -> Result<Self> {
        let first = spectra
            .first()
            .ok_or_else(|| Error::InvalidSpec("no spectra to average".into()))?;
        let mut values = vec![0.0; first.len()];
        for s in spectra {
            if s.len() != first.len()
                || s.spacing != first.spacing
                || s.omega_start != first.omega_start
            {
                return Err(Error::InvalidSpec("spectra live on different grids".into()));
            }
            for (acc, v) in values.iter_mut().zip(&s.values) {
                *acc += v;
            }
        }
        let n = spectra.len() as f64;
        values.iter_mut().for_each(|v| *v /= n);
        let mut out = first.clone();
        out.values = values;
        out.normalization = Normalization::Raw;
        out.source_hash = None;
        Ok(out)
    }

    pub fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "normalization": self.normalization,
            "mean_removed": self.mean_removed,
            "window": self.window,
            "grid": {
                "omega_start": self.omega_start,
                "spacing": self.spacing,
                "bins": self.len(),
            },
            "source_hash": self.source_hash,
        })
    }

    pub fn to_csv(&self, extra: serde_json::Value) -> CsvTable {
        let mut header = self.header();
        crate::trajectory::merge(&mut header, extra);
        let mut table = CsvTable::new(header, &["omega", "S"]);
        for (k, &v) in self.values.iter().enumerate() {
            table.push(vec![self.frequency(k), v]);
        }
        table
    }

    pub fn from_csv(table: &CsvTable) -> Result<Self> {
        let h = &table.header;
        let normalization = match h.get("normalization") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Normalization::Raw,
        };
        let grid = h
            .get("grid")
            .ok_or_else(|| Error::Parse("spectrum header lacks `grid`".into()))?;
        let omega_start = grid["omega_start"]
            .as_f64()
            .ok_or_else(|| Error::Parse("grid.omega_start".into()))?;
        let spacing = grid["spacing"]
            .as_f64()
            .ok_or_else(|| Error::Parse("grid.spacing".into()))?;
        let spectrum = Self {
            omega_start,
            spacing,
            values: table.column("S")?,
            normalization,
            mean_removed: h
                .get("mean_removed")
                .and_then(|v| v.as_bool())
                .unwrap_or(false),
            window: h
                .get("window")
                .map(|v| serde_json::from_value(v.clone()))
                .transpose()?
                .unwrap_or_default(),
            source_hash: h
                .get("source_hash")
                .and_then(|v| v.as_str())
                .map(str::to_string),
        };
        spectrum.validate()?;
        Ok(spectrum)
    }
}

/// `S(omega_k) = |sum_n exp(-i omega_k t_n) dI_n|^2 / (gamma T)` on
/// `omega_k = 2 pi k / T`, `|omega_k| <= cap`, with `t_n = n dt`.
pub fn periodogram(record: &MeasurementRecord, options: &PeriodogramOptions) -> Result<Spectrum> {
    let mut spectrum = periodogram_of(&record.increments, record.dt, record.gamma, options)?;
    spectrum.source_hash = Some(record.content_hash());
    Ok(spectrum)
}

pub fn periodogram_of(
    increments: &[f64],
    dt: f64,
    gamma: f64,
    options: &PeriodogramOptions,
) -> Result<Spectrum> {
    if increments.is_empty() {
        return Err(Error::InvalidSpec("empty measurement record".into()));
    }
    // gamma = 0 records hold the bare signal <M> dt and are scaled by 1/T
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Normalization(format!(
            "periodogram needs gamma >= 0 for its 1/(gamma T) scale, got {gamma}"
        )));
    }
    if !(options.frequency_cap > 0.0) {
        return Err(Error::InvalidSpec("frequency cap must be > 0".into()));
    }
    let n = increments.len();
    let total_time = n as f64 * dt;
    let mean = if options.remove_mean {
        increments.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let taper: Vec<f64> = match options.window {
        Window::Rectangular => vec![1.0; n],
        Window::Hann => {
            let raw: Vec<f64> = (0..n)
                .map(|k| (std::f64::consts::PI * k as f64 / n as f64).sin().powi(2))
                .collect();
            let rms = (raw.iter().map(|w| w * w).sum::<f64>() / n as f64).sqrt();
            raw.into_iter().map(|w| w / rms).collect()
        }
    };
    let mut buffer: Vec<Complex64> = increments
        .iter()
        .zip(&taper)
        .map(|(v, w)| Complex64::new((v - mean) * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buffer);

    let spacing = 2.0 * std::f64::consts::PI / total_time;
    let max_bin = ((options.frequency_cap / spacing).floor() as usize).min((n - 1) / 2);
    let scale = 1.0 / (if gamma > 0.0 { gamma } else { 1.0 } * total_time);
    let values: Vec<f64> = (0..=2 * max_bin)
        .map(|idx| {
            let k = idx as i64 - max_bin as i64;
            let bin = if k >= 0 {
                k as usize
            } else {
                n - (-k) as usize
            };
            buffer[bin].norm_sqr() * scale
        })
        .collect();
    let mut spectrum = Spectrum::new(
        -(max_bin as f64) * spacing,
        spacing,
        values,
        Normalization::Raw,
        options.remove_mean,
    )?;
    spectrum.window = options.window;
    Ok(spectrum)
}

/// `C` such that `int (C / (Gamma^2 + omega^2))^2 d omega = 1` on the real line.
pub fn lorentzian_norm_constant(width: f64) -> f64 {
    width.powf(1.5) * (2.0 / std::f64::consts::PI).sqrt()
}

pub fn lorentzian(width: f64, omega: f64) -> f64 {
    lorentzian_norm_constant(width) / (width * width + omega * omega)
}

/// `F(Gamma) = int L_Gamma S' d omega` with `S'` and `L_Gamma` both
/// normalized in the grid's trapezoidal inner product, so `F <= 1` exactly.
pub fn lorentz_overlap(spectrum: &Spectrum, width: f64) -> Result<f64> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "Lorentzian width must be > 0, got {width}"
        )));
    }
    let normalized = match spectrum.normalization {
        Normalization::Raw => spectrum.normalized(Normalization::UnitL2)?,
        _ => spectrum.clone(),
    };
    Ok(overlap_normalized(&normalized, width))
}

fn overlap_normalized(normalized: &Spectrum, width: f64) -> f64 {
    let mut dot = 0.0;
    let mut filter_norm = 0.0;
    for (k, &s) in normalized.values.iter().enumerate() {
        let w = normalized.weight(k);
        let omega = normalized.frequency(k);
        let l = 1.0 / (width * width + omega * omega);
        dot += w * l * s;
        filter_norm += w * l * l;
    }
    dot / filter_norm.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzFit {
    pub gamma_max: f64,
    pub overlap: f64,
    /// The maximum sits at an end of the scanned width range.
    pub boundary_flag: bool,
    pub iterations: usize,
    pub bracket: (f64, f64),
    pub search_range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapSearch {
    /// Defaults to one frequency bin.
    pub width_lower: Option<f64>,
    pub width_upper: f64,
    pub scan_points: usize,
    pub relative_tolerance: f64,
}

impl Default for OverlapSearch {
    fn default() -> Self {
        Self {
            width_lower: None,
            width_upper: DEFAULT_WIDTH_UPPER,
            scan_points: DEFAULT_SCAN_POINTS,
            relative_tolerance: GOLDEN_RELATIVE_TOLERANCE,
        }
    }
}

pub fn maximize_overlap(spectrum: &Spectrum) -> Result<LorentzFit> {
    maximize_overlap_with(spectrum, &OverlapSearch::default())
}

/// Log-spaced scan of `F` over the width range, then golden-section
/// refinement (in `ln Gamma`) around the best scan point.
pub fn maximize_overlap_with(spectrum: &Spectrum, search: &OverlapSearch) -> Result<LorentzFit> {
    let normalized = match spectrum.normalization {
        Normalization::Raw => spectrum.normalized(Normalization::UnitL2)?,
        _ => spectrum.clone(),
    };
    let lower = search.width_lower.unwrap_or(spectrum.spacing);
    let upper = search.width_upper;
    if !(lower > 0.0 && upper > lower) || search.scan_points < 3 {
        return Err(Error::InvalidSpec(format!(
            "bad width search range [{lower}, {upper}]"
        )));
    }
    let (ln_lo, ln_hi) = (lower.ln(), upper.ln());
    let step = (ln_hi - ln_lo) / (search.scan_points - 1) as f64;
    let scan: Vec<f64> = (0..search.scan_points)
        .map(|k| overlap_normalized(&normalized, (ln_lo + k as f64 * step).exp()))
        .collect();
    let best = scan
        .iter()
        .enumerate()
        .fold(0, |b, (k, &f)| if f > scan[b] { k } else { b });
    let boundary_flag = best == 0 || best + 1 == search.scan_points;

    let mut a = ln_lo + best.saturating_sub(1) as f64 * step;
    let mut b = ln_lo + (best + 1).min(search.scan_points - 1) as f64 * step;
    let bracket = (a.exp(), b.exp());
    let objective = |x: f64| overlap_normalized(&normalized, x.exp());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    let mut iterations = 0;
    // interval in ln(Gamma): width w means relative precision ~ w
    while b - a > search.relative_tolerance && iterations < 200 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = objective(d);
        }
        iterations += 1;
    }
    let mut gamma_max = (0.5 * (a + b)).exp();
    let mut overlap = objective(gamma_max.ln());
    // the refined point may not beat a scan endpoint when the maximum is on the boundary
    if scan[best] > overlap {
        gamma_max = (ln_lo + best as f64 * step).exp();
        overlap = scan[best];
    }
    Ok(LorentzFit {
        gamma_max,
        overlap,
        boundary_flag,
        iterations,
        bracket,
        search_range: (lower, upper),
    })
}
