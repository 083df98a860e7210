//! Declarative scenarios, sweeps and band-structure runs with file outputs.
//!
//! Config fields carry their units in the name (`_gamma0`, `_gamma0inv`,
//! `_over_k0`, `_sites`). Every run is deterministic; re-running a config
//! reproduces its files byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{self, BandProjector, DecayFit, Plateau, SpectrumAnalyzer, Trajectory};
use crate::bands::{self, Band, BandTable};
use crate::error::{Error, Result};
use crate::lattice::{FieldSchedule, ModelParams, SYMMETRY_TOLERANCE};
use crate::propagation::{
    band_amplitudes, gaussian_initial, record_trajectory, AutoPropagator, GaussianSpec,
    Propagator, SpectralPropagator, StepOptions, SteppedPropagator, WavepacketState,
    DEFAULT_WIDTH_DENOMINATOR, EXPONENT_FLOOR, MAX_CONDITION, NORM_GROWTH_TOLERANCE,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One point `n0(t)` of the zero-point trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breakpoint {
    pub t_gamma0inv: f64,
    pub zero_point_sites: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub breakpoints: Vec<Breakpoint>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            breakpoints: vec![Breakpoint {
                t_gamma0inv: 0.0,
                zero_point_sites: 0.0,
            }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Amplitudes {
    Explicit {
        psi_plus: Complex64,
        psi_minus: Complex64,
    },
    /// Bloch eigenvector of `band` at `k_c` with the uniform field felt at the
    /// packet centre at `t = 0`.
    Band {
        band: Band,
        #[serde(default = "one")]
        total_probability: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_width() -> f64 {
    DEFAULT_WIDTH_DENOMINATOR
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub center_site: f64,
    pub k_c_over_k0: f64,
    #[serde(default = "default_width")]
    pub width_denominator: f64,
    pub amplitudes: Amplitudes,
    /// Extra phase on `psi_minus`, in radians.
    #[serde(default)]
    pub psi_phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleGrid {
    Linear {
        start_gamma0inv: f64,
        end_gamma0inv: f64,
        count: usize,
    },
    Log {
        start_gamma0inv: f64,
        end_gamma0inv: f64,
        count: usize,
        #[serde(default)]
        include_zero: bool,
    },
    Explicit {
        times_gamma0inv: Vec<f64>,
    },
}

fn linspace(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|i| {
                if i + 1 == count {
                    end
                } else {
                    start + (end - start) * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

fn logspace(start: f64, end: f64, count: usize) -> Vec<f64> {
    let (a, b) = (start.ln(), end.ln());
    linspace(a, b, count)
        .into_iter()
        .enumerate()
        .map(|(i, x)| match i {
            0 => start,
            _ if i + 1 == count => end,
            _ => x.exp(),
        })
        .collect()
}

impl SampleGrid {
    pub fn times(&self) -> Result<Vec<f64>> {
        let times = match self {
            SampleGrid::Linear {
                start_gamma0inv,
                end_gamma0inv,
                count,
            } => {
                if *count == 0 || (*count > 1 && !(end_gamma0inv > start_gamma0inv)) {
                    return Err(Error::config(
                        "samples.linear",
                        "need count >= 1 and end > start",
                    ));
                }
                linspace(*start_gamma0inv, *end_gamma0inv, *count)
            }
            SampleGrid::Log {
                start_gamma0inv,
                end_gamma0inv,
                count,
                include_zero,
            } => {
                if !(*start_gamma0inv > 0.0) || *count < 2 || !(end_gamma0inv > start_gamma0inv) {
                    return Err(Error::config(
                        "samples.log",
                        "need 0 < start < end and count >= 2",
                    ));
                }
                let mut t = Vec::with_capacity(count + 1);
                if *include_zero {
                    t.push(0.0);
                }
                t.extend(logspace(*start_gamma0inv, *end_gamma0inv, *count));
                t
            }
            SampleGrid::Explicit { times_gamma0inv } => times_gamma0inv.clone(),
        };
        if times.is_empty() {
            return Err(Error::config("samples", "no sample times"));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::config("samples", "sample times must be finite and >= 0"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("samples", "sample times must be strictly increasing"));
        }
        Ok(times)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Spectral on static pieces of the schedule, stepping elsewhere.
    Auto,
    /// Spectral only; the field must be static over the sampled span.
    Spectral,
    Stepped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub dt_max_gamma0inv: f64,
    pub local_tolerance: f64,
    pub min_step_gamma0inv: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        let d = StepOptions::default();
        IntegratorConfig {
            method: Method::Auto,
            dt_max_gamma0inv: d.dt_max,
            local_tolerance: d.local_tolerance,
            min_step_gamma0inv: d.min_step,
        }
    }
}

impl IntegratorConfig {
    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            dt_max: self.dt_max_gamma0inv,
            local_tolerance: self.local_tolerance,
            min_step: self.min_step_gamma0inv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    /// Band projection of the momentum spectrum, written to `spectrum.csv`.
    Spectrum,
    Amplitudes,
    Plateaus,
    Reversals,
    DecayFit,
}

fn default_analyses() -> Vec<Analysis> {
    vec![Analysis::Plateaus, Analysis::Reversals]
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: ModelParams,
    #[serde(default)]
    pub field: FieldConfig,
    pub initial: InitialConfig,
    pub samples: SampleGrid,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default = "default_analyses")]
    pub analyses: Vec<Analysis>,
    /// `[start, end]` windows for `decay_fit`.
    #[serde(default)]
    pub decay_fit_windows_gamma0inv: Vec<(f64, f64)>,
    /// Write every `spectrum_stride`-th sample to `spectrum.csv`.
    #[serde(default = "default_stride")]
    pub spectrum_stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ScenarioConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        ScenarioConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn schedule(&self) -> Result<FieldSchedule> {
        FieldSchedule::new(
            self.model.zeeman_slope,
            self.field
                .breakpoints
                .iter()
                .map(|b| (b.t_gamma0inv, b.zero_point_sites))
                .collect(),
        )
        .map_err(|e| Error::config("field.breakpoints", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        self.samples.times()?;
        self.integrator.step_options().validate()?;
        let init = &self.initial;
        if !init.center_site.is_finite() {
            return Err(Error::config("initial.center_site", "must be finite"));
        }
        if !(init.k_c_over_k0.is_finite() && init.k_c_over_k0.abs() <= self.model.zone_edge()) {
            return Err(Error::config(
                "initial.k_c_over_k0",
                format!("must lie in the first zone [-{0}, {0}]", self.model.zone_edge()),
            ));
        }
        if !(init.width_denominator.is_finite() && init.width_denominator > 0.0) {
            return Err(Error::config("initial.width_denominator", "must be positive"));
        }
        if !init.psi_phase.is_finite() {
            return Err(Error::config("initial.psi_phase", "must be finite"));
        }
        match &init.amplitudes {
            Amplitudes::Explicit { psi_plus, psi_minus } => {
                if *psi_plus == Complex64::new(0.0, 0.0) && *psi_minus == Complex64::new(0.0, 0.0) {
                    return Err(Error::config(
                        "initial.amplitudes.explicit",
                        "psi_plus and psi_minus are both zero",
                    ));
                }
                if !(psi_plus.is_finite() && psi_minus.is_finite()) {
                    return Err(Error::config("initial.amplitudes.explicit", "must be finite"));
                }
            }
            Amplitudes::Band {
                total_probability, ..
            } => {
                if !(total_probability.is_finite() && *total_probability > 0.0) {
                    return Err(Error::config(
                        "initial.amplitudes.band.total_probability",
                        "must be positive",
                    ));
                }
            }
        }
        for (i, &(a, b)) in self.decay_fit_windows_gamma0inv.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(Error::config(
                    format!("decay_fit_windows_gamma0inv[{i}]"),
                    "need finite start < end",
                ));
            }
        }
        if self.spectrum_stride == 0 {
            return Err(Error::config("spectrum_stride", "must be at least 1"));
        }
        Ok(())
    }

    /// The Gaussian described by `initial`, with band amplitudes resolved.
    pub fn gaussian(&self) -> Result<GaussianSpec> {
        let init = &self.initial;
        let mut spec = GaussianSpec {
            center_site: init.center_site,
            k_c: init.k_c_over_k0,
            psi_plus: Complex64::new(0.0, 0.0),
            psi_minus: Complex64::new(0.0, 0.0),
            width_denominator: init.width_denominator,
        };
        let (p, m) = match &init.amplitudes {
            Amplitudes::Explicit { psi_plus, psi_minus } => (*psi_plus, *psi_minus),
            Amplitudes::Band {
                band,
                total_probability,
            } => {
                let n0 = self.schedule()?.zero_point(0.0);
                let field = (init.center_site - n0) * self.model.zeeman_slope;
                band_amplitudes(&self.model, &spec, *band, field, *total_probability)?
            }
        };
        spec.psi_plus = p;
        spec.psi_minus = m * Complex64::from_polar(1.0, init.psi_phase);
        Ok(spec)
    }

    pub fn initial_state(&self) -> Result<WavepacketState> {
        gaussian_initial(&self.gaussian()?, &self.model)
    }

    fn wants(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }
}

/// Spectral diagnostics of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralSummary {
    pub t: f64,
    /// Momentum of the spectral maximum, in `k0`.
    pub peak_k: f64,
    /// Uniform field `(n_bar - n0(t)) b0` used for the projection.
    pub constant_field: f64,
    pub weight_band1: f64,
    pub weight_band2: f64,
    pub unresolved: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMethod {
    Fit,
    /// Rate of the dominant eigenmode, used once `P_t` has underflowed.
    Modal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayReport {
    pub window: (f64, f64),
    pub rate: f64,
    pub residual: f64,
    pub points: usize,
    pub at_floor: bool,
    pub method: RateMethod,
}

impl DecayReport {
    fn fitted(window: (f64, f64), fit: DecayFit) -> Self {
        DecayReport {
            window,
            rate: fit.rate,
            residual: fit.residual,
            points: fit.points,
            at_floor: fit.at_floor,
            method: RateMethod::Fit,
        }
    }

    fn modal(window: (f64, f64), rate: f64, points: usize) -> Self {
        DecayReport {
            window,
            rate,
            residual: f64::NAN,
            points,
            at_floor: rate < analysis::DECAY_RATE_FLOOR,
            method: RateMethod::Modal,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub name: String,
    pub states: Vec<WavepacketState>,
    pub trajectory: Trajectory,
    pub spectra: Vec<SpectralSummary>,
    pub reversal_times: Vec<f64>,
    pub plateaus: Vec<Plateau>,
    pub decay_fits: Vec<DecayReport>,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn propagator_for(config: &ScenarioConfig, last: f64) -> Result<Box<dyn Propagator>> {
    let schedule = config.schedule()?;
    let options = config.integrator.step_options();
    Ok(match config.integrator.method {
        Method::Auto => Box::new(AutoPropagator::new(&config.model, schedule, options)?),
        Method::Stepped => Box::new(SteppedPropagator::new(&config.model, schedule, options)?),
        Method::Spectral => {
            let segments = schedule.segments(0.0, last);
            let zero = match segments.as_slice() {
                [] => schedule.zero_point(0.0),
                [only] => only.constant_zero_point.ok_or_else(|| {
                    Error::config("integrator.method", "spectral needs a static field")
                })?,
                _ => {
                    return Err(Error::config(
                        "integrator.method",
                        "spectral needs a static field over the sampled span",
                    ))
                }
            };
            Box::new(SpectralPropagator::for_zero_point(
                &config.model,
                schedule.slope(),
                zero,
            )?)
        }
    })
}

/// Zero point if the field is static over `[0, end]`.
fn static_zero_point(schedule: &FieldSchedule, end: f64) -> Option<f64> {
    let segments = schedule.segments(0.0, end);
    match segments.as_slice() {
        [] => Some(schedule.zero_point(0.0)),
        [only] => only.constant_zero_point,
        _ => None,
    }
}

fn fit_window(
    trajectory: &Trajectory,
    window: (f64, f64),
    modal: &mut dyn FnMut(f64) -> Result<f64>,
) -> Result<DecayReport> {
    match trajectory.decay_fit(window) {
        Ok(fit) => Ok(DecayReport::fitted(window, fit)),
        Err(Error::Config { message, .. }) if message.contains("cannot be log-fitted") => {
            let points = trajectory
                .samples
                .iter()
                .filter(|s| s.t >= window.0 && s.t <= window.1)
                .count();
            Ok(DecayReport::modal(window, modal(window.1)?, points))
        }
        Err(e) => Err(e),
    }
}

/// Run a scenario; when `out` is given, write `manifest.json`,
/// `observables.csv` and any requested extra tables there.
pub fn run_scenario(config: &ScenarioConfig, out: Option<&Path>) -> Result<ScenarioOutcome> {
    config.validate()?;
    let params = &config.model;
    let schedule = config.schedule()?;
    let times = config.samples.times()?;
    let last = *times.last().expect("validated non-empty");
    let initial = config.initial_state()?;

    let mut propagator = propagator_for(config, last)?;
    let states = record_trajectory(propagator.as_mut(), &initial, &times)?;
    let mut warnings = propagator.warnings();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let trajectory = Trajectory::from_states(&states, params)?;

    let spectra = if config.wants(Analysis::Spectrum) {
        spectral_summaries(config, &schedule, &states, out)?
    } else {
        (Vec::new(), Vec::new())
    };

    let reversal_times = trajectory.reversal_times();
    let plateaus = trajectory.plateaus();
    let mut modal_cache: Option<SpectralPropagator> = None;
    let mut modal = |horizon: f64| -> Result<f64> {
        let zero = static_zero_point(&schedule, horizon).ok_or_else(|| {
            Error::UndefinedState("P_t underflowed under a time-dependent field".into())
        })?;
        if modal_cache.is_none() {
            modal_cache = Some(SpectralPropagator::for_zero_point(params, schedule.slope(), zero)?);
        }
        modal_cache
            .as_ref()
            .expect("just built")
            .dominant_rate(&initial, horizon - initial.t)
    };
    let mut decay_fits = Vec::new();
    if config.wants(Analysis::DecayFit) {
        for &w in &config.decay_fit_windows_gamma0inv {
            let report = fit_window(&trajectory, w, &mut modal)?;
            if report.method == RateMethod::Modal {
                warnings.push(format!(
                    "P_t underflowed in window [{}, {}]; reporting the dominant modal rate",
                    w.0, w.1
                ));
            }
            decay_fits.push(report);
        }
    }

    let mut outcome = ScenarioOutcome {
        name: config.name.clone(),
        trajectory,
        spectra: spectra.0,
        reversal_times,
        plateaus,
        decay_fits,
        warnings,
        files: spectra.1,
        states,
    };
    let out = out.map(Path::to_path_buf).or_else(|| config.output_dir.clone());
    if let Some(dir) = out {
        write_scenario_outputs(config, &mut outcome, &dir)?;
    }
    Ok(outcome)
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let file = File::create(&path)?;
    Ok((path, BufWriter::new(file)))
}

type SummaryResult = (Vec<SpectralSummary>, Vec<PathBuf>);

fn spectral_summaries(
    config: &ScenarioConfig,
    schedule: &FieldSchedule,
    states: &[WavepacketState],
    out: Option<&Path>,
) -> Result<SummaryResult> {
    let params = &config.model;
    let analyzer = SpectrumAnalyzer::new(params)?;
    let projector = BandProjector::new(params)?;
    let dir = out.map(Path::to_path_buf).or_else(|| config.output_dir.clone());
    let mut writer = match &dir {
        Some(d) => {
            let (path, mut w) = create(d, "spectrum.csv")?;
            writeln!(w, "{}", analysis::SPECTRUM_CSV_HEADER)?;
            Some((path, w))
        }
        None => None,
    };
    let mut summaries = Vec::with_capacity(states.len());
    for (i, state) in states.iter().enumerate() {
        if state.total_probability() <= analysis::UNDEFINED_NORM {
            continue;
        }
        let spectrum = analyzer.spectrum(state)?;
        let n_bar = analysis::mean_position(state)?;
        let field = (n_bar - schedule.zero_point(state.t)) * schedule.slope();
        let projection = projector.project(&spectrum, field)?;
        let (w1, w2) = projection.band_weights();
        summaries.push(SpectralSummary {
            t: state.t,
            peak_k: spectrum.peak_k(),
            constant_field: field,
            weight_band1: w1,
            weight_band2: w2,
            unresolved: projection.unresolved.iter().filter(|&&u| u).count(),
        });
        if let Some((_, w)) = writer.as_mut() {
            if i % config.spectrum_stride == 0 {
                analysis::write_projection_rows(&projection, &mut *w)?;
            }
        }
    }
    let mut files = Vec::new();
    if let Some((path, mut w)) = writer {
        w.flush()?;
        files.push(path);
    }
    Ok((summaries, files))
}

/// Every tolerance and cutoff that affects the numbers.
pub fn tolerances(integrator: &IntegratorConfig) -> Value {
    json!({
        "hamiltonian_symmetry": SYMMETRY_TOLERANCE,
        "band_degeneracy_threshold": bands::DEGENERACY_THRESHOLD,
        "spectral_max_condition": MAX_CONDITION,
        "spectral_exponent_floor": EXPONENT_FLOOR,
        "norm_growth_per_step": NORM_GROWTH_TOLERANCE,
        "step_dt_max_gamma0inv": integrator.dt_max_gamma0inv,
        "step_local_tolerance": integrator.local_tolerance,
        "step_min_gamma0inv": integrator.min_step_gamma0inv,
        "undefined_norm": analysis::UNDEFINED_NORM,
        "plateau_epsilon_relative": analysis::DEFAULT_PLATEAU_EPSILON,
        "plateau_min_duration_gamma0inv": analysis::DEFAULT_PLATEAU_MIN_DURATION,
        "decay_rate_floor_gamma0": analysis::DECAY_RATE_FLOOR,
        "projection_det_guard": analysis::PROJECTION_DET_GUARD,
    })
}

fn model_summary(params: &ModelParams) -> Value {
    json!({
        "k0a": params.k0a(),
        "zone_edge_over_k0": params.zone_edge(),
        "first_site": params.first_site(),
        "bloch_period_gamma0inv": params.bloch_period(),
        "sum_cutoff": params.sum_cutoff,
    })
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<PathBuf> {
    let (path, mut w) = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(path)
}

fn write_scenario_outputs(config: &ScenarioConfig, outcome: &mut ScenarioOutcome, dir: &Path) -> Result<()> {
    let (path, mut w) = create(dir, "observables.csv")?;
    outcome.trajectory.write_csv(&mut w)?;
    w.flush()?;
    outcome.files.push(path);
    if config.wants(Analysis::Amplitudes) {
        let (path, mut w) = create(dir, "amplitudes.csv")?;
        analysis::write_amplitudes_csv(&outcome.states, &mut w)?;
        w.flush()?;
        outcome.files.push(path);
    }
    let mut results = serde_json::Map::new();
    if config.wants(Analysis::Reversals) {
        results.insert("reversal_times_gamma0inv".into(), json!(outcome.reversal_times));
    }
    if config.wants(Analysis::Plateaus) {
        let p: Vec<Value> = outcome
            .plateaus
            .iter()
            .map(|p| json!({"start_gamma0inv": p.start, "end_gamma0inv": p.end, "level": p.level}))
            .collect();
        results.insert("plateaus".into(), Value::Array(p));
    }
    if config.wants(Analysis::DecayFit) {
        let f: Vec<Value> = outcome
            .decay_fits
            .iter()
            .map(|f| {
                json!({
                    "window_gamma0inv": [f.window.0, f.window.1],
                    "rate_gamma0": f.rate,
                    "residual": finite_or_null(f.residual),
                    "points": f.points,
                    "at_floor": f.at_floor,
                    "method": f.method,
                })
            })
            .collect();
        results.insert("decay_fits".into(), Value::Array(f));
    }
    let mut files: Vec<String> = outcome
        .files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    files.sort();
    let mut echoed = config.clone();
    echoed.output_dir = None;
    let manifest = json!({
        "kind": "scenario",
        "version": VERSION,
        "config": echoed,
        "model": model_summary(&config.model),
        "tolerances": tolerances(&config.integrator),
        "results": results,
        "warnings": outcome.warnings,
        "files": files,
    });
    outcome.files.push(write_json(dir, "manifest.json", &manifest)?);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisParameter {
    KCOverK0,
    CenterSite,
    PsiPhase,
    ZeemanSlopeGamma0,
}

impl AxisParameter {
    pub const ALL: [AxisParameter; 4] = [
        AxisParameter::KCOverK0,
        AxisParameter::CenterSite,
        AxisParameter::PsiPhase,
        AxisParameter::ZeemanSlopeGamma0,
    ];

    pub fn column(self) -> &'static str {
        match self {
            AxisParameter::KCOverK0 => "k_c_over_k0",
            AxisParameter::CenterSite => "center_site",
            AxisParameter::PsiPhase => "psi_phase",
            AxisParameter::ZeemanSlopeGamma0 => "zeeman_slope_gamma0",
        }
    }

    fn get(self, c: &ScenarioConfig) -> f64 {
        match self {
            AxisParameter::KCOverK0 => c.initial.k_c_over_k0,
            AxisParameter::CenterSite => c.initial.center_site,
            AxisParameter::PsiPhase => c.initial.psi_phase,
            AxisParameter::ZeemanSlopeGamma0 => c.model.zeeman_slope,
        }
    }

    fn set(self, c: &mut ScenarioConfig, v: f64) {
        match self {
            AxisParameter::KCOverK0 => c.initial.k_c_over_k0 = v,
            AxisParameter::CenterSite => c.initial.center_site = v,
            AxisParameter::PsiPhase => c.initial.psi_phase = v,
            AxisParameter::ZeemanSlopeGamma0 => c.model.zeeman_slope = v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

/// One sweep axis, given either as a `range` (inclusive of `stop`) or as
/// explicit `values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub parameter: AxisParameter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<AxisRange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
}

impl SweepAxis {
    pub fn points(&self) -> Result<Vec<f64>> {
        let field = format!("axes.{}", self.parameter.column());
        match (&self.range, self.values.is_empty()) {
            (Some(r), true) => {
                if !(r.step > 0.0 && r.stop >= r.start && r.start.is_finite() && r.stop.is_finite()) {
                    return Err(Error::config(field, "range needs start <= stop and step > 0"));
                }
                let count = ((r.stop - r.start) / r.step + 1e-9).floor() as usize + 1;
                // Rounded to 12 decimals so that e.g. 1.5 + 30 * 0.05 is exactly 3.
                Ok((0..count)
                    .map(|i| ((r.start + i as f64 * r.step) * 1e12).round() / 1e12)
                    .collect())
            }
            (None, false) => {
                if self.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config(field, "values must be finite"));
                }
                Ok(self.values.clone())
            }
            _ => Err(Error::config(field, "give exactly one of `range` or `values`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FigureOfMerit {
    /// Least-squares rate of `ln P_t` over log-spaced samples in the window.
    DecayRate {
        window_gamma0inv: (f64, f64),
        #[serde(default = "default_fit_samples")]
        samples: usize,
    },
    PTotalAt { horizon_gamma0inv: f64 },
}

fn default_fit_samples() -> usize {
    101
}

impl FigureOfMerit {
    pub fn label(&self) -> &'static str {
        match self {
            FigureOfMerit::DecayRate { .. } => "decay_rate",
            FigureOfMerit::PTotalAt { .. } => "p_total_at",
        }
    }

    fn sample_grid(&self) -> Result<SampleGrid> {
        let grid = match *self {
            FigureOfMerit::DecayRate {
                window_gamma0inv: (a, b),
                samples,
            } => SampleGrid::Log {
                start_gamma0inv: a,
                end_gamma0inv: b,
                count: samples,
                include_zero: false,
            },
            FigureOfMerit::PTotalAt { horizon_gamma0inv } => SampleGrid::Explicit {
                times_gamma0inv: vec![horizon_gamma0inv],
            },
        };
        grid.times()
            .map_err(|e| Error::config("figure_of_merit", e.to_string()))?;
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub base: ScenarioConfig,
    pub axes: Vec<SweepAxis>,
    pub figure_of_merit: FigureOfMerit,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        SweepSpec::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.figure_of_merit.sample_grid()?;
        if self.axes.is_empty() {
            return Err(Error::config("axes", "at least one axis is required"));
        }
        let mut seen = Vec::new();
        for a in &self.axes {
            if seen.contains(&a.parameter) {
                return Err(Error::config(
                    format!("axes.{}", a.parameter.column()),
                    "axis given twice",
                ));
            }
            seen.push(a.parameter);
            if a.points()?.is_empty() {
                return Err(Error::config(format!("axes.{}", a.parameter.column()), "empty axis"));
            }
        }
        Ok(())
    }

    /// Cartesian product of the axes, first axis varying slowest.
    pub fn grid(&self) -> Result<Vec<BTreeMap<AxisParameter, f64>>> {
        let mut grid = vec![BTreeMap::new()];
        for axis in &self.axes {
            let values = axis.points()?;
            grid = grid
                .into_iter()
                .flat_map(|point| {
                    values.iter().map(move |&v| {
                        let mut p = point.clone();
                        p.insert(axis.parameter, v);
                        p
                    })
                })
                .collect();
        }
        Ok(grid)
    }

    /// Scenario evaluated at one grid point.
    pub fn point_config(&self, point: &BTreeMap<AxisParameter, f64>) -> Result<ScenarioConfig> {
        let mut c = self.base.clone();
        for (&p, &v) in point {
            p.set(&mut c, v);
        }
        c.samples = self.figure_of_merit.sample_grid()?;
        c.analyses = vec![Analysis::DecayFit];
        c.decay_fit_windows_gamma0inv = match self.figure_of_merit {
            FigureOfMerit::DecayRate {
                window_gamma0inv, ..
            } => vec![window_gamma0inv],
            FigureOfMerit::PTotalAt { .. } => Vec::new(),
        };
        c.output_dir = None;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    /// Value of every axis parameter at this point, swept or not.
    pub parameters: BTreeMap<AxisParameter, f64>,
    pub value: f64,
    pub p_total_end: f64,
    pub modal_rate: f64,
    pub at_floor: bool,
    pub method: Option<RateMethod>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub figure_of_merit: String,
    pub points: Vec<SweepPoint>,
    /// Index of the minimal decay rate, or of the maximal `P_t`.
    pub best: Option<usize>,
    pub files: Vec<PathBuf>,
}

/// Worker pool of `workers` threads (at least one).
pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))
}

type CacheKey = String;

fn cache_key(config: &ScenarioConfig, zero: f64) -> CacheKey {
    format!(
        "{}|{:e}",
        serde_json::to_string(&config.model).unwrap_or_default(),
        zero
    )
}

struct PointPlan {
    config: ScenarioConfig,
    static_key: Option<(CacheKey, f64)>,
}

fn evaluate_point(
    plan: &PointPlan,
    fom: &FigureOfMerit,
    cache: &HashMap<CacheKey, std::result::Result<Arc<SpectralPropagator>, String>>,
) -> Result<(f64, f64, f64, bool, RateMethod)> {
    let config = &plan.config;
    let times = config.samples.times()?;
    let initial = config.initial_state()?;
    let cached = match &plan.static_key {
        Some((key, _)) => match cache.get(key) {
            Some(Ok(p)) => Some(p.clone()),
            Some(Err(e)) => return Err(Error::Numerical(e.clone())),
            None => None,
        },
        None => None,
    };
    let states = match &cached {
        Some(p) => p.states_at(&initial, &times)?,
        None => {
            let last = *times.last().expect("validated");
            record_trajectory(propagator_for(config, last)?.as_mut(), &initial, &times)?
        }
    };
    let horizon = *times.last().expect("validated");
    let p_end = states.last().map_or(f64::NAN, |s| s.total_probability());
    let modal_rate = match &cached {
        Some(p) => p.dominant_rate(&initial, horizon - initial.t)?,
        None => f64::NAN,
    };
    match *fom {
        FigureOfMerit::DecayRate {
            window_gamma0inv, ..
        } => {
            let trajectory = Trajectory {
                samples: states
                    .iter()
                    .map(|s| {
                        let (p, m, t) = analysis::populations(s);
                        analysis::Sample {
                            t: s.t,
                            p_plus: p,
                            p_minus: m,
                            p_total: t,
                            n_bar: None,
                            force: None,
                            lc_fraction: None,
                        }
                    })
                    .collect(),
            };
            let mut modal = |_h: f64| -> Result<f64> {
                if modal_rate.is_finite() {
                    Ok(modal_rate)
                } else {
                    Err(Error::UndefinedState(
                        "P_t underflowed under a time-dependent field".into(),
                    ))
                }
            };
            let report = fit_window(&trajectory, window_gamma0inv, &mut modal)?;
            Ok((report.rate, p_end, modal_rate, report.at_floor, report.method))
        }
        FigureOfMerit::PTotalAt { .. } => {
            let method = if p_end > 0.0 { RateMethod::Fit } else { RateMethod::Modal };
            Ok((p_end, p_end, modal_rate, false, method))
        }
    }
}

/// Evaluate every grid point on a pool of `workers` threads. Static-field
/// propagators are built once per distinct model and shared. A failing point
/// is recorded with its error and does not stop the sweep.
pub fn run_sweep(spec: &SweepSpec, workers: usize, out: Option<&Path>) -> Result<SweepOutcome> {
    spec.validate()?;
    let pool = thread_pool(workers)?;
    let grid = spec.grid()?;
    let horizon = *spec
        .figure_of_merit
        .sample_grid()?
        .times()?
        .last()
        .expect("validated");

    let plans: Vec<std::result::Result<PointPlan, String>> = grid
        .iter()
        .map(|point| {
            let config = spec.point_config(point).map_err(|e| e.to_string())?;
            let schedule = config.schedule().map_err(|e| e.to_string())?;
            let static_key = match config.integrator.method {
                Method::Stepped => None,
                _ => static_zero_point(&schedule, horizon).map(|z| (cache_key(&config, z), z)),
            };
            Ok(PointPlan { config, static_key })
        })
        .collect();

    let mut to_build: Vec<(CacheKey, ModelParams, f64)> = Vec::new();
    for plan in plans.iter().flatten() {
        if let Some((key, zero)) = &plan.static_key {
            if !to_build.iter().any(|(k, _, _)| k == key) {
                to_build.push((key.clone(), plan.config.model.clone(), *zero));
            }
        }
    }
    let (points, cache) = pool.install(|| {
        let cache: HashMap<_, _> = to_build
            .par_iter()
            .map(|(key, model, zero)| {
                let built = SpectralPropagator::for_zero_point(model, model.zeeman_slope, *zero)
                    .map(Arc::new)
                    .map_err(|e| e.to_string());
                (key.clone(), built)
            })
            .collect();
        let points: Vec<SweepPoint> = plans
            .par_iter()
            .enumerate()
            .map(|(index, plan)| {
                let mut parameters = BTreeMap::new();
                let base = match plan {
                    Ok(p) => &p.config,
                    Err(_) => &spec.base,
                };
                for p in AxisParameter::ALL {
                    parameters.insert(p, p.get(base));
                }
                for (&p, &v) in &grid[index] {
                    parameters.insert(p, v);
                }
                let result = plan
                    .as_ref()
                    .map_err(|e| e.clone())
                    .and_then(|p| evaluate_point(p, &spec.figure_of_merit, &cache).map_err(|e| e.to_string()));
                match result {
                    Ok((value, p_end, modal_rate, at_floor, method)) => SweepPoint {
                        index,
                        parameters,
                        value,
                        p_total_end: p_end,
                        modal_rate,
                        at_floor,
                        method: Some(method),
                        error: None,
                    },
                    Err(e) => SweepPoint {
                        index,
                        parameters,
                        value: f64::NAN,
                        p_total_end: f64::NAN,
                        modal_rate: f64::NAN,
                        at_floor: false,
                        method: None,
                        error: Some(e),
                    },
                }
            })
            .collect();
        (points, cache)
    });
    drop(cache);

    let ok = points.iter().filter(|p| p.error.is_none() && p.value.is_finite());
    let best = match spec.figure_of_merit {
        FigureOfMerit::DecayRate { .. } => ok.min_by(|a, b| a.value.total_cmp(&b.value)),
        FigureOfMerit::PTotalAt { .. } => ok.max_by(|a, b| a.value.total_cmp(&b.value).then(b.index.cmp(&a.index))),
    }
    .map(|p| p.index);

    let mut outcome = SweepOutcome {
        figure_of_merit: spec.figure_of_merit.label().to_string(),
        points,
        best,
        files: Vec::new(),
    };
    if let Some(dir) = out.map(Path::to_path_buf).or_else(|| spec.base.output_dir.clone()) {
        write_sweep_outputs(spec, &mut outcome, &dir, workers)?;
    }
    Ok(outcome)
}

pub const LIFETIME_CSV_HEADER: &str = "index,k_c_over_k0,center_site,psi_phase,zeeman_slope_gamma0,figure_of_merit,value,p_total_end,modal_rate,at_floor,method,error";

pub fn write_lifetime_csv<W: Write>(outcome: &SweepOutcome, mut out: W) -> Result<()> {
    writeln!(out, "{LIFETIME_CSV_HEADER}")?;
    let mut rows: Vec<&SweepPoint> = outcome.points.iter().collect();
    rows.sort_by_key(|p| p.index);
    for p in rows {
        write!(out, "{}", p.index)?;
        for a in AxisParameter::ALL {
            write!(out, ",{:e}", p.parameters[&a])?;
        }
        let method = match p.method {
            Some(RateMethod::Fit) => "fit",
            Some(RateMethod::Modal) => "modal",
            None => "",
        };
        // Errors are free text; keep them inside one quoted field.
        let error = p.error.as_deref().unwrap_or("").replace('"', "'");
        writeln!(
            out,
            ",{},{:e},{:e},{:e},{},{},\"{}\"",
            outcome.figure_of_merit, p.value, p.p_total_end, p.modal_rate, p.at_floor, method, error
        )?;
    }
    Ok(())
}

fn write_sweep_outputs(spec: &SweepSpec, outcome: &mut SweepOutcome, dir: &Path, workers: usize) -> Result<()> {
    let (path, mut w) = create(dir, "lifetime.csv")?;
    write_lifetime_csv(outcome, &mut w)?;
    w.flush()?;
    outcome.files.push(path);
    let best = outcome.best.map(|i| {
        let p = &outcome.points[i];
        let params: BTreeMap<&str, f64> = p.parameters.iter().map(|(k, v)| (k.column(), *v)).collect();
        json!({"index": i, "value": p.value, "at_floor": p.at_floor, "parameters": params})
    });
    let failures = outcome.points.iter().filter(|p| p.error.is_some()).count();
    let mut base = spec.base.clone();
    base.output_dir = None;
    let mut echoed = spec.clone();
    echoed.base = base;
    let manifest = json!({
        "kind": "sweep",
        "version": VERSION,
        "config": echoed,
        "model": model_summary(&spec.base.model),
        "tolerances": tolerances(&spec.base.integrator),
        // Results do not depend on the worker count; recorded for reference only.
        "workers": workers,
        "points": outcome.points.len(),
        "failures": failures,
        "best": best,
        "files": ["lifetime.csv"],
    });
    outcome.files.push(write_json(dir, "manifest.json", &manifest)?);
    Ok(())
}

fn default_k_points() -> usize {
    bands::DEFAULT_GRID_POINTS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandsConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: ModelParams,
    pub constant_fields_gamma0: Vec<f64>,
    #[serde(default = "default_k_points")]
    pub k_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl BandsConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: BandsConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        BandsConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.constant_fields_gamma0.is_empty() {
            return Err(Error::config("constant_fields_gamma0", "at least one field is required"));
        }
        if self.constant_fields_gamma0.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("constant_fields_gamma0", "fields must be finite"));
        }
        if self.k_points == 0 {
            return Err(Error::config("k_points", "must be at least 1"));
        }
        Ok(())
    }
}

/// File name for the band table at field `b`.
pub fn bands_file_name(b: f64) -> String {
    format!("bands_bc{b}.csv")
}

/// Band structures at each constant field over a symmetric grid spanning the
/// first zone; writes one CSV per field plus a manifest when `out` is given.
pub fn run_bands(config: &BandsConfig, out: Option<&Path>) -> Result<Vec<BandTable>> {
    config.validate()?;
    let grid = bands::symmetric_grid(config.model.zone_edge(), config.k_points);
    let tables = bands::band_scans(&config.model, &config.constant_fields_gamma0, &grid)?;
    if let Some(dir) = out.map(Path::to_path_buf).or_else(|| config.output_dir.clone()) {
        let mut summaries = Vec::new();
        let mut files = Vec::new();
        for table in &tables {
            let name = bands_file_name(table.constant_field);
            let (_, mut w) = create(&dir, &name)?;
            table.write_csv(&mut w)?;
            w.flush()?;
            let gaps = table.gaps();
            let minima: Vec<Value> = table
                .gap_minima(2)
                .into_iter()
                .map(|i| json!({"k_over_k0": table.points[i].0.k, "gap_gamma0": gaps[i]}))
                .collect();
            summaries.push(json!({
                "constant_field_gamma0": table.constant_field,
                "file": name,
                "min_gap_gamma0": gaps.iter().copied().fold(f64::INFINITY, f64::min),
                "gap_minima": minima,
                "degenerate_points": table.points.iter().filter(|p| p.0.degenerate).count(),
            }));
            files.push(name);
        }
        let mut echoed = config.clone();
        echoed.output_dir = None;
        let manifest = json!({
            "kind": "bands",
            "version": VERSION,
            "config": echoed,
            "model": model_summary(&config.model),
            "tolerances": tolerances(&IntegratorConfig::default()),
            "results": summaries,
            "files": files,
        });
        write_json(&dir, "manifest.json", &manifest)?;
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            name: "small".into(),
            description: String::new(),
            model: ModelParams {
                atom_count: 21,
                sum_cutoff: 200,
                ..Default::default()
            },
            field: FieldConfig::default(),
            initial: InitialConfig {
                center_site: 0.0,
                k_c_over_k0: 2.0,
                width_denominator: 200.0,
                amplitudes: Amplitudes::Explicit {
                    psi_plus: Complex64::new(0.3, 0.0),
                    psi_minus: Complex64::new(0.3, 0.0),
                },
                psi_phase: 0.0,
            },
            samples: SampleGrid::Linear {
                start_gamma0inv: 0.0,
                end_gamma0inv: 2.0,
                count: 21,
            },
            integrator: IntegratorConfig::default(),
            analyses: vec![Analysis::Spectrum, Analysis::Reversals, Analysis::DecayFit],
            decay_fit_windows_gamma0inv: vec![(0.0, 2.0)],
            spectrum_stride: 1,
            output_dir: None,
        }
    }

    #[test]
    fn config_round_trip() {
        let c = small_config();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let mut v = serde_json::to_value(small_config()).unwrap();
        v["model"]["spacing"] = json!(0.1);
        let err = ScenarioConfig::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("spacing"));
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut c = small_config();
        c.initial.k_c_over_k0 = 7.0;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "initial.k_c_over_k0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sample_grids() {
        let g = SampleGrid::Log {
            start_gamma0inv: 1.0,
            end_gamma0inv: 1e4,
            count: 5,
            include_zero: true,
        };
        let t = g.times().unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 1.0);
        assert_eq!(*t.last().unwrap(), 1e4);
        assert!((t[2] - 10.0).abs() < 1e-12);
        let bad = SampleGrid::Explicit {
            times_gamma0inv: vec![0.0, 1.0, 1.0],
        };
        assert!(bad.times().is_err());
    }

    #[test]
    fn axis_range_is_inclusive() {
        let axis = SweepAxis {
            parameter: AxisParameter::KCOverK0,
            range: Some(AxisRange {
                start: 1.5,
                stop: 4.5,
                step: 0.05,
            }),
            values: Vec::new(),
        };
        let v = axis.points().unwrap();
        assert_eq!(v.len(), 61);
        assert_eq!(v[30], 3.0);
        assert_eq!(*v.last().unwrap(), 4.5);
    }

    #[test]
    fn small_scenario_runs() {
        let outcome = run_scenario(&small_config(), None).unwrap();
        assert_eq!(outcome.trajectory.samples.len(), 21);
        assert_eq!(outcome.spectra.len(), 21);
        assert_eq!(outcome.decay_fits.len(), 1);
        assert!(outcome.decay_fits[0].rate > 0.0);
    }

    #[test]
    fn band_amplitudes_from_config() {
        let mut c = small_config();
        c.initial.amplitudes = Amplitudes::Band {
            band: Band::II,
            total_probability: 0.5,
        };
        let s = c.initial_state().unwrap();
        assert!((s.total_probability() - 0.5).abs() < 1e-12);
    }
}
