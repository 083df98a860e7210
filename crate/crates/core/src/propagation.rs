//! Wavepacket preparation and time evolution under `dC/dt = -i H C`.
//!
//! Two independent integrators are provided. [`SpectralPropagator`] uses the
//! eigendecomposition of a static Hamiltonian and reaches arbitrarily long
//! times in one step. [`SteppedPropagator`] is an adaptive fourth-order
//! Runge-Kutta scheme that follows a time-dependent field schedule.
//! [`AutoPropagator`] combines them segment by segment.

use std::collections::HashMap;
use std::sync::Arc;

use faer::linalg::solvers::DenseSolveCore;
use num_complex::Complex64;

use crate::bands::{band_eigs, Band, BlochSums};
use crate::error::{Error, Result};
use crate::lattice::{
    CouplingOperator, CouplingWork, EffectiveHamiltonian, FieldSchedule, ModelParams,
};

/// Denominator of the Gaussian exponent `(n - n_c)^2 / w`.
pub const DEFAULT_WIDTH_DENOMINATOR: f64 = 200.0;
/// Upper bound on the eigenvector condition number accepted by the spectral route.
pub const MAX_CONDITION: f64 = 1e12;
/// Modal exponents below this are flushed to zero.
pub const EXPONENT_FLOOR: f64 = -700.0;
/// Slack allowed when checking that the norm never grows.
pub const NORM_GROWTH_TOLERANCE: f64 = 1e-9;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Amplitudes `C_{+,n}`, `C_{-,n}` at time `t`, stored interleaved site by site.
#[derive(Clone, Debug, PartialEq)]
pub struct WavepacketState {
    pub t: f64,
    amplitudes: Vec<Complex64>,
    first_site: i64,
}

impl WavepacketState {
    pub fn new(t: f64, amplitudes: Vec<Complex64>, first_site: i64) -> Result<Self> {
        if amplitudes.is_empty() || amplitudes.len() % 2 != 0 {
            return Err(Error::config(
                "amplitudes",
                format!("expected 2N interleaved amplitudes, got {}", amplitudes.len()),
            ));
        }
        Ok(WavepacketState {
            t,
            amplitudes,
            first_site,
        })
    }

    /// A single excitation of arm `+` (`plus = true`) or `-` on one atom.
    pub fn localized(params: &ModelParams, site: i64, plus: bool) -> Result<Self> {
        let index = site - params.first_site();
        if index < 0 || index as usize >= params.atom_count {
            return Err(Error::config("site", format!("site {site} is not in the array")));
        }
        let mut amplitudes = vec![ZERO; 2 * params.atom_count];
        amplitudes[2 * index as usize + usize::from(!plus)] = Complex64::new(1.0, 0.0);
        WavepacketState::new(0.0, amplitudes, params.first_site())
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn atom_count(&self) -> usize {
        self.amplitudes.len() / 2
    }

    pub fn first_site(&self) -> i64 {
        self.first_site
    }

    pub fn site(&self, index: usize) -> i64 {
        self.first_site + index as i64
    }

    pub fn plus(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.amplitudes.iter().step_by(2).copied()
    }

    pub fn minus(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.amplitudes.iter().skip(1).step_by(2).copied()
    }

    pub fn total_probability(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum()
    }

    fn with(&self, t: f64, amplitudes: Vec<Complex64>) -> Self {
        WavepacketState {
            t,
            amplitudes,
            first_site: self.first_site,
        }
    }
}

/// Gaussian wavepacket `C_{+-,n}(0) = psi_{+-} exp[i k_c k0 a n - (n - n_c)^2 / w]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub center_site: f64,
    /// Central momentum in units of `k0`.
    pub k_c: f64,
    pub psi_plus: Complex64,
    pub psi_minus: Complex64,
    pub width_denominator: f64,
}

impl GaussianSpec {
    pub fn new(center_site: f64, k_c: f64, psi_plus: Complex64, psi_minus: Complex64) -> Self {
        GaussianSpec {
            center_site,
            k_c,
            psi_plus,
            psi_minus,
            width_denominator: DEFAULT_WIDTH_DENOMINATOR,
        }
    }

    /// `sum_n |exp(-(n - n_c)^2 / w)|^2` over the array.
    pub fn envelope_weight(&self, params: &ModelParams) -> f64 {
        params
            .site_indices()
            .into_iter()
            .map(|n| {
                let x = n as f64 - self.center_site;
                (-2.0 * x * x / self.width_denominator).exp()
            })
            .sum()
    }
}

pub fn gaussian_initial(spec: &GaussianSpec, params: &ModelParams) -> Result<WavepacketState> {
    params.validate()?;
    if !(spec.width_denominator.is_finite() && spec.width_denominator > 0.0) {
        return Err(Error::config("initial.width_denominator", "must be positive"));
    }
    if spec.psi_plus == ZERO && spec.psi_minus == ZERO {
        return Err(Error::config(
            "initial.amplitudes",
            "psi_plus and psi_minus are both zero",
        ));
    }
    let k0a = params.k0a();
    let mut amplitudes = Vec::with_capacity(2 * params.atom_count);
    for n in params.site_indices() {
        let x = n as f64 - spec.center_site;
        let envelope = Complex64::from_polar(
            (-x * x / spec.width_denominator).exp(),
            spec.k_c * k0a * n as f64,
        );
        amplitudes.push(spec.psi_plus * envelope);
        amplitudes.push(spec.psi_minus * envelope);
    }
    let state = WavepacketState::new(0.0, amplitudes, params.first_site())?;
    if state.total_probability() == 0.0 {
        return Err(Error::config(
            "initial",
            "the Gaussian envelope vanishes on every site of the array",
        ));
    }
    Ok(state)
}

/// Arm amplitudes `(psi_+, psi_-)` that place a Gaussian at momentum `k_c` on
/// `band` of the Bloch matrix with uniform field `constant_field`, scaled so the
/// prepared state carries `total_probability`.
pub fn band_amplitudes(
    params: &ModelParams,
    spec: &GaussianSpec,
    band: Band,
    constant_field: f64,
    total_probability: f64,
) -> Result<(Complex64, Complex64)> {
    if !(total_probability.is_finite() && total_probability > 0.0) {
        return Err(Error::config(
            "initial.amplitudes.total_probability",
            "must be positive",
        ));
    }
    let sums = BlochSums::new(params)?;
    let (lo, hi) = band_eigs(&sums.matrix(spec.k_c, constant_field)?);
    let v = match band {
        Band::I => lo.eigenvector,
        Band::II => hi.eigenvector,
    };
    let weight = spec.envelope_weight(params);
    if weight == 0.0 {
        return Err(Error::config(
            "initial",
            "the Gaussian envelope vanishes on every site of the array",
        ));
    }
    let scale = (total_probability / weight).sqrt();
    Ok((v[0] * scale, v[1] * scale))
}

fn check_times(from: f64, to: f64) -> Result<()> {
    if !to.is_finite() || to < from {
        return Err(Error::config(
            "t_target",
            format!("cannot propagate backwards or to a non-finite time ({from} -> {to})"),
        ));
    }
    Ok(())
}

/// Anything that can carry a state forward in time.
pub trait Propagator {
    fn advance(&mut self, state: &WavepacketState, t_target: f64) -> Result<WavepacketState>;

    /// States at each of `sample_times`, chaining from `initial`.
    fn trajectory(
        &mut self,
        initial: &WavepacketState,
        sample_times: &[f64],
    ) -> Result<Vec<WavepacketState>> {
        let mut out = Vec::with_capacity(sample_times.len());
        let mut current = initial.clone();
        for &t in sample_times {
            if t != current.t {
                current = self.advance(&current, t)?;
            }
            out.push(current.clone());
        }
        Ok(out)
    }

    /// Non-fatal diagnostics collected so far, such as integrator fallbacks.
    fn warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Record the states at `sample_times`, which must be strictly increasing and
/// not earlier than the initial state.
pub fn record_trajectory(
    propagator: &mut dyn Propagator,
    initial: &WavepacketState,
    sample_times: &[f64],
) -> Result<Vec<WavepacketState>> {
    if sample_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("samples", "sample times must be strictly increasing"));
    }
    if let Some(&first) = sample_times.first() {
        if !(first >= initial.t) {
            return Err(Error::config(
                "samples",
                format!("first sample {first} precedes the initial state at {}", initial.t),
            ));
        }
    }
    propagator.trajectory(initial, sample_times)
}

/// Exact propagator `C(t) = V exp(-i Lambda (t - t0)) V^{-1} C(t0)` for a
/// static Hamiltonian.
#[derive(Clone, Debug)]
pub struct SpectralPropagator {
    dim: usize,
    eigenvalues: Vec<Complex64>,
    /// Right eigenvectors, column-major.
    vectors: Vec<Complex64>,
    /// `V^{-1}`, row-major.
    inverse: Vec<Complex64>,
    condition: f64,
}

impl SpectralPropagator {
    pub fn new(h: &EffectiveHamiltonian) -> Result<Self> {
        let dim = h.dimension();
        let eig = h
            .matrix()
            .eigen()
            .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
        let eigenvalues: Vec<Complex64> = eig.S().column_vector().iter().copied().collect();
        if eigenvalues.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numerical("non-finite eigenvalue".into()));
        }
        let u = eig.U().to_owned();
        let inv = u.partial_piv_lu().inverse();
        let mut vectors = Vec::with_capacity(dim * dim);
        for c in 0..dim {
            for r in 0..dim {
                vectors.push(u[(r, c)]);
            }
        }
        let mut inverse = Vec::with_capacity(dim * dim);
        for r in 0..dim {
            for c in 0..dim {
                inverse.push(inv[(r, c)]);
            }
        }
        let norm1 = |get: &dyn Fn(usize, usize) -> Complex64| {
            (0..dim)
                .map(|c| (0..dim).map(|r| get(r, c).norm()).sum::<f64>())
                .fold(0.0, f64::max)
        };
        let condition = norm1(&|r, c| u[(r, c)]) * norm1(&|r, c| inv[(r, c)]);
        if !condition.is_finite() || condition > MAX_CONDITION {
            return Err(Error::Numerical(format!(
                "eigenvector matrix is ill-conditioned (cond_1 = {condition:e})"
            )));
        }
        Ok(SpectralPropagator {
            dim,
            eigenvalues,
            vectors,
            inverse,
            condition,
        })
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    /// Coefficients `V^{-1} C` of a state in the eigenbasis.
    pub fn modal_coefficients(&self, state: &WavepacketState) -> Result<Vec<Complex64>> {
        let c = state.amplitudes();
        if c.len() != self.dim {
            return Err(Error::config(
                "state",
                format!("dimension {} does not match Hamiltonian {}", c.len(), self.dim),
            ));
        }
        Ok(self
            .inverse
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `|a_j|^2 |v_j|^2` for each mode.
    pub fn modal_weights(&self, state: &WavepacketState) -> Result<Vec<f64>> {
        let coeffs = self.modal_coefficients(state)?;
        Ok(coeffs
            .iter()
            .zip(self.vectors.chunks_exact(self.dim))
            .map(|(a, v)| a.norm_sqr() * v.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .collect())
    }

    /// Decay rate `-2 Im lambda_j` of the mode carrying the most weight at
    /// `elapsed`, judged by `ln w_j - 2 |Im lambda_j| elapsed`. This stays
    /// defined after `P_t` itself has underflowed.
    pub fn dominant_rate(&self, state: &WavepacketState, elapsed: f64) -> Result<f64> {
        let weights = self.modal_weights(state)?;
        self.eigenvalues
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(l, &w)| (w.ln() + 2.0 * l.im * elapsed, -2.0 * l.im))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, rate)| rate)
            .ok_or_else(|| Error::UndefinedState("state has no modal weight".into()))
    }

    /// Amplitudes after `elapsed` time from modal coefficients `coeffs`.
    pub fn amplitudes_after(&self, coeffs: &[Complex64], elapsed: f64) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.dim];
        for ((lambda, a), col) in self
            .eigenvalues
            .iter()
            .zip(coeffs)
            .zip(self.vectors.chunks_exact(self.dim))
        {
            let decay = lambda.im * elapsed;
            if decay < EXPONENT_FLOOR {
                continue;
            }
            let f = Complex64::from_polar(decay.exp(), -lambda.re * elapsed) * a;
            for (o, v) in out.iter_mut().zip(col) {
                *o += v * f;
            }
        }
        out
    }

    pub fn evolve(&self, state: &WavepacketState, t_target: f64) -> Result<WavepacketState> {
        check_times(state.t, t_target)?;
        if t_target == state.t {
            return Ok(state.clone());
        }
        let coeffs = self.modal_coefficients(state)?;
        Ok(state.with(t_target, self.amplitudes_after(&coeffs, t_target - state.t)))
    }

    /// Largest normalised off-diagonal entry of `V^T V`. For a complex
    /// symmetric matrix with a simple spectrum the left eigenvectors are the
    /// transposed right ones, so this vanishes up to rounding.
    pub fn transpose_consistency(&self) -> f64 {
        let cols: Vec<&[Complex64]> = self.vectors.chunks_exact(self.dim).collect();
        let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 {
            a.iter().zip(b).map(|(x, y)| x * y).sum()
        };
        let diag: Vec<f64> = cols.iter().map(|c| dot(c, c).norm()).collect();
        let mut worst = 0.0f64;
        for i in 0..cols.len() {
            for j in (i + 1)..cols.len() {
                let off = dot(cols[i], cols[j]).norm() / (diag[i] * diag[j]).sqrt();
                worst = worst.max(off);
            }
        }
        worst
    }
}

impl Propagator for SpectralPropagator {
    fn advance(&mut self, state: &WavepacketState, t_target: f64) -> Result<WavepacketState> {
        self.evolve(state, t_target)
    }

    fn trajectory(
        &mut self,
        initial: &WavepacketState,
        sample_times: &[f64],
    ) -> Result<Vec<WavepacketState>> {
        self.states_at(initial, sample_times)
    }
}

impl SpectralPropagator {
    /// Static propagator for the field `b_n = (n - zero_point) slope`.
    pub fn for_zero_point(params: &ModelParams, slope: f64, zero_point: f64) -> Result<Self> {
        let field = FieldSchedule::new(slope, vec![(0.0, zero_point)])?;
        SpectralPropagator::new(&EffectiveHamiltonian::from_schedule(params, &field, 0.0)?)
    }

    /// Every sample is projected directly from the initial state, so a
    /// decimated grid reproduces the shared samples bit for bit.
    pub fn states_at(
        &self,
        initial: &WavepacketState,
        sample_times: &[f64],
    ) -> Result<Vec<WavepacketState>> {
        let coeffs = self.modal_coefficients(initial)?;
        sample_times
            .iter()
            .map(|&t| {
                check_times(initial.t, t)?;
                if t == initial.t {
                    Ok(initial.clone())
                } else {
                    Ok(initial.with(t, self.amplitudes_after(&coeffs, t - initial.t)))
                }
            })
            .collect()
    }
}

/// Integrator settings for [`SteppedPropagator`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub dt_max: f64,
    /// Bound on the step-doubling estimate of the local error (max norm).
    pub local_tolerance: f64,
    pub min_step: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            dt_max: 1e-3,
            local_tolerance: 1e-9,
            min_step: 1e-9,
        }
    }
}

impl StepOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_max.is_finite() && self.dt_max > 0.0) {
            return Err(Error::config("integrator.dt_max_gamma0inv", "must be positive"));
        }
        if !(self.local_tolerance.is_finite() && self.local_tolerance > 0.0) {
            return Err(Error::config("integrator.local_tolerance", "must be positive"));
        }
        if !(self.min_step > 0.0 && self.min_step <= self.dt_max) {
            return Err(Error::config(
                "integrator.min_step",
                "must be positive and not above dt_max",
            ));
        }
        Ok(())
    }
}

/// Counters reported by the stepped integrator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: u64,
    pub rejected: u64,
}

trait Rhs {
    /// `out = dC/dt` at time `t`.
    fn eval(&mut self, t: f64, c: &[Complex64], out: &mut [Complex64]);
}

struct ScheduledRhs<'a> {
    coupling: &'a CouplingOperator,
    work: &'a mut CouplingWork,
    schedule: &'a FieldSchedule,
    sites: &'a [f64],
}

impl Rhs for ScheduledRhs<'_> {
    fn eval(&mut self, t: f64, c: &[Complex64], out: &mut [Complex64]) {
        self.coupling.apply(c, out, self.work);
        let n0 = self.schedule.zero_point(t);
        let slope = self.schedule.slope();
        for (i, &n) in self.sites.iter().enumerate() {
            let b = (n - n0) * slope;
            let hp = out[2 * i] + Complex64::new(b, -0.5) * c[2 * i];
            let hm = out[2 * i + 1] + Complex64::new(-b, -0.5) * c[2 * i + 1];
            out[2 * i] = Complex64::new(hp.im, -hp.re);
            out[2 * i + 1] = Complex64::new(hm.im, -hm.re);
        }
    }
}

struct DenseRhs<'a>(&'a EffectiveHamiltonian);

impl Rhs for DenseRhs<'_> {
    fn eval(&mut self, _t: f64, c: &[Complex64], out: &mut [Complex64]) {
        self.0.apply(c, out);
        for z in out.iter_mut() {
            *z = Complex64::new(z.im, -z.re);
        }
    }
}

#[derive(Default)]
struct Rk4Buffers {
    k1: Vec<Complex64>,
    k2: Vec<Complex64>,
    k3: Vec<Complex64>,
    k4: Vec<Complex64>,
    tmp: Vec<Complex64>,
    full: Vec<Complex64>,
    half: Vec<Complex64>,
    out: Vec<Complex64>,
}

fn rk4_step(
    rhs: &mut dyn Rhs,
    t: f64,
    h: f64,
    y: &[Complex64],
    out: &mut Vec<Complex64>,
    b: &mut Rk4Buffers,
) {
    let dim = y.len();
    for v in [&mut b.k1, &mut b.k2, &mut b.k3, &mut b.k4, &mut b.tmp] {
        v.resize(dim, ZERO);
    }
    out.resize(dim, ZERO);
    rhs.eval(t, y, &mut b.k1);
    for i in 0..dim {
        b.tmp[i] = y[i] + b.k1[i] * (0.5 * h);
    }
    rhs.eval(t + 0.5 * h, &b.tmp, &mut b.k2);
    for i in 0..dim {
        b.tmp[i] = y[i] + b.k2[i] * (0.5 * h);
    }
    rhs.eval(t + 0.5 * h, &b.tmp, &mut b.k3);
    for i in 0..dim {
        b.tmp[i] = y[i] + b.k3[i] * h;
    }
    rhs.eval(t + h, &b.tmp, &mut b.k4);
    for i in 0..dim {
        out[i] = y[i] + (b.k1[i] + (b.k2[i] + b.k3[i]) * 2.0 + b.k4[i]) * (h / 6.0);
    }
}

fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Adaptive RK4 with step doubling: a step of size `h` is accepted when it
/// agrees with two half steps to within the local tolerance; the two-half-step
/// result is kept.
fn integrate(
    rhs: &mut dyn Rhs,
    state: &WavepacketState,
    t_target: f64,
    options: &StepOptions,
    stats: &mut StepStats,
) -> Result<WavepacketState> {
    check_times(state.t, t_target)?;
    options.validate()?;
    let mut y = state.amplitudes().to_vec();
    let mut t = state.t;
    let mut h = options.dt_max;
    let mut b = Rk4Buffers::default();
    let snap = 1e-12 * t_target.abs().max(1.0);
    while t_target - t > snap {
        h = h.min(t_target - t);
        let mut full = std::mem::take(&mut b.full);
        let mut half = std::mem::take(&mut b.half);
        let mut out = std::mem::take(&mut b.out);
        rk4_step(rhs, t, h, &y, &mut full, &mut b);
        rk4_step(rhs, t, 0.5 * h, &y, &mut half, &mut b);
        rk4_step(rhs, t + 0.5 * h, 0.5 * h, &half, &mut out, &mut b);
        let err = full
            .iter()
            .zip(&out)
            .map(|(a, c)| (a - c).norm())
            .fold(0.0, f64::max)
            / 15.0;
        if err <= options.local_tolerance {
            let before = norm_sqr(&y);
            let after = norm_sqr(&out);
            if after > before + NORM_GROWTH_TOLERANCE {
                return Err(Error::Numerical(format!(
                    "norm increased from {before} to {after} over [{t}, {}]",
                    t + h
                )));
            }
            std::mem::swap(&mut y, &mut out);
            t += h;
            stats.accepted += 1;
            h = (2.0 * h).min(options.dt_max);
        } else {
            stats.rejected += 1;
            h *= 0.5;
            if h < options.min_step {
                return Err(Error::Numerical(format!(
                    "step size underflow at t = {t}: h = {h:e}, local error {err:e}"
                )));
            }
        }
        b.full = full;
        b.half = half;
        b.out = out;
    }
    Ok(state.with(t_target, y))
}

/// Adaptive RK4 integration of a scheduled Hamiltonian. Only the Zeeman
/// diagonal depends on time; the couplings are applied through
/// [`CouplingOperator`].
#[derive(Debug)]
pub struct SteppedPropagator {
    schedule: FieldSchedule,
    coupling: CouplingOperator,
    work: CouplingWork,
    sites: Vec<f64>,
    options: StepOptions,
    stats: StepStats,
}

impl SteppedPropagator {
    pub fn new(params: &ModelParams, schedule: FieldSchedule, options: StepOptions) -> Result<Self> {
        options.validate()?;
        Ok(SteppedPropagator {
            coupling: CouplingOperator::new(params)?,
            work: CouplingWork::default(),
            sites: params.site_indices().into_iter().map(|n| n as f64).collect(),
            schedule,
            options,
            stats: StepStats::default(),
        })
    }

    pub fn stats(&self) -> StepStats {
        self.stats
    }

    pub fn options(&self) -> &StepOptions {
        &self.options
    }
}

impl Propagator for SteppedPropagator {
    fn advance(&mut self, state: &WavepacketState, t_target: f64) -> Result<WavepacketState> {
        if state.atom_count() != self.sites.len() {
            return Err(Error::config("state", "atom count does not match the model"));
        }
        let mut rhs = ScheduledRhs {
            coupling: &self.coupling,
            work: &mut self.work,
            schedule: &self.schedule,
            sites: &self.sites,
        };
        integrate(&mut rhs, state, t_target, &self.options, &mut self.stats)
    }
}

pub fn step_propagate(
    params: &ModelParams,
    schedule: &FieldSchedule,
    state: &WavepacketState,
    t_target: f64,
    dt_max: f64,
) -> Result<WavepacketState> {
    let options = StepOptions {
        dt_max,
        min_step: StepOptions::default().min_step.min(dt_max),
        ..Default::default()
    };
    SteppedPropagator::new(params, schedule.clone(), options)?.advance(state, t_target)
}

/// Spectral propagation under a static `H`. Falls back to dense stepping,
/// with a warning on stderr, when the eigenvector basis is unusable.
pub fn eigen_propagate(
    h: &EffectiveHamiltonian,
    state: &WavepacketState,
    t_target: f64,
) -> Result<WavepacketState> {
    match SpectralPropagator::new(h) {
        Ok(p) => p.evolve(state, t_target),
        Err(Error::Numerical(why)) => {
            eprintln!("warning: spectral propagation unavailable ({why}); stepping instead");
            integrate(
                &mut DenseRhs(h),
                state,
                t_target,
                &StepOptions::default(),
                &mut StepStats::default(),
            )
        }
        Err(e) => Err(e),
    }
}

/// Spectral propagation on static pieces of the schedule, stepping elsewhere.
#[derive(Debug)]
pub struct AutoPropagator {
    params: ModelParams,
    schedule: FieldSchedule,
    stepper: SteppedPropagator,
    spectral: HashMap<u64, Arc<SpectralPropagator>>,
    unusable: HashMap<u64, String>,
    warnings: Vec<String>,
}

impl AutoPropagator {
    pub fn new(params: &ModelParams, schedule: FieldSchedule, options: StepOptions) -> Result<Self> {
        Ok(AutoPropagator {
            params: params.clone(),
            stepper: SteppedPropagator::new(params, schedule.clone(), options)?,
            schedule,
            spectral: HashMap::new(),
            unusable: HashMap::new(),
            warnings: Vec::new(),
        })
    }

    /// Spectral propagator for a static zero point, built on first use.
    pub fn spectral_for(&mut self, zero_point: f64) -> Option<Arc<SpectralPropagator>> {
        let key = zero_point.to_bits();
        if let Some(p) = self.spectral.get(&key) {
            return Some(p.clone());
        }
        if self.unusable.contains_key(&key) {
            return None;
        }
        match SpectralPropagator::for_zero_point(&self.params, self.schedule.slope(), zero_point) {
            Ok(p) => {
                let p = Arc::new(p);
                self.spectral.insert(key, p.clone());
                Some(p)
            }
            Err(e) => {
                self.warnings.push(format!(
                    "spectral propagation unavailable for zero point {zero_point}: {e}; stepping instead"
                ));
                self.unusable.insert(key, e.to_string());
                None
            }
        }
    }

    pub fn step_stats(&self) -> StepStats {
        self.stepper.stats()
    }
}

impl Propagator for AutoPropagator {
    fn advance(&mut self, state: &WavepacketState, t_target: f64) -> Result<WavepacketState> {
        check_times(state.t, t_target)?;
        let mut current = state.clone();
        for seg in self.schedule.segments(state.t, t_target) {
            current = match seg.constant_zero_point.and_then(|z| self.spectral_for(z)) {
                Some(p) => p.evolve(&current, seg.end)?,
                None => self.stepper.advance(&current, seg.end)?,
            };
        }
        Ok(current)
    }

    fn trajectory(
        &mut self,
        initial: &WavepacketState,
        sample_times: &[f64],
    ) -> Result<Vec<WavepacketState>> {
        if let Some(&last) = sample_times.last() {
            let segments = self.schedule.segments(initial.t, last);
            if let [only] = segments.as_slice() {
                if let Some(p) = only.constant_zero_point.and_then(|z| self.spectral_for(z)) {
                    return p.states_at(initial, sample_times);
                }
            }
        }
        let mut out = Vec::with_capacity(sample_times.len());
        let mut current = initial.clone();
        for &t in sample_times {
            if t != current.t {
                current = self.advance(&current, t)?;
            }
            out.push(current.clone());
        }
        Ok(out)
    }

    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_hamiltonian;

    fn small(n: usize) -> ModelParams {
        ModelParams {
            atom_count: n,
            ..Default::default()
        }
    }

    #[test]
    fn gaussian_normalisation() {
        let params = ModelParams::default();
        let spec = GaussianSpec::new(0.0, 1.5, Complex64::new(0.168, 0.0), Complex64::new(0.168, 0.0));
        let state = gaussian_initial(&spec, &params).unwrap();
        assert!((state.total_probability() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn single_arm_gaussian() {
        let params = ModelParams::default();
        let spec = GaussianSpec::new(0.0, 1.0, Complex64::new(0.2, 0.0), ZERO);
        let state = gaussian_initial(&spec, &params).unwrap();
        assert!(state.minus().all(|z| z == ZERO));
    }

    #[test]
    fn rejects_empty_gaussian() {
        let params = ModelParams::default();
        let spec = GaussianSpec::new(0.0, 1.0, ZERO, ZERO);
        assert!(gaussian_initial(&spec, &params).is_err());
        let far = GaussianSpec::new(1e6, 1.0, Complex64::new(1.0, 0.0), ZERO);
        assert!(gaussian_initial(&far, &params).is_err());
    }

    #[test]
    fn band_amplitudes_normalise() {
        let params = ModelParams::default();
        let spec = GaussianSpec::new(0.0, 3.0, ZERO, ZERO);
        let (p, m) = band_amplitudes(&params, &spec, Band::I, 0.0, 1.0).unwrap();
        let spec = GaussianSpec { psi_plus: p, psi_minus: m, ..spec };
        let state = gaussian_initial(&spec, &params).unwrap();
        assert!((state.total_probability() - 1.0).abs() < 1e-12);
        // Beyond the zero-field crossing near 2.3 k0 the lower band is antisymmetric.
        assert!((p + m).norm() < 1e-9 * p.norm());
    }

    #[test]
    fn single_atom_decay() {
        let params = small(1);
        let h = build_hamiltonian(&params, &[0.0]).unwrap();
        let p = SpectralPropagator::new(&h).unwrap();
        let s0 = WavepacketState::localized(&params, 0, true).unwrap();
        for t in [0.5, 3.0, 20.0] {
            let s = p.evolve(&s0, t).unwrap();
            assert!((s.total_probability() - (-t).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_at_zero_elapsed() {
        let params = small(30);
        let h = build_hamiltonian(&params, &vec![0.1; 30]).unwrap();
        let p = SpectralPropagator::new(&h).unwrap();
        let s0 = WavepacketState::localized(&params, 3, false).unwrap();
        assert_eq!(p.evolve(&s0, 0.0).unwrap(), s0);
    }

    #[test]
    fn chained_spectral_steps_agree() {
        let params = small(40);
        let h = EffectiveHamiltonian::from_schedule(&params, &FieldSchedule::constant(0.2), 0.0).unwrap();
        let p = SpectralPropagator::new(&h).unwrap();
        let spec = GaussianSpec::new(0.0, 1.5, Complex64::new(0.3, 0.0), Complex64::new(0.3, 0.0));
        let s0 = gaussian_initial(&spec, &params).unwrap();
        let direct = p.evolve(&s0, 7.0).unwrap();
        let chained = p.evolve(&p.evolve(&s0, 3.5).unwrap(), 7.0).unwrap();
        let diff = direct
            .amplitudes()
            .iter()
            .zip(chained.amplitudes())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn transpose_structure() {
        let params = small(20);
        let h = EffectiveHamiltonian::from_schedule(&params, &FieldSchedule::constant(0.2), 0.0).unwrap();
        let p = SpectralPropagator::new(&h).unwrap();
        assert!(p.transpose_consistency() < 1e-8, "{}", p.transpose_consistency());
    }

    #[test]
    fn stepped_matches_spectral_on_small_array() {
        let params = small(25);
        let schedule = FieldSchedule::constant(0.2);
        let h = EffectiveHamiltonian::from_schedule(&params, &schedule, 0.0).unwrap();
        let spec = GaussianSpec::new(0.0, 2.0, Complex64::new(0.3, 0.0), Complex64::new(-0.3, 0.0));
        let s0 = gaussian_initial(&spec, &params).unwrap();
        let exact = eigen_propagate(&h, &s0, 2.0).unwrap();
        let stepped = step_propagate(&params, &schedule, &s0, 2.0, 1e-3).unwrap();
        let diff = exact
            .amplitudes()
            .iter()
            .zip(stepped.amplitudes())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn dense_fallback_integrator_agrees() {
        let params = small(10);
        let h = build_hamiltonian(&params, &vec![0.3; 10]).unwrap();
        let s0 = WavepacketState::localized(&params, 0, true).unwrap();
        let exact = SpectralPropagator::new(&h).unwrap().evolve(&s0, 1.0).unwrap();
        let stepped = integrate(&mut DenseRhs(&h), &s0, 1.0, &StepOptions::default(), &mut StepStats::default()).unwrap();
        let diff = exact
            .amplitudes()
            .iter()
            .zip(stepped.amplitudes())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn rejects_backwards_time() {
        let params = small(3);
        let s0 = WavepacketState::localized(&params, 0, true).unwrap();
        let r = step_propagate(&params, &FieldSchedule::constant(0.2), &s0, -1.0, 1e-3);
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn step_underflow_is_reported() {
        let params = small(3);
        let s0 = WavepacketState::localized(&params, 0, true).unwrap();
        let options = StepOptions {
            dt_max: 1e-3,
            local_tolerance: 1e-300,
            min_step: 1e-4,
        };
        let mut p = SteppedPropagator::new(&params, FieldSchedule::constant(0.2), options).unwrap();
        assert!(matches!(p.advance(&s0, 0.1), Err(Error::Numerical(_))));
    }

    #[test]
    fn auto_uses_segments() {
        let params = small(15);
        let schedule = FieldSchedule::new(0.2, vec![(0.0, 0.0), (1.0, 2.0), (3.0, 2.0)]).unwrap();
        let s0 = WavepacketState::localized(&params, 0, true).unwrap();
        let mut auto = AutoPropagator::new(&params, schedule.clone(), StepOptions::default()).unwrap();
        let a = auto.advance(&s0, 4.0).unwrap();
        let b = step_propagate(&params, &schedule, &s0, 4.0, 1e-3).unwrap();
        let diff = a
            .amplitudes()
            .iter()
            .zip(b.amplitudes())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
        assert!(auto.step_stats().accepted > 0);
    }

    #[test]
    fn trajectory_rejects_unsorted_times() {
        let params = small(3);
        let h = build_hamiltonian(&params, &[0.0; 3]).unwrap();
        let mut p = SpectralPropagator::new(&h).unwrap();
        let s0 = WavepacketState::localized(&params, 0, true).unwrap();
        assert!(record_trajectory(&mut p, &s0, &[0.0, 2.0, 1.0]).is_err());
        let single = record_trajectory(&mut p, &s0, &[0.0]).unwrap();
        assert_eq!(single[0], s0);
    }
}
