//! Observables extracted from wavepacket states and trajectories.
//!
//! Moments such as the mean position and the force expectation are
//! normalised by the instantaneous total probability.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::bands::{band_eigs, BlochSums};
use crate::error::{Error, Result};
use crate::lattice::ModelParams;
use crate::propagation::WavepacketState;

/// Below this total probability normalised moments are undefined.
pub const UNDEFINED_NORM: f64 = 1e-12;
/// Relative slope bound `|dP/dt| <= eps * P` defining a plateau.
pub const DEFAULT_PLATEAU_EPSILON: f64 = 1e-3;
/// Plateaus shorter than this (in `1/gamma0`) are discarded.
pub const DEFAULT_PLATEAU_MIN_DURATION: f64 = 1.0;
/// Fitted decay rates below this are reported as floor-bounded.
pub const DECAY_RATE_FLOOR: f64 = 1e-11;
/// `|det|` of the two Bloch eigenvectors below which a projection is unresolved.
pub const PROJECTION_DET_GUARD: f64 = 1e-10;

/// `(P_+, P_-, P_t)`.
pub fn populations(state: &WavepacketState) -> (f64, f64, f64) {
    let p: f64 = state.plus().map(|z| z.norm_sqr()).sum();
    let m: f64 = state.minus().map(|z| z.norm_sqr()).sum();
    (p, m, p + m)
}

fn guard(total: f64, what: &str) -> Result<()> {
    if !(total > UNDEFINED_NORM) {
        return Err(Error::UndefinedState(format!(
            "{what} needs P_t > {UNDEFINED_NORM:e}, got {total:e}"
        )));
    }
    Ok(())
}

/// `sum_n n (|C_{+,n}|^2 + |C_{-,n}|^2) / P_t`.
pub fn mean_position(state: &WavepacketState) -> Result<f64> {
    let (_, _, total) = populations(state);
    guard(total, "mean position")?;
    let weighted: f64 = state
        .amplitudes()
        .chunks_exact(2)
        .enumerate()
        .map(|(i, c)| state.site(i) as f64 * (c[0].norm_sqr() + c[1].norm_sqr()))
        .sum();
    Ok(weighted / total)
}

/// `(b0 / a) (P_+ - P_-) / P_t` in units of `gamma0 / lambda`.
pub fn force_expectation(state: &WavepacketState, zeeman_slope: f64, spacing: f64) -> Result<f64> {
    let (p, m, total) = populations(state);
    guard(total, "force expectation")?;
    Ok(zeeman_slope / spacing * (p - m) / total)
}

/// Unitary per-arm DFT of a state, with momenta in units of `k0` sorted
/// ascending over the first zone.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumSpectrum {
    pub t: f64,
    pub k: Vec<f64>,
    pub plus: Vec<Complex64>,
    pub minus: Vec<Complex64>,
}

impl MomentumSpectrum {
    pub fn weights(&self) -> Vec<f64> {
        self.plus
            .iter()
            .zip(&self.minus)
            .map(|(p, m)| p.norm_sqr() + m.norm_sqr())
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.weights().iter().sum()
    }

    /// Fraction of the spectral weight with `|k| < 1` strictly.
    pub fn lightcone_fraction(&self) -> Result<f64> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        guard(total, "light-cone fraction")?;
        let inside: f64 = self
            .k
            .iter()
            .zip(&w)
            .filter(|(k, _)| k.abs() < 1.0)
            .map(|(_, w)| w)
            .sum();
        Ok(inside / total)
    }

    /// Momentum of the spectral maximum, refined by a parabola through the
    /// peak bin and its neighbours (wrapping at the zone edge).
    pub fn peak_k(&self) -> f64 {
        let w = self.weights();
        let n = w.len();
        let (j, _) = w
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        if n < 3 {
            return self.k[j];
        }
        let (l, c, r) = (w[(j + n - 1) % n], w[j], w[(j + 1) % n]);
        let denom = l - 2.0 * c + r;
        let shift = if denom < 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
        let dk = if n > 1 { self.k[1] - self.k[0] } else { 0.0 };
        self.k[j] + shift.clamp(-0.5, 0.5) * dk
    }
}

/// Cached FFT plan for one array size.
#[derive(Clone)]
pub struct SpectrumAnalyzer {
    atom_count: usize,
    first_site: i64,
    spacing: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectrumAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectrumAnalyzer")
            .field("atom_count", &self.atom_count)
            .field("first_site", &self.first_site)
            .finish()
    }
}

impl SpectrumAnalyzer {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(SpectrumAnalyzer {
            atom_count: params.atom_count,
            first_site: params.first_site(),
            spacing: params.spacing_over_lambda,
            fft: FftPlanner::new().plan_fft_forward(params.atom_count),
        })
    }

    /// Signed DFT indices in ascending momentum order.
    fn indices(&self) -> impl Iterator<Item = i64> {
        let n = self.atom_count as i64;
        let lo = -(n / 2);
        lo..lo + n
    }

    pub fn k_grid(&self) -> Vec<f64> {
        let na = self.atom_count as f64 * self.spacing;
        self.indices().map(|j| j as f64 / na).collect()
    }

    fn transform(&self, arm: impl Iterator<Item = Complex64>) -> Vec<Complex64> {
        let n = self.atom_count;
        let mut buf: Vec<Complex64> = arm.collect();
        self.fft.process(&mut buf);
        let scale = 1.0 / (n as f64).sqrt();
        self.indices()
            .map(|j| {
                let bin = j.rem_euclid(n as i64) as usize;
                // Sites are labelled from first_site, not 0.
                let phase = -2.0 * std::f64::consts::PI * (j * self.first_site) as f64 / n as f64;
                buf[bin] * Complex64::from_polar(scale, phase)
            })
            .collect()
    }

    pub fn spectrum(&self, state: &WavepacketState) -> Result<MomentumSpectrum> {
        if state.atom_count() != self.atom_count || state.first_site() != self.first_site {
            return Err(Error::config("state", "does not match the analyser's array"));
        }
        Ok(MomentumSpectrum {
            t: state.t,
            k: self.k_grid(),
            plus: self.transform(state.plus()),
            minus: self.transform(state.minus()),
        })
    }
}

pub fn momentum_spectrum(state: &WavepacketState, params: &ModelParams) -> Result<MomentumSpectrum> {
    SpectrumAnalyzer::new(params)?.spectrum(state)
}

/// Per-momentum decomposition onto the two Bloch bands.
#[derive(Clone, Debug, PartialEq)]
pub struct BandProjection {
    pub t: f64,
    pub constant_field: f64,
    pub k: Vec<f64>,
    pub p_band1: Vec<f64>,
    pub p_band2: Vec<f64>,
    /// `|c|^2 - P^I - P^II`: the cross term from non-orthogonal eigenvectors.
    pub residual: Vec<f64>,
    pub unresolved: Vec<bool>,
}

impl BandProjection {
    /// `(sum P^I, sum P^II)` over resolved momenta.
    pub fn band_weights(&self) -> (f64, f64) {
        self.p_band1
            .iter()
            .zip(&self.p_band2)
            .zip(&self.unresolved)
            .filter(|(_, &u)| !u)
            .fold((0.0, 0.0), |(a, b), ((p1, p2), _)| (a + p1, b + p2))
    }
}

/// Band projector with the lattice sums precomputed on the DFT momentum grid.
#[derive(Clone, Debug)]
pub struct BandProjector {
    k: Vec<f64>,
    sums: Vec<crate::bands::BlochMatrix>,
}

impl BandProjector {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let analyzer = SpectrumAnalyzer::new(params)?;
        let sums = BlochSums::new(params)?;
        let k = analyzer.k_grid();
        let matrices = k
            .iter()
            .map(|&k| sums.matrix(k, 0.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(BandProjector { k, sums: matrices })
    }

    /// Solve `c(k) = alpha v^I + beta v^II` at each momentum of `spectrum`,
    /// with Bloch eigenvectors at uniform field `constant_field`.
    pub fn project(&self, spectrum: &MomentumSpectrum, constant_field: f64) -> Result<BandProjection> {
        if spectrum.k.len() != self.k.len() {
            return Err(Error::config("spectrum", "momentum grid does not match the projector"));
        }
        let n = self.k.len();
        let mut out = BandProjection {
            t: spectrum.t,
            constant_field,
            k: self.k.clone(),
            p_band1: Vec::with_capacity(n),
            p_band2: Vec::with_capacity(n),
            residual: Vec::with_capacity(n),
            unresolved: Vec::with_capacity(n),
        };
        for (i, bm) in self.sums.iter().enumerate() {
            let (one, two) = band_eigs(&bm.with_field(constant_field));
            let (u, v) = (one.eigenvector, two.eigenvector);
            let c = [spectrum.plus[i], spectrum.minus[i]];
            let det = u[0] * v[1] - u[1] * v[0];
            if one.degenerate || det.norm() < PROJECTION_DET_GUARD {
                out.p_band1.push(f64::NAN);
                out.p_band2.push(f64::NAN);
                out.residual.push(f64::NAN);
                out.unresolved.push(true);
                continue;
            }
            let alpha = (c[0] * v[1] - c[1] * v[0]) / det;
            let beta = (u[0] * c[1] - u[1] * c[0]) / det;
            let (p1, p2) = (alpha.norm_sqr(), beta.norm_sqr());
            out.p_band1.push(p1);
            out.p_band2.push(p2);
            out.residual.push(c[0].norm_sqr() + c[1].norm_sqr() - p1 - p2);
            out.unresolved.push(false);
        }
        Ok(out)
    }
}

pub fn band_projection(
    spectrum: &MomentumSpectrum,
    params: &ModelParams,
    constant_field: f64,
) -> Result<BandProjection> {
    BandProjector::new(params)?.project(spectrum, constant_field)
}

pub fn lightcone_fraction(spectrum: &MomentumSpectrum) -> Result<f64> {
    spectrum.lightcone_fraction()
}

/// Linearly interpolated sign changes of `values`. Exact zeros are skipped:
/// a crossing is reported only when the sign of the next nonzero sample
/// differs from the last nonzero one.
pub fn zero_crossings(times: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut last: Option<(f64, f64)> = None;
    for (&t, &v) in times.iter().zip(values) {
        if v == 0.0 || !v.is_finite() {
            continue;
        }
        if let Some((t0, v0)) = last {
            if v0.signum() != v.signum() {
                out.push(t0 + (t - t0) * v0 / (v0 - v));
            }
        }
        last = Some((t, v));
    }
    out
}

/// Least-squares fit of `ln P_t` against time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    /// Minus the fitted slope, in `gamma0`.
    pub rate: f64,
    pub intercept: f64,
    /// RMS deviation of `ln P_t` from the fit.
    pub residual: f64,
    pub points: usize,
    /// The rate is below [`DECAY_RATE_FLOOR`] and only bounded by it.
    pub at_floor: bool,
}

/// Fit over samples with `window.0 <= t <= window.1`.
pub fn decay_fit(times: &[f64], p_total: &[f64], window: (f64, f64)) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(p_total)
        .filter(|(&t, _)| t >= window.0 && t <= window.1)
        .map(|(&t, &p)| (t, p))
        .collect();
    if pts.len() < 2 {
        return Err(Error::config(
            "window",
            format!("need two samples in [{}, {}], found {}", window.0, window.1, pts.len()),
        ));
    }
    if let Some((t, p)) = pts.iter().find(|(_, p)| !(*p > 0.0 && p.is_finite())) {
        return Err(Error::config(
            "window",
            format!("P_t = {p:e} at t = {t} cannot be log-fitted"),
        ));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(t, p) in &pts {
        sxx += (t - tm) * (t - tm);
        sxy += (t - tm) * (p.ln() - ym);
    }
    if sxx == 0.0 {
        return Err(Error::config("window", "all samples share one time"));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let residual = (pts
        .iter()
        .map(|&(t, p)| (p.ln() - intercept - slope * t).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(DecayFit {
        rate: -slope,
        intercept,
        residual,
        points: pts.len(),
        at_floor: -slope < DECAY_RATE_FLOOR,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plateau {
    pub start: f64,
    pub end: f64,
    pub level: f64,
}

/// Maximal runs of sampling intervals over which `|dP/dt| <= epsilon * P`
/// (P the interval mean) lasting at least `min_duration`.
pub fn plateau_detect_with(
    times: &[f64],
    p_total: &[f64],
    epsilon: f64,
    min_duration: f64,
) -> Vec<Plateau> {
    let n = times.len().min(p_total.len());
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < n {
        let flat = |j: usize| {
            let dt = times[j + 1] - times[j];
            let mean = 0.5 * (p_total[j] + p_total[j + 1]);
            dt > 0.0 && (p_total[j + 1] - p_total[j]).abs() <= epsilon * mean.abs() * dt
        };
        if !flat(i) {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < n && flat(i) {
            i += 1;
        }
        // Samples start..=i form the run.
        if times[i] - times[start] >= min_duration {
            let level = p_total[start..=i].iter().sum::<f64>() / (i - start + 1) as f64;
            out.push(Plateau {
                start: times[start],
                end: times[i],
                level,
            });
        }
    }
    out
}

pub fn plateau_detect(times: &[f64], p_total: &[f64]) -> Vec<Plateau> {
    plateau_detect_with(times, p_total, DEFAULT_PLATEAU_EPSILON, DEFAULT_PLATEAU_MIN_DURATION)
}

/// Observables at one sample time. Normalised moments are `None` once the
/// state has decayed below [`UNDEFINED_NORM`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub p_plus: f64,
    pub p_minus: f64,
    pub p_total: f64,
    pub n_bar: Option<f64>,
    pub force: Option<f64>,
    pub lc_fraction: Option<f64>,
}

pub fn observe(state: &WavepacketState, params: &ModelParams, analyzer: &SpectrumAnalyzer) -> Result<Sample> {
    let (p_plus, p_minus, p_total) = populations(state);
    let defined = p_total > UNDEFINED_NORM;
    let (n_bar, force, lc_fraction) = if defined {
        (
            Some(mean_position(state)?),
            Some(force_expectation(state, params.zeeman_slope, params.spacing_over_lambda)?),
            Some(analyzer.spectrum(state)?.lightcone_fraction()?),
        )
    } else {
        (None, None, None)
    };
    Ok(Sample {
        t: state.t,
        p_plus,
        p_minus,
        p_total,
        n_bar,
        force,
        lc_fraction,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn from_states(states: &[WavepacketState], params: &ModelParams) -> Result<Self> {
        let analyzer = SpectrumAnalyzer::new(params)?;
        let samples = states
            .iter()
            .map(|s| observe(s, params, &analyzer))
            .collect::<Result<Vec<_>>>()?;
        if samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::config("samples", "trajectory times must be strictly increasing"));
        }
        Ok(Trajectory { samples })
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn p_total(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.p_total).collect()
    }

    pub fn arm_difference(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.p_plus - s.p_minus).collect()
    }

    /// Zero crossings of `P_+ - P_-`, where the force changes direction.
    pub fn reversal_times(&self) -> Vec<f64> {
        zero_crossings(&self.times(), &self.arm_difference())
    }

    pub fn decay_fit(&self, window: (f64, f64)) -> Result<DecayFit> {
        decay_fit(&self.times(), &self.p_total(), window)
    }

    pub fn plateaus(&self) -> Vec<Plateau> {
        plateau_detect(&self.times(), &self.p_total())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,P_plus,P_minus,P_t,n_bar,force,lc_fraction")?;
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:e}"));
        for s in &self.samples {
            writeln!(
                out,
                "{:e},{:e},{:e},{:e},{},{},{}",
                s.t,
                s.p_plus,
                s.p_minus,
                s.p_total,
                opt(s.n_bar),
                opt(s.force),
                opt(s.lc_fraction)
            )?;
        }
        Ok(())
    }
}

pub fn reversal_times(trajectory: &Trajectory) -> Vec<f64> {
    trajectory.reversal_times()
}

pub const SPECTRUM_CSV_HEADER: &str = "t,k_over_k0,pI,pII,residual";

/// Append projection rows; unresolved momenta are written as `nan`.
pub fn write_projection_rows<W: Write>(projection: &BandProjection, mut out: W) -> Result<()> {
    for i in 0..projection.k.len() {
        writeln!(
            out,
            "{:e},{:e},{:e},{:e},{:e}",
            projection.t, projection.k[i], projection.p_band1[i], projection.p_band2[i], projection.residual[i]
        )?;
    }
    Ok(())
}

/// Raw amplitudes: `t` then `re`/`im` of `C_+` and `C_-` for every site.
pub fn write_amplitudes_csv<W: Write>(states: &[WavepacketState], mut out: W) -> Result<()> {
    let Some(first) = states.first() else {
        writeln!(out, "t")?;
        return Ok(());
    };
    write!(out, "t")?;
    for i in 0..first.atom_count() {
        let n = first.site(i);
        write!(out, ",re_plus_{n},im_plus_{n},re_minus_{n},im_minus_{n}")?;
    }
    writeln!(out)?;
    for s in states {
        write!(out, "{:e}", s.t)?;
        for z in s.amplitudes() {
            write!(out, ",{:e},{:e}", z.re, z.im)?;
        }
        writeln!(out)?;
    }
    Ok(())
}
