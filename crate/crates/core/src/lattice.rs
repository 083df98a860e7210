//! Model parameters, photon-mediated couplings, magnetic-field schedules and
//! assembly of the effective Hamiltonian.
//!
//! The basis is site-major: index `2 i` is `|+_n>` and `2 i + 1` is `|-_n>` for
//! the `i`-th atom, whose physical site label is `n = first_site + i`.

use std::f64::consts::TAU;
use std::sync::Arc;

use faer::Mat;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default truncation of the infinite-lattice sums, per side.
pub const DEFAULT_SUM_CUTOFF: usize = 50_000;

/// Tolerance used when checking `H^T = H`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Dimensionless physical configuration of the array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Lattice constant `a / lambda`.
    pub spacing_over_lambda: f64,
    /// Number of atoms `N`.
    pub atom_count: usize,
    /// Zeeman slope `mu B0 / (hbar gamma0)` per site.
    #[serde(rename = "zeeman_slope_gamma0")]
    pub zeeman_slope: f64,
    /// Uniform Zeeman shift `mu Bc / (hbar gamma0)` used in band-structure mode.
    #[serde(rename = "constant_field_gamma0", default)]
    pub constant_field: f64,
    /// Number of neighbours per side kept in lattice sums.
    #[serde(default = "default_sum_cutoff")]
    pub sum_cutoff: usize,
}

fn default_sum_cutoff() -> usize {
    DEFAULT_SUM_CUTOFF
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            spacing_over_lambda: 0.1,
            atom_count: 201,
            zeeman_slope: 0.2,
            constant_field: 0.0,
            sum_cutoff: DEFAULT_SUM_CUTOFF,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_over_lambda.is_finite() && self.spacing_over_lambda > 0.0) {
            return Err(Error::config(
                "spacing_over_lambda",
                format!("must be positive, got {}", self.spacing_over_lambda),
            ));
        }
        if self.atom_count < 1 {
            return Err(Error::config("atom_count", "must be at least 1"));
        }
        if self.sum_cutoff < 1 {
            return Err(Error::config("sum_cutoff", "must be at least 1"));
        }
        if !self.zeeman_slope.is_finite() {
            return Err(Error::config("zeeman_slope_gamma0", "must be finite"));
        }
        if !self.constant_field.is_finite() {
            return Err(Error::config("constant_field_gamma0", "must be finite"));
        }
        Ok(())
    }

    /// `k0 a`, the phase accumulated by a free photon over one lattice spacing.
    pub fn k0a(&self) -> f64 {
        TAU * self.spacing_over_lambda
    }

    /// Edge of the first Brillouin zone, `pi / a`, in units of `k0`.
    pub fn zone_edge(&self) -> f64 {
        0.5 / self.spacing_over_lambda
    }

    /// Label of the first atom: `-(N-1)/2` for odd `N`, `-N/2` for even `N`.
    pub fn first_site(&self) -> i64 {
        -((self.atom_count / 2) as i64)
    }

    pub fn site_indices(&self) -> Vec<i64> {
        let first = self.first_site();
        (0..self.atom_count as i64).map(|i| first + i).collect()
    }

    /// Bloch period `2 pi / b0` in units of `1/gamma0`.
    pub fn bloch_period(&self) -> f64 {
        TAU / self.zeeman_slope
    }
}

fn check_distance(rho: f64) -> Result<()> {
    if rho.is_finite() && rho > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "coupling distance must be positive and finite, got k0 r = {rho}"
        )))
    }
}

/// Same-arm coupling `g_{++}(rho) = -(3/8) e^{i rho} (rho^2 - i rho + 1) / rho^3`,
/// with `rho = k0 r`, in units of `gamma0`.
pub fn green_pp(rho: f64) -> Result<Complex64> {
    check_distance(rho)?;
    let poly = Complex64::new(rho * rho + 1.0, -rho);
    Ok(-Complex64::cis(rho) * poly * (0.375 / (rho * rho * rho)))
}

/// `g_{--}`, identical to [`green_pp`].
pub fn green_mm(rho: f64) -> Result<Complex64> {
    green_pp(rho)
}

/// Cross-arm coupling `g_{+-}(rho) = (3/8) e^{i rho} (rho^2 + 3 i rho - 3) / rho^3`.
pub fn green_pm(rho: f64) -> Result<Complex64> {
    check_distance(rho)?;
    let poly = Complex64::new(rho * rho - 3.0, 3.0 * rho);
    Ok(Complex64::cis(rho) * poly * (0.375 / (rho * rho * rho)))
}

/// `g_{-+}`, identical to [`green_pm`].
pub fn green_mp(rho: f64) -> Result<Complex64> {
    green_pm(rho)
}

/// Coupling tables indexed by the site separation `d`; entry 0 is unused.
#[derive(Clone, Debug)]
pub struct CouplingTable {
    pub same: Vec<Complex64>,
    pub cross: Vec<Complex64>,
}

impl CouplingTable {
    /// Tabulate `g_{++}(k0 a d)` and `g_{+-}(k0 a d)` for `d = 1..=max_distance`.
    pub fn new(k0a: f64, max_distance: usize) -> Result<Self> {
        let mut same = Vec::with_capacity(max_distance + 1);
        let mut cross = Vec::with_capacity(max_distance + 1);
        same.push(Complex64::new(0.0, 0.0));
        cross.push(Complex64::new(0.0, 0.0));
        for d in 1..=max_distance {
            let rho = k0a * d as f64;
            same.push(green_pp(rho)?);
            cross.push(green_pm(rho)?);
        }
        Ok(CouplingTable { same, cross })
    }

    pub fn max_distance(&self) -> usize {
        self.same.len() - 1
    }
}

/// Time-dependent linear Zeeman profile `b_n(t) = (n - n0(t)) b0`, where the
/// zero point `n0(t)` is piecewise linear through the breakpoints and clamped
/// outside them.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSchedule {
    slope: f64,
    breakpoints: Vec<(f64, f64)>,
}

impl FieldSchedule {
    pub fn new(slope: f64, breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if !slope.is_finite() {
            return Err(Error::config("zeeman_slope_gamma0", "must be finite"));
        }
        if breakpoints.is_empty() {
            return Err(Error::config(
                "field.zero_point",
                "at least one breakpoint is required",
            ));
        }
        for (i, &(t, n0)) in breakpoints.iter().enumerate() {
            if !(t.is_finite() && n0.is_finite()) {
                return Err(Error::config(
                    "field.zero_point",
                    format!("breakpoint {i} is not finite"),
                ));
            }
        }
        if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config(
                "field.zero_point",
                "breakpoint times must be strictly increasing",
            ));
        }
        Ok(FieldSchedule { slope, breakpoints })
    }

    /// Time-independent field with its zero point at site 0.
    pub fn constant(slope: f64) -> Self {
        FieldSchedule {
            slope,
            breakpoints: vec![(0.0, 0.0)],
        }
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn zero_point(&self, t: f64) -> f64 {
        let bp = &self.breakpoints;
        if t <= bp[0].0 {
            return bp[0].1;
        }
        let last = bp[bp.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        let j = bp.partition_point(|&(tb, _)| tb <= t);
        let (t0, n0) = bp[j - 1];
        let (t1, n1) = bp[j];
        n0 + (n1 - n0) * (t - t0) / (t1 - t0)
    }

    /// Per-site field `b_n(t)` for the atoms of `params`.
    pub fn field_at(&self, params: &ModelParams, t: f64) -> Vec<f64> {
        let n0 = self.zero_point(t);
        params
            .site_indices()
            .into_iter()
            .map(|n| (n as f64 - n0) * self.slope)
            .collect()
    }

    /// Split `[start, end]` at breakpoints into pieces on which the zero point
    /// is either constant or varies linearly.
    pub fn segments(&self, start: f64, end: f64) -> Vec<FieldSegment> {
        let mut cuts = vec![start];
        cuts.extend(
            self.breakpoints
                .iter()
                .map(|&(t, _)| t)
                .filter(|&t| t > start && t < end),
        );
        cuts.push(end);
        cuts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let (za, zb) = (self.zero_point(a), self.zero_point(b));
                FieldSegment {
                    start: a,
                    end: b,
                    constant_zero_point: (za == zb).then_some(za),
                }
            })
            .collect()
    }
}

/// Piece of a schedule; `constant_zero_point` is set when the Hamiltonian is
/// static over the piece.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSegment {
    pub start: f64,
    pub end: f64,
    pub constant_zero_point: Option<f64>,
}

/// Dense `2N x 2N` effective Hamiltonian in the rotating frame.
#[derive(Clone, Debug)]
pub struct EffectiveHamiltonian {
    matrix: Mat<Complex64>,
    atom_count: usize,
    first_site: i64,
    build_time: f64,
}

/// Assemble `H` for a per-site field: diagonal `-i/2 +/- b_n`, off-diagonal
/// photon-mediated couplings `g_{ab}(k0 a |n - m|)`.
pub fn build_hamiltonian(params: &ModelParams, field: &[f64]) -> Result<EffectiveHamiltonian> {
    params.validate()?;
    let n = params.atom_count;
    if field.len() != n {
        return Err(Error::config(
            "field",
            format!("expected {n} per-site values, got {}", field.len()),
        ));
    }
    let table = CouplingTable::new(params.k0a(), n.saturating_sub(1))?;
    let matrix = Mat::from_fn(2 * n, 2 * n, |r, c| {
        let (i, alpha) = (r / 2, r % 2);
        let (j, beta) = (c / 2, c % 2);
        if i == j {
            if alpha == beta {
                let sign = if alpha == 0 { 1.0 } else { -1.0 };
                Complex64::new(sign * field[i], -0.5)
            } else {
                Complex64::new(0.0, 0.0)
            }
        } else {
            let d = i.abs_diff(j);
            if alpha == beta {
                table.same[d]
            } else {
                table.cross[d]
            }
        }
    });
    Ok(EffectiveHamiltonian {
        matrix,
        atom_count: n,
        first_site: params.first_site(),
        build_time: 0.0,
    })
}

impl EffectiveHamiltonian {
    /// Sample `schedule` at time `t` and assemble the Hamiltonian.
    pub fn from_schedule(params: &ModelParams, schedule: &FieldSchedule, t: f64) -> Result<Self> {
        let mut h = build_hamiltonian(params, &schedule.field_at(params, t))?;
        h.build_time = t;
        Ok(h)
    }

    pub fn matrix(&self) -> &Mat<Complex64> {
        &self.matrix
    }

    pub fn dimension(&self) -> usize {
        2 * self.atom_count
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    pub fn first_site(&self) -> i64 {
        self.first_site
    }

    pub fn build_time(&self) -> f64 {
        self.build_time
    }

    /// `max |H - H^T|` relative to `max |H|`.
    pub fn symmetry_defect(&self) -> f64 {
        let m = &self.matrix;
        let dim = m.nrows();
        let mut scale = 0.0f64;
        let mut defect = 0.0f64;
        for r in 0..dim {
            for c in 0..dim {
                scale = scale.max(m[(r, c)].norm());
                if c > r {
                    defect = defect.max((m[(r, c)] - m[(c, r)]).norm());
                }
            }
        }
        if scale > 0.0 {
            defect / scale
        } else {
            defect
        }
    }

    /// `y = H x` using the dense matrix.
    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        let m = &self.matrix;
        let dim = m.nrows();
        for (r, out) in y.iter_mut().enumerate().take(dim) {
            let mut acc = Complex64::new(0.0, 0.0);
            for (c, xc) in x.iter().enumerate().take(dim) {
                acc += m[(r, c)] * xc;
            }
            *out = acc;
        }
    }
}

/// Off-diagonal part of `H` applied through circulant embedding of the two
/// Toeplitz blocks, `O(N log N)` per product.
#[derive(Clone)]
pub struct CouplingOperator {
    atom_count: usize,
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    same_spectrum: Vec<Complex64>,
    cross_spectrum: Vec<Complex64>,
}

impl std::fmt::Debug for CouplingOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CouplingOperator")
            .field("atom_count", &self.atom_count)
            .field("len", &self.len)
            .finish()
    }
}

/// Scratch buffers for [`CouplingOperator::apply`].
#[derive(Clone, Debug, Default)]
pub struct CouplingWork {
    plus: Vec<Complex64>,
    minus: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl CouplingOperator {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let n = params.atom_count;
        let len = (2 * n).next_power_of_two();
        let table = CouplingTable::new(params.k0a(), n.saturating_sub(1))?;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let embed = |values: &[Complex64]| {
            let mut col = vec![Complex64::new(0.0, 0.0); len];
            for d in 1..n {
                col[d] = values[d];
                col[len - d] = values[d];
            }
            forward.process(&mut col);
            let scale = 1.0 / len as f64;
            col.iter_mut().for_each(|z| *z *= scale);
            col
        };
        let same_spectrum = embed(&table.same);
        let cross_spectrum = embed(&table.cross);
        Ok(CouplingOperator {
            atom_count: n,
            len,
            forward,
            inverse,
            same_spectrum,
            cross_spectrum,
        })
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    /// `y = (H - diag H) x` for interleaved amplitudes `x`.
    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64], work: &mut CouplingWork) {
        let n = self.atom_count;
        let zero = Complex64::new(0.0, 0.0);
        if n < 2 {
            y.iter_mut().for_each(|v| *v = zero);
            return;
        }
        let len = self.len;
        work.plus.clear();
        work.plus.resize(len, zero);
        work.minus.clear();
        work.minus.resize(len, zero);
        work.scratch
            .resize(self.forward.get_inplace_scratch_len().max(self.inverse.get_inplace_scratch_len()), zero);
        for i in 0..n {
            work.plus[i] = x[2 * i];
            work.minus[i] = x[2 * i + 1];
        }
        self.forward.process_with_scratch(&mut work.plus, &mut work.scratch);
        self.forward.process_with_scratch(&mut work.minus, &mut work.scratch);
        for j in 0..len {
            let (p, m) = (work.plus[j], work.minus[j]);
            let (s, c) = (self.same_spectrum[j], self.cross_spectrum[j]);
            work.plus[j] = s * p + c * m;
            work.minus[j] = c * p + s * m;
        }
        self.inverse.process_with_scratch(&mut work.plus, &mut work.scratch);
        self.inverse.process_with_scratch(&mut work.minus, &mut work.scratch);
        for i in 0..n {
            y[2 * i] = work.plus[i];
            y[2 * i + 1] = work.minus[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // 50-digit evaluations of the closed forms.
    const PP_AT_ONE: (f64, f64) = (-0.72077834870406597805, -0.42848987390536998596);
    const PM_AT_ONE: (f64, f64) = (-1.351881587309988358, -0.023263144504265197913);
    const PP_NEAREST: (f64, f64) = (-2.2642398396137603109, -0.47094275074591031336);
    const PM_NEAREST: (f64, f64) = (-4.8613337133394664389, -0.009594326554772390273);

    fn rel_err(z: Complex64, (re, im): (f64, f64)) -> f64 {
        let w = Complex64::new(re, im);
        (z - w).norm() / w.norm()
    }

    #[test]
    fn closed_forms_match_high_precision() {
        let nearest = TAU * 0.1;
        assert!(rel_err(green_pp(1.0).unwrap(), PP_AT_ONE) < 1e-14);
        assert!(rel_err(green_pm(1.0).unwrap(), PM_AT_ONE) < 1e-14);
        assert!(rel_err(green_pp(nearest).unwrap(), PP_NEAREST) < 1e-14);
        assert!(rel_err(green_pm(nearest).unwrap(), PM_NEAREST) < 1e-14);
    }

    #[test]
    fn far_field_law() {
        let rho = 1e6;
        assert!((green_pp(rho).unwrap().norm() * rho - 0.375).abs() < 1e-5);
        assert!((green_pm(rho).unwrap().norm() * rho - 0.375).abs() < 1e-5);
    }

    #[test]
    fn near_field_scaling() {
        for rho in [1e-3, 2e-3, 5e-3] {
            let pp = green_pp(rho).unwrap().norm() * rho.powi(3);
            let pm = green_pm(rho).unwrap().norm() * rho.powi(3);
            assert!((pp - 0.375).abs() < 1e-2, "{pp}");
            assert!((pm - 1.125).abs() < 1e-2, "{pm}");
        }
    }

    #[test]
    fn arm_symmetric_couplings() {
        for rho in [0.2 * std::f64::consts::PI, std::f64::consts::PI, 7.3] {
            assert_eq!(green_pp(rho).unwrap(), green_mm(rho).unwrap());
            assert_eq!(green_pm(rho).unwrap(), green_mp(rho).unwrap());
        }
    }

    #[test]
    fn coupling_ratio() {
        let rho: f64 = 2.0;
        let ratio = green_pm(rho).unwrap() / green_pp(rho).unwrap();
        let expected = -Complex64::new(rho * rho - 3.0, 3.0 * rho) / Complex64::new(rho * rho + 1.0, -rho);
        assert!((ratio - expected).norm() < 1e-12);
    }

    #[test]
    fn imaginary_parts_approach_self_decay() {
        // Im g_{++} -> -1/2 and Im g_{+-} -> 0 as the atoms merge.
        let rho = 1e-3;
        assert!((green_pp(rho).unwrap().im + 0.5).abs() < 1e-6);
        assert!(green_pm(rho).unwrap().im.abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_distance() {
        assert!(matches!(green_pp(0.0), Err(Error::Domain(_))));
        assert!(matches!(green_pm(-1.0), Err(Error::Domain(_))));
        assert!(matches!(green_pp(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn static_field_is_linear() {
        let params = ModelParams::default();
        let schedule = FieldSchedule::constant(0.2);
        let field = schedule.field_at(&params, 3.0);
        for (b, n) in field.iter().zip(params.site_indices()) {
            assert_eq!(*b, 0.2 * n as f64);
        }
    }

    #[test]
    fn ramp_interpolates_and_clamps() {
        let s = FieldSchedule::new(0.2, vec![(0.0, 0.0), (20.0, 30.0)]).unwrap();
        assert_eq!(s.zero_point(10.0), 15.0);
        assert_eq!(s.zero_point(-5.0), 0.0);
        assert_eq!(s.zero_point(100.0), 30.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(FieldSchedule::new(0.2, vec![]).is_err());
        assert!(FieldSchedule::new(0.2, vec![(0.0, 0.0), (0.0, 1.0)]).is_err());
        assert!(FieldSchedule::new(0.2, vec![(1.0, 0.0), (0.5, 1.0)]).is_err());
    }

    #[test]
    fn segments_split_at_breakpoints() {
        let s = FieldSchedule::new(0.2, vec![(0.0, 0.0), (20.0, 30.0), (180.0, 30.0), (200.0, 0.0)]).unwrap();
        let segs = s.segments(10.0, 250.0);
        assert_eq!(segs.len(), 4);
        assert_eq!(segs[0].constant_zero_point, None);
        assert_eq!(segs[1].constant_zero_point, Some(30.0));
        assert_eq!(segs[2].constant_zero_point, None);
        assert_eq!(segs[3].constant_zero_point, Some(0.0));
        assert_eq!((segs[3].start, segs[3].end), (200.0, 250.0));
    }

    #[test]
    fn site_labels() {
        let odd = ModelParams { atom_count: 201, ..Default::default() };
        assert_eq!(odd.first_site(), -100);
        assert_eq!(*odd.site_indices().last().unwrap(), 100);
        let even = ModelParams { atom_count: 4, ..Default::default() };
        assert_eq!(even.site_indices(), vec![-2, -1, 0, 1]);
    }

    #[test]
    fn single_atom_hamiltonian() {
        let params = ModelParams { atom_count: 1, ..Default::default() };
        let h = build_hamiltonian(&params, &[0.0]).unwrap();
        let m = h.matrix();
        assert_eq!(m[(0, 0)], Complex64::new(0.0, -0.5));
        assert_eq!(m[(1, 1)], Complex64::new(0.0, -0.5));
        assert_eq!(m[(0, 1)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn zeeman_diagonal_and_symmetry() {
        let params = ModelParams::default();
        let h = EffectiveHamiltonian::from_schedule(&params, &FieldSchedule::constant(0.2), 0.0).unwrap();
        let m = h.matrix();
        for (i, n) in params.site_indices().into_iter().enumerate() {
            let split = m[(2 * i, 2 * i)] - m[(2 * i + 1, 2 * i + 1)];
            assert!((split.re - 0.4 * n as f64).abs() < 1e-12);
            assert_eq!(m[(2 * i, 2 * i)].im, -0.5);
            assert_eq!(m[(2 * i + 1, 2 * i + 1)].im, -0.5);
        }
        assert!(h.symmetry_defect() <= SYMMETRY_TOLERANCE);
    }

    #[test]
    fn field_length_mismatch() {
        let params = ModelParams { atom_count: 5, ..Default::default() };
        assert!(matches!(build_hamiltonian(&params, &[0.0; 4]), Err(Error::Config { .. })));
    }

    #[test]
    fn fft_coupling_matches_dense() {
        for n in [1usize, 2, 7, 50] {
            let params = ModelParams { atom_count: n, ..Default::default() };
            let h = build_hamiltonian(&params, &vec![0.0; n]).unwrap();
            let op = CouplingOperator::new(&params).unwrap();
            let x: Vec<Complex64> = (0..2 * n)
                .map(|j| Complex64::new((j as f64 * 0.37).sin(), (j as f64 * 1.3).cos()))
                .collect();
            let mut dense = vec![Complex64::new(0.0, 0.0); 2 * n];
            let mut fast = dense.clone();
            h.apply(&x, &mut dense);
            for (j, d) in dense.iter_mut().enumerate() {
                *d -= Complex64::new(0.0, -0.5) * x[j];
            }
            op.apply(&x, &mut fast, &mut CouplingWork::default());
            let err = dense.iter().zip(&fast).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "n={n} err={err}");
        }
    }
}
