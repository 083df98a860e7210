//! Two-band Bloch spectrum of the infinite array, obtained by truncated
//! real-space summation of the couplings.
//!
//! Plain truncation converges slowly near the light-cone edge `|k| = k0`, where
//! the far-field tail of the couplings is resonant. Values there are exported
//! but should not be trusted.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{CouplingTable, ModelParams};

/// Eigenvalue separation below which a Bloch point is flagged degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;

/// Default number of points in a band scan over the first Brillouin zone.
pub const DEFAULT_GRID_POINTS: usize = 1001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    I,
    II,
}

impl Band {
    pub fn label(self) -> &'static str {
        match self {
            Band::I => "I",
            Band::II => "II",
        }
    }
}

/// Coupling tables up to the sum cutoff, reusable across momenta and fields.
#[derive(Clone, Debug)]
pub struct BlochSums {
    k0a: f64,
    zone_edge: f64,
    table: CouplingTable,
}

impl BlochSums {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(BlochSums {
            k0a: params.k0a(),
            zone_edge: params.zone_edge(),
            table: CouplingTable::new(params.k0a(), params.sum_cutoff)?,
        })
    }

    pub fn cutoff(&self) -> usize {
        self.table.max_distance()
    }

    /// `(Sigma_{++}(k), Sigma_{+-}(k))` for `k` in units of `k0`.
    pub fn sigma(&self, k: f64) -> (Complex64, Complex64) {
        let phase = k * self.k0a;
        let mut same = Complex64::new(0.0, 0.0);
        let mut cross = Complex64::new(0.0, 0.0);
        for d in 1..=self.cutoff() {
            let w = 2.0 * (phase * d as f64).cos();
            same += self.table.same[d] * w;
            cross += self.table.cross[d] * w;
        }
        (same, cross)
    }

    pub fn matrix(&self, k: f64, constant_field: f64) -> Result<BlochMatrix> {
        if !(k.is_finite() && k.abs() <= self.zone_edge * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!(
                "k = {k} k0 lies outside the first Brillouin zone [-{e}, {e}]",
                e = self.zone_edge
            )));
        }
        let (same, cross) = self.sigma(k);
        Ok(BlochMatrix {
            k,
            sigma_same: same,
            sigma_cross: cross,
            constant_field,
            cutoff_used: self.cutoff(),
        })
    }
}

/// Bloch Hamiltonian `Sigma(k) + diag(-i/2 + b_c, -i/2 - b_c)` in the
/// `(|+>, |->)` basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlochMatrix {
    pub k: f64,
    pub sigma_same: Complex64,
    pub sigma_cross: Complex64,
    pub constant_field: f64,
    pub cutoff_used: usize,
}

impl BlochMatrix {
    pub fn with_field(mut self, constant_field: f64) -> Self {
        self.constant_field = constant_field;
        self
    }

    pub fn entries(&self) -> [[Complex64; 2]; 2] {
        let base = self.sigma_same + Complex64::new(0.0, -0.5);
        [
            [base + self.constant_field, self.sigma_cross],
            [self.sigma_cross, base - self.constant_field],
        ]
    }
}

/// Evaluate the Bloch matrix at `k` with the params' cutoff and constant field.
pub fn bloch_sum(params: &ModelParams, k: f64) -> Result<BlochMatrix> {
    BlochSums::new(params)?.matrix(k, params.constant_field)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPoint {
    pub k: f64,
    pub band: Band,
    /// Real part: dispersion relative to the atomic line; `-2 Im` is the decay rate.
    pub eigenvalue: Complex64,
    /// Euclidean-normalised right eigenvector `(v_+, v_-)`.
    pub eigenvector: [Complex64; 2],
    pub p_plus: f64,
    pub p_minus: f64,
    pub degenerate: bool,
}

impl BandPoint {
    pub fn decay_rate(&self) -> f64 {
        -2.0 * self.eigenvalue.im
    }
}

fn normalized(v: [Complex64; 2]) -> [Complex64; 2] {
    let norm = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
    [v[0] / norm, v[1] / norm]
}

fn eigenvector(m: &[[Complex64; 2]; 2], lambda: Complex64, fallback: usize) -> [Complex64; 2] {
    let u = [m[0][1], lambda - m[0][0]];
    let w = [lambda - m[1][1], m[1][0]];
    let nu = u[0].norm_sqr() + u[1].norm_sqr();
    let nw = w[0].norm_sqr() + w[1].norm_sqr();
    let scale = m.iter().flatten().map(|z| z.norm_sqr()).fold(0.0, f64::max);
    if nu.max(nw) <= 1e-28 * scale.max(1e-300) {
        // Scalar matrix: any basis diagonalises it.
        let mut e = [Complex64::new(0.0, 0.0); 2];
        e[fallback] = Complex64::new(1.0, 0.0);
        return e;
    }
    normalized(if nu >= nw { u } else { w })
}

/// Diagonalise the 2x2 Bloch matrix and label the branches: band I has the
/// lower real part; exact ties are broken by the imaginary part.
pub fn band_eigs(bm: &BlochMatrix) -> (BandPoint, BandPoint) {
    let m = bm.entries();
    let mean = (m[0][0] + m[1][1]) * 0.5;
    let half = (m[0][0] - m[1][1]) * 0.5;
    let root = (half * half + m[0][1] * m[1][0]).sqrt();
    let (mut lo, mut hi) = (mean - root, mean + root);
    let degenerate = (hi - lo).norm() < DEGENERACY_THRESHOLD;
    if (lo.re, lo.im) > (hi.re, hi.im) {
        std::mem::swap(&mut lo, &mut hi);
    }
    let v_lo = eigenvector(&m, lo, 1);
    let mut v_hi = eigenvector(&m, hi, 0);
    if degenerate && v_lo == v_hi {
        v_hi = [-v_lo[1].conj(), v_lo[0].conj()];
    }
    let point = |band, eigenvalue, v: [Complex64; 2]| BandPoint {
        k: bm.k,
        band,
        eigenvalue,
        eigenvector: v,
        p_plus: v[0].norm_sqr(),
        p_minus: v[1].norm_sqr(),
        degenerate,
    };
    (point(Band::I, lo, v_lo), point(Band::II, hi, v_hi))
}

/// `count` points spanning `[-half_width, half_width]`, exactly symmetric
/// under `k -> -k`.
pub fn symmetric_grid(half_width: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => {
            let span = (count - 1) as f64;
            (0..count)
                .map(|i| half_width * (2.0 * i as f64 - span) / span)
                .collect()
        }
    }
}

/// Band pairs along a momentum grid at one constant field.
#[derive(Clone, Debug)]
pub struct BandTable {
    pub constant_field: f64,
    pub cutoff: usize,
    pub points: Vec<(BandPoint, BandPoint)>,
}

impl BandTable {
    pub fn gaps(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|(lo, hi)| (hi.eigenvalue - lo.eigenvalue).norm())
            .collect()
    }

    /// Grid indices of the `count` smallest local minima of the band gap.
    pub fn gap_minima(&self, count: usize) -> Vec<usize> {
        let gaps = self.gaps();
        let n = gaps.len();
        let mut minima: Vec<usize> = (0..n)
            .filter(|&i| {
                let left = i == 0 || gaps[i] <= gaps[i - 1];
                let right = i + 1 == n || gaps[i] <= gaps[i + 1];
                left && right
            })
            .collect();
        minima.sort_by(|&a, &b| gaps[a].total_cmp(&gaps[b]));
        minima.truncate(count);
        minima
    }

    /// Smallest overlap `|v_k^H v_{k+dk}|` between neighbouring eigenvectors of
    /// the same band, skipping points whose `|k|` lies within `exclude` of the
    /// light-cone edge.
    pub fn min_label_overlap(&self, exclude: f64) -> f64 {
        let mut worst = 1.0f64;
        for w in self.points.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if (a.0.k.abs() - 1.0).abs() < exclude || (b.0.k.abs() - 1.0).abs() < exclude {
                continue;
            }
            for (x, y) in [(&a.0, &b.0), (&a.1, &b.1)] {
                let overlap = (x.eigenvector[0].conj() * y.eigenvector[0]
                    + x.eigenvector[1].conj() * y.eigenvector[1])
                    .norm();
                worst = worst.min(overlap);
            }
        }
        worst
    }

    /// CSV with columns `k_over_k0,band,re_ev,decay_rate,p_plus,p_minus`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k_over_k0,band,re_ev,decay_rate,p_plus,p_minus")?;
        for pair in &self.points {
            for p in [&pair.0, &pair.1] {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    p.k,
                    p.band.label(),
                    p.eigenvalue.re,
                    p.decay_rate(),
                    p.p_plus,
                    p.p_minus
                )?;
            }
        }
        Ok(())
    }
}

/// Band structure at `params.constant_field` over `k_grid` (units of `k0`).
pub fn band_scan(params: &ModelParams, k_grid: &[f64]) -> Result<BandTable> {
    let sums = BlochSums::new(params)?;
    scan_with(&sums, params.constant_field, k_grid)
}

/// Band structures for several constant fields, sharing the lattice sums.
pub fn band_scans(params: &ModelParams, fields: &[f64], k_grid: &[f64]) -> Result<Vec<BandTable>> {
    let sums = BlochSums::new(params)?;
    let matrices: Vec<BlochMatrix> = k_grid
        .par_iter()
        .map(|&k| sums.matrix(k, 0.0))
        .collect::<Result<_>>()?;
    Ok(fields
        .iter()
        .map(|&b| BandTable {
            constant_field: b,
            cutoff: sums.cutoff(),
            points: matrices.iter().map(|m| band_eigs(&m.with_field(b))).collect(),
        })
        .collect())
}

fn scan_with(sums: &BlochSums, field: f64, k_grid: &[f64]) -> Result<BandTable> {
    let points = k_grid
        .par_iter()
        .map(|&k| sums.matrix(k, field).map(|m| band_eigs(&m)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BandTable {
        constant_field: field,
        cutoff: sums.cutoff(),
        points,
    })
}
