//! Split-step scheme for the scaled problem, working with `e^(-v)`.
//!
//! Each backward step first applies the fill dynamics exactly (a linear
//! system in the variable `w = e^(-kappa s q) e^(-kappa v)`, which couples
//! neighbouring inventories through a path-graph generator), then the price
//! dynamics by conditional expectation over one OU step on the price grid.
//! Surfaces are renormalized after every step and the discarded scale is
//! accumulated so `v` can be reconstructed.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::Write;

use crate::error::{Error, Result};
use crate::lattice::{BoundaryMode, Lattice, ValueSurface};
use crate::linalg::{expm_scaling_squaring, Dense};
use crate::model::{ou_moments_raw, DerivedConstants, HjbParams, ScaledParams};
use crate::policy::extract_policy;
use crate::solution::{growth_rate, SolveOutput, SolveStats};

/// Largest total-variation distance between the chain's stationary law and
/// the binned OU law accepted by [`build_transition_matrix`].
pub const TV_THRESHOLD: f64 = 1e-3;

/// Smallest positive normal double; anything below counts as underflow.
const TINY: f64 = f64::MIN_POSITIVE;

/// `e^(-v)` on the lattice, up to the factor `e^(-norm_log)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TildeSurface {
    pub tau: f64,
    pub q_cap: usize,
    pub n_s: usize,
    /// Row-major in `(q + q_cap, j)`.
    pub tilde_values: Vec<f64>,
    /// `v = -log(tilde) - norm_log`.
    pub norm_log: f64,
}

impl TildeSurface {
    pub fn from_values(v: &ValueSurface) -> Self {
        let shift = v.values.iter().copied().fold(f64::INFINITY, f64::min);
        TildeSurface {
            tau: v.tau,
            q_cap: v.q_cap,
            n_s: v.n_s,
            tilde_values: v.values.iter().map(|x| (-(x - shift)).exp()).collect(),
            norm_log: -shift,
        }
    }

    pub fn to_values(&self) -> ValueSurface {
        ValueSurface {
            tau: self.tau,
            q_cap: self.q_cap,
            n_s: self.n_s,
            values: self.tilde_values.iter().map(|t| -t.ln() - self.norm_log).collect(),
            boundary_mode: BoundaryMode::InventoryCap,
        }
    }

    pub fn row(&self, q: i64) -> &[f64] {
        let start = (q + self.q_cap as i64) as usize * self.n_s;
        &self.tilde_values[start..start + self.n_s]
    }

    pub fn row_mut(&mut self, q: i64) -> &mut [f64] {
        let start = (q + self.q_cap as i64) as usize * self.n_s;
        &mut self.tilde_values[start..start + self.n_s]
    }

    pub fn all_positive(&self) -> bool {
        self.tilde_values.iter().all(|&t| t > 0.0 && t.is_finite())
    }
}

/// Row-stochastic OU transition matrix over the price cells, stored as one
/// contiguous window of columns per row. Entries outside the window are
/// below any weight that can matter for the surfaces on this lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub n_s: usize,
    pub dt: f64,
    pub s_min: f64,
    pub ds: f64,
    /// First column of each row's window.
    pub start: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

/// Probability that `N(mean, sd^2)` lands in `(lo, hi]`, computed on the
/// tail side so far-tail cells keep their relative precision.
fn cell_probability(lo: f64, hi: f64, mean: f64, sd: f64) -> f64 {
    let z = |x: f64| (x - mean) / sd * FRAC_1_SQRT_2;
    let upper = |x: f64| if x == f64::INFINITY { 0.0 } else { 0.5 * libm::erfc(z(x)) };
    let lower = |x: f64| if x == f64::NEG_INFINITY { 0.0 } else { 0.5 * libm::erfc(-z(x)) };
    if lo >= mean {
        upper(lo) - upper(hi)
    } else if hi <= mean {
        lower(hi) - lower(lo)
    } else {
        1.0 - upper(hi) - lower(lo)
    }
}

/// Cell probabilities of `N(mean, sd^2)` over the whole grid, end cells
/// absorbing the tails.
fn binned_normal(n_s: usize, s_min: f64, ds: f64, mean: f64, sd: f64) -> Vec<f64> {
    if sd == 0.0 {
        let mut out = vec![0.0; n_s];
        out[nearest_cell(n_s, s_min, ds, mean)] = 1.0;
        return out;
    }
    (0..n_s)
        .map(|j| {
            let (lo, hi) = cell_bounds(n_s, s_min, ds, j);
            cell_probability(lo, hi, mean, sd)
        })
        .collect()
}

fn cell_bounds(n_s: usize, s_min: f64, ds: f64, j: usize) -> (f64, f64) {
    let centre = s_min + j as f64 * ds;
    let lo = if j == 0 { f64::NEG_INFINITY } else { centre - 0.5 * ds };
    let hi = if j + 1 == n_s { f64::INFINITY } else { centre + 0.5 * ds };
    (lo, hi)
}

fn nearest_cell(n_s: usize, s_min: f64, ds: f64, x: f64) -> usize {
    ((x - s_min) / ds).round().clamp(0.0, (n_s - 1) as f64) as usize
}

impl TransitionMatrix {
    /// Builds the matrix without the calibration check. `log_slope` bounds
    /// `|d log(e^(-v)) / ds|` on the surfaces it will be applied to and sets
    /// how far into the Gaussian tails the windows reach.
    pub fn assemble(lat: &Lattice, dt: f64, p: &ScaledParams, log_slope: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidLattice("transition dt must be > 0".into()));
        }
        let n = lat.n_s;
        let (_, var) = ou_moments_raw(0.0, dt, 1.0, p.mu, p.sigma);
        let sd = var.sqrt();
        // e^(-z^2/2 + L sd z) < e^(-40) beyond z_c
        let l_sd = log_slope * sd;
        let z_c = (l_sd + (l_sd * l_sd + 80.0).sqrt()).max(9.0);
        let reach = z_c * sd;

        let mut start = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let (mean, _) = ou_moments_raw(lat.s(i), dt, 1.0, p.mu, p.sigma);
            let (first, last) = if sd == 0.0 {
                let c = nearest_cell(n, lat.s_min, lat.ds, mean);
                (c, c)
            } else {
                let f = ((mean - reach - lat.s_min) / lat.ds).floor().max(0.0) as usize;
                let l = (((mean + reach - lat.s_min) / lat.ds).ceil().max(0.0) as usize).min(n - 1);
                (f.min(n - 1), l)
            };
            let mut row: Vec<f64> = (first..=last)
                .map(|j| {
                    if sd == 0.0 {
                        return 1.0;
                    }
                    let (mut lo, mut hi) = cell_bounds(n, lat.s_min, lat.ds, j);
                    // the window's end cells absorb the truncated tails
                    if j == first {
                        lo = f64::NEG_INFINITY;
                    }
                    if j == last {
                        hi = f64::INFINITY;
                    }
                    cell_probability(lo, hi, mean, sd)
                })
                .collect();
            let total: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= total;
            }
            start.push(first);
            rows.push(row);
        }
        Ok(TransitionMatrix { n_s: n, dt, s_min: lat.s_min, ds: lat.ds, start, rows })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let first = self.start[i];
        if j < first {
            return 0.0;
        }
        self.rows[i].get(j - first).copied().unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Dense {
        let mut d = Dense::zeros(self.n_s);
        for (i, row) in self.rows.iter().enumerate() {
            for (k, &x) in row.iter().enumerate() {
                d.set(i, self.start[i] + k, x);
            }
        }
        d
    }

    /// `out = P x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let first = self.start[i];
            *o = self.rows[i].iter().zip(&x[first..]).map(|(p, v)| p * v).sum();
        }
    }

    /// `out = P^T x`.
    pub fn apply_transpose(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, row) in self.rows.iter().enumerate() {
            let first = self.start[i];
            for (k, p) in row.iter().enumerate() {
                out[first + k] += p * x[i];
            }
        }
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Dense CSV dump (`i,j,p` for nonzero entries).
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "i,j,p")?;
        for (i, row) in self.rows.iter().enumerate() {
            for (k, p) in row.iter().enumerate() {
                if *p != 0.0 {
                    writeln!(w, "{},{},{}", i, self.start[i] + k, p)?;
                }
            }
        }
        Ok(())
    }
}

/// Stationary-law comparison for a transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub tv_distance: f64,
    pub threshold: f64,
    pub flagged: bool,
    pub iterations: usize,
    /// Stationary vector of the chain.
    pub stationary: Vec<f64>,
    /// Binned stationary OU law.
    pub reference: Vec<f64>,
}

/// Power iteration on the transpose, then the total-variation distance to
/// the binned OU law. The iteration starts from the uniform law: a grid so
/// coarse that the chain barely moves would otherwise keep whatever
/// starting vector it was given and look calibrated.
pub fn calibrate_grid(tm: &TransitionMatrix, p: &ScaledParams) -> CalibrationReport {
    let sd = p.sigma * FRAC_1_SQRT_2;
    let reference = binned_normal(tm.n_s, tm.s_min, tm.ds, p.mu, sd);
    let mut pi = vec![1.0 / tm.n_s as f64; tm.n_s];
    let mut next = vec![0.0; tm.n_s];
    let max_iter = (200.0 / tm.dt).ceil() as usize;
    let tol = 1e-13 * tm.dt;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        tm.apply_transpose(&pi, &mut next);
        let total: f64 = next.iter().sum();
        let mut change: f64 = 0.0;
        for (a, b) in pi.iter_mut().zip(&next) {
            let x = b / total;
            change = change.max((x - *a).abs());
            *a = x;
        }
        if change <= tol {
            break;
        }
    }
    let tv = 0.5 * pi.iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum::<f64>();
    CalibrationReport {
        tv_distance: tv,
        threshold: TV_THRESHOLD,
        flagged: !(tv <= TV_THRESHOLD),
        iterations,
        stationary: pi,
        reference,
    }
}

/// Transition matrix for the lattice, rejected if its stationary law is
/// further than [`TV_THRESHOLD`] from the binned OU law.
pub fn build_transition_matrix(lat: &Lattice, dt: f64, p: &ScaledParams) -> Result<TransitionMatrix> {
    let tm = TransitionMatrix::assemble(lat, dt, p, default_log_slope(lat.q_cap))?;
    if p.sigma > 0.0 {
        let report = calibrate_grid(&tm, p);
        if report.flagged {
            return Err(Error::GridCalibration { tv: report.tv_distance, threshold: report.threshold });
        }
    }
    Ok(tm)
}

/// `e^(-v)` behaves like `e^(-q s)`, so its log-slope is about `|q|`; the
/// factor two leaves room for the price-dependent part of `v`.
fn default_log_slope(q_cap: usize) -> f64 {
    2.0 * q_cap as f64 + 1.0
}

/// One-step propagator `exp(dt * eta * adjacency)` of the inventory path
/// graph with `2 q_cap + 1` nodes.
#[derive(Debug, Clone)]
pub struct QPropagator {
    pub dt: f64,
    pub q_cap: usize,
    pub eta: f64,
    /// Eigenvalues `2 eta cos(k pi / (N + 1))`, `k = 1..N`.
    pub eigenvalues: Vec<f64>,
    dense: Dense,
}

impl QPropagator {
    pub fn new(q_cap: usize, dt: f64, eta: f64) -> Self {
        let n = 2 * q_cap + 1;
        let mut gen = Dense::zeros(n);
        for i in 0..n.saturating_sub(1) {
            gen.set(i, i + 1, dt * eta);
            gen.set(i + 1, i, dt * eta);
        }
        let eigenvalues = (1..=n)
            .map(|k| 2.0 * eta * (k as f64 * PI / (n + 1) as f64).cos())
            .collect();
        QPropagator { dt, q_cap, eta, eigenvalues, dense: expm_scaling_squaring(&gen) }
    }

    pub fn dim(&self) -> usize {
        2 * self.q_cap + 1
    }

    /// The propagator as a dense matrix. It is summed from a series of
    /// nonnegative terms, so even its smallest entries are accurate.
    pub fn matrix(&self) -> &Dense {
        &self.dense
    }

    /// The same propagator from the sine eigenbasis of the path graph.
    pub fn spectral_matrix(&self) -> Dense {
        let n = self.dim();
        let norm = 2.0 / (n + 1) as f64;
        let mut out = Dense::zeros(n);
        for (k, lambda) in self.eigenvalues.iter().enumerate() {
            let e = (self.dt * lambda).exp();
            let mode: Vec<f64> = (1..=n)
                .map(|i| (i as f64 * (k + 1) as f64 * PI / (n + 1) as f64).sin())
                .collect();
            for i in 0..n {
                for j in 0..n {
                    let x = out.get(i, j) + norm * e * mode[i] * mode[j];
                    out.set(i, j, x);
                }
            }
        }
        out
    }
}

/// Applies the fill dynamics for one step. Works column by column in log
/// space and folds a global rescaling into `norm_log`.
pub fn q_evolution_step(
    tv: &mut TildeSurface,
    qp: &QPropagator,
    lat: &Lattice,
    kappa: f64,
    step: usize,
) -> Result<()> {
    let n = tv.n_s;
    let qc = tv.q_cap as i64;
    let dim = qp.dim();
    if dim == 1 {
        return Ok(());
    }
    let m = qp.matrix();
    let mut log_w = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut w_new = vec![0.0; dim];
    let mut log_tilde = vec![0.0; tv.tilde_values.len()];
    for j in 0..n {
        let s = lat.s(j);
        let mut top = f64::NEG_INFINITY;
        for (k, q) in (-qc..=qc).enumerate() {
            let t = tv.tilde_values[k * n + j];
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Underflow {
                    step,
                    detail: format!("e^(-v) = {t} at q={q}, j={j} before the fill step"),
                });
            }
            log_w[k] = -kappa * s * q as f64 - kappa * t.ln();
            top = top.max(log_w[k]);
        }
        for k in 0..dim {
            w[k] = (log_w[k] - top).exp();
        }
        m.matvec(&w, &mut w_new);
        for (k, q) in (-qc..=qc).enumerate() {
            if !(w_new[k] > 0.0) {
                return Err(Error::Underflow {
                    step,
                    detail: format!("w vanished at q={q}, j={j}"),
                });
            }
            log_tilde[k * n + j] = -s * q as f64 - (w_new[k].ln() + top) / kappa;
        }
    }
    let shift = log_tilde.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (t, l) in tv.tilde_values.iter_mut().zip(&log_tilde) {
        let x = l - shift;
        if x < -700.0 {
            return Err(Error::Underflow {
                step,
                detail: format!(
                    "e^(-v) spans more than e^700 across the lattice; the finite-difference solver handles this range"
                ),
            });
        }
        *t = x.exp();
    }
    tv.norm_log += shift;
    Ok(())
}

/// Conditional expectation over one OU step, per inventory row.
pub fn s_evolution_step(tv: &mut TildeSurface, tm: &TransitionMatrix) {
    let n = tv.n_s;
    let mut out = vec![0.0; n];
    for row in tv.tilde_values.chunks_mut(n) {
        tm.apply(row, &mut out);
        row.copy_from_slice(&out);
    }
}

/// Divides by the largest entry and records its log.
pub fn normalize(tv: &mut TildeSurface) {
    let c = tv.tilde_values.iter().copied().fold(0.0, f64::max);
    if c > 0.0 && c.is_finite() && c != 1.0 {
        for t in tv.tilde_values.iter_mut() {
            *t /= c;
        }
        tv.norm_log += c.ln();
    }
}

/// Backward solve of the scaled problem from the terminal condition,
/// retaining surfaces at the lattice's snapshot steps.
pub fn splitstep_solve(p: &ScaledParams, lat: &Lattice) -> Result<SolveOutput> {
    let hjb = HjbParams::scaled(p);
    let tm = build_transition_matrix(lat, lat.dt, p)?;
    let eta = DerivedConstants::scaled(p).eta_q;
    let qp = QPropagator::new(lat.q_cap, lat.dt, eta);

    let terminal = crate::lattice::terminal_condition(lat, BoundaryMode::InventoryCap);
    let mut tv = TildeSurface::from_values(&terminal);
    let mut snapshots = Vec::new();
    let mut pending = lat.snapshot_steps.iter().peekable();
    if pending.peek() == Some(&&0) {
        snapshots.push(terminal.clone());
        pending.next();
    }
    let mut prev: Option<ValueSurface> = None;
    for step in 1..=lat.n_t {
        q_evolution_step(&mut tv, &qp, lat, p.kappa, step)?;
        s_evolution_step(&mut tv, &tm);
        normalize(&mut tv);
        if !tv.all_positive() || tv.tilde_values.iter().any(|&t| t < TINY) {
            return Err(Error::Underflow {
                step,
                detail: "e^(-v) left the normal floating-point range".into(),
            });
        }
        tv.tau = step as f64 * lat.dt;
        if step + 1 == lat.n_t {
            prev = Some(tv.to_values());
        }
        if pending.peek() == Some(&&step) {
            snapshots.push(tv.to_values());
            pending.next();
        }
    }
    let v_tau_estimate = match (&prev, lat.n_t) {
        (_, 0) => None,
        (Some(pv), _) => Some(growth_rate(lat, p.mu, pv, snapshots.last().unwrap())),
        // a single step: the previous surface is the terminal one
        (None, _) => Some(growth_rate(lat, p.mu, &terminal, snapshots.last().unwrap())),
    };
    let policies = snapshots.iter().map(|s| extract_policy(s, lat, &hjb)).collect();
    Ok(SolveOutput {
        snapshots,
        policies,
        v_tau_estimate,
        stats: SolveStats { steps: lat.n_t, ..Default::default() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, terminal_condition, LatticeSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn medium() -> ScaledParams {
        ScaledParams { a: 2.0, kappa: 0.75, sigma: 0.8, mu: 2.0, horizon: 1.0 }
    }

    fn lattice(n_s: usize, q_cap: usize, dt: f64, horizon: f64) -> Lattice {
        build_lattice(
            &HjbParams::scaled(&medium()),
            &LatticeSpec { n_s, q_cap, dt, horizon, ..Default::default() },
        )
        .unwrap()
    }

    fn taylor(a: &Dense, terms: usize) -> Dense {
        let mut out = Dense::identity(a.n);
        let mut term = Dense::identity(a.n);
        for k in 1..=terms {
            term = term.matmul(a);
            term.data.iter_mut().for_each(|x| *x /= k as f64);
            for (o, t) in out.data.iter_mut().zip(&term.data) {
                *o += t;
            }
        }
        out
    }

    #[test]
    fn propagator_matches_taylor_series() {
        let (dt, eta) = (0.01, 1.3);
        let qp = QPropagator::new(1, dt, eta);
        let mut gen = Dense::zeros(3);
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            gen.set(i, j, dt * eta);
        }
        let reference = taylor(&gen, 20);
        assert!(qp.matrix().max_abs_diff(&reference) <= 1e-12);
        assert!(qp.spectral_matrix().max_abs_diff(&reference) <= 1e-12);
    }

    #[test]
    fn spectral_and_dense_agree_up_to_dimension_63() {
        for q_cap in [1, 5, 15, 31] {
            let qp = QPropagator::new(q_cap, 0.05, 0.9);
            assert!(qp.spectral_matrix().max_abs_diff(qp.matrix()) <= 1e-12, "q_cap {q_cap}");
            let ones = vec![1.0; qp.dim()];
            let mut out = vec![0.0; qp.dim()];
            qp.matrix().matvec(&ones, &mut out);
            assert!(out.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn single_inventory_state_is_untouched_by_fills() {
        let lat = lattice(11, 1, 0.1, 0.1);
        let mut tv = TildeSurface::from_values(&terminal_condition(&lat, BoundaryMode::InventoryCap));
        let mut single = TildeSurface {
            q_cap: 0,
            tilde_values: tv.row(0).to_vec(),
            ..tv.clone()
        };
        let before = single.clone();
        q_evolution_step(&mut single, &QPropagator::new(0, 0.1, 2.0), &lat, 0.75, 1).unwrap();
        assert_eq!(single, before);
        // and a zero generator leaves v unchanged on a full surface
        let v0 = tv.to_values();
        q_evolution_step(&mut tv, &QPropagator::new(1, 0.1, 0.0), &lat, 0.75, 1).unwrap();
        assert!(tv.to_values().max_abs_diff(&v0) < 1e-12);
    }

    #[test]
    fn transition_rows_are_stochastic_and_nonnegative() {
        let lat = lattice(201, 10, 0.01, 0.1);
        let tm = TransitionMatrix::assemble(&lat, 0.01, &medium(), 21.0).unwrap();
        assert!(tm.max_row_sum_error() <= 1e-12);
        assert!(tm.rows.iter().flatten().all(|&p| p >= 0.0));
    }

    #[test]
    fn long_steps_forget_the_starting_cell() {
        let lat = lattice(81, 2, 0.01, 0.1);
        let tm = TransitionMatrix::assemble(&lat, 40.0, &medium(), 5.0).unwrap();
        let d = tm.to_dense();
        for i in 1..81 {
            for j in 0..81 {
                assert!((d.get(i, j) - d.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanishing_noise_moves_mass_to_the_drifted_cell() {
        let p = ScaledParams { sigma: 1e-9, ..medium() };
        let lat = lattice(41, 2, 0.01, 0.1);
        let tm = TransitionMatrix::assemble(&lat, 0.05, &p, 5.0).unwrap();
        for i in 0..41 {
            let (mean, _) = ou_moments_raw(lat.s(i), 0.05, 1.0, p.mu, p.sigma);
            let cell = nearest_cell(41, lat.s_min, lat.ds, mean);
            assert!(tm.get(i, cell) > 1.0 - 1e-9);
        }
    }

    #[test]
    fn calibration_passes_on_fine_grids_and_flags_coarse_ones() {
        let p = medium();
        let fine = lattice(801, 2, 0.01, 0.1);
        let report = calibrate_grid(&TransitionMatrix::assemble(&fine, 0.01, &p, 5.0).unwrap(), &p);
        assert!(report.tv_distance < 1e-3, "tv {}", report.tv_distance);
        assert!(!report.flagged);

        let coarse = lattice(5, 2, 0.01, 0.1);
        let report = calibrate_grid(&TransitionMatrix::assemble(&coarse, 0.01, &p, 5.0).unwrap(), &p);
        assert!(report.flagged, "tv {}", report.tv_distance);
        assert!(matches!(
            build_transition_matrix(&coarse, 0.01, &p),
            Err(Error::GridCalibration { .. })
        ));
    }

    #[test]
    fn calibration_ignores_where_the_mean_sits() {
        let p = medium();
        let shifted = ScaledParams { mu: -7.25, ..p };
        let a = lattice(101, 2, 0.05, 0.1);
        let b = build_lattice(
            &HjbParams::scaled(&shifted),
            &LatticeSpec { n_s: 101, q_cap: 2, dt: 0.05, horizon: 0.1, ..Default::default() },
        )
        .unwrap();
        let ra = calibrate_grid(&TransitionMatrix::assemble(&a, 0.05, &p, 5.0).unwrap(), &p);
        let rb = calibrate_grid(&TransitionMatrix::assemble(&b, 0.05, &shifted, 5.0).unwrap(), &shifted);
        assert_relative_eq!(ra.tv_distance, rb.tv_distance, max_relative = 1e-6);
    }

    #[test]
    fn stationary_vector_is_a_fixed_point_of_the_transpose() {
        let p = medium();
        let lat = lattice(201, 2, 0.05, 0.1);
        let tm = TransitionMatrix::assemble(&lat, 0.05, &p, 5.0).unwrap();
        let report = calibrate_grid(&tm, &p);
        let mut out = vec![0.0; 201];
        tm.apply_transpose(&report.stationary, &mut out);
        for (a, b) in out.iter().zip(&report.stationary) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_rows_survive_the_price_step() {
        let lat = lattice(101, 2, 0.01, 0.1);
        let tm = TransitionMatrix::assemble(&lat, 0.01, &medium(), 5.0).unwrap();
        let mut tv = TildeSurface {
            tau: 0.0,
            q_cap: 2,
            n_s: 101,
            tilde_values: vec![0.25; 5 * 101],
            norm_log: 0.0,
        };
        s_evolution_step(&mut tv, &tm);
        assert!(tv.tilde_values.iter().all(|&t| (t - 0.25).abs() < 1e-15));
    }

    #[test]
    fn normalizing_is_idempotent_and_keeps_policies() {
        let p = medium();
        let lat = lattice(401, 3, 0.02, 0.2);
        let out = splitstep_solve(&p, &lat).unwrap();
        let mut tv = TildeSurface::from_values(out.final_surface());
        for t in tv.tilde_values.iter_mut() {
            *t *= 0.37;
        }
        let before = extract_policy(&tv.to_values(), &lat, &HjbParams::scaled(&p));
        normalize(&mut tv);
        let once = tv.clone();
        normalize(&mut tv);
        assert_eq!(tv, once);
        let after = extract_policy(&tv.to_values(), &lat, &HjbParams::scaled(&p));
        for (a, b) in before.ask_price.iter().zip(&after.ask_price) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unnormalized_run_recovers_the_same_values() {
        let p = medium();
        let lat = lattice(61, 3, 0.02, 0.2);
        let tm = build_transition_matrix(&lat, lat.dt, &p).unwrap_or_else(|_| {
            TransitionMatrix::assemble(&lat, lat.dt, &p, 7.0).unwrap()
        });
        let qp = QPropagator::new(3, lat.dt, DerivedConstants::scaled(&p).eta_q);
        let start = TildeSurface::from_values(&terminal_condition(&lat, BoundaryMode::InventoryCap));
        let mut a = start.clone();
        let mut b = start;
        for step in 1..=lat.n_t {
            q_evolution_step(&mut a, &qp, &lat, p.kappa, step).unwrap();
            s_evolution_step(&mut a, &tm);
            normalize(&mut a);
            q_evolution_step(&mut b, &qp, &lat, p.kappa, step).unwrap();
            s_evolution_step(&mut b, &tm);
        }
        assert!(a.to_values().max_abs_diff(&b.to_values()) <= 1e-10);
    }

    #[test]
    fn without_fills_the_scheme_is_pure_price_smoothing() {
        let p = ScaledParams { a: 0.0, ..medium() };
        let lat = lattice(61, 2, 0.05, 0.1);
        let tm = TransitionMatrix::assemble(&lat, 0.05, &p, 5.0).unwrap();
        let qp = QPropagator::new(2, 0.05, 0.0);
        let v0 = terminal_condition(&lat, BoundaryMode::InventoryCap);
        let mut tv = TildeSurface::from_values(&v0);
        q_evolution_step(&mut tv, &qp, &lat, p.kappa, 1).unwrap();
        s_evolution_step(&mut tv, &tm);
        let v = tv.to_values();
        for q in -2..=2i64 {
            let row: Vec<f64> = (0..61).map(|j| (-(q as f64) * lat.s(j)).exp()).collect();
            let mut expect = vec![0.0; 61];
            tm.apply(&row, &mut expect);
            for j in 0..61 {
                assert_relative_eq!(v.get(q, j), -expect[j].ln(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn halving_dt_converges_at_first_order() {
        // ds shrinks with dt so the binning error stays first order as well
        let p = medium();
        let run = |dt: f64, cells: usize| {
            let lat = lattice(cells + 1, 4, dt, 0.4);
            let tm = TransitionMatrix::assemble(&lat, dt, &p, 9.0).unwrap();
            let qp = QPropagator::new(4, dt, DerivedConstants::scaled(&p).eta_q);
            let mut tv = TildeSurface::from_values(&terminal_condition(&lat, BoundaryMode::InventoryCap));
            for step in 1..=lat.n_t {
                q_evolution_step(&mut tv, &qp, &lat, p.kappa, step).unwrap();
                s_evolution_step(&mut tv, &tm);
                normalize(&mut tv);
            }
            tv.to_values()
        };
        let (a, b, c) = (run(0.04, 80), run(0.02, 160), run(0.01, 320));
        let mut d_ab: f64 = 0.0;
        let mut d_bc: f64 = 0.0;
        for q in -2..=2i64 {
            for j in 20..=60 {
                d_ab = d_ab.max((a.get(q, j) - b.get(q, 2 * j)).abs());
                d_bc = d_bc.max((b.get(q, 2 * j) - c.get(q, 4 * j)).abs());
            }
        }
        let ratio = d_ab / d_bc;
        assert!(ratio > 1.5 && ratio < 2.6, "ratio {ratio}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn composite_step_keeps_positivity_and_commutes_with_scale(
            shift in -50.0f64..50.0,
            a in 0.1f64..4.0,
            kappa in 0.2f64..3.0,
        ) {
            let p = ScaledParams { a, kappa, ..medium() };
            let lat = lattice(41, 3, 0.05, 0.1);
            let tm = TransitionMatrix::assemble(&lat, 0.05, &p, 7.0).unwrap();
            let qp = QPropagator::new(3, 0.05, DerivedConstants::scaled(&p).eta_q);
            let start = TildeSurface::from_values(&terminal_condition(&lat, BoundaryMode::InventoryCap));
            let mut x = start.clone();
            let mut y = TildeSurface { norm_log: start.norm_log + shift, ..start };
            for tv in [&mut x, &mut y] {
                q_evolution_step(tv, &qp, &lat, p.kappa, 1).unwrap();
                s_evolution_step(tv, &tm);
                normalize(tv);
                prop_assert!(tv.all_positive());
            }
            prop_assert_eq!(&x.tilde_values, &y.tilde_values);
            prop_assert!((y.norm_log - x.norm_log - shift).abs() <= 1e-12 * (1.0 + x.norm_log.abs()));
        }
    }
}
