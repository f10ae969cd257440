//! Fully implicit finite differences for the reduced HJB equation, with a
//! fixed-point (Picard) iteration per time step.
//!
//! At each step the drift is upwinded toward the mean, diffusion is centered,
//! and everything nonlinear (the squared gradient and the exponential fill
//! terms) is evaluated at the previous iterate. Each iterate therefore
//! needs one tridiagonal solve per inventory level, and the tridiagonal
//! matrix is the same for every level, iterate and step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{terminal_condition, BoundaryMode, Lattice, ValueSurface};
use crate::linalg::Tridiagonal;
use crate::model::HjbParams;
use crate::policy::extract_policy;
use crate::solution::{growth_rate, SolveOutput, SolveStats};

/// Largest exponent passed to `exp` before the step is declared overflowed.
pub const EXPONENT_GUARD: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdConfig {
    /// Bound on the largest update, measured relative to `1 + |v|` at each node.
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    /// Weight of the new iterate, in (0, 1].
    pub relaxation: f64,
    pub boundary_mode: BoundaryMode,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            picard_tol: 1e-10,
            picard_max_iters: 200,
            relaxation: 1.0,
            boundary_mode: BoundaryMode::InventoryCap,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.picard_tol > 0.0) {
            return Err(Error::InvalidConfig("picard_tol must be > 0".into()));
        }
        if self.picard_max_iters < 1 {
            return Err(Error::InvalidConfig("picard_max_iters must be >= 1".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::InvalidConfig("relaxation must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Reusable state for stepping one lattice: the factored implicit operator
/// and scratch surfaces.
pub struct FdStepper<'a> {
    lat: &'a Lattice,
    cfg: FdConfig,
    lu: Tridiagonal,
    s: Vec<f64>,
    kappa: f64,
    /// `dt * source coefficient`.
    dt_source: f64,
    /// `dt * gamma * sigma^2 / 2`.
    dt_gradient: f64,
    inv_ds: f64,
    /// `exp(-kappa (v_q - v_{q-1} - s))` per inventory edge, row-major.
    edge_exp: Vec<f64>,
    current: ValueSurface,
    next: ValueSurface,
    /// Previous Picard update, used to spot oscillating iterates.
    last_update: Vec<f64>,
    rhs: Vec<f64>,
}

impl<'a> FdStepper<'a> {
    pub fn new(lat: &'a Lattice, p: &HjbParams, cfg: FdConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.boundary_mode == BoundaryMode::ZeroSecondDerivativeInQ && lat.q_cap < 2 {
            return Err(Error::InvalidConfig(
                "zero second-derivative boundary needs q_cap >= 2".into(),
            ));
        }
        let n = lat.n_s;
        let dt = lat.dt;
        let diff = dt * p.sigma * p.sigma / (2.0 * lat.ds * lat.ds);
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for j in 0..n {
            let drift = p.alpha * (p.mu - lat.s(j));
            let adv = dt * drift.abs() / lat.ds;
            if j == 0 {
                // forward difference, no curvature term
                upper[j] = -dt * drift / lat.ds;
                diag[j] = 1.0 + dt * drift / lat.ds;
            } else if j == n - 1 {
                // backward difference, no curvature term
                lower[j] = dt * drift / lat.ds;
                diag[j] = 1.0 - dt * drift / lat.ds;
            } else {
                lower[j] = -diff - if drift < 0.0 { adv } else { 0.0 };
                upper[j] = -diff - if drift > 0.0 { adv } else { 0.0 };
                diag[j] = 1.0 + 2.0 * diff + adv;
            }
        }
        let lu = Tridiagonal::factor(&lower, &diag, &upper)?;
        let d = p.derived();
        let zeros = ValueSurface::zeros(lat.q_cap, n, cfg.boundary_mode);
        Ok(FdStepper {
            lat,
            cfg,
            lu,
            s: lat.s_grid(),
            kappa: p.kappa,
            dt_source: dt * d.source,
            dt_gradient: dt * 0.5 * p.gamma * p.sigma * p.sigma,
            inv_ds: 1.0 / lat.ds,
            edge_exp: vec![0.0; 2 * lat.q_cap * n],
            current: zeros.clone(),
            last_update: vec![0.0; zeros.values.len()],
            next: zeros,
            rhs: vec![0.0; n],
        })
    }

    /// Advances `v_n` by one step. `guess` seeds the iteration (defaults to
    /// `v_n`); `step` labels errors. Returns the new surface and the number
    /// of inner iterations used.
    pub fn step(
        &mut self,
        v_n: &ValueSurface,
        guess: Option<&ValueSurface>,
        step: usize,
    ) -> Result<(ValueSurface, usize)> {
        let lat = self.lat;
        let n = lat.n_s;
        let qc = lat.q_cap as i64;
        let cap = self.cfg.boundary_mode == BoundaryMode::InventoryCap;
        let solved = if cap { -qc..=qc } else { -qc + 1..=qc - 1 };

        self.current.values.copy_from_slice(&guess.unwrap_or(v_n).values);
        if !cap {
            extrapolate_boundaries(&mut self.current);
        }
        let mut omega = self.cfg.relaxation;
        let mut prev_change = f64::INFINITY;
        let mut rises = 0;

        for iteration in 1..=self.cfg.picard_max_iters {
            self.fill_edge_exponentials(step)?;
            let mut change: f64 = 0.0;
            let mut alignment = 0.0;
            for q in solved.clone() {
                let cur = self.current.row(q);
                let old = v_n.row(q);
                for j in 0..n {
                    let slope = if j == 0 {
                        (cur[1] - cur[0]) * self.inv_ds
                    } else if j == n - 1 {
                        (cur[n - 1] - cur[n - 2]) * self.inv_ds
                    } else {
                        (cur[j + 1] - cur[j - 1]) * 0.5 * self.inv_ds
                    };
                    let mut fills = 0.0;
                    if q > -qc {
                        fills += self.edge_exp[(q + qc - 1) as usize * n + j];
                    }
                    if q < qc {
                        fills += 1.0 / self.edge_exp[(q + qc) as usize * n + j];
                    }
                    self.rhs[j] = old[j] - self.dt_gradient * slope * slope + self.dt_source * fills;
                }
                self.lu.solve_in_place(&mut self.rhs);
                let dst = self.next.row_mut(q);
                let offset = (q + qc) as usize * n;
                let last = &mut self.last_update[offset..offset + n];
                for j in 0..n {
                    let x = omega * self.rhs[j] + (1.0 - omega) * cur[j];
                    let update = x - cur[j];
                    change = change.max(update.abs() / (1.0 + x.abs()));
                    alignment += update * last[j];
                    last[j] = update;
                    dst[j] = x;
                }
            }
            if !cap {
                extrapolate_boundaries(&mut self.next);
            }
            std::mem::swap(&mut self.current, &mut self.next);

            if !change.is_finite() {
                return Err(Error::NonConvergence { step, iterations: iteration, change });
            }
            if change <= self.cfg.picard_tol {
                let mut out = self.current.clone();
                out.tau = v_n.tau + lat.dt;
                return Ok((out, iteration));
            }
            // Successive updates pointing against each other, or two rises in
            // a row, mean the iterates are oscillating.
            if iteration > 1 && alignment < 0.0 && omega > 0.5 {
                omega = 0.5;
                rises = 0;
            } else if change > prev_change {
                rises += 1;
                if rises >= 2 && omega > 0.5 {
                    omega = 0.5;
                    rises = 0;
                }
            } else {
                rises = 0;
            }
            prev_change = change;
        }
        Err(Error::NonConvergence {
            step,
            iterations: self.cfg.picard_max_iters,
            change: prev_change,
        })
    }

    fn fill_edge_exponentials(&mut self, step: usize) -> Result<()> {
        let n = self.lat.n_s;
        let qc = self.lat.q_cap as i64;
        for q in -qc + 1..=qc {
            let hi = self.current.row(q);
            let lo = self.current.row(q - 1);
            let edge = &mut self.edge_exp[(q + qc - 1) as usize * n..(q + qc) as usize * n];
            for j in 0..n {
                let exponent = -self.kappa * (hi[j] - lo[j] - self.s[j]);
                if exponent.abs() > EXPONENT_GUARD {
                    return Err(Error::Overflow { step, q, j, exponent });
                }
                edge[j] = exponent.exp();
            }
        }
        Ok(())
    }
}

fn extrapolate_boundaries(v: &mut ValueSurface) {
    let qc = v.q_cap as i64;
    for j in 0..v.n_s {
        let top = 2.0 * v.get(qc - 1, j) - v.get(qc - 2, j);
        let bottom = 2.0 * v.get(-qc + 1, j) - v.get(-qc + 2, j);
        let (it, ib) = (v.index(qc, j), v.index(-qc, j));
        v.values[it] = top;
        v.values[ib] = bottom;
    }
}

/// One implicit step from `v_n`.
pub fn fd_step(v_n: &ValueSurface, lat: &Lattice, p: &HjbParams, cfg: &FdConfig) -> Result<ValueSurface> {
    let mut stepper = FdStepper::new(lat, p, *cfg)?;
    let step = (v_n.tau / lat.dt).round() as usize + 1;
    stepper.step(v_n, None, step).map(|(v, _)| v)
}

/// Steps from the terminal condition to the lattice horizon.
pub fn fd_solve(p: &HjbParams, lat: &Lattice, cfg: &FdConfig) -> Result<SolveOutput> {
    let mut stepper = FdStepper::new(lat, p, *cfg)?;
    let mut v = terminal_condition(lat, cfg.boundary_mode);
    let mut prev: Option<ValueSurface> = None;
    let mut snapshots = Vec::new();
    let mut stats = SolveStats::default();
    let mut pending = lat.snapshot_steps.iter().peekable();
    let mut guess = v.clone();

    if pending.peek() == Some(&&0) {
        snapshots.push(v.clone());
        pending.next();
    }
    for step in 1..=lat.n_t {
        // linear extrapolation in time seeds the inner iteration
        if let Some(pv) = &prev {
            for ((g, a), b) in guess.values.iter_mut().zip(&v.values).zip(&pv.values) {
                *g = 2.0 * a - b;
            }
        } else {
            guess.values.copy_from_slice(&v.values);
        }
        let (next, iterations) = stepper.step(&v, Some(&guess), step)?;
        stats.steps += 1;
        stats.inner_iterations += iterations;
        stats.max_inner_iterations = stats.max_inner_iterations.max(iterations);
        let mut next = next;
        next.tau = step as f64 * lat.dt;
        prev = Some(std::mem::replace(&mut v, next));
        if pending.peek() == Some(&&step) {
            snapshots.push(v.clone());
            pending.next();
        }
    }
    let v_tau_estimate = prev.as_ref().map(|pv| growth_rate(lat, p.mu, pv, &v));
    let policies = snapshots.iter().map(|s| extract_policy(s, lat, p)).collect();
    Ok(SolveOutput { snapshots, policies, v_tau_estimate, stats })
}
