//! Computational domain: uniform price grid, bounded inventory, uniform time
//! steps, and storage of value surfaces on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HjbParams;

/// Requested shape of a lattice, in solver units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Half-width of the price grid in stationary standard deviations.
    pub width_stddevs: f64,
    /// Explicit half-width, overriding `width_stddevs`. Required when the
    /// reference price has no stationary law (`alpha = 0` or `sigma = 0`).
    pub half_width: Option<f64>,
    pub n_s: usize,
    pub q_cap: usize,
    pub dt: f64,
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec {
            width_stddevs: 5.0,
            half_width: None,
            n_s: 401,
            q_cap: 30,
            dt: 0.01,
            horizon: 10.0,
            snapshot_times: Vec::new(),
        }
    }
}

/// Uniform (time x inventory x price) grid. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub s_min: f64,
    pub s_max: f64,
    pub n_s: usize,
    pub ds: f64,
    pub q_cap: usize,
    pub dt: f64,
    pub n_t: usize,
    /// Step indices at which full surfaces are retained, sorted, unique.
    pub snapshot_steps: Vec<usize>,
}

/// Upwind resolution limit: `dt * alpha |mu - s| / ds` above this is rejected.
const MAX_DRIFT_COURANT: f64 = 1e3;

pub fn build_lattice(p: &HjbParams, spec: &LatticeSpec) -> Result<Lattice> {
    let half = match spec.half_width {
        Some(h) => h,
        None => {
            if !(spec.width_stddevs > 0.0) {
                return Err(Error::InvalidLattice("width_stddevs must be > 0".into()));
            }
            match p.stationary_std() {
                Some(sd) if sd > 0.0 => spec.width_stddevs * sd,
                _ => {
                    return Err(Error::InvalidLattice(
                        "no stationary price law (alpha = 0 or sigma = 0); set half_width".into(),
                    ))
                }
            }
        }
    };
    if !(half > 0.0 && half.is_finite()) {
        return Err(Error::InvalidLattice(format!("grid half-width {half} must be > 0")));
    }
    if spec.n_s < 3 {
        return Err(Error::InvalidLattice("n_s must be >= 3".into()));
    }
    if spec.q_cap < 1 {
        return Err(Error::InvalidLattice("q_cap must be >= 1".into()));
    }
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return Err(Error::InvalidLattice("dt must be > 0".into()));
    }
    if !(spec.horizon >= 0.0 && spec.horizon.is_finite()) {
        return Err(Error::InvalidLattice("horizon must be >= 0".into()));
    }
    let s_min = p.mu - half;
    let s_max = p.mu + half;
    let ds = (s_max - s_min) / (spec.n_s - 1) as f64;

    let courant = spec.dt * p.alpha * (s_max - p.mu).abs() / ds;
    if courant > MAX_DRIFT_COURANT {
        return Err(Error::InvalidLattice(format!(
            "drift resolution dt*|mu - s_max|/ds = {courant:.3e} exceeds {MAX_DRIFT_COURANT:e}"
        )));
    }

    let n_t = steps_covering(spec.horizon, spec.dt);
    let mut snapshot_steps = Vec::with_capacity(spec.snapshot_times.len() + 1);
    for &t in &spec.snapshot_times {
        if !(t >= 0.0 && t <= spec.horizon * (1.0 + 1e-12)) {
            return Err(Error::InvalidLattice(format!(
                "snapshot time {t} outside [0, {}]",
                spec.horizon
            )));
        }
        snapshot_steps.push(((t / spec.dt).round() as usize).min(n_t));
    }
    snapshot_steps.push(n_t);
    snapshot_steps.sort_unstable();
    snapshot_steps.dedup();

    Ok(Lattice {
        s_min,
        s_max,
        n_s: spec.n_s,
        ds,
        q_cap: spec.q_cap,
        dt: spec.dt,
        n_t,
        snapshot_steps,
    })
}

/// Smallest step count whose span reaches `horizon`, treating near-integer
/// ratios as exact.
fn steps_covering(horizon: f64, dt: f64) -> usize {
    let ratio = horizon / dt;
    let rounded = ratio.round();
    if (ratio - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        rounded as usize
    } else {
        ratio.ceil() as usize
    }
}

impl Lattice {
    #[inline]
    pub fn s(&self, j: usize) -> f64 {
        self.s_min + j as f64 * self.ds
    }

    pub fn s_grid(&self) -> Vec<f64> {
        (0..self.n_s).map(|j| self.s(j)).collect()
    }

    pub fn n_q(&self) -> usize {
        2 * self.q_cap + 1
    }

    pub fn q_min(&self) -> i64 {
        -(self.q_cap as i64)
    }

    pub fn q_values(&self) -> impl Iterator<Item = i64> + '_ {
        let q = self.q_cap as i64;
        -q..=q
    }

    pub fn horizon(&self) -> f64 {
        self.n_t as f64 * self.dt
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        self.snapshot_steps.iter().map(|&n| n as f64 * self.dt).collect()
    }

    /// Fractional grid position of `s`, clamped to the grid.
    pub fn locate(&self, s: f64) -> (usize, f64) {
        let x = ((s - self.s_min) / self.ds).clamp(0.0, (self.n_s - 1) as f64);
        let j = (x.floor() as usize).min(self.n_s - 2);
        (j, x - j as f64)
    }

    /// Same price grid and inventory range (time stepping may differ).
    pub fn same_grid(&self, other: &Lattice) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300);
        self.n_s == other.n_s
            && self.q_cap == other.q_cap
            && close(self.s_min, other.s_min)
            && close(self.s_max, other.s_max)
    }
}

/// How the artificial inventory boundary at `q = +-Q` is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryMode {
    /// Buying is forbidden at `Q` and selling at `-Q`.
    #[serde(rename = "cap")]
    InventoryCap,
    /// `v(Q) - v(Q-1) = v(Q-1) - v(Q-2)`, and symmetrically at `-Q`.
    #[serde(rename = "zero2nd")]
    ZeroSecondDerivativeInQ,
}

impl BoundaryMode {
    pub fn code(self) -> u8 {
        match self {
            BoundaryMode::InventoryCap => 0,
            BoundaryMode::ZeroSecondDerivativeInQ => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(BoundaryMode::InventoryCap),
            1 => Some(BoundaryMode::ZeroSecondDerivativeInQ),
            _ => None,
        }
    }
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cap" => Ok(BoundaryMode::InventoryCap),
            "zero2nd" => Ok(BoundaryMode::ZeroSecondDerivativeInQ),
            other => Err(Error::InvalidConfig(format!("unknown boundary mode '{other}'"))),
        }
    }
}

/// Discretized `v(tau, q, s)`, row-major in `(q + Q, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub tau: f64,
    pub q_cap: usize,
    pub n_s: usize,
    pub values: Vec<f64>,
    pub boundary_mode: BoundaryMode,
}

impl ValueSurface {
    pub fn zeros(q_cap: usize, n_s: usize, boundary_mode: BoundaryMode) -> Self {
        ValueSurface {
            tau: 0.0,
            q_cap,
            n_s,
            values: vec![0.0; (2 * q_cap + 1) * n_s],
            boundary_mode,
        }
    }

    #[inline]
    pub fn index(&self, q: i64, j: usize) -> usize {
        (q + self.q_cap as i64) as usize * self.n_s + j
    }

    #[inline]
    pub fn get(&self, q: i64, j: usize) -> f64 {
        self.values[self.index(q, j)]
    }

    pub fn row(&self, q: i64) -> &[f64] {
        let start = self.index(q, 0);
        &self.values[start..start + self.n_s]
    }

    pub fn row_mut(&mut self, q: i64) -> &mut [f64] {
        let start = self.index(q, 0);
        &mut self.values[start..start + self.n_s]
    }

    /// Linear interpolation in `s` along inventory row `q`.
    pub fn interp(&self, lat: &Lattice, q: i64, s: f64) -> f64 {
        let (j, w) = lat.locate(s);
        let row = self.row(q);
        row[j] * (1.0 - w) + row[j + 1] * w
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ValueSurface) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `v(0, q, s) = q s`.
pub fn terminal_condition(lat: &Lattice, boundary_mode: BoundaryMode) -> ValueSurface {
    let mut v = ValueSurface::zeros(lat.q_cap, lat.n_s, boundary_mode);
    for q in lat.q_values() {
        let row = v.row_mut(q);
        for (j, x) in row.iter_mut().enumerate() {
            *x = q as f64 * lat.s(j);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HjbParams, ScaledParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn medium() -> HjbParams {
        HjbParams::scaled(&ScaledParams {
            a: 2.0,
            kappa: 0.75,
            sigma: 0.8,
            mu: 2.0,
            horizon: 10.0,
        })
    }

    #[test]
    fn grid_spans_five_stationary_deviations() {
        let lat = build_lattice(&medium(), &LatticeSpec::default()).unwrap();
        let half = 5.0 * 0.8 / 2f64.sqrt();
        assert_relative_eq!(lat.s_min, 2.0 - half, max_relative = 1e-14);
        assert_relative_eq!(lat.s_max, 2.0 + half, max_relative = 1e-14);
        assert_relative_eq!(lat.s_min, -0.828427, epsilon = 1e-6);
        assert_relative_eq!(lat.s_max, 4.828427, epsilon = 1e-6);
        assert_eq!(lat.n_t, 1000);
        assert_eq!(*lat.snapshot_steps.last().unwrap(), 1000);
    }

    #[test]
    fn unit_cap_has_three_states() {
        let spec = LatticeSpec { q_cap: 1, ..Default::default() };
        let lat = build_lattice(&medium(), &spec).unwrap();
        assert_eq!(lat.q_values().collect::<Vec<_>>(), vec![-1, 0, 1]);
    }

    #[test]
    fn snapshots_outside_horizon_rejected() {
        let spec = LatticeSpec { snapshot_times: vec![11.0], ..Default::default() };
        assert!(build_lattice(&medium(), &spec).is_err());
        let spec = LatticeSpec { snapshot_times: vec![-0.5], ..Default::default() };
        assert!(build_lattice(&medium(), &spec).is_err());
    }

    #[test]
    fn collapsed_grid_needs_explicit_width() {
        let mut p = medium();
        p.sigma = 0.0;
        assert!(build_lattice(&p, &LatticeSpec::default()).is_err());
        let spec = LatticeSpec { half_width: Some(0.1), n_s: 3, ..Default::default() };
        let lat = build_lattice(&p, &spec).unwrap();
        assert_eq!(lat.s(1), 2.0);
    }

    #[test]
    fn pathological_drift_resolution_rejected() {
        let spec = LatticeSpec { dt: 10.0, n_s: 100_001, horizon: 10.0, ..Default::default() };
        assert!(build_lattice(&medium(), &spec).is_err());
    }

    #[test]
    fn terminal_condition_examples() {
        let spec = LatticeSpec { half_width: Some(0.4), n_s: 3, q_cap: 3, ..Default::default() };
        let mut p = medium();
        p.mu = 0.8;
        let lat = build_lattice(&p, &spec).unwrap();
        let v = terminal_condition(&lat, BoundaryMode::InventoryCap);
        // grid is {0.4, 0.8, 1.2}
        assert_relative_eq!(v.get(3, 2), 3.6, max_relative = 1e-15);
        assert_eq!(v.get(0, 1), 0.0);
        assert_relative_eq!(lat.s(0), 0.4, max_relative = 1e-15);
        assert_relative_eq!(v.get(-2, 0), -0.8, max_relative = 1e-15);
        assert_eq!(v.tau, 0.0);
    }

    proptest! {
        #[test]
        fn grid_is_uniform(mu in -5.0f64..5.0, half in 1e-3f64..10.0, n_s in 3usize..2000) {
            let mut p = medium();
            p.mu = mu;
            let spec = LatticeSpec { half_width: Some(half), n_s, ..Default::default() };
            let lat = build_lattice(&p, &spec).unwrap();
            // s_j is formed as s_min + j ds, so consecutive gaps are ds up to
            // rounding of the larger endpoint.
            let scale = lat.s_min.abs().max(lat.s_max.abs());
            for j in 0..n_s - 1 {
                let gap = lat.s(j + 1) - lat.s(j);
                prop_assert!((gap - lat.ds).abs() <= 4.0 * f64::EPSILON * scale + 1e-14 * lat.ds);
            }
        }

        #[test]
        fn terminal_condition_is_odd_in_q(q_cap in 1usize..20, n_s in 3usize..50) {
            let spec = LatticeSpec { q_cap, n_s, ..Default::default() };
            let lat = build_lattice(&medium(), &spec).unwrap();
            let v = terminal_condition(&lat, BoundaryMode::InventoryCap);
            for q in 0..=q_cap as i64 {
                for j in 0..n_s {
                    prop_assert_eq!(v.get(-q, j), -v.get(q, j));
                }
            }
        }
    }
}
