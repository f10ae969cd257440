//! Long-time equilibrium of the scaled problem.
//!
//! Writing `v = C tau + theta(s) + mu q` and substituting
//! `m = exp(-s^2 / (2 sigma^2) - theta)` (prices centered at `mu`) turns the
//! stationary equation into the Schrödinger problem
//! `-m'' + V(s) m = C_hat m` with `C_hat = (2C + 1) / sigma^2`. The ground
//! state is found by shooting from the symmetric initial data `m = 1`,
//! `m' = 0` and bisecting on `C_hat`.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, ValueSurface};
use crate::model::{DerivedConstants, ScaledParams};
use crate::persist::Provenance;
use crate::policy::central_range;

/// How a shot trajectory leaves the potential well.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// Stays positive and turns upward: `C_hat` is below the ground level.
    DivergesPositive,
    /// Changes sign: `C_hat` is above the ground level.
    CrossesZero,
}

/// Largest `|m|` tolerated before a trajectory must have been classified.
const M_LIMIT: f64 = 1e12;

/// Maximum number of bracket doublings.
const MAX_DOUBLINGS: usize = 60;

/// `s^2 / sigma^4 + (2M / sigma^2)(e^(kappa s) + e^(-kappa s))`, `s` centered.
pub fn potential(s: f64, p: &ScaledParams) -> f64 {
    let m = DerivedConstants::scaled(p).source;
    let s2 = p.sigma * p.sigma;
    s * s / (s2 * s2) + 2.0 * m / s2 * ((p.kappa * s).exp() + (-p.kappa * s).exp())
}

/// A shot from `s = 0` on the uniform grid `s_k = k h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub c_hat: f64,
    pub m: Vec<f64>,
    pub n: Vec<f64>,
    pub classification: Classification,
    /// Outer classical turning point, where `V = C_hat` (0 if `C_hat < V(0)`).
    pub turning_point: f64,
}

impl Trajectory {
    pub fn s(&self, k: usize) -> f64 {
        k as f64 * self.h
    }
}

/// Point beyond which `V(s) > c_hat`; `V` increases on `s > 0`.
fn turning_point(c_hat: f64, p: &ScaledParams) -> f64 {
    if potential(0.0, p) >= c_hat {
        return 0.0;
    }
    let mut hi = p.sigma.max(1e-300);
    while potential(hi, p) < c_hat {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if potential(mid, p) < c_hat {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn rk4_step(s: f64, m: f64, n: f64, h: f64, c_hat: f64, p: &ScaledParams) -> (f64, f64) {
    let f = |s: f64, m: f64| (potential(s, p) - c_hat) * m;
    let (k1m, k1n) = (n, f(s, m));
    let (k2m, k2n) = (n + 0.5 * h * k1n, f(s + 0.5 * h, m + 0.5 * h * k1m));
    let (k3m, k3n) = (n + 0.5 * h * k2n, f(s + 0.5 * h, m + 0.5 * h * k2m));
    let (k4m, k4n) = (n + h * k3n, f(s + h, m + h * k3m));
    (
        m + h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m),
        n + h / 6.0 * (k1n + 2.0 * k2n + 2.0 * k3n + k4n),
    )
}

/// Integrates by RK4 until the trajectory can be classified: a sign change
/// anywhere means `C_hat` is above the ground level, turning upward while
/// positive beyond the turning point means it is below. If neither happens
/// before `s_max`, the sign of the growing WKB component there decides.
pub fn shoot(c_hat: f64, p: &ScaledParams, s_max: f64, h: f64) -> Result<Trajectory> {
    if !(h > 0.0 && s_max > 0.0) {
        return Err(Error::Shooting("step and domain must be positive".into()));
    }
    let t = turning_point(c_hat, p);
    let steps = (s_max / h).ceil() as usize;
    let (mut m, mut n) = (1.0, 0.0);
    let mut ms = vec![m];
    let mut ns = vec![n];
    let mut classification = None;
    for k in 0..steps {
        let s = k as f64 * h;
        (m, n) = rk4_step(s, m, n, h, c_hat, p);
        ms.push(m);
        ns.push(n);
        let s_next = s + h;
        if m <= 0.0 {
            classification = Some(Classification::CrossesZero);
            break;
        }
        if s_next > t && n > 0.0 {
            classification = Some(Classification::DivergesPositive);
            break;
        }
        if !(m.abs() <= M_LIMIT) {
            return Err(Error::Shooting(format!(
                "|m| exceeded {M_LIMIT:e} at s = {s_next} before classification (C_hat = {c_hat})"
            )));
        }
    }
    let classification = match classification {
        Some(c) => c,
        None => {
            let s_end = (ms.len() - 1) as f64 * h;
            let gap = potential(s_end, p) - c_hat;
            if gap <= 0.0 {
                return Err(Error::Shooting(format!(
                    "s_max = {s_max} lies inside the classically allowed region for C_hat = {c_hat}"
                )));
            }
            let growing = 0.5 * (m + n / gap.sqrt());
            if growing > 0.0 {
                Classification::DivergesPositive
            } else {
                Classification::CrossesZero
            }
        }
    };
    Ok(Trajectory { h, c_hat, m: ms, n: ns, classification, turning_point: t })
}

/// Plain RK4 integration over `[0, s_end]` without early stopping.
pub fn integrate(c_hat: f64, p: &ScaledParams, s_end: f64, h: f64) -> (Vec<f64>, Vec<f64>) {
    let steps = (s_end / h).ceil() as usize;
    let (mut m, mut n) = (1.0, 0.0);
    let mut ms = Vec::with_capacity(steps + 1);
    let mut ns = Vec::with_capacity(steps + 1);
    ms.push(m);
    ns.push(n);
    for k in 0..steps {
        (m, n) = rk4_step(k as f64 * h, m, n, h, c_hat, p);
        ms.push(m);
        ns.push(n);
    }
    (ms, ns)
}

/// Shooting domain: twelve stationary standard deviations, extended to
/// twice the turning point of `c_hat_seed` when that lies further out.
pub fn default_s_max(p: &ScaledParams, c_hat_seed: f64) -> f64 {
    let base = 12.0 * p.sigma / std::f64::consts::SQRT_2;
    base.max(2.0 * turning_point(c_hat_seed, p))
}

/// Seed for the eigenvalue search from a solver's late-time growth rate.
pub fn seed_from_growth_rate(v_tau: f64, p: &ScaledParams) -> f64 {
    (2.0 * v_tau + 1.0) / (p.sigma * p.sigma)
}

/// Bracketing interval around the ground level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    /// Largest probe classified as below the ground level.
    pub low: f64,
    /// Smallest probe classified as above it.
    pub high: f64,
}

impl Bracket {
    pub fn mid(&self) -> f64 {
        0.5 * (self.low + self.high)
    }
}

/// Bisection on `C_hat` from a bracket grown geometrically around `seed`.
pub fn find_ground_eigenvalue(p: &ScaledParams, seed: f64, s_max: f64, h: f64) -> Result<Bracket> {
    if !(p.sigma > 0.0) {
        return Err(Error::InvalidParams("the equilibrium problem needs sigma > 0".into()));
    }
    if !seed.is_finite() {
        return Err(Error::InvalidParams(format!("eigenvalue seed {seed} is not finite")));
    }
    let classify = |c: f64| shoot(c, p, s_max, h).map(|t| t.classification);
    let mut history = Vec::new();
    let first = classify(seed)?;
    history.push((seed, first));
    let mut step = 1e-3 * (seed.abs() + 1.0 / (p.sigma * p.sigma));
    let (mut low, mut high) = (seed, seed);
    let mut found = false;
    for _ in 0..MAX_DOUBLINGS {
        let probe = match first {
            Classification::DivergesPositive => seed + step,
            Classification::CrossesZero => seed - step,
        };
        let c = classify(probe)?;
        history.push((probe, c));
        match (first, c) {
            (Classification::DivergesPositive, Classification::DivergesPositive) => low = probe,
            (Classification::DivergesPositive, Classification::CrossesZero) => {
                high = probe;
                found = true;
                break;
            }
            (Classification::CrossesZero, Classification::CrossesZero) => high = probe,
            (Classification::CrossesZero, Classification::DivergesPositive) => {
                low = probe;
                found = true;
                break;
            }
        }
        step *= 2.0;
    }
    if !found {
        return Err(Error::BracketNotFound { history });
    }
    while high - low > 1e-10 * (1.0 + (0.5 * (low + high)).abs()) {
        let mid = 0.5 * (low + high);
        if mid <= low || mid >= high {
            break;
        }
        match classify(mid)? {
            Classification::DivergesPositive => low = mid,
            Classification::CrossesZero => high = mid,
        }
    }
    Ok(Bracket { low, high })
}

/// Ground state and the recovered price-dependent part of the value.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub c_hat: f64,
    /// Growth rate `(C_hat sigma^2 - 1) / 2`.
    pub c: f64,
    pub bracket: Bracket,
    /// Symmetric centered grid `k h`, `k = -K..=K`.
    pub s_values: Vec<f64>,
    pub m_values: Vec<f64>,
    pub theta_values: Vec<f64>,
}

/// `theta = -log m - s^2 / (2 sigma^2)` on the even extension of the
/// half-line samples `m[k]` at `s = k h`, zero at the centre.
pub fn theta_from_m(m: &[f64], h: f64, p: &ScaledParams) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if let Some(k) = m.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::Shooting(format!("eigenfunction not positive at s = {}", k as f64 * h)));
    }
    let s2 = p.sigma * p.sigma;
    let half: Vec<f64> = m
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let s = k as f64 * h;
            -x.ln() - s * s / (2.0 * s2)
        })
        .collect();
    let centre = half[0];
    let k_max = m.len() - 1;
    let mut s = Vec::with_capacity(2 * k_max + 1);
    let mut mm = Vec::with_capacity(2 * k_max + 1);
    let mut theta = Vec::with_capacity(2 * k_max + 1);
    for k in (1..=k_max).rev() {
        s.push(-(k as f64) * h);
        mm.push(m[k]);
        theta.push(half[k] - centre);
    }
    for k in 0..=k_max {
        s.push(k as f64 * h);
        mm.push(m[k]);
        theta.push(half[k] - centre);
    }
    Ok((s, mm, theta))
}

impl EquilibriumSolution {
    /// Linear interpolation of theta at a centered price; `None` outside.
    pub fn theta_at(&self, s: f64) -> Option<f64> {
        let first = *self.s_values.first()?;
        let h = self.s_values[1] - first;
        let x = (s - first) / h;
        let last = self.s_values.len() - 1;
        if x < 0.0 || x > last as f64 {
            return None;
        }
        let k = (x.floor() as usize).min(last - 1);
        let w = x - k as f64;
        Some(self.theta_values[k] * (1.0 - w) + self.theta_values[k + 1] * w)
    }

    pub fn half_width(&self) -> f64 {
        *self.s_values.last().unwrap()
    }
}

/// Eigenvalue search followed by reconstruction of theta on `[-s_end, s_end]`.
pub fn solve_equilibrium(
    p: &ScaledParams,
    seed: f64,
    s_max: f64,
    h: f64,
    s_end: f64,
) -> Result<EquilibriumSolution> {
    let bracket = find_ground_eigenvalue(p, seed, s_max, h)?;
    // the lower end is below the ground level, so its shot stays positive;
    // the spurious growing part it carries is of order the bracket width
    let (m, _) = integrate(bracket.low, p, s_end, h);
    let (s_values, m_values, theta_values) = theta_from_m(&m, h, p)?;
    let c_hat = bracket.mid();
    Ok(EquilibriumSolution {
        c_hat,
        c: 0.5 * (c_hat * p.sigma * p.sigma - 1.0),
        bracket,
        s_values,
        m_values,
        theta_values,
    })
}

/// Pointwise comparison of theta with the price-dependent part of a
/// late-time surface.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitComparison {
    pub max_abs_error: f64,
    /// `(s, theta, v_limit_sdep)` for every compared grid point.
    pub rows: Vec<(f64, f64, f64)>,
}

/// Compares `v(tau, 0, s) - v(tau, 0, mu)` with `theta(s - mu)` over the
/// central `window` fraction of the price grid.
pub fn compare_to_limit(
    snapshot: &ValueSurface,
    lat: &Lattice,
    eq: &EquilibriumSolution,
    mu: f64,
    window: f64,
) -> LimitComparison {
    let centre = snapshot.interp(lat, 0, mu);
    let mut rows = Vec::new();
    let mut max_abs_error: f64 = 0.0;
    for j in central_range(lat.n_s, window) {
        let s = lat.s(j);
        let Some(theta) = eq.theta_at(s - mu) else { continue };
        let sdep = snapshot.get(0, j) - centre;
        max_abs_error = max_abs_error.max((sdep - theta).abs());
        rows.push((s, theta, sdep));
    }
    LimitComparison { max_abs_error, rows }
}

/// CSV with columns `s,m,theta,v_limit_sdep,error`, prices in market units
/// after division by `price_scale`.
pub fn write_equilibrium_csv<W: Write>(
    w: &mut W,
    provenance: &Provenance,
    eq: &EquilibriumSolution,
    cmp: &LimitComparison,
    mu: f64,
    price_scale: f64,
) -> Result<()> {
    w.write_all(provenance.csv_comment().as_bytes())?;
    writeln!(w, "s,m,theta,v_limit_sdep,error")?;
    for &(s, theta, sdep) in &cmp.rows {
        let m = eq.m_values[nearest(&eq.s_values, s - mu)];
        writeln!(w, "{},{},{},{},{}", s * price_scale, m, theta, sdep, sdep - theta)?;
    }
    Ok(())
}

fn nearest(grid: &[f64], x: f64) -> usize {
    let h = grid[1] - grid[0];
    (((x - grid[0]) / h).round().max(0.0) as usize).min(grid.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(a: f64, sigma: f64, kappa: f64) -> ScaledParams {
        ScaledParams { a, kappa, sigma, mu: 0.0, horizon: 1.0 }
    }

    #[test]
    fn potential_examples() {
        let p = params(2.0, 0.8, 0.75);
        let m = DerivedConstants::scaled(&p).source;
        assert_relative_eq!(potential(0.0, &p), 4.0 * m / 0.64, max_relative = 1e-15);
        assert_eq!(potential(0.3, &p), potential(-0.3, &p));
        let harmonic = params(0.0, 0.8, 0.75);
        assert_relative_eq!(potential(0.5, &harmonic), 0.25 / 0.4096, max_relative = 1e-15);
    }

    #[test]
    fn harmonic_levels_classify_as_expected() {
        let p = params(0.0, 0.8, 1.0);
        let s_max = default_s_max(&p, 1.0 / 0.64);
        let h = 0.8e-3;
        // the exact ground state decays like a Gaussian
        let t = shoot(1.0 / 0.64, &p, 3.0 * 0.8, h).unwrap();
        for (k, m) in t.m.iter().enumerate() {
            let s = t.s(k);
            assert_relative_eq!(*m, (-s * s / (2.0 * 0.64)).exp(), max_relative = 1e-8);
        }
        assert_eq!(shoot(3.5 / 0.64, &p, s_max, h).unwrap().classification, Classification::CrossesZero);
        assert_eq!(shoot(0.5 / 0.64, &p, s_max, h).unwrap().classification, Classification::DivergesPositive);
    }

    #[test]
    fn below_the_potential_floor_diverges() {
        let p = params(2.0, 0.8, 0.75);
        let floor = potential(0.0, &p);
        let t = shoot(0.9 * floor, &p, default_s_max(&p, floor), 1e-3).unwrap();
        assert_eq!(t.classification, Classification::DivergesPositive);
        assert_eq!(t.turning_point, 0.0);
    }

    #[test]
    fn harmonic_ground_state_has_zero_growth() {
        let sigma = 0.8;
        let p = params(0.0, sigma, 1.0);
        let seed = 1.3 / (sigma * sigma);
        let eq = solve_equilibrium(&p, seed, default_s_max(&p, seed), sigma * 1e-3, 3.0 * sigma).unwrap();
        assert_relative_eq!(eq.c_hat, 1.0 / (sigma * sigma), max_relative = 1e-8);
        assert!(eq.c.abs() < 1e-8);
        assert!(eq.theta_values.iter().all(|t| t.abs() < 1e-6));
    }

    #[test]
    fn eigenvalue_exceeds_the_potential_floor_and_grows_with_a() {
        let mut last = f64::NEG_INFINITY;
        for a in [0.5, 1.0, 2.0] {
            let p = params(a, 1.0, 1.0);
            let seed = potential(0.0, &p) + 1.0;
            let b = find_ground_eigenvalue(&p, seed, default_s_max(&p, seed), 1e-3).unwrap();
            assert!(b.mid() > potential(0.0, &p));
            assert!(b.mid() > last);
            last = b.mid();
        }
    }

    #[test]
    fn converged_shot_satisfies_the_ode() {
        let p = params(1.0, 1.0, 1.0);
        let h = 1e-3;
        let seed = potential(0.0, &p) + 1.0;
        let eq = solve_equilibrium(&p, seed, default_s_max(&p, seed), h, 3.0).unwrap();
        let (m, _) = integrate(eq.bracket.low, &p, 3.0, h);
        for k in 1..m.len() - 1 {
            let s = k as f64 * h;
            let m2 = (m[k + 1] - 2.0 * m[k] + m[k - 1]) / (h * h);
            let residual = -m2 + (potential(s, &p) - eq.c_hat) * m[k];
            assert!(residual.abs() <= 1e-6 * (1.0 + potential(s, &p)), "s {s}: {residual}");
        }
    }

    #[test]
    fn theta_is_even_and_zero_at_the_centre() {
        let p = params(1.0, 1.0, 1.0);
        let seed = potential(0.0, &p) + 1.0;
        let eq = solve_equilibrium(&p, seed, default_s_max(&p, seed), 1e-2, 2.0).unwrap();
        let n = eq.theta_values.len();
        for k in 0..n {
            assert_eq!(eq.theta_values[k], eq.theta_values[n - 1 - k]);
        }
        assert_eq!(eq.theta_values[n / 2], 0.0);
        assert!(eq.theta_at(0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn non_finite_seed_is_rejected() {
        let p = params(1.0, 1.0, 1.0);
        assert!(find_ground_eigenvalue(&p, f64::NAN, 8.0, 1e-2).is_err());
    }

    #[test]
    fn comparing_theta_with_itself_is_exact_and_windows_nest() {
        use crate::lattice::{build_lattice, terminal_condition, BoundaryMode, LatticeSpec};
        use crate::model::HjbParams;
        let p = ScaledParams { mu: 0.5, ..params(1.0, 1.0, 1.0) };
        let seed = potential(0.0, &p) + 1.0;
        let eq = solve_equilibrium(&p, seed, default_s_max(&p, seed), 1e-2, 4.0).unwrap();
        let lat = build_lattice(
            &HjbParams::scaled(&p),
            &LatticeSpec { n_s: 101, q_cap: 1, width_stddevs: 4.0, ..Default::default() },
        )
        .unwrap();
        let mut v = terminal_condition(&lat, BoundaryMode::InventoryCap);
        for j in 0..lat.n_s {
            let i = v.index(0, j);
            v.values[i] = eq.theta_at(lat.s(j) - p.mu).unwrap() + 3.0;
        }
        let cmp = compare_to_limit(&v, &lat, &eq, p.mu, 0.8);
        assert!(cmp.max_abs_error < 1e-12);
        for j in 0..lat.n_s {
            let i = v.index(0, j);
            v.values[i] += 0.01 * (lat.s(j) - p.mu).powi(3);
        }
        let mut prev = f64::INFINITY;
        for window in [1.0, 0.8, 0.5, 0.2] {
            let e = compare_to_limit(&v, &lat, &eq, p.mu, window).max_abs_error;
            assert!(e <= prev);
            prev = e;
        }
    }
}
