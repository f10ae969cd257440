//! Optimal feedback quotes extracted from a value surface, and the
//! closed-form baselines they are checked against.

use crate::error::{Error, Result};
use crate::lattice::{Lattice, ValueSurface};
use crate::linalg::smallest_eigenpair;
use crate::model::{HjbParams, ModelParams, ScaledParams};

/// Optimal quotes on the lattice, in the units of the source surface.
///
/// Ask rows cover `q = -Q+1 ..= Q` (selling is forbidden at `-Q`), bid rows
/// cover `q = -Q ..= Q-1`; both are stored row-major with `n_s` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySurface {
    pub tau: f64,
    pub q_cap: usize,
    pub n_s: usize,
    pub ask_price: Vec<f64>,
    pub bid_price: Vec<f64>,
    pub ask_spread: Vec<f64>,
    pub bid_spread: Vec<f64>,
}

impl PolicySurface {
    fn ask_index(&self, q: i64, j: usize) -> Option<usize> {
        let qc = self.q_cap as i64;
        (q > -qc && q <= qc).then(|| (q + qc - 1) as usize * self.n_s + j)
    }

    fn bid_index(&self, q: i64, j: usize) -> Option<usize> {
        let qc = self.q_cap as i64;
        (q >= -qc && q < qc).then(|| (q + qc) as usize * self.n_s + j)
    }

    pub fn ask_price(&self, q: i64, j: usize) -> Option<f64> {
        self.ask_index(q, j).map(|i| self.ask_price[i])
    }

    pub fn bid_price(&self, q: i64, j: usize) -> Option<f64> {
        self.bid_index(q, j).map(|i| self.bid_price[i])
    }

    pub fn ask_spread(&self, q: i64, j: usize) -> Option<f64> {
        self.ask_index(q, j).map(|i| self.ask_spread[i])
    }

    pub fn bid_spread(&self, q: i64, j: usize) -> Option<f64> {
        self.bid_index(q, j).map(|i| self.bid_spread[i])
    }

    pub fn ask_row(&self, q: i64) -> Option<&[f64]> {
        self.ask_index(q, 0).map(|i| &self.ask_price[i..i + self.n_s])
    }

    pub fn bid_row(&self, q: i64) -> Option<&[f64]> {
        self.bid_index(q, 0).map(|i| &self.bid_price[i..i + self.n_s])
    }

    /// Quotes at price `s` by linear interpolation along the grid.
    pub fn interp(&self, lat: &Lattice, q: i64, s: f64) -> (Option<f64>, Option<f64>) {
        let (j, w) = lat.locate(s);
        let lerp = |row: &[f64]| row[j] * (1.0 - w) + row[j + 1] * w;
        (self.ask_row(q).map(lerp), self.bid_row(q).map(lerp))
    }

    pub fn is_finite(&self) -> bool {
        [&self.ask_price, &self.bid_price, &self.ask_spread, &self.bid_spread]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Optimal feedback spreads and prices from a value surface.
pub fn extract_policy(v: &ValueSurface, lat: &Lattice, p: &HjbParams) -> PolicySurface {
    let half = p.derived().half_spread;
    let n_s = v.n_s;
    let q_cap = v.q_cap as i64;
    let rows = 2 * v.q_cap;
    let mut out = PolicySurface {
        tau: v.tau,
        q_cap: v.q_cap,
        n_s,
        ask_price: Vec::with_capacity(rows * n_s),
        bid_price: Vec::with_capacity(rows * n_s),
        ask_spread: Vec::with_capacity(rows * n_s),
        bid_spread: Vec::with_capacity(rows * n_s),
    };
    for q in -q_cap + 1..=q_cap {
        let (cur, below) = (v.row(q), v.row(q - 1));
        for j in 0..n_s {
            let s = lat.s(j);
            let spread = half - s - below[j] + cur[j];
            out.ask_spread.push(spread);
            out.ask_price.push(half + cur[j] - below[j]);
        }
    }
    for q in -q_cap..q_cap {
        let (cur, above) = (v.row(q), v.row(q + 1));
        for j in 0..n_s {
            let s = lat.s(j);
            let spread = half + s - above[j] + cur[j];
            out.bid_spread.push(spread);
            out.bid_price.push(-half + above[j] - cur[j]);
        }
    }
    out
}

/// Long-time limits of the constant-reference-price model, market units.
pub fn constant_model_limits(p: &ModelParams) -> Result<(f64, f64)> {
    if !(p.gamma > 0.0 && p.kappa > 0.0) {
        return Err(Error::InvalidParams("constant model needs gamma, kappa > 0".into()));
    }
    let half = (p.gamma / p.kappa).ln_1p() / p.gamma;
    Ok((p.mu + half, p.mu - half))
}

/// Asymptotic quotes of the constant-price model with the inventory capped
/// at `+-q_cap`, scaled units. A side is `None` where it is forbidden.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedLimits {
    pub ask: Option<f64>,
    pub bid: Option<f64>,
}

pub fn bounded_inventory_limits(p: &ScaledParams, q_cap: usize, q: i64) -> Result<BoundedLimits> {
    let qc = q_cap as i64;
    if q < -qc || q > qc {
        return Err(Error::InvalidParams(format!("q = {q} outside [-{qc}, {qc}]")));
    }
    let half = (1.0 / p.kappa).ln_1p();
    let denom = (2 * qc + 2) as f64;
    let log_sin = |k: i64| (k as f64 * std::f64::consts::PI / denom).sin().ln();
    let ask = (q > -qc)
        .then(|| p.mu + half + (log_sin(q + qc + 1) - log_sin(q + qc)) / p.kappa);
    let bid = (q < qc)
        .then(|| p.mu - half + (log_sin(q + qc + 2) - log_sin(q + qc + 1)) / p.kappa);
    Ok(BoundedLimits { ask, bid })
}

/// Long-time limits of the linearized small-kappa approximation, scaled units.
pub fn zhang_small_kappa_limits(p: &ScaledParams, q: i64) -> (f64, f64) {
    let half = (1.0 / p.kappa).ln_1p();
    let quarter_var = 0.25 * p.sigma * p.sigma;
    let qf = q as f64;
    (
        half + p.mu - quarter_var * (2.0 * qf - 1.0),
        -half + p.mu - quarter_var * (2.0 * qf + 1.0),
    )
}

/// Limits under linear utility (risk neutrality), market units.
pub fn linear_utility_limits(p: &ModelParams) -> (f64, f64) {
    (p.mu + 1.0 / p.kappa, p.mu - 1.0 / p.kappa)
}

/// Asymptotic spreads of the Brownian (`alpha = 0`) model with capped
/// inventory, indexed by `q + Q`, market units.
#[derive(Debug, Clone, PartialEq)]
pub struct GueantSpreads {
    pub q_cap: usize,
    pub ask: Vec<Option<f64>>,
    pub bid: Vec<Option<f64>>,
    /// Ground-state eigenvector `f0`, indexed by `q + Q`.
    pub ground_state: Vec<f64>,
    pub eigenvalue: f64,
}

impl GueantSpreads {
    pub fn ask(&self, q: i64) -> Option<f64> {
        self.ask[(q + self.q_cap as i64) as usize]
    }

    pub fn bid(&self, q: i64) -> Option<f64> {
        self.bid[(q + self.q_cap as i64) as usize]
    }
}

pub fn gueant_asymptotic_spreads(p: &ModelParams, q_cap: usize) -> Result<GueantSpreads> {
    if p.alpha != 0.0 {
        return Err(Error::InvalidParams("Gueant asymptotics need alpha = 0".into()));
    }
    if !(p.gamma > 0.0 && p.kappa > 0.0) {
        return Err(Error::InvalidParams("Gueant asymptotics need gamma, kappa > 0".into()));
    }
    let qc = q_cap as i64;
    let curvature = 0.5 * p.kappa * p.gamma * p.sigma * p.sigma;
    let ratio = p.gamma / p.kappa;
    let eta = p.a * (-(1.0 + 1.0 / ratio) * ratio.ln_1p()).exp();
    let d: Vec<f64> = (-qc..=qc).map(|q| curvature * (q * q) as f64).collect();
    let e = vec![-eta; d.len() - 1];
    let (eigenvalue, f0) = smallest_eigenpair(&d, &e);
    let half = ratio.ln_1p() / p.gamma;
    let n = d.len();
    let ask = (0..n)
        .map(|i| (i > 0).then(|| half + (f0[i] / f0[i - 1]).ln() / p.kappa))
        .collect();
    let bid = (0..n)
        .map(|i| (i + 1 < n).then(|| half + (f0[i] / f0[i + 1]).ln() / p.kappa))
        .collect();
    Ok(GueantSpreads { q_cap, ask, bid, ground_state: f0, eigenvalue })
}

/// Quote-shape diagnostics of one policy snapshot.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Insensitivity {
    pub tau: f64,
    /// `max_q max_s |price(q, s) - mean_s price(q, .)|` over ask and bid.
    pub s_metric: f64,
    /// `max_q max_s |price - limit|` against `mu +- half_spread`.
    pub q_metric: f64,
}

/// s- and q-insensitivity over `|q| <= q_window`, solver units. Grid points
/// outside `j_range` are ignored.
pub fn insensitivity(
    policy: &PolicySurface,
    p: &HjbParams,
    q_window: i64,
    j_range: std::ops::Range<usize>,
) -> Insensitivity {
    let half = p.derived().half_spread;
    let mut s_metric: f64 = 0.0;
    let mut q_metric: f64 = 0.0;
    for q in -q_window..=q_window {
        let sides = [(policy.ask_row(q), p.mu + half), (policy.bid_row(q), p.mu - half)];
        for (row, limit) in sides {
            let Some(row) = row else { continue };
            let row = &row[j_range.clone()];
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            for &x in row {
                s_metric = s_metric.max((x - mean).abs());
                q_metric = q_metric.max((x - limit).abs());
            }
        }
    }
    Insensitivity { tau: policy.tau, s_metric, q_metric }
}

/// Central fraction of the grid, as an index range.
pub fn central_range(n_s: usize, fraction: f64) -> std::ops::Range<usize> {
    let drop = (((1.0 - fraction) * 0.5) * (n_s - 1) as f64).round() as usize;
    drop..n_s - drop
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, terminal_condition, BoundaryMode, LatticeSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn scaled(kappa: f64, sigma: f64, mu: f64) -> ScaledParams {
        ScaledParams { a: 2.0, kappa, sigma, mu, horizon: 10.0 }
    }

    fn setup(q_cap: usize, n_s: usize) -> (HjbParams, Lattice) {
        let p = HjbParams::scaled(&scaled(0.75, 0.8, 2.0));
        let lat = build_lattice(&p, &LatticeSpec { q_cap, n_s, ..Default::default() }).unwrap();
        (p, lat)
    }

    #[test]
    fn terminal_surface_quotes_symmetric_half_spread() {
        let (p, lat) = setup(3, 11);
        let v = terminal_condition(&lat, BoundaryMode::InventoryCap);
        let pol = extract_policy(&v, &lat, &p);
        let half = (1.0f64 + 1.0 / 0.75).ln();
        for q in -2..=2 {
            for j in 0..lat.n_s {
                assert_relative_eq!(pol.ask_spread(q, j).unwrap(), half, epsilon = 1e-13);
                assert_relative_eq!(pol.bid_spread(q, j).unwrap(), half, epsilon = 1e-13);
                assert_relative_eq!(pol.ask_price(q, j).unwrap(), lat.s(j) + half, epsilon = 1e-13);
            }
        }
        assert!(pol.ask_price(-3, 0).is_none());
        assert!(pol.bid_price(3, 0).is_none());
        assert!(pol.bid_price(-3, 0).is_some());
    }

    #[test]
    fn constant_model_surface_gives_constant_quotes() {
        let (p, lat) = setup(4, 9);
        let c = 0.37;
        let mut v = terminal_condition(&lat, BoundaryMode::InventoryCap);
        for q in lat.q_values() {
            v.row_mut(q).fill(q as f64 * p.mu + c * 5.0);
        }
        let pol = extract_policy(&v, &lat, &p);
        let half = (1.0f64 + 1.0 / 0.75).ln();
        for q in -3..=3 {
            for j in 0..lat.n_s {
                assert_relative_eq!(pol.ask_price(q, j).unwrap(), p.mu + half, epsilon = 1e-13);
                assert_relative_eq!(pol.bid_price(q, j).unwrap(), p.mu - half, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn constant_model_limit_examples() {
        let p = ModelParams {
            a: 10.0,
            kappa: 5.0,
            gamma: 0.005,
            sigma: 0.05,
            mu: 1.0,
            alpha: 1.0,
            horizon: 800.0,
        };
        let (ask, bid) = constant_model_limits(&p).unwrap();
        let half = 200.0 * 0.001f64.ln_1p();
        assert_relative_eq!(ask, 1.0 + half, max_relative = 1e-14);
        assert_relative_eq!(ask, 1.199900, epsilon = 1e-6);
        assert_relative_eq!(bid, 0.800100, epsilon = 1e-6);

        let tiny = ModelParams { gamma: 1e-9, ..p };
        let (ask, _) = constant_model_limits(&tiny).unwrap();
        assert_relative_eq!(ask, 1.0 + 1.0 / 5.0, max_relative = 1e-9);
        let stiff = ModelParams { kappa: 1e12, ..p };
        let (ask, bid) = constant_model_limits(&stiff).unwrap();
        assert_relative_eq!(ask, 1.0, epsilon = 1e-11);
        assert_relative_eq!(bid, 1.0, epsilon = 1e-11);
        assert!(constant_model_limits(&ModelParams { gamma: 0.0, ..p }).is_err());
    }

    #[test]
    fn linear_utility_examples() {
        let p = ModelParams {
            a: 2.0,
            kappa: 1.5,
            gamma: 0.0,
            sigma: 0.4,
            mu: 1.0,
            alpha: 1.0,
            horizon: 10.0,
        };
        let (ask, bid) = linear_utility_limits(&p);
        assert_relative_eq!(ask, 1.666667, epsilon = 1e-6);
        assert_relative_eq!(bid, 0.333333, epsilon = 1e-6);
        let (ea, eb) = constant_model_limits(&ModelParams { gamma: 1e-10, ..p }).unwrap();
        assert_relative_eq!(ea, ask, max_relative = 1e-9);
        assert_relative_eq!(eb, bid, max_relative = 1e-9);
        let (ask, bid) = linear_utility_limits(&ModelParams { kappa: 1e15, ..p });
        assert_relative_eq!(ask, 1.0, epsilon = 1e-14);
        assert_relative_eq!(bid, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn bounded_inventory_unit_cap_example() {
        let b = bounded_inventory_limits(&scaled(1.0, 0.5, 0.0), 1, 0).unwrap();
        let expected = -(2f64.ln())
            + ((3.0 * std::f64::consts::PI / 4.0).sin() / (std::f64::consts::PI / 2.0).sin()).ln();
        assert_relative_eq!(b.bid.unwrap(), expected, max_relative = 1e-14);
        assert_relative_eq!(b.bid.unwrap(), -1.039721, epsilon = 1e-6);
        let top = bounded_inventory_limits(&scaled(1.0, 0.5, 0.0), 1, 1).unwrap();
        assert!(top.bid.is_none() && top.ask.is_some());
        assert!(bounded_inventory_limits(&scaled(1.0, 0.5, 0.0), 1, 2).is_err());
    }

    #[test]
    fn bounded_inventory_approaches_constant_model() {
        let p = scaled(0.75, 0.8, 2.0);
        let half = (1.0f64 + 1.0 / 0.75).ln();
        let b = bounded_inventory_limits(&p, 100_000, 3).unwrap();
        assert_relative_eq!(b.ask.unwrap(), 2.0 + half, epsilon = 1e-8);
        assert_relative_eq!(b.bid.unwrap(), 2.0 - half, epsilon = 1e-8);
    }

    #[test]
    fn bounded_inventory_is_symmetric() {
        let p = scaled(0.6, 0.8, 1.3);
        for q in -7..=7i64 {
            let a = bounded_inventory_limits(&p, 8, q).unwrap().ask.unwrap();
            let b = bounded_inventory_limits(&p, 8, -q).unwrap().bid.unwrap();
            assert_relative_eq!(a - p.mu, -(b - p.mu), epsilon = 1e-13);
        }
    }

    #[test]
    fn zhang_examples() {
        let p = scaled(6.0, 0.02, 0.0);
        let (ask, _) = zhang_small_kappa_limits(&p, 0);
        assert_relative_eq!(ask, (7.0f64 / 6.0).ln() + 1e-4, max_relative = 1e-14);
        for q in -5..5 {
            let (a0, _) = zhang_small_kappa_limits(&p, q);
            let (a1, _) = zhang_small_kappa_limits(&p, q + 1);
            assert_relative_eq!(a1 - a0, -2e-4, max_relative = 1e-9);
        }
        let flat = scaled(6.0, 0.0, 1.0);
        let (ask, bid) = zhang_small_kappa_limits(&flat, 9);
        assert_relative_eq!(ask, 1.0 + (7.0f64 / 6.0).ln(), max_relative = 1e-15);
        assert_relative_eq!(bid, 1.0 - (7.0f64 / 6.0).ln(), max_relative = 1e-15);
    }

    fn brownian(sigma: f64) -> ModelParams {
        ModelParams { a: 1.7, kappa: 1.3, gamma: 0.4, sigma, mu: 1.0, alpha: 0.0, horizon: 10.0 }
    }

    #[test]
    fn gueant_unit_cap_without_volatility() {
        // 3x3 ground state of -eta * path adjacency is (1, sqrt 2, 1).
        let p = brownian(0.0);
        let g = gueant_asymptotic_spreads(&p, 1).unwrap();
        let half = (1.0f64 + p.gamma / p.kappa).ln() / p.gamma;
        assert_relative_eq!(g.bid(0).unwrap() - half, 2f64.sqrt().ln() / p.kappa, max_relative = 1e-12);
        assert_relative_eq!(g.ask(0).unwrap() - half, 2f64.sqrt().ln() / p.kappa, max_relative = 1e-12);
        assert_relative_eq!(g.bid(-1).unwrap() - half, -(2f64.sqrt().ln()) / p.kappa, max_relative = 1e-12);
        assert!(g.bid(1).is_none() && g.ask(-1).is_none());
    }

    #[test]
    fn gueant_without_volatility_matches_bounded_inventory() {
        // Q = 3 by direct eigensolve vs the sine formulas, market units.
        let p = brownian(0.0);
        let g = gueant_asymptotic_spreads(&p, 3).unwrap();
        let sp = ScaledParams { a: p.a, kappa: p.kappa / p.gamma, sigma: 0.0, mu: 0.0, horizon: 1.0 };
        for q in -3..=3i64 {
            let b = bounded_inventory_limits(&sp, 3, q).unwrap();
            if let Some(ask) = b.ask {
                assert_relative_eq!(g.ask(q).unwrap(), ask / p.gamma, max_relative = 1e-10);
            }
            if let Some(bid) = b.bid {
                assert_relative_eq!(g.bid(q).unwrap(), -bid / p.gamma, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn gueant_spreads_mirror_in_q() {
        let g = gueant_asymptotic_spreads(&brownian(0.7), 6).unwrap();
        for q in -5..=5 {
            assert_relative_eq!(g.bid(q).unwrap(), g.ask(-q).unwrap(), max_relative = 1e-10);
        }
        assert!(gueant_asymptotic_spreads(&ModelParams { alpha: 1.0, ..brownian(0.7) }, 3).is_err());
    }

    proptest! {
        #[test]
        fn spread_sum_identity_and_s_offset_invariance(seed in 0u64..1000, q_cap in 1usize..6) {
            let (p, lat) = setup(q_cap, 17);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut v = terminal_condition(&lat, BoundaryMode::InventoryCap);
            for x in v.values.iter_mut() {
                *x += rng.random_range(-2.0..2.0);
            }
            let pol = extract_policy(&v, &lat, &p);
            let half = p.derived().half_spread;
            let qc = q_cap as i64;
            for q in -qc + 1..qc {
                for j in 0..lat.n_s {
                    let lhs = pol.ask_spread(q, j).unwrap() + pol.bid_spread(q, j).unwrap();
                    let rhs = 2.0 * half + 2.0 * v.get(q, j) - v.get(q + 1, j) - v.get(q - 1, j);
                    prop_assert!((lhs - rhs).abs() <= 1e-12);
                }
            }
            // adding any function of s alone leaves every quote unchanged
            let offset: Vec<f64> = (0..lat.n_s).map(|_| rng.random_range(-50.0..50.0)).collect();
            let mut shifted = v.clone();
            for q in lat.q_values() {
                for (x, o) in shifted.row_mut(q).iter_mut().zip(&offset) {
                    *x += o;
                }
            }
            let pol2 = extract_policy(&shifted, &lat, &p);
            for (a, b) in pol.ask_price.iter().zip(&pol2.ask_price) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in pol.bid_spread.iter().zip(&pol2.bid_spread) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
