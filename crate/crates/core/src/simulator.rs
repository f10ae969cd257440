//! Monte Carlo simulation of the quoting strategy: exact OU prices,
//! Bernoulli-thinned Poisson fills against posted quotes, and inventory,
//! cash and wealth accounting. Everything here is in market units.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::model::{ou_moments, scale_params, HjbParams, ModelParams, Units};
use crate::persist::Provenance;
use crate::policy::{
    constant_model_limits, linear_utility_limits, zhang_small_kappa_limits, PolicySurface,
};

/// Largest per-step fill probability at zero spread that a simulation accepts.
pub const MAX_STEP_FILL_PROBABILITY: f64 = 0.2;

/// Posted prices; `None` where the side is not quoted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quotes {
    pub ask: Option<f64>,
    pub bid: Option<f64>,
}

/// Solver policy snapshots with the conversion back to market units.
#[derive(Debug, Clone)]
pub struct SurfacePolicy {
    pub lattice: Lattice,
    /// Sorted by `tau`.
    pub snapshots: Vec<PolicySurface>,
    pub units: Units,
    /// Market-unit risk aversion and mean-reversion rate.
    pub gamma: f64,
    pub alpha: f64,
}

impl SurfacePolicy {
    pub fn new(lattice: Lattice, mut snapshots: Vec<PolicySurface>, hjb: &HjbParams, model: &ModelParams) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::InvalidConfig("surface policy needs at least one snapshot".into()));
        }
        snapshots.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        Ok(SurfacePolicy { lattice, snapshots, units: hjb.units, gamma: model.gamma, alpha: model.alpha })
    }

    fn nearest(&self, tau: f64) -> &PolicySurface {
        let i = self.snapshots.partition_point(|p| p.tau < tau);
        if i == 0 {
            return &self.snapshots[0];
        }
        if i == self.snapshots.len() {
            return &self.snapshots[i - 1];
        }
        let (a, b) = (&self.snapshots[i - 1], &self.snapshots[i]);
        if tau - a.tau <= b.tau - tau {
            a
        } else {
            b
        }
    }

    /// Quotes at market time-to-go `tau`, inventory `q`, market price `s`.
    pub fn quote(&self, tau: f64, q: i64, s: f64) -> Quotes {
        let (tau_solver, s_solver, back) = match self.units {
            Units::Scaled => (tau * self.alpha, s * self.gamma, 1.0 / self.gamma),
            Units::Market => (tau, s, 1.0),
        };
        let (ask, bid) = self.nearest(tau_solver).interp(&self.lattice, q, s_solver);
        Quotes { ask: ask.map(|x| x * back), bid: bid.map(|x| x * back) }
    }
}

/// Closed-form baselines usable as quoting policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Constant reference price limits.
    ConstantModel,
    /// Small-kappa linearization.
    Zhang,
    /// Risk-neutral limits.
    LinearUtility,
}

#[derive(Debug, Clone)]
pub enum PolicySource {
    Surface(SurfacePolicy),
    Constant { ask: f64, bid: f64 },
    /// Inventory-dependent fixed prices, indexed by `q + q_cap`.
    Table { name: Baseline, q_cap: usize, ask: Vec<f64>, bid: Vec<f64> },
}

impl PolicySource {
    pub fn baseline(kind: Baseline, p: &ModelParams, q_cap: usize) -> Result<Self> {
        let qc = q_cap as i64;
        let mut ask = Vec::with_capacity(2 * q_cap + 1);
        let mut bid = Vec::with_capacity(2 * q_cap + 1);
        for q in -qc..=qc {
            let (a, b) = match kind {
                Baseline::ConstantModel => constant_model_limits(p)?,
                Baseline::LinearUtility => linear_utility_limits(p),
                Baseline::Zhang => {
                    let sp = scale_params(p)?;
                    let (a, b) = zhang_small_kappa_limits(&sp, q);
                    (a / p.gamma, b / p.gamma)
                }
            };
            ask.push(a);
            bid.push(b);
        }
        Ok(PolicySource::Table { name: kind, q_cap, ask, bid })
    }

    pub fn quote(&self, tau: f64, q: i64, s: f64) -> Quotes {
        match self {
            PolicySource::Surface(sp) => sp.quote(tau, q, s),
            PolicySource::Constant { ask, bid } => Quotes { ask: Some(*ask), bid: Some(*bid) },
            PolicySource::Table { q_cap, ask, bid, .. } => {
                let i = (q + *q_cap as i64).clamp(0, 2 * *q_cap as i64) as usize;
                Quotes { ask: Some(ask[i]), bid: Some(bid[i]) }
            }
        }
    }

    /// Inventory bound implied by the policy, if it has one.
    pub fn q_cap(&self) -> Option<usize> {
        match self {
            PolicySource::Surface(sp) => Some(sp.lattice.q_cap),
            PolicySource::Table { q_cap, .. } => Some(*q_cap),
            PolicySource::Constant { .. } => None,
        }
    }
}

/// Simulation settings in market units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub dt: f64,
    /// Inventory bound: selling is suppressed at `-q_cap`, buying at `q_cap`.
    pub q_cap: usize,
    pub q0: i64,
    pub s0: f64,
}

/// One simulated trajectory. Quotes and fill flags at index `k` belong to
/// the interval `[t_k, t_k+1)`; the final entry carries no quotes.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPath {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub ask: Vec<f64>,
    pub bid: Vec<f64>,
    pub ask_fill: Vec<bool>,
    pub bid_fill: Vec<bool>,
    pub q: Vec<i64>,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    /// Steps on which a posted spread was negative.
    pub negative_spread_steps: usize,
    pub ask_opportunities: usize,
    pub bid_opportunities: usize,
}

impl SimPath {
    pub fn n_ask_fills(&self) -> usize {
        self.ask_fill.iter().filter(|&&f| f).count()
    }

    pub fn n_bid_fills(&self) -> usize {
        self.bid_fill.iter().filter(|&&f| f).count()
    }

    pub fn terminal_wealth(&self) -> f64 {
        *self.w.last().unwrap()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, provenance: &Provenance) -> Result<()> {
        w.write_all(provenance.csv_comment().as_bytes())?;
        writeln!(w, "t,S,ask,bid,Q,X,W,ask_fill,bid_fill")?;
        for k in 0..self.t.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                self.t[k],
                self.s[k],
                self.ask[k],
                self.bid[k],
                self.q[k],
                self.x[k],
                self.w[k],
                self.ask_fill[k] as u8,
                self.bid_fill[k] as u8
            )?;
        }
        Ok(())
    }
}

/// Exact OU transition draw.
pub fn sample_ou<R: Rng>(rng: &mut R, s: f64, dt: f64, p: &ModelParams) -> f64 {
    let (mean, var) = ou_moments(s, dt, p);
    let z: f64 = rng.sample(StandardNormal);
    mean + var.sqrt() * z
}

/// Per-path generator: stream `path_index` of a ChaCha8 keyed by `seed`.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

fn fill_probability(a: f64, kappa: f64, spread: f64, dt: f64) -> f64 {
    let exponent = (-kappa * spread).clamp(-700.0, 700.0);
    -(-a * exponent.exp() * dt).exp_m1()
}

fn check_config(p: &ModelParams, cfg: &SimConfig) -> Result<usize> {
    p.validate()?;
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
        return Err(Error::InvalidConfig("simulation dt must be > 0".into()));
    }
    let base = -(-p.a * cfg.dt).exp_m1();
    if !(base < MAX_STEP_FILL_PROBABILITY) {
        return Err(Error::InvalidConfig(format!(
            "fill probability per step at zero spread is {base:.3}; reduce dt below the {MAX_STEP_FILL_PROBABILITY} bound"
        )));
    }
    if cfg.q0.unsigned_abs() as usize > cfg.q_cap {
        return Err(Error::InvalidConfig(format!("q0 = {} outside [-{}, {}]", cfg.q0, cfg.q_cap, cfg.q_cap)));
    }
    let ratio = p.horizon / cfg.dt;
    let n = ratio.round();
    Ok(if (ratio - n).abs() <= 1e-9 * n.max(1.0) { n as usize } else { ratio.ceil() as usize })
}

/// Simulates one path over `[0, T]` with the given stream.
pub fn simulate(
    policy: &PolicySource,
    p: &ModelParams,
    cfg: &SimConfig,
    seed: u64,
    path_index: u64,
) -> Result<SimPath> {
    let n = check_config(p, cfg)?;
    let mut rng = path_rng(seed, path_index);
    let qc = cfg.q_cap as i64;
    let mut path = SimPath {
        t: Vec::with_capacity(n + 1),
        s: Vec::with_capacity(n + 1),
        ask: Vec::with_capacity(n + 1),
        bid: Vec::with_capacity(n + 1),
        ask_fill: Vec::with_capacity(n + 1),
        bid_fill: Vec::with_capacity(n + 1),
        q: Vec::with_capacity(n + 1),
        x: Vec::with_capacity(n + 1),
        w: Vec::with_capacity(n + 1),
        negative_spread_steps: 0,
        ask_opportunities: 0,
        bid_opportunities: 0,
    };
    let (mut s, mut q, mut x) = (cfg.s0, cfg.q0, 0.0);
    for k in 0..=n {
        let t = (k as f64 * cfg.dt).min(p.horizon);
        path.t.push(t);
        path.s.push(s);
        path.q.push(q);
        path.x.push(x);
        path.w.push(x + q as f64 * s);
        if k == n {
            path.ask.push(f64::NAN);
            path.bid.push(f64::NAN);
            path.ask_fill.push(false);
            path.bid_fill.push(false);
            break;
        }
        let tau = p.horizon - t;
        let quotes = policy.quote(tau, q, s);
        let can_sell = q > -qc;
        let can_buy = q < qc;
        let ask = match (can_sell, quotes.ask) {
            (true, Some(a)) if a.is_finite() => Some(a),
            (true, _) => return Err(Error::QuoteUnavailable { tau, q, s }),
            (false, a) => a.filter(|a| a.is_finite()),
        };
        let bid = match (can_buy, quotes.bid) {
            (true, Some(b)) if b.is_finite() => Some(b),
            (true, _) => return Err(Error::QuoteUnavailable { tau, q, s }),
            (false, b) => b.filter(|b| b.is_finite()),
        };
        let mut negative = false;
        // draw both uniforms every step so streams stay aligned across policies
        let (u_ask, u_bid): (f64, f64) = (rng.random(), rng.random());
        let mut sold = false;
        let mut bought = false;
        if let Some(a) = ask {
            negative |= a < s;
            if can_sell {
                path.ask_opportunities += 1;
                sold = u_ask < fill_probability(p.a, p.kappa, a - s, cfg.dt);
            }
        }
        if let Some(b) = bid {
            negative |= b > s;
            if can_buy {
                path.bid_opportunities += 1;
                bought = u_bid < fill_probability(p.a, p.kappa, s - b, cfg.dt);
            }
        }
        path.negative_spread_steps += negative as usize;
        path.ask.push(ask.unwrap_or(f64::NAN));
        path.bid.push(bid.unwrap_or(f64::NAN));
        path.ask_fill.push(sold);
        path.bid_fill.push(bought);
        if sold {
            q -= 1;
            x += ask.unwrap();
        }
        if bought {
            q += 1;
            x -= bid.unwrap();
        }
        s = sample_ou(&mut rng, s, cfg.dt, p);
    }
    Ok(path)
}

/// Settings for the per-path diagnostics gathered by [`PathOutcome`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticConfig {
    /// Width of the fill-rate bins, market time.
    pub fill_bin: f64,
    /// Steps aggregated into one increment for the lag correlation.
    pub lag_stride: usize,
    /// Largest lag, in strides.
    pub max_lag: usize,
    /// Time-to-go window `[lo, hi]` for the quiet-quote metric.
    pub quiet_window: (f64, f64),
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig { fill_bin: 1.0, lag_stride: 25, max_lag: 20, quiet_window: (2.0, 10.0) }
    }
}

/// What a path contributes to the batch summary; small enough to keep for
/// every path of a large batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub terminal_price: f64,
    pub terminal_wealth: f64,
    pub terminal_inventory: i64,
    pub terminal_cash: f64,
    pub ask_fills: usize,
    pub bid_fills: usize,
    pub ask_opportunities: usize,
    pub bid_opportunities: usize,
    pub negative_spread_steps: usize,
    /// Fill counts (both sides) per time bin.
    pub fills_per_bin: Vec<usize>,
    pub bin_width: f64,
    /// `sum_k dP_{k+l} dS_k` per lag `l`, over stride-aggregated increments
    /// of the mid quote `P` and the reference price `S`.
    pub cross_products: Vec<f64>,
    pub quote_sq: f64,
    pub price_sq: f64,
    /// `sum dQ dS`, `sum dQ^2` over the same increments.
    pub inventory_price: f64,
    pub inventory_sq: f64,
    /// Largest change in either quote between consecutive steps without a
    /// fill, within the time-to-go window.
    pub max_quiet_quote_change: f64,
}

impl PathOutcome {
    pub fn from_path(path: &SimPath, horizon: f64, diag: &DiagnosticConfig) -> Self {
        let n = path.t.len() - 1;
        let bins = ((horizon / diag.fill_bin).ceil() as usize).max(1);
        let mut fills_per_bin = vec![0usize; bins];
        for k in 0..n {
            let fills = path.ask_fill[k] as usize + path.bid_fill[k] as usize;
            if fills > 0 {
                let b = ((path.t[k] / diag.fill_bin) as usize).min(bins - 1);
                fills_per_bin[b] += fills;
            }
        }

        let stride = diag.lag_stride.max(1);
        let mid: Vec<f64> = (0..n)
            .map(|k| {
                match (path.ask[k].is_finite(), path.bid[k].is_finite()) {
                    (true, true) => 0.5 * (path.ask[k] + path.bid[k]),
                    (true, false) => path.ask[k],
                    (false, true) => path.bid[k],
                    (false, false) => f64::NAN,
                }
            })
            .collect();
        let blocks = if n == 0 { 0 } else { (n - 1) / stride };
        let incr = |series: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..blocks).map(|b| series((b + 1) * stride) - series(b * stride)).collect()
        };
        let d_quote = incr(&|k| mid[k]);
        let d_price = incr(&|k| path.s[k]);
        let d_inv = incr(&|k| path.q[k] as f64);
        let finite = |x: f64| if x.is_finite() { x } else { 0.0 };
        let cross_products = (0..=diag.max_lag)
            .map(|l| {
                (0..blocks.saturating_sub(l))
                    .map(|b| finite(d_quote[b + l]) * d_price[b])
                    .sum()
            })
            .collect();
        let quote_sq = d_quote.iter().map(|x| finite(*x).powi(2)).sum();
        let price_sq = d_price.iter().map(|x| x * x).sum();
        let inventory_price = d_inv.iter().zip(&d_price).map(|(a, b)| a * b).sum();
        let inventory_sq = d_inv.iter().map(|x| x * x).sum();

        let (lo, hi) = diag.quiet_window;
        let mut max_quiet: f64 = 0.0;
        for k in 0..n.saturating_sub(1) {
            let tau = horizon - path.t[k + 1];
            let quiet = !path.ask_fill[k] && !path.bid_fill[k];
            if quiet && tau >= lo && tau <= hi {
                for (a, b) in [(path.ask[k], path.ask[k + 1]), (path.bid[k], path.bid[k + 1])] {
                    if a.is_finite() && b.is_finite() {
                        max_quiet = max_quiet.max((b - a).abs());
                    }
                }
            }
        }

        PathOutcome {
            terminal_price: *path.s.last().unwrap(),
            terminal_wealth: path.terminal_wealth(),
            terminal_inventory: *path.q.last().unwrap(),
            terminal_cash: *path.x.last().unwrap(),
            ask_fills: path.n_ask_fills(),
            bid_fills: path.n_bid_fills(),
            ask_opportunities: path.ask_opportunities,
            bid_opportunities: path.bid_opportunities,
            negative_spread_steps: path.negative_spread_steps,
            fills_per_bin,
            bin_width: diag.fill_bin,
            cross_products,
            quote_sq,
            price_sq,
            inventory_price,
            inventory_sq,
            max_quiet_quote_change: max_quiet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanVar {
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

impl MeanVar {
    pub fn of(xs: impl Iterator<Item = f64> + Clone) -> Self {
        let n = xs.clone().count();
        if n == 0 {
            return MeanVar { mean: f64::NAN, variance: f64::NAN, std_error: f64::NAN };
        }
        let mean = xs.clone().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        MeanVar { mean, variance, std_error: (variance / n as f64).sqrt() }
    }
}

/// Batch summary, serialized as the simulation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub paths: usize,
    pub terminal_price: MeanVar,
    pub terminal_wealth: MeanVar,
    pub terminal_inventory: MeanVar,
    pub terminal_cash: MeanVar,
    pub ask_fills: MeanVar,
    pub bid_fills: MeanVar,
    /// Monte Carlo estimate of `E[-exp(-gamma W_T)]`.
    pub utility: MeanVar,
    /// Fills per unit time per side, per opportunity-weighted step.
    pub ask_fill_rate: f64,
    pub bid_fill_rate: f64,
    /// Mean fills (both sides) per unit time in each time bin.
    pub fill_rate_series: Vec<f64>,
    pub negative_spread_steps: usize,
    /// Correlation of quote increments with earlier price increments, by lag.
    pub lag_correlation: Vec<f64>,
    /// Lag (in strides) with the largest correlation.
    pub peak_lag: usize,
    pub inventory_price_correlation: f64,
    pub max_quiet_quote_change: f64,
}

/// Reduces per-path outcomes. `dt` converts opportunity counts into rates.
pub fn summarize(outcomes: &[PathOutcome], gamma: f64, dt: f64) -> BatchSummary {
    let n = outcomes.len();
    let col = |f: fn(&PathOutcome) -> f64| MeanVar::of(outcomes.iter().map(f));
    let utility = MeanVar::of(outcomes.iter().map(|o| -(-gamma * o.terminal_wealth).exp()));
    let sum = |f: fn(&PathOutcome) -> usize| outcomes.iter().map(f).sum::<usize>() as f64;
    let rate = |fills: f64, opp: f64| if opp > 0.0 { fills / (opp * dt) } else { f64::NAN };
    let bins = outcomes.first().map_or(0, |o| o.fills_per_bin.len());
    let width = outcomes.first().map_or(1.0, |o| o.bin_width);
    let fill_rate_series = (0..bins)
        .map(|b| outcomes.iter().map(|o| o.fills_per_bin[b]).sum::<usize>() as f64 / (n as f64 * width))
        .collect();
    let lags = outcomes.first().map_or(0, |o| o.cross_products.len());
    let quote_sq: f64 = outcomes.iter().map(|o| o.quote_sq).sum();
    let price_sq: f64 = outcomes.iter().map(|o| o.price_sq).sum();
    let norm = (quote_sq * price_sq).sqrt();
    let lag_correlation: Vec<f64> = (0..lags)
        .map(|l| outcomes.iter().map(|o| o.cross_products[l]).sum::<f64>() / norm)
        .collect();
    let peak_lag = lag_correlation
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(l, _)| l);
    let inv_sq: f64 = outcomes.iter().map(|o| o.inventory_sq).sum();
    let inv_price: f64 = outcomes.iter().map(|o| o.inventory_price).sum();
    BatchSummary {
        paths: n,
        terminal_price: col(|o| o.terminal_price),
        terminal_wealth: col(|o| o.terminal_wealth),
        terminal_inventory: col(|o| o.terminal_inventory as f64),
        terminal_cash: col(|o| o.terminal_cash),
        ask_fills: col(|o| o.ask_fills as f64),
        bid_fills: col(|o| o.bid_fills as f64),
        utility,
        ask_fill_rate: rate(sum(|o| o.ask_fills), sum(|o| o.ask_opportunities)),
        bid_fill_rate: rate(sum(|o| o.bid_fills), sum(|o| o.bid_opportunities)),
        fill_rate_series,
        negative_spread_steps: outcomes.iter().map(|o| o.negative_spread_steps).sum(),
        lag_correlation,
        peak_lag,
        inventory_price_correlation: inv_price / (inv_sq * price_sq).sqrt(),
        max_quiet_quote_change: outcomes.iter().map(|o| o.max_quiet_quote_change).fold(0.0, f64::max),
    }
}

/// Summary of fully stored paths.
pub fn batch_stats(paths: &[SimPath], p: &ModelParams, dt: f64, diag: &DiagnosticConfig) -> BatchSummary {
    let outcomes: Vec<PathOutcome> = paths.iter().map(|path| PathOutcome::from_path(path, p.horizon, diag)).collect();
    summarize(&outcomes, p.gamma, dt)
}

/// Simulates `paths` paths in parallel and keeps only their outcomes.
/// `keep` selects path indices whose full trajectories are also returned.
pub fn simulate_batch(
    policy: &PolicySource,
    p: &ModelParams,
    cfg: &SimConfig,
    seed: u64,
    paths: usize,
    diag: &DiagnosticConfig,
    keep: usize,
) -> Result<(BatchSummary, Vec<SimPath>)> {
    let results: Vec<Result<(PathOutcome, Option<SimPath>)>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let path = simulate(policy, p, cfg, seed, i as u64)?;
            let outcome = PathOutcome::from_path(&path, p.horizon, diag);
            Ok((outcome, (i < keep).then_some(path)))
        })
        .collect();
    let mut outcomes = Vec::with_capacity(paths);
    let mut kept = Vec::new();
    for r in results {
        let (o, path) = r?;
        outcomes.push(o);
        kept.extend(path);
    }
    Ok((summarize(&outcomes, p.gamma, cfg.dt), kept))
}
