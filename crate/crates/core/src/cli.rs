//! The four commands behind the `mrmm` binary. Each writes plot-ready CSV
//! and JSON into an output directory; every file carries the config hash.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{PolicyKind, RunConfig, SolverKind};
use crate::equilibrium::{compare_to_limit, default_s_max, seed_from_growth_rate, solve_equilibrium, write_equilibrium_csv, Bracket};
use crate::error::{Error, Result};
use crate::fd_solver::fd_solve;
use crate::lattice::Lattice;
use crate::model::{HjbParams, ScaledParams, Units};
use crate::persist::{load_surface, save_surface, write_surface_csv, Provenance, SurfaceFile, ARTIFACT_VERSION};
use crate::policy::{
    bounded_inventory_limits, central_range, constant_model_limits, extract_policy, gueant_asymptotic_spreads,
    insensitivity, linear_utility_limits, zhang_small_kappa_limits, PolicySurface,
};
use crate::simulator::{simulate_batch, Baseline, BatchSummary, PolicySource, SimConfig, SurfacePolicy};
use crate::solution::{SolveOutput, SolveStats};
use crate::splitstep::splitstep_solve;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::other)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Conversion of solver times and prices to market units.
#[derive(Debug, Clone, Copy)]
struct MarketUnits {
    time: f64,
    price: f64,
}

impl MarketUnits {
    fn of(cfg: &RunConfig, hjb: &HjbParams) -> Self {
        match hjb.units {
            Units::Scaled => MarketUnits { time: 1.0 / cfg.model.alpha, price: 1.0 / cfg.model.gamma },
            Units::Market => MarketUnits { time: 1.0, price: 1.0 },
        }
    }
}

/// Runs the configured solver.
pub fn run_solver(cfg: &RunConfig, solver: SolverKind) -> Result<(HjbParams, Lattice, SolveOutput)> {
    let hjb = cfg.hjb()?;
    let lat = cfg.lattice()?;
    let out = match solver {
        SolverKind::Fd => fd_solve(&hjb, &lat, &cfg.fd)?,
        SolverKind::Splitstep => {
            let p = cfg
                .scaled()?
                .ok_or_else(|| Error::InvalidConfig("the split-step solver needs alpha > 0 and gamma > 0".into()))?;
            splitstep_solve(&p, &lat)?
        }
    };
    Ok((hjb, lat, out))
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotReport {
    pub tau: f64,
    pub tau_market: f64,
    /// Solver price units, compared against the tolerance.
    pub s_metric: f64,
    pub q_metric: f64,
    pub s_metric_market: f64,
    pub q_metric_market: f64,
    pub s_insensitive: bool,
    pub q_insensitive: bool,
    pub surface_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub version: String,
    pub config_hash: String,
    pub solver: SolverKind,
    pub units: Units,
    pub lattice: Lattice,
    pub stats: SolveStats,
    /// `v_tau` at `q = 0`, `s = mu` after the last step, solver units.
    pub v_tau_estimate: Option<f64>,
    pub tolerance: f64,
    pub q_window: i64,
    pub s_window: f64,
    pub snapshots: Vec<SnapshotReport>,
}

/// Solves and writes `<solver>/surface_NNN.bin`, `surface_final.bin`,
/// `surface_final.csv`, `policy.csv` and `report.json` under `out`.
pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<SolveReport> {
    let solver = cfg.solver;
    let (hjb, lat, solution) = run_solver(cfg, solver)?;
    let prov = Provenance::new(cfg.hash());
    let units = MarketUnits::of(cfg, &hjb);
    let dir = out.join(solver.name());
    fs::create_dir_all(&dir)?;

    let q_window = cfg.q_window();
    let window = central_range(lat.n_s, cfg.diagnostics.s_window);
    let tol = cfg.diagnostics.tolerance;
    let bare = Lattice { snapshot_steps: Vec::new(), ..lat.clone() };
    let mut snapshots = Vec::new();
    for (k, (surface, policy)) in solution.snapshots.iter().zip(&solution.policies).enumerate() {
        let name = format!("surface_{k:03}.bin");
        let file = SurfaceFile {
            provenance: prov.clone(),
            lattice: bare.clone(),
            params: hjb,
            surface: surface.clone(),
            v_tau_estimate: solution.v_tau_estimate,
        };
        save_surface(&dir.join(&name), &file)?;
        let m = insensitivity(policy, &hjb, q_window, window.clone());
        snapshots.push(SnapshotReport {
            tau: surface.tau,
            tau_market: surface.tau * units.time,
            s_metric: m.s_metric,
            q_metric: m.q_metric,
            s_metric_market: m.s_metric * units.price,
            q_metric_market: m.q_metric * units.price,
            s_insensitive: m.s_metric < tol,
            q_insensitive: m.q_metric < tol,
            surface_file: name,
        });
    }
    let last = SurfaceFile {
        provenance: prov.clone(),
        lattice: bare,
        params: hjb,
        surface: solution.final_surface().clone(),
        v_tau_estimate: solution.v_tau_estimate,
    };
    save_surface(&dir.join("surface_final.bin"), &last)?;

    let mut w = create(&dir.join("surface_final.csv"))?;
    write_surface_csv(&mut w, &prov, &lat, std::slice::from_ref(solution.final_surface()))?;
    w.flush()?;

    let mut w = create(&dir.join("policy.csv"))?;
    write_policy_csv(&mut w, &prov, &lat, &solution.policies, units)?;
    w.flush()?;

    let report = SolveReport {
        version: ARTIFACT_VERSION.to_string(),
        config_hash: prov.config_hash.clone(),
        solver,
        units: hjb.units,
        lattice: lat,
        stats: solution.stats,
        v_tau_estimate: solution.v_tau_estimate,
        tolerance: tol,
        q_window,
        s_window: cfg.diagnostics.s_window,
        snapshots,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn write_policy_csv<W: Write>(
    w: &mut W,
    prov: &Provenance,
    lat: &Lattice,
    policies: &[PolicySurface],
    units: MarketUnits,
) -> Result<()> {
    w.write_all(prov.csv_comment().as_bytes())?;
    writeln!(w, "tau,q,s,ask_price,bid_price,ask_spread,bid_spread")?;
    let px = |x: Option<f64>| opt(x.map(|v| v * units.price));
    for pol in policies {
        for q in lat.q_values() {
            for j in 0..lat.n_s {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    pol.tau * units.time,
                    q,
                    lat.s(j) * units.price,
                    px(pol.ask_price(q, j)),
                    px(pol.bid_price(q, j)),
                    px(pol.ask_spread(q, j)),
                    px(pol.bid_spread(q, j)),
                )?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub version: String,
    pub config_hash: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub settings: SimConfig,
    pub summary: BatchSummary,
}

/// Simulates under the configured policy and writes
/// `simulation/summary.json` and `simulation/path_NNNNN.csv`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<SimulationReport> {
    let sim = &cfg.simulation;
    let model = cfg.model;
    let q_cap = sim.q_cap.unwrap_or(cfg.lattice.q_cap);
    let policy = match sim.policy {
        PolicyKind::Fd | PolicyKind::Splitstep => {
            let solver = if sim.policy == PolicyKind::Fd { SolverKind::Fd } else { SolverKind::Splitstep };
            let (hjb, lat, solution) = run_solver(cfg, solver)?;
            PolicySource::Surface(SurfacePolicy::new(lat, solution.policies, &hjb, &model)?)
        }
        PolicyKind::Constant => PolicySource::baseline(Baseline::ConstantModel, &model, q_cap)?,
        PolicyKind::Zhang => PolicySource::baseline(Baseline::Zhang, &model, q_cap)?,
        PolicyKind::Linear => PolicySource::baseline(Baseline::LinearUtility, &model, q_cap)?,
    };
    let settings = SimConfig { dt: sim.dt, q_cap, q0: sim.q0, s0: sim.s0.unwrap_or(model.mu) };
    let diag = cfg.diagnostics.simulator();
    let (summary, kept) = simulate_batch(&policy, &model, &settings, sim.seed, sim.paths, &diag, sim.keep_paths)?;
    let prov = Provenance::new(cfg.hash());
    let dir = out.join("simulation");
    fs::create_dir_all(&dir)?;
    for (i, path) in kept.iter().enumerate() {
        let mut w = create(&dir.join(format!("path_{i:05}.csv")))?;
        path.write_csv(&mut w, &prov)?;
        w.flush()?;
    }
    let report = SimulationReport {
        version: ARTIFACT_VERSION.to_string(),
        config_hash: prov.config_hash,
        policy: sim.policy,
        seed: sim.seed,
        settings,
        summary,
    };
    write_json(&dir.join("summary.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumReport {
    pub version: String,
    pub config_hash: String,
    pub surface_tau: f64,
    pub seed: f64,
    pub c_hat: f64,
    /// Growth rate of `v` per mean-reversion cycle.
    pub c: f64,
    pub bracket: Bracket,
    pub max_abs_error: f64,
    pub max_abs_theta: f64,
    pub window: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

fn scaled_of(hjb: &HjbParams, horizon: f64) -> Result<ScaledParams> {
    if hjb.units != Units::Scaled {
        return Err(Error::InvalidConfig("this analysis needs the scaled problem (alpha > 0, gamma > 0)".into()));
    }
    Ok(ScaledParams { a: hjb.a, kappa: hjb.kappa, sigma: hjb.sigma, mu: hjb.mu, horizon })
}

/// Eigenvalue search seeded by the surface's growth rate, then theta
/// against the surface. Writes `equilibrium/equilibrium.csv` and
/// `equilibrium/report.json`.
pub fn cmd_equilibrium(cfg: &RunConfig, surface: &Path, out: &Path) -> Result<EquilibriumReport> {
    let file = load_surface(surface)?;
    let p = scaled_of(&file.params, file.surface.tau)?;
    if !(p.sigma > 0.0) {
        return Err(Error::InvalidConfig("the equilibrium problem needs sigma > 0".into()));
    }
    let v_tau = file
        .v_tau_estimate
        .ok_or_else(|| Error::InvalidConfig("surface carries no growth-rate estimate (zero-step solve)".into()))?;
    let centred = ScaledParams { mu: 0.0, ..p };
    let seed = seed_from_growth_rate(v_tau, &centred);
    let h = cfg.equilibrium.h_over_sigma * p.sigma;
    let lat = &file.lattice;
    let s_end = (lat.s_max - p.mu).abs().max((p.mu - lat.s_min).abs()) + 2.0 * h;
    let eq = solve_equilibrium(&centred, seed, default_s_max(&centred, seed), h, s_end)?;
    let cmp = compare_to_limit(&file.surface, lat, &eq, p.mu, cfg.equilibrium.window);
    let max_abs_theta = cmp.rows.iter().map(|r| r.1.abs()).fold(0.0, f64::max);

    let prov = Provenance::new(cfg.hash());
    let dir = out.join("equilibrium");
    let mut w = create(&dir.join("equilibrium.csv"))?;
    let price = MarketUnits::of(cfg, &file.params).price;
    write_equilibrium_csv(&mut w, &prov, &eq, &cmp, p.mu, price)?;
    w.flush()?;
    let report = EquilibriumReport {
        version: ARTIFACT_VERSION.to_string(),
        config_hash: prov.config_hash,
        surface_tau: file.surface.tau,
        seed,
        c_hat: eq.c_hat,
        c: eq.c,
        bracket: eq.bracket,
        max_abs_error: cmp.max_abs_error,
        max_abs_theta,
        window: cfg.equilibrium.window,
        tolerance: cfg.equilibrium.tolerance,
        within_tolerance: cmp.max_abs_error <= cfg.equilibrium.tolerance,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Deviation {
    pub file: String,
    pub baseline: String,
    /// Largest price gap over `|q| <= q_window` and the central price
    /// window, market units.
    pub max_abs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairDeviation {
    pub a: String,
    pub b: String,
    pub max_abs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub version: String,
    pub config_hash: String,
    pub q_window: i64,
    pub s_window: f64,
    pub deviations: Vec<Deviation>,
    pub pairwise: Vec<PairDeviation>,
}

/// Baseline quotes for one inventory level, solver units; `None` where a
/// baseline does not apply.
struct BaselineRow {
    constant: Option<(f64, f64)>,
    bounded: (Option<f64>, Option<f64>),
    zhang: Option<(f64, f64)>,
    linear: Option<(f64, f64)>,
    gueant: (Option<f64>, Option<f64>),
}

fn baseline_rows(cfg: &RunConfig, hjb: &HjbParams, q_cap: usize, q_window: i64) -> Result<Vec<BaselineRow>> {
    let to_solver = 1.0 / MarketUnits::of(cfg, hjb).price;
    let model = &cfg.model;
    let scaled = (hjb.units == Units::Scaled).then(|| ScaledParams {
        a: hjb.a,
        kappa: hjb.kappa,
        sigma: hjb.sigma,
        mu: hjb.mu,
        horizon: 0.0,
    });
    let gueant = if model.alpha == 0.0 { Some(gueant_asymptotic_spreads(model, q_cap)?) } else { None };
    let constant = constant_model_limits(model).ok().map(|(a, b)| (a * to_solver, b * to_solver));
    let (la, lb) = linear_utility_limits(model);
    let mut rows = Vec::new();
    for q in -q_window..=q_window {
        let bounded = match &scaled {
            Some(sp) => {
                let b = bounded_inventory_limits(sp, q_cap, q)?;
                (b.ask, b.bid)
            }
            None => (None, None),
        };
        let gueant = match &gueant {
            Some(g) => (g.ask(q).map(|d| hjb.mu + d), g.bid(q).map(|d| hjb.mu - d)),
            None => (None, None),
        };
        rows.push(BaselineRow {
            constant,
            bounded,
            zhang: scaled.as_ref().map(|sp| zhang_small_kappa_limits(sp, q)),
            linear: Some((la * to_solver, lb * to_solver)),
            gueant,
        });
    }
    Ok(rows)
}

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

/// Compares surface files with each other and with the closed-form
/// baselines. Lattices must match; config hashes must match the current
/// configuration unless `force` is set. Writes `compare/compare.csv` and
/// `compare/compare.json`.
pub fn cmd_compare(cfg: &RunConfig, files: &[PathBuf], out: &Path, force: bool) -> Result<CompareReport> {
    if files.is_empty() {
        return Err(Error::InvalidConfig("compare needs at least one surface file".into()));
    }
    let hash = cfg.hash();
    let loaded: Vec<SurfaceFile> = files.iter().map(|f| load_surface(f)).collect::<Result<_>>()?;
    let first = &loaded[0];
    for (f, file) in files.iter().zip(&loaded) {
        if !file.lattice.same_grid(&first.lattice) {
            return Err(Error::LatticeMismatch(format!("{} and {}", name_of(&files[0]), name_of(f))));
        }
        if file.params != first.params {
            return Err(Error::LatticeMismatch(format!(
                "{} and {} were solved with different coefficients",
                name_of(&files[0]),
                name_of(f)
            )));
        }
        if !force && file.provenance.config_hash != hash {
            return Err(Error::HashMismatch { expected: hash, found: file.provenance.config_hash.clone() });
        }
    }
    let hjb = first.params;
    let lat = &first.lattice;
    let q_window = cfg.q_window().min(lat.q_cap as i64);
    let window = central_range(lat.n_s, cfg.diagnostics.s_window);
    let units = MarketUnits::of(cfg, &hjb);
    let baselines = baseline_rows(cfg, &hjb, lat.q_cap, q_window)?;
    let policies: Vec<PolicySurface> = loaded.iter().map(|f| extract_policy(&f.surface, lat, &hjb)).collect();

    let prov = Provenance::new(hash.clone());
    let dir = out.join("compare");
    let mut w = create(&dir.join("compare.csv"))?;
    w.write_all(prov.csv_comment().as_bytes())?;
    writeln!(
        w,
        "file,tau,q,ask,bid,constant_ask,constant_bid,bounded_ask,bounded_bid,zhang_ask,zhang_bid,linear_ask,linear_bid,gueant_ask,gueant_bid"
    )?;
    let px = |x: Option<f64>| opt(x.map(|v| v * units.price));
    let mut deviations = Vec::new();
    for (f, pol) in files.iter().zip(&policies) {
        let name = name_of(f);
        let mut worst = [0.0f64; 6];
        let labels = ["constant", "bounded", "zhang", "zhang_normalized", "linear", "gueant"];
        for (q, b) in (-q_window..=q_window).zip(&baselines) {
            let (ask_mu, bid_mu) = pol.interp(lat, q, hjb.mu);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                name,
                pol.tau * units.time,
                q,
                px(ask_mu),
                px(bid_mu),
                px(b.constant.map(|c| c.0)),
                px(b.constant.map(|c| c.1)),
                px(b.bounded.0),
                px(b.bounded.1),
                px(b.zhang.map(|z| z.0)),
                px(b.zhang.map(|z| z.1)),
                px(b.linear.map(|l| l.0)),
                px(b.linear.map(|l| l.1)),
                px(b.gueant.0),
                px(b.gueant.1),
            )?;
            let zero = &baselines[q_window as usize];
            let targets = [
                (b.constant.map(|c| c.0), b.constant.map(|c| c.1)),
                b.bounded,
                (b.zhang.map(|z| z.0), b.zhang.map(|z| z.1)),
                (None, None),
                (b.linear.map(|l| l.0), b.linear.map(|l| l.1)),
                b.gueant,
            ];
            for j in window.clone() {
                let (ask, bid) = (pol.ask_price(q, j), pol.bid_price(q, j));
                for (k, (ta, tb)) in targets.iter().enumerate() {
                    for (x, t) in [(ask, ta), (bid, tb)] {
                        if let (Some(x), Some(t)) = (x, t) {
                            worst[k] = worst[k].max((x - t).abs());
                        }
                    }
                }
                // ask prices relative to q = 0, against the slope of the line
                if let (Some(x), Some(x0), Some(z), Some(z0)) = (ask, pol.ask_price(0, j), b.zhang, zero.zhang) {
                    worst[3] = worst[3].max(((x - x0) - (z.0 - z0.0)).abs());
                }
            }
        }
        let present = [
            baselines[0].constant.is_some(),
            baselines.iter().any(|b| b.bounded.0.is_some() || b.bounded.1.is_some()),
            baselines[0].zhang.is_some(),
            baselines[0].zhang.is_some(),
            true,
            baselines.iter().any(|b| b.gueant.0.is_some() || b.gueant.1.is_some()),
        ];
        for k in 0..labels.len() {
            if present[k] {
                deviations.push(Deviation {
                    file: name.clone(),
                    baseline: labels[k].to_string(),
                    max_abs: worst[k] * units.price,
                });
            }
        }
    }
    w.flush()?;

    let mut pairwise = Vec::new();
    for a in 0..policies.len() {
        for b in a + 1..policies.len() {
            let mut m: f64 = 0.0;
            for q in -q_window..=q_window {
                for j in window.clone() {
                    let pairs = [
                        (policies[a].ask_price(q, j), policies[b].ask_price(q, j)),
                        (policies[a].bid_price(q, j), policies[b].bid_price(q, j)),
                    ];
                    for (x, y) in pairs {
                        if let (Some(x), Some(y)) = (x, y) {
                            m = m.max((x - y).abs());
                        }
                    }
                }
            }
            pairwise.push(PairDeviation { a: name_of(&files[a]), b: name_of(&files[b]), max_abs: m * units.price });
        }
    }
    let report = CompareReport {
        version: ARTIFACT_VERSION.to_string(),
        config_hash: hash,
        q_window,
        s_window: cfg.diagnostics.s_window,
        deviations,
        pairwise,
    };
    write_json(&dir.join("compare.json"), &report)?;
    Ok(report)
}

/// Exit status for a failed command: 2 for configuration problems, 3 for
/// numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParams(_) | Error::InvalidLattice(_) | Error::InvalidConfig(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}
