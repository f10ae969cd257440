//! Run configuration read from TOML, and the hash that ties outputs to it.
//!
//! Times in the `lattice` block are in mean-reversion cycles (`1/alpha`),
//! prices in market units. For `alpha = 0` there is no cycle and lattice
//! times are plain market time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fd_solver::FdConfig;
use crate::lattice::{build_lattice, Lattice, LatticeSpec};
use crate::model::{HjbParams, ModelParams, ScaledParams, Units};
use crate::simulator::DiagnosticConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Fd,
    Splitstep,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Fd => "fd",
            SolverKind::Splitstep => "splitstep",
        }
    }
}

/// Quoting policy driven through the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[default]
    Fd,
    Splitstep,
    Constant,
    Zhang,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    /// Half-width of the price grid in stationary standard deviations.
    pub width_stddevs: f64,
    /// Explicit half-width in market price units; needed when the price has
    /// no stationary law.
    pub half_width: Option<f64>,
    pub n_s: usize,
    pub q_cap: usize,
    pub dt: f64,
    /// Defaults to the model horizon expressed in cycles.
    pub horizon: Option<f64>,
    /// Defaults to a few early times followed by an even spread.
    pub snapshot_times: Vec<f64>,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            width_stddevs: 5.0,
            half_width: None,
            n_s: 401,
            q_cap: 30,
            dt: 0.01,
            horizon: None,
            snapshot_times: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Market time step.
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    pub q0: i64,
    /// Starting price, defaults to `mu`.
    pub s0: Option<f64>,
    /// Inventory bound, defaults to the lattice `q_cap`.
    pub q_cap: Option<usize>,
    /// Number of leading paths written out in full.
    pub keep_paths: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            dt: 1e-3,
            paths: 1000,
            seed: 0,
            policy: PolicyKind::Fd,
            q0: 0,
            s0: None,
            q_cap: None,
            keep_paths: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Insensitivity tolerance, solver price units.
    pub tolerance: f64,
    /// Inventory window `|q| <= q_window`; defaults to `q_cap / 4`.
    pub q_window: Option<i64>,
    /// Central fraction of the price grid used by the metrics.
    pub s_window: f64,
    pub fill_bin: f64,
    pub lag_stride: usize,
    pub max_lag: usize,
    pub quiet_window: (f64, f64),
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        let d = DiagnosticConfig::default();
        DiagnosticsConfig {
            tolerance: 1e-3,
            q_window: None,
            s_window: 0.8,
            fill_bin: d.fill_bin,
            lag_stride: d.lag_stride,
            max_lag: d.max_lag,
            quiet_window: d.quiet_window,
        }
    }
}

impl DiagnosticsConfig {
    pub fn simulator(&self) -> DiagnosticConfig {
        DiagnosticConfig {
            fill_bin: self.fill_bin,
            lag_stride: self.lag_stride,
            max_lag: self.max_lag,
            quiet_window: self.quiet_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumConfig {
    /// Shooting step as a fraction of the scaled volatility.
    pub h_over_sigma: f64,
    /// Central fraction of the price grid used in the comparison.
    pub window: f64,
    pub tolerance: f64,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        EquilibriumConfig { h_over_sigma: 1e-3, window: 0.8, tolerance: 5e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    #[serde(default)]
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default)]
    pub fd: FdConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub equilibrium: EquilibriumConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks every block before any computation starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fd.validate()?;
        self.lattice()?;
        let sim = &self.simulation;
        if !(sim.dt > 0.0 && sim.dt.is_finite()) {
            return Err(Error::InvalidConfig("simulation.dt must be > 0".into()));
        }
        if sim.paths == 0 {
            return Err(Error::InvalidConfig("simulation.paths must be >= 1".into()));
        }
        let d = &self.diagnostics;
        if !(d.tolerance > 0.0) || !(d.s_window > 0.0 && d.s_window <= 1.0) {
            return Err(Error::InvalidConfig("diagnostics need tolerance > 0 and s_window in (0, 1]".into()));
        }
        if !(d.fill_bin > 0.0) || d.lag_stride == 0 {
            return Err(Error::InvalidConfig("diagnostics need fill_bin > 0 and lag_stride >= 1".into()));
        }
        let e = &self.equilibrium;
        if !(e.h_over_sigma > 0.0) || !(e.window > 0.0 && e.window <= 1.0) || !(e.tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "equilibrium needs h_over_sigma > 0, window in (0, 1] and tolerance > 0".into(),
            ));
        }
        if self.solver == SolverKind::Splitstep && self.hjb()?.units != Units::Scaled {
            return Err(Error::InvalidConfig("the split-step solver needs alpha > 0 and gamma > 0".into()));
        }
        Ok(())
    }

    pub fn hjb(&self) -> Result<HjbParams> {
        HjbParams::for_model(&self.model)
    }

    /// Scaled parameters; `None` when the problem is solved in market units.
    pub fn scaled(&self) -> Result<Option<ScaledParams>> {
        let hjb = self.hjb()?;
        Ok((hjb.units == Units::Scaled).then(|| ScaledParams {
            a: hjb.a,
            kappa: hjb.kappa,
            sigma: hjb.sigma,
            mu: hjb.mu,
            horizon: self.horizon_solver(),
        }))
    }

    /// Solve horizon in solver time units.
    pub fn horizon_solver(&self) -> f64 {
        self.lattice.horizon.unwrap_or(if self.model.alpha > 0.0 {
            self.model.alpha * self.model.horizon
        } else {
            self.model.horizon
        })
    }

    pub fn q_window(&self) -> i64 {
        self.diagnostics.q_window.unwrap_or((self.lattice.q_cap / 4) as i64)
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        if !self.lattice.snapshot_times.is_empty() {
            return self.lattice.snapshot_times.clone();
        }
        default_snapshots(self.horizon_solver())
    }

    pub fn lattice_spec(&self) -> Result<LatticeSpec> {
        let hjb = self.hjb()?;
        let l = &self.lattice;
        let price_factor = match hjb.units {
            Units::Scaled => self.model.gamma,
            Units::Market => 1.0,
        };
        Ok(LatticeSpec {
            width_stddevs: l.width_stddevs,
            half_width: l.half_width.map(|h| h * price_factor),
            n_s: l.n_s,
            q_cap: l.q_cap,
            dt: l.dt,
            horizon: self.horizon_solver(),
            snapshot_times: self.snapshot_times(),
        })
    }

    pub fn lattice(&self) -> Result<Lattice> {
        build_lattice(&self.hjb()?, &self.lattice_spec()?)
    }

    /// First 16 hex digits of the SHA-256 of the problem definition (model
    /// and lattice blocks). Solver, simulation and output settings are left
    /// out so that surfaces of the same problem from either solver compare.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&(&self.model, &self.lattice))
            .expect("plain data always serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `0.05, 0.1, 0.2, 0.5` and then an even spread of at most twenty times.
pub fn default_snapshots(horizon: f64) -> Vec<f64> {
    let mut times: Vec<f64> = [0.05, 0.1, 0.2, 0.5].into_iter().filter(|&t| t < horizon).collect();
    let stride = (horizon / 20.0).ceil().max(1.0);
    let mut t = stride;
    while t <= horizon * (1.0 + 1e-12) {
        times.push(t);
        t += stride;
    }
    times
}
