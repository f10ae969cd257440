use crate::lattice::{Lattice, ValueSurface};
use crate::policy::PolicySurface;

/// Result of a backward solve: retained snapshots, their policies and the
/// late-time growth rate of `v`.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub snapshots: Vec<ValueSurface>,
    pub policies: Vec<PolicySurface>,
    /// `(v(T) - v(T - dt)) / dt` at `q = 0`, `s = mu`; `None` for zero steps.
    pub v_tau_estimate: Option<f64>,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct SolveStats {
    pub steps: usize,
    /// Total inner iterations (finite differences only).
    pub inner_iterations: usize,
    pub max_inner_iterations: usize,
}

impl SolveOutput {
    pub fn final_surface(&self) -> &ValueSurface {
        self.snapshots.last().expect("a solve always retains the final surface")
    }

    pub fn snapshot_near(&self, tau: f64) -> &ValueSurface {
        self.snapshots
            .iter()
            .min_by(|a, b| (a.tau - tau).abs().total_cmp(&(b.tau - tau).abs()))
            .expect("non-empty")
    }

    pub fn policy_near(&self, tau: f64) -> &PolicySurface {
        self.policies
            .iter()
            .min_by(|a, b| (a.tau - tau).abs().total_cmp(&(b.tau - tau).abs()))
            .expect("non-empty")
    }
}

pub(crate) fn growth_rate(lat: &Lattice, mu: f64, prev: &ValueSurface, last: &ValueSurface) -> f64 {
    (last.interp(lat, 0, mu) - prev.interp(lat, 0, mu)) / lat.dt
}
