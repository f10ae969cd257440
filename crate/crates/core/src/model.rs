//! Model parameters, the time/price scaling and exact Ornstein-Uhlenbeck moments.
//!
//! Market-unit parameters live in [`ModelParams`]. Scaling time by the
//! mean-reversion rate and prices by the risk aversion yields the
//! dimensionless [`ScaledParams`], in which `alpha = gamma = 1`. The solvers
//! work on [`HjbParams`], the coefficient set of the reduced HJB equation,
//! which is either the scaled problem or (for `alpha = 0`) the unscaled one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Market-unit parameters of the control problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Market-order flow magnitude (fills per unit time at zero spread).
    #[serde(rename = "A")]
    pub a: f64,
    /// Order-book decay rate, 1/price.
    pub kappa: f64,
    /// Risk aversion, 1/price.
    pub gamma: f64,
    /// Reference-price volatility, price/sqrt(time).
    pub sigma: f64,
    /// Long-term mean of the reference price.
    pub mu: f64,
    /// Mean-reversion rate, 1/time.
    pub alpha: f64,
    /// Trading horizon.
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl ModelParams {
    /// Checks the parameter invariants. `A = 0` (no order flow) and
    /// `gamma = 0` (linear utility) are accepted here; operations that need
    /// them positive check on their own.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("A", self.a),
            ("kappa", self.kappa),
            ("gamma", self.gamma),
            ("sigma", self.sigma),
            ("mu", self.mu),
            ("alpha", self.alpha),
            ("T", self.horizon),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, x)| !x.is_finite()) {
            return Err(Error::InvalidParams(format!("{name} is not finite")));
        }
        if self.a < 0.0 {
            return Err(Error::InvalidParams("A must be >= 0".into()));
        }
        if self.kappa <= 0.0 {
            return Err(Error::InvalidParams("kappa must be > 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidParams("gamma must be >= 0".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidParams("sigma must be >= 0".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidParams("alpha must be >= 0".into()));
        }
        if self.horizon <= 0.0 {
            return Err(Error::InvalidParams("T must be > 0".into()));
        }
        Ok(())
    }
}

/// Dimensionless parameters; `alpha = gamma = 1` is implied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledParams {
    pub a: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub mu: f64,
    pub horizon: f64,
}

impl ScaledParams {
    /// Inverse of [`scale_params`] given the rates that were scaled out.
    pub fn unscale(&self, gamma: f64, alpha: f64) -> Result<ModelParams> {
        if !(gamma > 0.0 && alpha > 0.0) {
            return Err(Error::InvalidParams(
                "unscaling needs gamma > 0 and alpha > 0".into(),
            ));
        }
        Ok(ModelParams {
            a: self.a * alpha,
            kappa: self.kappa * gamma,
            gamma,
            sigma: self.sigma * alpha.sqrt() / gamma,
            mu: self.mu / gamma,
            alpha,
            horizon: self.horizon / alpha,
        })
    }
}

/// Maps market parameters to the dimensionless problem.
pub fn scale_params(p: &ModelParams) -> Result<ScaledParams> {
    p.validate()?;
    if p.alpha == 0.0 {
        return Err(Error::InvalidParams(
            "scaling undefined for alpha = 0".into(),
        ));
    }
    if p.gamma == 0.0 {
        return Err(Error::InvalidParams(
            "scaling undefined for gamma = 0".into(),
        ));
    }
    Ok(ScaledParams {
        a: p.a / p.alpha,
        kappa: p.kappa / p.gamma,
        sigma: p.gamma * p.sigma / p.alpha.sqrt(),
        mu: p.gamma * p.mu,
        horizon: p.alpha * p.horizon,
    })
}

/// Converts a scaled price back to market units.
pub fn unscale_price(x: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParams("unscale_price needs gamma > 0".into()));
    }
    Ok(x / gamma)
}

/// Unit convention of a set of solver coefficients and of every surface
/// computed from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Dimensionless: prices multiplied by gamma, time by alpha.
    Scaled,
    /// Market units (used for the alpha = 0 problem).
    Market,
}

/// Coefficients of the reduced HJB equation
///
/// `v_tau = sigma^2/2 (v_ss - gamma v_s^2) + alpha (mu - s) v_s + source`.
///
/// The scaled problem is the special case `gamma = alpha = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HjbParams {
    pub a: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub mu: f64,
    pub alpha: f64,
    pub units: Units,
}

impl HjbParams {
    pub fn scaled(p: &ScaledParams) -> Self {
        HjbParams {
            a: p.a,
            kappa: p.kappa,
            gamma: 1.0,
            sigma: p.sigma,
            mu: p.mu,
            alpha: 1.0,
            units: Units::Scaled,
        }
    }

    /// The unscaled equation, needed when `alpha = 0` rules out scaling.
    pub fn market(p: &ModelParams) -> Result<Self> {
        p.validate()?;
        if p.gamma == 0.0 {
            return Err(Error::InvalidParams(
                "the exponential-utility HJB equation needs gamma > 0".into(),
            ));
        }
        Ok(HjbParams {
            a: p.a,
            kappa: p.kappa,
            gamma: p.gamma,
            sigma: p.sigma,
            mu: p.mu,
            alpha: p.alpha,
            units: Units::Market,
        })
    }

    /// Scaled coefficients when both rates are positive, market ones otherwise.
    pub fn for_model(p: &ModelParams) -> Result<Self> {
        if p.alpha > 0.0 && p.gamma > 0.0 {
            Ok(Self::scaled(&scale_params(p)?))
        } else {
            Self::market(p)
        }
    }

    pub fn derived(&self) -> DerivedConstants {
        DerivedConstants::new(self.a, self.kappa, self.gamma)
    }

    /// Standard deviation of the stationary reference-price law.
    pub fn stationary_std(&self) -> Option<f64> {
        (self.alpha > 0.0).then(|| self.sigma / (2.0 * self.alpha).sqrt())
    }

    /// Factor converting a price in these units to market units, given the
    /// market-unit risk aversion.
    pub fn price_to_market(&self, market_gamma: f64) -> f64 {
        match self.units {
            Units::Scaled => 1.0 / market_gamma,
            Units::Market => 1.0,
        }
    }
}

/// Constants derived from `A`, `kappa` and `gamma` that appear in the
/// source terms and the optimal spreads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConstants {
    /// Source-term coefficient `A/(kappa+gamma) (1+gamma/kappa)^(-kappa/gamma)`.
    pub source: f64,
    /// `(1/gamma) log(1 + gamma/kappa)`.
    pub half_spread: f64,
    /// Off-diagonal of the inventory generator, `kappa * source`.
    pub eta_q: f64,
}

impl DerivedConstants {
    pub fn new(a: f64, kappa: f64, gamma: f64) -> Self {
        let ratio = gamma / kappa;
        let log_base = ratio.ln_1p();
        let source = a / (kappa + gamma) * (-(log_base / ratio)).exp();
        DerivedConstants {
            source,
            half_spread: log_base / gamma,
            eta_q: kappa * source,
        }
    }

    pub fn scaled(p: &ScaledParams) -> Self {
        Self::new(p.a, p.kappa, 1.0)
    }
}

/// Exact conditional mean and variance of an Ornstein-Uhlenbeck step.
pub fn ou_moments(s0: f64, dt: f64, p: &ModelParams) -> (f64, f64) {
    ou_moments_raw(s0, dt, p.alpha, p.mu, p.sigma)
}

pub(crate) fn ou_moments_raw(s0: f64, dt: f64, alpha: f64, mu: f64, sigma: f64) -> (f64, f64) {
    debug_assert!(dt >= 0.0 && alpha >= 0.0);
    if alpha == 0.0 {
        return (s0, sigma * sigma * dt);
    }
    let decay = (-alpha * dt).exp();
    let mean = mu + (s0 - mu) * decay;
    let var = sigma * sigma * -(-2.0 * alpha * dt).exp_m1() / (2.0 * alpha);
    (mean, var)
}
