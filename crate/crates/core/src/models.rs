//! Model registry: trait motion, division rates, offspring laws and the
//! closed-form mean-growth functions m(x, s, t) for the bundled models.
//!
//! Bundled models
//! --------------
//! * `yule` — neutral clone split at constant rate b, m children.
//! * `linear_growth` — size grows linearly at rate a, divides at rate
//!   alpha*x into two halves; m solves f'' = a*alpha*f.
//! * `exp_growth` — size grows exponentially at rate a, divides at rate
//!   alpha(t)*x (piecewise-constant environment) into two halves.
//! * `parasite` — Feller diffusion dX = gX dt + sqrt(2 sigma^2 X) dW,
//!   divides at rate alpha*x + beta, uniform mass split.
//! * `plasmid_bd` — integer count performing a birth-death walk, divides at
//!   rate x, plasmids allocated binomially with a uniform bias.
//! * `two_type_switch` — type flag in {0,1}, divides at rate b_x, each
//!   daughter switches type independently with probability p.

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::motion::{FlowKind, MotionRecord};
use crate::numeric::{adaptive_simpson, exp_rel};

pub const LAMBDA_QUADRATURE_TOL: f64 = 1e-10;
pub const DEFAULT_PARASITE_STEP: f64 = 1e-3;

/// Trait of one individual: a tagged scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraitValue {
    /// Nonnegative real (cell size, parasite load).
    Real(f64),
    /// Nonnegative integer (plasmid count).
    Count(u64),
    /// Binary type flag for the switching model.
    Flag(bool),
}

impl TraitValue {
    pub fn as_f64(&self) -> f64 {
        match *self {
            TraitValue::Real(v) => v,
            TraitValue::Count(n) => n as f64,
            TraitValue::Flag(b) => {
                if b {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::fmt::Display for TraitValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TraitValue::Real(v) => write!(f, "{v}"),
            TraitValue::Count(n) => write!(f, "{n}"),
            TraitValue::Flag(b) => write!(f, "{}", u8::from(*b)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraitKind {
    Real,
    Count,
    Flag,
}

/// One division event: the parent is replaced by `children`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringDraw {
    pub children: Vec<TraitValue>,
}

impl OffspringDraw {
    pub fn count(&self) -> usize {
        self.children.len()
    }
}

/// Piecewise-constant division-rate environment alpha(t) for `exp_growth`.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaFn {
    Constant(f64),
    /// values[i] on [times[i], times[i+1]), last piece extends to infinity.
    Piecewise { times: Vec<f64>, values: Vec<f64> },
}

impl AlphaFn {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            AlphaFn::Constant(a) => *a,
            AlphaFn::Piecewise { times, values } => {
                let mut v = values[0];
                for (ti, vi) in times.iter().zip(values) {
                    if t >= *ti {
                        v = *vi;
                    } else {
                        break;
                    }
                }
                v
            }
        }
    }

    /// I(s, t) = int_s^t alpha(r) e^{a (r - s)} dr, exact per piece.
    pub fn growth_weighted_integral(&self, a: f64, s: f64, t: f64) -> f64 {
        if t <= s {
            return 0.0;
        }
        match self {
            AlphaFn::Constant(al) => al * exp_rel(a, t - s),
            AlphaFn::Piecewise { times, values } => {
                let mut acc = 0.0;
                for (i, &vi) in values.iter().enumerate() {
                    let lo = times[i].max(s);
                    let hi = if i + 1 < times.len() { times[i + 1] } else { t }.min(t);
                    if hi > lo {
                        // int_lo^hi e^{a(r-s)} dr
                        acc += vi * ((a * (hi - s)).exp() - (a * (lo - s)).exp()) / a;
                    }
                }
                acc
            }
        }
    }

    fn breakpoints(&self) -> &[f64] {
        match self {
            AlphaFn::Constant(_) => &[],
            AlphaFn::Piecewise { times, .. } => times,
        }
    }
}

/// Immutable description of one branching model. Safe to share across
/// worker threads; all randomness comes in through caller streams.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Yule {
        b: f64,
        mean_offspring: u32,
    },
    LinearGrowth {
        a: f64,
        alpha: f64,
    },
    ExpGrowth {
        a: f64,
        alpha: AlphaFn,
    },
    Parasite {
        g: f64,
        sigma2: f64,
        alpha: f64,
        beta: f64,
        step: f64,
    },
    PlasmidBd {
        lambda: f64,
        mu: f64,
    },
    TwoTypeSwitch {
        b0: f64,
        b1: f64,
        p: f64,
    },
    /// Test-only model exercising the survival-conditioning path: clone
    /// split at constant rate b, but with extinction probability p0 > 0 at
    /// each division. Not reachable from configuration files.
    #[doc(hidden)]
    TestExtinct {
        b: f64,
        p0: f64,
    },
}

// ---------------------------------------------------------------------------
// configuration parsing

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct YuleCfg {
    b: f64,
    #[serde(default = "default_mean_offspring")]
    m: u32,
}
fn default_mean_offspring() -> u32 {
    2
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearCfg {
    a: f64,
    alpha: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AlphaCfg {
    Constant(f64),
    Piecewise { times: Vec<f64>, values: Vec<f64> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpCfg {
    a: f64,
    alpha: AlphaCfg,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParasiteCfg {
    g: f64,
    sigma2: f64,
    alpha: f64,
    beta: f64,
    #[serde(default = "default_step")]
    step: f64,
}
fn default_step() -> f64 {
    DEFAULT_PARASITE_STEP
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlasmidCfg {
    lambda: f64,
    mu: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SwitchCfg {
    b0: f64,
    b1: f64,
    p: f64,
}

fn cfg_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

fn require_positive(value: f64, key: &str) -> Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(Error::Config(format!("parameter '{key}' must be > 0")));
    }
    Ok(())
}

impl ModelSpec {
    /// Build a model from a configuration map. Unknown ids and unknown or
    /// out-of-range parameters are rejected with the offending key named.
    pub fn from_config(config: &serde_json::Value) -> Result<ModelSpec> {
        let obj = config
            .as_object()
            .ok_or_else(|| Error::Config("model section must be an object".into()))?;
        let id = obj
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("model section needs a string 'id'".into()))?;
        let mut rest = obj.clone();
        rest.remove("id");
        let rest = serde_json::Value::Object(rest);
        match id {
            "yule" => {
                let c: YuleCfg = serde_json::from_value(rest).map_err(cfg_err)?;
                require_positive(c.b, "b")?;
                if c.m < 2 {
                    return Err(Error::Config("parameter 'm' must be an integer >= 2".into()));
                }
                Ok(ModelSpec::Yule {
                    b: c.b,
                    mean_offspring: c.m,
                })
            }
            "linear_growth" => {
                let c: LinearCfg = serde_json::from_value(rest).map_err(cfg_err)?;
                require_positive(c.a, "a")?;
                require_positive(c.alpha, "alpha")?;
                Ok(ModelSpec::LinearGrowth {
                    a: c.a,
                    alpha: c.alpha,
                })
            }
            "exp_growth" => {
                let c: ExpCfg = serde_json::from_value(rest).map_err(cfg_err)?;
                require_positive(c.a, "a")?;
                let alpha = match c.alpha {
                    AlphaCfg::Constant(v) => {
                        require_positive(v, "alpha")?;
                        AlphaFn::Constant(v)
                    }
                    AlphaCfg::Piecewise { times, values } => {
                        if times.len() != values.len() || times.is_empty() {
                            return Err(Error::Config(
                                "parameter 'alpha': times and values must be nonempty and equal length".into(),
                            ));
                        }
                        if times[0] != 0.0 {
                            return Err(Error::Config(
                                "parameter 'alpha': times must start at 0".into(),
                            ));
                        }
                        if times.windows(2).any(|w| w[0] >= w[1]) {
                            return Err(Error::Config(
                                "parameter 'alpha': times must be strictly increasing".into(),
                            ));
                        }
                        for v in &values {
                            require_positive(*v, "alpha")?;
                        }
                        AlphaFn::Piecewise { times, values }
                    }
                };
                Ok(ModelSpec::ExpGrowth { a: c.a, alpha })
            }
            "parasite" => {
                let c: ParasiteCfg = serde_json::from_value(rest).map_err(cfg_err)?;
                require_positive(c.g, "g")?;
                require_positive(c.sigma2, "sigma2")?;
                require_positive(c.alpha, "alpha")?;
                // beta > 0: even parasite-free cells must eventually divide
                if !(c.beta > 0.0) {
                    return Err(Error::Config("parameter 'beta' must be > 0".into()));
                }
                require_positive(c.step, "step")?;
                Ok(ModelSpec::Parasite {
                    g: c.g,
                    sigma2: c.sigma2,
                    alpha: c.alpha,
                    beta: c.beta,
                    step: c.step,
                })
            }
            "plasmid_bd" => {
                let c: PlasmidCfg = serde_json::from_value(rest).map_err(cfg_err)?;
                require_positive(c.lambda, "lambda")?;
                require_positive(c.mu, "mu")?;
                if !(c.lambda - c.mu > 0.0) {
                    return Err(Error::Config(
                        "plasmid_bd requires lambda - mu > 0".into(),
                    ));
                }
                Ok(ModelSpec::PlasmidBd {
                    lambda: c.lambda,
                    mu: c.mu,
                })
            }
            "two_type_switch" => {
                let c: SwitchCfg = serde_json::from_value(rest).map_err(cfg_err)?;
                require_positive(c.b0, "b0")?;
                require_positive(c.b1, "b1")?;
                if !(0.0..=1.0).contains(&c.p) {
                    return Err(Error::Config("parameter 'p' must be in [0, 1]".into()));
                }
                Ok(ModelSpec::TwoTypeSwitch {
                    b0: c.b0,
                    b1: c.b1,
                    p: c.p,
                })
            }
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ModelSpec::Yule { .. } => "yule",
            ModelSpec::LinearGrowth { .. } => "linear_growth",
            ModelSpec::ExpGrowth { .. } => "exp_growth",
            ModelSpec::Parasite { .. } => "parasite",
            ModelSpec::PlasmidBd { .. } => "plasmid_bd",
            ModelSpec::TwoTypeSwitch { .. } => "two_type_switch",
            ModelSpec::TestExtinct { .. } => "test_extinct",
        }
    }

    pub fn trait_kind(&self) -> TraitKind {
        match self {
            ModelSpec::PlasmidBd { .. } => TraitKind::Count,
            ModelSpec::TwoTypeSwitch { .. } => TraitKind::Flag,
            _ => TraitKind::Real,
        }
    }

    /// Wrap a raw scalar into this model's trait variant, validating range.
    pub fn trait_value(&self, v: f64) -> Result<TraitValue> {
        match self.trait_kind() {
            TraitKind::Real => {
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "trait must be a nonnegative real, got {v}"
                    )));
                }
                Ok(TraitValue::Real(v))
            }
            TraitKind::Count => {
                if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "trait must be a nonnegative integer, got {v}"
                    )));
                }
                Ok(TraitValue::Count(v as u64))
            }
            TraitKind::Flag => {
                if v == 0.0 {
                    Ok(TraitValue::Flag(false))
                } else if v == 1.0 {
                    Ok(TraitValue::Flag(true))
                } else {
                    Err(Error::InvalidInput(format!(
                        "trait must be the type flag 0 or 1, got {v}"
                    )))
                }
            }
        }
    }

    pub fn has_closed_form_mean(&self) -> bool {
        true
    }

    /// Instantaneous division rate B(x) (B(x, t) = alpha(t) x for the
    /// varying-environment model).
    pub fn division_rate(&self, x: &TraitValue, t: f64) -> f64 {
        let xv = x.as_f64();
        match self {
            ModelSpec::Yule { b, .. } | ModelSpec::TestExtinct { b, .. } => *b,
            ModelSpec::LinearGrowth { alpha, .. } => alpha * xv,
            ModelSpec::ExpGrowth { alpha, .. } => alpha.value(t) * xv,
            ModelSpec::Parasite { alpha, beta, .. } => alpha * xv + beta,
            ModelSpec::PlasmidBd { .. } => xv,
            ModelSpec::TwoTypeSwitch { b0, b1, .. } => match x {
                TraitValue::Flag(true) => *b1,
                _ => *b0,
            },
        }
    }

    /// Mean offspring count m(x).
    pub fn mean_offspring(&self, _x: &TraitValue) -> f64 {
        match self {
            ModelSpec::Yule { mean_offspring, .. } => f64::from(*mean_offspring),
            ModelSpec::TestExtinct { p0, .. } => 2.0 * (1.0 - p0),
            _ => 2.0,
        }
    }

    /// Draw the offspring of an individual with trait x at division.
    pub fn offspring_sample(&self, x: &TraitValue, rng: &mut impl Rng) -> OffspringDraw {
        match self {
            ModelSpec::Yule { mean_offspring, .. } => OffspringDraw {
                children: vec![*x; *mean_offspring as usize],
            },
            ModelSpec::TestExtinct { p0, .. } => {
                if rng.random::<f64>() < *p0 {
                    OffspringDraw { children: vec![] }
                } else {
                    OffspringDraw {
                        children: vec![*x; 2],
                    }
                }
            }
            ModelSpec::LinearGrowth { .. } | ModelSpec::ExpGrowth { .. } => {
                let half = TraitValue::Real(x.as_f64() / 2.0);
                OffspringDraw {
                    children: vec![half, half],
                }
            }
            ModelSpec::Parasite { .. } => {
                let delta: f64 = rng.random();
                let xv = x.as_f64();
                OffspringDraw {
                    children: vec![
                        TraitValue::Real(delta * xv),
                        TraitValue::Real(xv - delta * xv),
                    ],
                }
            }
            ModelSpec::PlasmidBd { .. } => {
                // delta ~ U[0,1], then Binomial(x, delta) to daughter 1:
                // integer-valued, conserves the total, uniform in expectation.
                let n = match x {
                    TraitValue::Count(n) => *n,
                    _ => x.as_f64() as u64,
                };
                let delta: f64 = rng.random();
                let mut d1 = 0u64;
                for _ in 0..n {
                    if rng.random::<f64>() < delta {
                        d1 += 1;
                    }
                }
                OffspringDraw {
                    children: vec![TraitValue::Count(d1), TraitValue::Count(n - d1)],
                }
            }
            ModelSpec::TwoTypeSwitch { p, .. } => {
                let cur = matches!(x, TraitValue::Flag(true));
                let u1: f64 = rng.random();
                let u2: f64 = rng.random();
                OffspringDraw {
                    children: vec![
                        TraitValue::Flag(if u1 < *p { !cur } else { cur }),
                        TraitValue::Flag(if u2 < *p { !cur } else { cur }),
                    ],
                }
            }
        }
    }

    /// Evolve a single trait on [s, t] and return its motion record.
    pub fn evolve_trait(
        &self,
        x: &TraitValue,
        s: f64,
        t: f64,
        rng: &mut impl Rng,
    ) -> Result<MotionRecord> {
        if t < s {
            return Err(Error::InvalidInput(format!(
                "evolve_trait needs s <= t, got s={s}, t={t}"
            )));
        }
        let xv = x.as_f64();
        Ok(match self {
            ModelSpec::Yule { .. }
            | ModelSpec::TestExtinct { .. }
            | ModelSpec::TwoTypeSwitch { .. } => MotionRecord::constant(xv, s),
            ModelSpec::LinearGrowth { a, .. } => MotionRecord::Flow {
                kind: FlowKind::LinearDrift { a: *a },
                x0: xv,
                t0: s,
            },
            ModelSpec::ExpGrowth { a, .. } => MotionRecord::Flow {
                kind: FlowKind::ExponentialGrowth { a: *a },
                x0: xv,
                t0: s,
            },
            ModelSpec::Parasite { g, sigma2, step, .. } => {
                parasite_euler_grid(xv, s, t, *g, *sigma2, *step, rng)
            }
            ModelSpec::PlasmidBd { lambda, mu } => {
                plasmid_forward_jumps(xv, s, t, *lambda, *mu, rng)
            }
        })
    }

    // -- closed-form mean growth ------------------------------------------

    /// m(x, s, t): expected number of individuals alive at t starting from
    /// a single individual with trait x at time s.
    pub fn mean_population(&self, x: &TraitValue, s: f64, t: f64) -> Result<f64> {
        if t < s {
            return Err(Error::InvalidInput(format!(
                "mean_population needs s <= t, got s={s}, t={t}"
            )));
        }
        let tau = t - s;
        let xv = x.as_f64();
        Ok(match self {
            ModelSpec::Yule {
                b, mean_offspring, ..
            } => (b * (f64::from(*mean_offspring) - 1.0) * tau).exp(),
            ModelSpec::TestExtinct { b, p0 } => (b * (1.0 - 2.0 * p0) * tau).exp(),
            ModelSpec::LinearGrowth { a, alpha } => {
                let w = (a * alpha).sqrt();
                (w * tau).cosh() + xv * (alpha / a).sqrt() * (w * tau).sinh()
            }
            ModelSpec::ExpGrowth { a, alpha } => {
                1.0 + xv * alpha.growth_weighted_integral(*a, s, t)
            }
            ModelSpec::Parasite { .. } => {
                let (kappa, ebt) = self.parasite_kappa(s, t);
                ebt * (1.0 + kappa * xv)
            }
            ModelSpec::PlasmidBd { lambda, mu } => 1.0 + xv * exp_rel(lambda - mu, tau),
            ModelSpec::TwoTypeSwitch { .. } => {
                let flag = matches!(x, TraitValue::Flag(true));
                self.switch_mean_growth(flag, tau)
            }
        })
    }

    /// Parasite helpers: kappa(s,t) = alpha (e^{(g-beta) tau} - 1)/(g-beta)
    /// (the g = beta limit is alpha*tau) and e^{beta tau}, so that
    /// m(x,s,t) = e^{beta tau} (1 + kappa x).
    pub(crate) fn parasite_kappa(&self, s: f64, t: f64) -> (f64, f64) {
        match self {
            ModelSpec::Parasite { g, alpha, beta, .. } => {
                let tau = t - s;
                (alpha * exp_rel(g - beta, tau), (beta * tau).exp())
            }
            _ => unreachable!("parasite_kappa on {:?}", self.id()),
        }
    }

    /// Plasmid helper: c(s,t) = (e^{(lambda-mu) tau} - 1)/(lambda-mu), so
    /// that m(x,s,t) = 1 + c x (affine in x, valid for the extension to
    /// x = -1 used by the generic rate reweighting).
    pub(crate) fn plasmid_c(&self, s: f64, t: f64) -> f64 {
        match self {
            ModelSpec::PlasmidBd { lambda, mu } => exp_rel(lambda - mu, t - s),
            _ => unreachable!("plasmid_c on {:?}", self.id()),
        }
    }

    /// Mean growth of the switching model via the 2x2 first-moment system
    /// (mu, nu)' = M (mu, nu), evaluated with the Sylvester formula.
    pub(crate) fn switch_mean_growth(&self, flag: bool, tau: f64) -> f64 {
        let (b0, b1, p) = match self {
            ModelSpec::TwoTypeSwitch { b0, b1, p } => (*b0, *b1, *p),
            _ => unreachable!("switch_mean_growth on {:?}", self.id()),
        };
        let x = if flag { 1.0 } else { 0.0 };
        let a_ = b0;
        let b_ = b1 - b0;
        let c_ = 2.0 * p * b0;
        let d_ = b1 * (1.0 - 2.0 * p) - 2.0 * p * b0;
        let tr = a_ + d_;
        let det = a_ * d_ - b_ * c_;
        let disc = (tr * tr - 4.0 * det).max(0.0);
        let sq = disc.sqrt();
        if sq < 1e-300 {
            // p = 0 with b0 = b1: pure Yule
            return (0.5 * tr * tau).exp();
        }
        let lp = 0.5 * (tr + sq);
        let lm = 0.5 * (tr - sq);
        ((lp * tau).exp() * ((a_ - lm) + b_ * x) - (lm * tau).exp() * ((a_ - lp) + b_ * x))
            / (lp - lm)
    }

    /// Monte Carlo estimate of m(x, s, t) over n independent populations.
    pub fn mean_population_mc(
        &self,
        x: &TraitValue,
        s: f64,
        t: f64,
        n: usize,
        caps: crate::population::Caps,
        seed: u64,
    ) -> Result<crate::stats::MCEstimate> {
        crate::population::population_count_mc(self, x, s, t, n, caps, seed)
    }

    // -- spine ingredients --------------------------------------------------

    /// Lambda(x, s, t) = int m(y, s, t) m(x, dy) / m(x, s, t) where m(x, dy)
    /// is the expected-children measure. Exact sums for discrete kernels and
    /// deterministic splits; adaptive quadrature for the parasite's uniform
    /// mass split (the integrand is affine, so the quadrature is exact).
    pub fn lambda_factor(&self, x: &TraitValue, s: f64, t: f64) -> Result<f64> {
        if t < s {
            return Err(Error::InvalidInput(format!(
                "lambda_factor needs s <= t, got s={s}, t={t}"
            )));
        }
        let mx = self.mean_population(x, s, t)?;
        if !(mx > 0.0) {
            return Err(Error::InvalidInput(format!(
                "lambda_factor needs m(x,s,t) > 0, got {mx}"
            )));
        }
        let xv = x.as_f64();
        Ok(match self {
            ModelSpec::Yule { mean_offspring, .. } => f64::from(*mean_offspring),
            ModelSpec::TestExtinct { p0, .. } => 2.0 * (1.0 - p0),
            ModelSpec::LinearGrowth { .. } | ModelSpec::ExpGrowth { .. } => {
                let half = TraitValue::Real(xv / 2.0);
                2.0 * self.mean_population(&half, s, t)? / mx
            }
            ModelSpec::Parasite { .. } => {
                if xv == 0.0 {
                    2.0
                } else {
                    let num = adaptive_simpson(
                        |y| {
                            let (kappa, ebt) = self.parasite_kappa(s, t);
                            ebt * (1.0 + kappa * y) * 2.0 / xv
                        },
                        0.0,
                        xv,
                        LAMBDA_QUADRATURE_TOL,
                    )?;
                    num / mx
                }
            }
            ModelSpec::PlasmidBd { .. } => {
                let n = match x {
                    TraitValue::Count(n) => *n,
                    _ => xv as u64,
                };
                let c = self.plasmid_c(s, t);
                // children marginal is uniform on {0..n}, two children
                let sum: f64 = (0..=n).map(|y| 1.0 + c * y as f64).sum();
                2.0 * sum / ((n + 1) as f64 * mx)
            }
            ModelSpec::TwoTypeSwitch { p, .. } => {
                let flag = matches!(x, TraitValue::Flag(true));
                let m_same = self.switch_mean_growth(flag, t - s);
                let m_other = self.switch_mean_growth(!flag, t - s);
                2.0 * ((1.0 - p) * m_same + p * m_other) / m_same
            }
        })
    }

    /// J2 applied to (m(.,r,t), m(.,r,t)): the expected product of the mean
    /// growths of an ordered pair of distinct children, used by the fork
    /// formulas. Exact for deterministic and discrete splits; quadrature for
    /// the parasite (polynomial integrand, so exact as well).
    pub fn j2_mean_product(&self, x: &TraitValue, r: f64, t: f64) -> Result<f64> {
        let xv = x.as_f64();
        Ok(match self {
            ModelSpec::Yule { mean_offspring, .. } => {
                let k = f64::from(*mean_offspring);
                let m = self.mean_population(x, r, t)?;
                k * (k - 1.0) * m * m
            }
            ModelSpec::TestExtinct { p0, .. } => {
                let m = self.mean_population(x, r, t)?;
                2.0 * (1.0 - p0) * m * m
            }
            ModelSpec::LinearGrowth { .. } | ModelSpec::ExpGrowth { .. } => {
                let half = TraitValue::Real(xv / 2.0);
                let m = self.mean_population(&half, r, t)?;
                2.0 * m * m
            }
            ModelSpec::Parasite { .. } => {
                let (kappa, ebt) = self.parasite_kappa(r, t);
                let f = |d: f64| {
                    ebt * (1.0 + kappa * d * xv) * ebt * (1.0 + kappa * (1.0 - d) * xv)
                };
                2.0 * adaptive_simpson(f, 0.0, 1.0, LAMBDA_QUADRATURE_TOL)?
            }
            ModelSpec::PlasmidBd { .. } => {
                let n = match x {
                    TraitValue::Count(n) => *n,
                    _ => xv as u64,
                };
                let c = self.plasmid_c(r, t);
                let s: f64 = (0..=n)
                    .map(|d| (1.0 + c * d as f64) * (1.0 + c * (n - d) as f64))
                    .sum();
                2.0 * s / (n + 1) as f64
            }
            ModelSpec::TwoTypeSwitch { p, .. } => {
                let flag = matches!(x, TraitValue::Flag(true));
                let avg = (1.0 - p) * self.switch_mean_growth(flag, t - r)
                    + p * self.switch_mean_growth(!flag, t - r);
                2.0 * avg * avg
            }
        })
    }
}

// ---------------------------------------------------------------------------
// trait motion simulators

/// Full-truncation Euler-Maruyama for dX = gX dt + sqrt(2 sigma^2 X) dW on
/// [s, t]; negative excursions truncated at zero. Biased O(step).
pub(crate) fn parasite_euler_grid(
    x0: f64,
    s: f64,
    t: f64,
    g: f64,
    sigma2: f64,
    step: f64,
    rng: &mut impl Rng,
) -> MotionRecord {
    let mut values = vec![x0];
    let mut x = x0;
    let mut time = s;
    while time < t {
        let h = step.min(t - time);
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        x = (x + g * x * h + (2.0 * sigma2 * x * h).sqrt() * z).max(0.0);
        values.push(x);
        time += h;
    }
    MotionRecord::Grid {
        t0: s,
        step,
        t_end: t,
        values,
    }
}

/// Event-exact birth-death walk with linear rates lambda*x, mu*x on [s, t].
/// The state x = 0 is absorbing.
pub(crate) fn plasmid_forward_jumps(
    x0: f64,
    s: f64,
    t: f64,
    lambda: f64,
    mu: f64,
    rng: &mut impl Rng,
) -> MotionRecord {
    let mut jumps = Vec::new();
    let mut x = x0 as u64;
    let mut time = s;
    loop {
        let total = (lambda + mu) * x as f64;
        if total <= 0.0 {
            break;
        }
        time += -rng.random::<f64>().ln() / total;
        if time >= t {
            break;
        }
        if rng.random::<f64>() < lambda / (lambda + mu) {
            x += 1;
        } else {
            x -= 1;
        }
        jumps.push((time, x as f64));
    }
    MotionRecord::Steps { t0: s, x0, jumps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn model(json: serde_json::Value) -> Result<ModelSpec> {
        ModelSpec::from_config(&json)
    }

    #[test]
    fn build_minimal_yule() {
        let m = model(serde_json::json!({"id": "yule", "b": 1.0, "m": 2})).unwrap();
        assert_eq!(m.id(), "yule");
    }

    #[test]
    fn build_rejects_nonpositive_beta() {
        let err = model(
            serde_json::json!({"id": "parasite", "g": 1.0, "sigma2": 0.5, "alpha": 1.0, "beta": 0.0}),
        )
        .unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
        assert!(err.to_string().contains("> 0"), "{err}");
    }

    #[test]
    fn build_rejects_subcritical_plasmid() {
        let err = model(serde_json::json!({"id": "plasmid_bd", "lambda": 1.0, "mu": 2.0}))
            .unwrap_err();
        assert!(err.to_string().contains("lambda - mu > 0"), "{err}");
    }

    #[test]
    fn build_rejects_unknown_id_and_extra_params() {
        assert!(matches!(
            model(serde_json::json!({"id": "nope", "b": 1.0})),
            Err(Error::UnknownModel(_))
        ));
        let err = model(serde_json::json!({"id": "yule", "b": 1.0, "zz": 3})).unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }

    #[test]
    fn division_rate_examples() {
        let lin = model(serde_json::json!({"id": "linear_growth", "a": 1.0, "alpha": 1.0})).unwrap();
        assert_eq!(lin.division_rate(&TraitValue::Real(2.0), 0.0), 2.0);
        assert_eq!(lin.division_rate(&TraitValue::Real(0.0), 0.0), 0.0);
        let par = model(
            serde_json::json!({"id": "parasite", "g": 1.0, "sigma2": 0.5, "alpha": 1.0, "beta": 0.5}),
        )
        .unwrap();
        assert_eq!(par.division_rate(&TraitValue::Real(0.0), 0.0), 0.5);
    }

    #[test]
    fn offspring_conserves_mass() {
        let mut rng = stream_rng(1, 99, 0);
        let lin = model(serde_json::json!({"id": "linear_growth", "a": 1.0, "alpha": 1.0})).unwrap();
        let d = lin.offspring_sample(&TraitValue::Real(4.0), &mut rng);
        assert_eq!(d.children, vec![TraitValue::Real(2.0), TraitValue::Real(2.0)]);

        let par = model(
            serde_json::json!({"id": "parasite", "g": 1.0, "sigma2": 0.5, "alpha": 1.0, "beta": 0.5}),
        )
        .unwrap();
        for _ in 0..50 {
            let d = par.offspring_sample(&TraitValue::Real(1.0), &mut rng);
            let s: f64 = d.children.iter().map(|c| c.as_f64()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let pl = model(serde_json::json!({"id": "plasmid_bd", "lambda": 2.0, "mu": 1.0})).unwrap();
        for _ in 0..50 {
            let d = pl.offspring_sample(&TraitValue::Count(9), &mut rng);
            let s: u64 = d
                .children
                .iter()
                .map(|c| match c {
                    TraitValue::Count(n) => *n,
                    _ => panic!(),
                })
                .sum();
            assert_eq!(s, 9);
        }
    }

    #[test]
    fn evolve_deterministic_flows() {
        let mut rng = stream_rng(2, 99, 0);
        let lin = model(serde_json::json!({"id": "linear_growth", "a": 1.0, "alpha": 1.0})).unwrap();
        let rec = lin
            .evolve_trait(&TraitValue::Real(1.0), 0.0, 2.0, &mut rng)
            .unwrap();
        assert!((rec.eval(2.0) - 3.0).abs() < 1e-12);

        let exp = model(serde_json::json!({"id": "exp_growth", "a": 0.1, "alpha": 0.1})).unwrap();
        let rec = exp
            .evolve_trait(&TraitValue::Real(1.0), 0.0, 10.0, &mut rng)
            .unwrap();
        assert!((rec.eval(10.0) - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn mean_population_trivial_and_derived() {
        let lin = model(serde_json::json!({"id": "linear_growth", "a": 1.0, "alpha": 1.0})).unwrap();
        let x = TraitValue::Real(1.0);
        assert!((lin.mean_population(&x, 3.0, 3.0).unwrap() - 1.0).abs() < 1e-15);
        // cosh(1) + sinh(1) = e
        assert!((lin.mean_population(&x, 0.0, 1.0).unwrap() - 1f64.exp()).abs() < 1e-12);
        assert!(
            (lin.mean_population(&TraitValue::Real(0.0), 0.0, 1.0).unwrap() - 1f64.cosh())
                .abs()
                < 1e-12
        );

        // parasite-free cells form a Yule process at rate beta
        let par = model(
            serde_json::json!({"id": "parasite", "g": 1.0, "sigma2": 0.5, "alpha": 1.0, "beta": 0.5}),
        )
        .unwrap();
        let m0 = par.mean_population(&TraitValue::Real(0.0), 0.0, 2.0).unwrap();
        assert!((m0 - (0.5f64 * 2.0).exp()).abs() < 1e-12);

        // g = beta limit form (1 + alpha x tau) e^{beta tau}
        let cr = model(
            serde_json::json!({"id": "parasite", "g": 0.5, "sigma2": 0.5, "alpha": 1.0, "beta": 0.5}),
        )
        .unwrap();
        let m = cr.mean_population(&TraitValue::Real(2.0), 1.0, 3.0).unwrap();
        assert!((m - (1.0 + 1.0 * 2.0 * 2.0) * 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn switch_mean_growth_matches_matrix_exponential_oracle() {
        // frozen with scipy.linalg.expm on the first-moment system
        let cases = [
            ((2.0, 1.0, 0.3), true, 0.7, 2.267350988556687),
            ((1.0, 3.0, 0.5), false, 1.2, 6.329658806583638),
            ((0.5, 0.8, 0.1), true, 2.0, 4.619650637343736),
        ];
        for ((b0, b1, p), flag, tau, want) in cases {
            let m = ModelSpec::TwoTypeSwitch { b0, b1, p };
            let got = m.switch_mean_growth(flag, tau);
            assert!(
                (got - want).abs() < 1e-12 * want,
                "switch m mismatch: {got} vs {want}"
            );
        }
    }

    #[test]
    fn lambda_factor_examples() {
        // any binary model at s = t: Lambda = offspring mean
        let lin = model(serde_json::json!({"id": "linear_growth", "a": 1.0, "alpha": 1.0})).unwrap();
        let l = lin.lambda_factor(&TraitValue::Real(1.3), 2.0, 2.0).unwrap();
        assert!((l - 2.0).abs() < 1e-12);

        let yule = model(serde_json::json!({"id": "yule", "b": 1.0, "m": 2})).unwrap();
        for (s, t) in [(0.0, 0.0), (0.0, 1.0), (1.0, 4.0)] {
            let l = yule.lambda_factor(&TraitValue::Real(1.0), s, t).unwrap();
            assert!((l - 2.0).abs() < 1e-12);
        }

        // parasite g=1, beta=0.5, alpha=1, x=1, tau=2 ln 2 -> 4/3
        let par = model(
            serde_json::json!({"id": "parasite", "g": 1.0, "sigma2": 0.5, "alpha": 1.0, "beta": 0.5}),
        )
        .unwrap();
        let tau = 2.0 * std::f64::consts::LN_2;
        let l = par.lambda_factor(&TraitValue::Real(1.0), 0.0, tau).unwrap();
        assert!((l - 4.0 / 3.0).abs() < 1e-10, "{l}");
    }

    #[test]
    fn alpha_piecewise_integral_matches_quadrature() {
        let alpha = AlphaFn::Piecewise {
            times: vec![0.0, 1.0, 2.5],
            values: vec![0.2, 0.5, 0.1],
        };
        let a = 0.3;
        let (s, t) = (0.4, 4.0);
        let exact = alpha.growth_weighted_integral(a, s, t);
        // integrate piece by piece so the integrand is smooth on each panel
        let quad: f64 = [(s, 1.0), (1.0, 2.5), (2.5, t)]
            .iter()
            .map(|&(lo, hi)| {
                adaptive_simpson(|r| alpha.value(r) * (a * (r - s)).exp(), lo, hi, 1e-12).unwrap()
            })
            .sum();
        assert!((exact - quad).abs() < 1e-9, "{exact} vs {quad}");
    }
}
