//! The time-inhomogeneous auxiliary (spine) process Y^{(t)}: biased division
//! rate B(x) Lambda(x,s,t), mean-growth-reweighted offspring kernel, biased
//! trait motion, the tagged-cell comparison process, and the pi_t initial
//! sampler.
//!
//! Division events are generated by thinning against a per-model majorant,
//! refreshed on a time grid (deterministic flows), every integrator step
//! (diffusion) and after every state change (jump traits). A violated bound
//! is reported as an error, never silently accepted.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{AlphaFn, ModelSpec, TraitValue};
use crate::motion::{FlowKind, MotionRecord};
use crate::numeric::exp_rel;
use crate::path::{AuxiliaryPath, LineagePath, PathJump, PathSegment, TraitPath};
use crate::population::simulate_life;

/// Refresh interval for thinning bounds along deterministic flows.
pub const AUX_REFRESH: f64 = 0.01;

const BOUND_SLACK: f64 = 1.0 + 1e-9;

/// Which division-rate expression drives the auxiliary process. `Derived`
/// is the mean-growth-consistent rate used everywhere; the `Published*`
/// variants implement the printed closed forms verbatim so their
/// inconsistency can be demonstrated against simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateFormula {
    Derived,
    /// exponent 2 sqrt(alpha) (t-s) instead of the derived 2 sqrt(a alpha) (t-s)
    PublishedLinearGrowth,
    /// carries a baseline `beta` absent from the model's division rate
    PublishedExpGrowth { beta: f64 },
}

// ---------------------------------------------------------------------------
// rates

/// Generic biased rate B(x, s) * Lambda(x, s, t).
pub fn biased_rate(model: &ModelSpec, x: &TraitValue, s: f64, t: f64) -> Result<f64> {
    Ok(model.division_rate(x, s) * model.lambda_factor(x, s, t)?)
}

/// Closed-form fast path for the biased rate (all bundled models).
pub fn biased_rate_closed(model: &ModelSpec, x: &TraitValue, s: f64, t: f64) -> f64 {
    let xv = x.as_f64();
    let tau = t - s;
    match model {
        ModelSpec::Yule {
            b, mean_offspring, ..
        } => b * f64::from(*mean_offspring),
        ModelSpec::TestExtinct { b, p0 } => b * 2.0 * (1.0 - p0),
        ModelSpec::LinearGrowth { a, alpha } => {
            let w = (a * alpha).sqrt();
            let c = (w * tau).cosh();
            let sden = c + xv * (alpha / a).sqrt() * (w * tau).sinh();
            alpha * xv * (1.0 + c / sden)
        }
        ModelSpec::ExpGrowth { a, alpha } => {
            let i = alpha.growth_weighted_integral(*a, s, t);
            alpha.value(s) * xv * (1.0 + 1.0 / (1.0 + xv * i))
        }
        ModelSpec::Parasite { alpha, beta, .. } => {
            let (kappa, _) = model.parasite_kappa(s, t);
            (alpha * xv + beta) * (1.0 + 1.0 / (1.0 + kappa * xv))
        }
        ModelSpec::PlasmidBd { .. } => {
            let c = model.plasmid_c(s, t);
            xv * (2.0 + c * xv) / (1.0 + c * xv)
        }
        ModelSpec::TwoTypeSwitch { p, .. } => {
            let flag = matches!(x, TraitValue::Flag(true));
            let m_same = model.switch_mean_growth(flag, tau);
            let m_other = model.switch_mean_growth(!flag, tau);
            model.division_rate(x, s) * 2.0 * ((1.0 - p) + p * m_other / m_same)
        }
    }
}

/// The printed closed forms of the linear-growth and varying-environment
/// biased rates, implemented verbatim for the discrepancy demonstration.
pub fn biased_rate_published(
    model: &ModelSpec,
    formula: RateFormula,
    x: &TraitValue,
    s: f64,
    t: f64,
) -> f64 {
    let xv = x.as_f64();
    match (model, formula) {
        (_, RateFormula::Derived) => biased_rate_closed(model, x, s, t),
        (ModelSpec::LinearGrowth { a, alpha }, RateFormula::PublishedLinearGrowth) => {
            let e = (2.0 * alpha.sqrt() * (t - s)).exp();
            let q = xv * (alpha / a).sqrt();
            alpha * xv * (1.0 + (1.0 + e) / ((1.0 - q) + e * (1.0 + q)))
        }
        (ModelSpec::ExpGrowth { a, alpha }, RateFormula::PublishedExpGrowth { beta }) => {
            let i = exp_weighted_integral(alpha, a - beta, s, t);
            (alpha.value(s) * xv + beta) * (1.0 + 1.0 / (1.0 + xv * i))
        }
        _ => panic!(
            "rate formula {formula:?} does not apply to model {}",
            model.id()
        ),
    }
}

/// int_s^t alpha(r) e^{rate (r - s)} dr for arbitrary exponent rate.
fn exp_weighted_integral(alpha: &AlphaFn, rate: f64, s: f64, t: f64) -> f64 {
    match alpha {
        AlphaFn::Constant(v) => v * exp_rel(rate, t - s),
        AlphaFn::Piecewise { times, values } => {
            let mut acc = 0.0;
            for (i, &vi) in values.iter().enumerate() {
                let lo = times[i].max(s);
                let hi = if i + 1 < times.len() { times[i + 1] } else { t }.min(t);
                if hi > lo {
                    // int_lo^hi e^{rate (r-s)} dr = e^{rate(lo-s)} * exp_rel(rate, hi-lo)
                    acc += vi * (rate * (lo - s)).exp() * exp_rel(rate, hi - lo);
                }
            }
            acc
        }
    }
}

/// Biased drift of the parasite spine diffusion: g x + 2 sigma^2 kappa x / (1 + kappa x).
pub fn parasite_biased_drift(model: &ModelSpec, x: f64, s: f64, t: f64) -> f64 {
    match model {
        ModelSpec::Parasite { g, sigma2, .. } => {
            let (kappa, _) = model.parasite_kappa(s, t);
            g * x + 2.0 * sigma2 * kappa * x / (1.0 + kappa * x)
        }
        _ => panic!("parasite_biased_drift on {}", model.id()),
    }
}

/// Density of the parasite's biased offspring kernel on [0, x].
pub fn parasite_kernel_density(model: &ModelSpec, x: f64, y: f64, s: f64, t: f64) -> f64 {
    let (kappa, _) = model.parasite_kappa(s, t);
    if y < 0.0 || y > x || x == 0.0 {
        return 0.0;
    }
    (2.0 + 2.0 * kappa * y) / (x * (2.0 + kappa * x))
}

/// Biased birth/death rates of the plasmid spine walk, clipped at zero.
/// The x = 0 death value uses the affine extension m(-1,s,t) = 1 - c; the
/// simulator additionally suppresses the death move at x = 0.
pub fn plasmid_biased_rates(model: &ModelSpec, x: u64, s: f64, t: f64) -> (f64, f64) {
    match model {
        ModelSpec::PlasmidBd { lambda, mu } => {
            let c = model.plasmid_c(s, t);
            let denom = 1.0 + c * x as f64;
            let birth = lambda * (1.0 + c / denom);
            let death = (mu * (1.0 - c / denom)).max(0.0);
            (birth, death)
        }
        _ => panic!("plasmid_biased_rates on {}", model.id()),
    }
}

// ---------------------------------------------------------------------------
// kernel

/// Draw a child trait from the biased kernel P_s^(t)(x, .).
pub fn biased_kernel_sample(
    model: &ModelSpec,
    x: &TraitValue,
    s: f64,
    t: f64,
    rng: &mut impl Rng,
) -> Result<TraitValue> {
    if t < s {
        return Err(Error::InvalidInput(format!(
            "biased_kernel_sample needs s <= t, got s={s}, t={t}"
        )));
    }
    let xv = x.as_f64();
    Ok(match model {
        ModelSpec::Yule { .. } | ModelSpec::TestExtinct { .. } => *x,
        ModelSpec::LinearGrowth { .. } | ModelSpec::ExpGrowth { .. } => {
            TraitValue::Real(xv / 2.0)
        }
        ModelSpec::Parasite { .. } => {
            // density (1 + kappa y) / (x + kappa x^2 / 2): quadratic inverse CDF
            if xv == 0.0 {
                return Ok(TraitValue::Real(0.0));
            }
            let (kappa, _) = model.parasite_kappa(s, t);
            let u: f64 = rng.random();
            let mass = xv + kappa * xv * xv / 2.0;
            let y = if kappa == 0.0 {
                u * xv
            } else {
                (-1.0 + (1.0 + 2.0 * kappa * u * mass).sqrt()) / kappa
            };
            TraitValue::Real(y.clamp(0.0, xv))
        }
        ModelSpec::PlasmidBd { .. } => {
            let n = match x {
                TraitValue::Count(n) => *n,
                _ => xv as u64,
            };
            let c = model.plasmid_c(s, t);
            let total: f64 = (n as f64 + 1.0) + c * (n as f64) * (n as f64 + 1.0) / 2.0;
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n;
            for y in 0..=n {
                acc += 1.0 + c * y as f64;
                if target <= acc {
                    pick = y;
                    break;
                }
            }
            TraitValue::Count(pick)
        }
        ModelSpec::TwoTypeSwitch { p, .. } => {
            let flag = matches!(x, TraitValue::Flag(true));
            let m_same = model.switch_mean_growth(flag, t - s);
            let m_other = model.switch_mean_growth(!flag, t - s);
            let stay = (1.0 - p) * m_same / ((1.0 - p) * m_same + p * m_other);
            TraitValue::Flag(if rng.random::<f64>() < stay { flag } else { !flag })
        }
    })
}

// ---------------------------------------------------------------------------
// biased motion

/// Advance the spine trait from time s by dt (with horizon t). Deterministic
/// flows are unbiased; the parasite diffusion gains the 2 sigma^2 kappa x /
/// (1 + kappa x) drift; the plasmid walk uses the reweighted birth/death
/// rates.
pub fn biased_motion_step(
    model: &ModelSpec,
    x: &TraitValue,
    s: f64,
    t: f64,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<TraitValue> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("invalid dt {dt}")));
    }
    if s + dt > t + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "step beyond horizon: s={s}, dt={dt}, t={t}"
        )));
    }
    let xv = x.as_f64();
    Ok(match model {
        ModelSpec::Yule { .. }
        | ModelSpec::TestExtinct { .. }
        | ModelSpec::TwoTypeSwitch { .. } => *x,
        ModelSpec::LinearGrowth { a, .. } => TraitValue::Real(xv + a * dt),
        ModelSpec::ExpGrowth { a, .. } => TraitValue::Real(xv * (a * dt).exp()),
        ModelSpec::Parasite { sigma2, step, .. } => {
            let mut x = xv;
            let mut time = s;
            while time < s + dt {
                let h = step.min(s + dt - time);
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let drift = parasite_biased_drift(model, x, time, t);
                x = (x + drift * h + (2.0 * sigma2 * x * h).sqrt() * z).max(0.0);
                time += h;
            }
            TraitValue::Real(x)
        }
        ModelSpec::PlasmidBd { .. } => {
            let mut x = match x {
                TraitValue::Count(n) => *n,
                _ => xv as u64,
            };
            let mut time = s;
            let end = s + dt;
            loop {
                let (birth_bound, _) = plasmid_biased_rates(model, x, time, t);
                let death_bound = if x >= 1 {
                    match model {
                        ModelSpec::PlasmidBd { mu, .. } => *mu,
                        _ => unreachable!(),
                    }
                } else {
                    0.0
                };
                let total = birth_bound + death_bound;
                if total <= 0.0 {
                    break;
                }
                time += -rng.random::<f64>().ln() / total;
                if time >= end {
                    break;
                }
                let (birth, death) = plasmid_biased_rates(model, x, time, t);
                let death = if x >= 1 { death } else { 0.0 };
                let u = rng.random::<f64>() * total;
                if u < birth {
                    x += 1;
                } else if u < birth + death {
                    x -= 1;
                }
                // else: thinning rejection
            }
            TraitValue::Count(x)
        }
    })
}

// ---------------------------------------------------------------------------
// path simulation

struct PathBuilder {
    horizon: f64,
    seg_start: f64,
    segments: Vec<PathSegment>,
    jumps: Vec<PathJump>,
}

impl PathBuilder {
    fn new(start: f64, horizon: f64) -> Self {
        PathBuilder {
            horizon,
            seg_start: start,
            segments: Vec::new(),
            jumps: Vec::new(),
        }
    }

    fn push_segment(&mut self, end: f64, motion: MotionRecord) {
        self.segments.push(PathSegment {
            start: self.seg_start,
            end,
            motion,
        });
        self.seg_start = end;
    }

    fn push_jump(&mut self, time: f64, pre: f64, post: f64) {
        self.jumps.push(PathJump { time, pre, post });
    }

    fn finish(self) -> TraitPath {
        TraitPath {
            horizon: self.horizon,
            segments: self.segments,
            jumps: self.jumps,
        }
    }
}

/// Spine simulation on [0, t] started from x0.
pub fn simulate_auxiliary(
    model: &ModelSpec,
    x0: &TraitValue,
    t: f64,
    rng: &mut impl Rng,
) -> Result<AuxiliaryPath> {
    simulate_auxiliary_from(model, x0, 0.0, t, rng, RateFormula::Derived)
}

/// Spine simulation on [s0, t]; `formula` selects the division-rate
/// expression (the offspring kernel and motion are always the derived ones).
pub fn simulate_auxiliary_from(
    model: &ModelSpec,
    x0: &TraitValue,
    s0: f64,
    t: f64,
    rng: &mut impl Rng,
    formula: RateFormula,
) -> Result<AuxiliaryPath> {
    if t < s0 {
        return Err(Error::InvalidInput(format!(
            "horizon {t} must be >= start {s0}"
        )));
    }
    model.trait_value(x0.as_f64())?;
    match model {
        ModelSpec::Parasite { .. } => simulate_aux_parasite(model, x0.as_f64(), s0, t, rng),
        ModelSpec::PlasmidBd { .. } => simulate_aux_plasmid(model, x0, s0, t, rng),
        _ => simulate_aux_flow(model, x0, s0, t, rng, formula),
    }
}

fn flow_kind(model: &ModelSpec) -> FlowKind {
    match model {
        ModelSpec::LinearGrowth { a, .. } => FlowKind::LinearDrift { a: *a },
        ModelSpec::ExpGrowth { a, .. } => FlowKind::ExponentialGrowth { a: *a },
        _ => FlowKind::Constant,
    }
}

fn flow_value(kind: FlowKind, x0: f64, t0: f64, t: f64) -> f64 {
    match kind {
        FlowKind::Constant => x0,
        FlowKind::LinearDrift { a } => x0 + a * (t - t0),
        FlowKind::ExponentialGrowth { a } => x0 * (a * (t - t0)).exp(),
    }
}

/// Majorant of the biased rate over the thinning cell [s, s1] for
/// deterministic-flow models.
fn flow_cell_bound(
    model: &ModelSpec,
    formula: RateFormula,
    x_at_s: f64,
    s: f64,
    s1: f64,
    t: f64,
) -> f64 {
    let kind = flow_kind(model);
    let x_end = flow_value(kind, x_at_s, s, s1);
    match (model, formula) {
        (ModelSpec::TwoTypeSwitch { b0, b1, p }, _) => {
            // Lambda can exceed 2 here; dominate the mean-growth ratio by
            // the Yule sandwich e^{(b_max - b_min)(t - s)}
            let b = model.division_rate(&TraitValue::Flag(x_at_s != 0.0), s);
            let ratio_bound = ((b0.max(*b1) - b0.min(*b1)) * (t - s)).exp();
            b * 2.0 * ((1.0 - p) + p * ratio_bound)
        }
        (ModelSpec::ExpGrowth { alpha, .. }, RateFormula::PublishedExpGrowth { beta }) => {
            2.0 * (alpha.value(s) * x_at_s.max(x_end) + beta)
        }
        _ => {
            // B is monotone along the flow within a cell; Lambda is at most
            // the mean offspring count (2 for the binary models)
            let x_tv = TraitValue::Real(x_at_s);
            let b_lo = model.division_rate(&x_tv, s);
            let b_hi = model.division_rate(&TraitValue::Real(x_end), s);
            model.mean_offspring(&x_tv) * b_lo.max(b_hi)
        }
    }
}

fn aux_rate(
    model: &ModelSpec,
    formula: RateFormula,
    x: &TraitValue,
    s: f64,
    t: f64,
) -> f64 {
    match formula {
        RateFormula::Derived => biased_rate_closed(model, x, s, t),
        other => biased_rate_published(model, other, x, s, t),
    }
}

fn simulate_aux_flow(
    model: &ModelSpec,
    x0: &TraitValue,
    s0: f64,
    t: f64,
    rng: &mut impl Rng,
    formula: RateFormula,
) -> Result<AuxiliaryPath> {
    let kind = flow_kind(model);
    let breakpoints: Vec<f64> = match model {
        ModelSpec::ExpGrowth { alpha, .. } => alpha.breakpoints().to_vec(),
        _ => Vec::new(),
    };
    let mut builder = PathBuilder::new(s0, t);
    let mut seg_x0 = x0.as_f64();
    let mut seg_t0 = s0;
    let mut s = s0;
    while s < t {
        // cell ends at the refresh grid, the horizon, or an alpha breakpoint
        let mut s1 = (s + AUX_REFRESH).min(t);
        for &bp in &breakpoints {
            if bp > s && bp < s1 {
                s1 = bp;
            }
        }
        let x_s = flow_value(kind, seg_x0, seg_t0, s);
        let bound = flow_cell_bound(model, formula, x_s, s, s1, t);
        let mut r = s;
        let mut divided = false;
        if bound > 0.0 {
            loop {
                r += -rng.random::<f64>().ln() / bound;
                if r >= s1 {
                    break;
                }
                let x_r = flow_value(kind, seg_x0, seg_t0, r);
                let x_r_tv = model.trait_value(x_r)?;
                let rate = aux_rate(model, formula, &x_r_tv, r, t);
                if rate > bound * BOUND_SLACK {
                    return Err(Error::ThinningBound {
                        rate,
                        bound,
                        s: r,
                        model: model.id().to_string(),
                    });
                }
                if rng.random::<f64>() * bound <= rate {
                    // division: close the segment, draw the child trait
                    builder.push_segment(
                        r,
                        MotionRecord::Flow {
                            kind,
                            x0: seg_x0,
                            t0: seg_t0,
                        },
                    );
                    let child = biased_kernel_sample(model, &x_r_tv, r, t, rng)?;
                    builder.push_jump(r, x_r, child.as_f64());
                    seg_x0 = child.as_f64();
                    seg_t0 = r;
                    s = r;
                    divided = true;
                    break;
                }
            }
        }
        if !divided {
            s = s1;
        }
    }
    builder.push_segment(
        t,
        MotionRecord::Flow {
            kind,
            x0: seg_x0,
            t0: seg_t0,
        },
    );
    Ok(builder.finish())
}

fn simulate_aux_parasite(
    model: &ModelSpec,
    x0: f64,
    s0: f64,
    t: f64,
    rng: &mut impl Rng,
) -> Result<AuxiliaryPath> {
    let (sigma2, alpha, beta, step) = match model {
        ModelSpec::Parasite {
            sigma2,
            alpha,
            beta,
            step,
            ..
        } => (*sigma2, *alpha, *beta, *step),
        _ => unreachable!(),
    };
    let mut builder = PathBuilder::new(s0, t);
    let mut values = vec![x0];
    let mut seg_t0 = s0;
    let mut x = x0;
    let mut time = s0;
    'outer: while time < t {
        let h = step.min(t - time);
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let drift = parasite_biased_drift(model, x, time, t);
        let x_next = (x + drift * h + (2.0 * sigma2 * x * h).sqrt() * z).max(0.0);
        // biased rate <= 2 B(x), B increasing in x
        let bound = 2.0 * (alpha * x.max(x_next) + beta);
        let mut u = time;
        loop {
            u += -rng.random::<f64>().ln() / bound;
            if u >= time + h {
                break;
            }
            let w = (u - time) / h;
            let xu = x * (1.0 - w) + x_next * w;
            let rate = biased_rate_closed(model, &TraitValue::Real(xu), u, t);
            if rate > bound * BOUND_SLACK {
                return Err(Error::ThinningBound {
                    rate,
                    bound,
                    s: u,
                    model: model.id().to_string(),
                });
            }
            if rng.random::<f64>() * bound <= rate {
                values.push(xu);
                builder.push_segment(
                    u,
                    MotionRecord::Grid {
                        t0: seg_t0,
                        step,
                        t_end: u,
                        values: std::mem::take(&mut values),
                    },
                );
                let child =
                    biased_kernel_sample(model, &TraitValue::Real(xu), u, t, rng)?.as_f64();
                builder.push_jump(u, xu, child);
                x = child;
                values = vec![x];
                seg_t0 = u;
                time = u;
                continue 'outer;
            }
        }
        x = x_next;
        values.push(x);
        time += h;
    }
    builder.push_segment(
        t,
        MotionRecord::Grid {
            t0: seg_t0,
            step,
            t_end: t,
            values,
        },
    );
    Ok(builder.finish())
}

fn simulate_aux_plasmid(
    model: &ModelSpec,
    x0: &TraitValue,
    s0: f64,
    t: f64,
    rng: &mut impl Rng,
) -> Result<AuxiliaryPath> {
    let mu = match model {
        ModelSpec::PlasmidBd { mu, .. } => *mu,
        _ => unreachable!(),
    };
    let mut builder = PathBuilder::new(s0, t);
    let mut x = match x0 {
        TraitValue::Count(n) => *n,
        other => other.as_f64() as u64,
    };
    let mut seg_t0 = s0;
    let mut seg_x0 = x as f64;
    let mut jumps: Vec<(f64, f64)> = Vec::new();
    let mut time = s0;
    while time < t {
        // bounds valid while x is unchanged: biased birth decreases in time,
        // biased death <= mu, biased division rate <= 2 B(x) = 2 x
        let (birth_bound, _) = plasmid_biased_rates(model, x, time, t);
        let death_bound = if x >= 1 { mu } else { 0.0 };
        let div_bound = 2.0 * x as f64;
        let total = birth_bound + death_bound + div_bound;
        if total <= 0.0 {
            break;
        }
        time += -rng.random::<f64>().ln() / total;
        if time >= t {
            break;
        }
        let (birth, death) = plasmid_biased_rates(model, x, time, t);
        let death = if x >= 1 { death } else { 0.0 };
        let div = biased_rate_closed(model, &TraitValue::Count(x), time, t);
        if birth > birth_bound * BOUND_SLACK
            || death > death_bound * BOUND_SLACK
            || div > div_bound * BOUND_SLACK
        {
            return Err(Error::ThinningBound {
                rate: birth.max(death).max(div),
                bound: total,
                s: time,
                model: model.id().to_string(),
            });
        }
        let u = rng.random::<f64>() * total;
        if u < birth {
            x += 1;
            jumps.push((time, x as f64));
        } else if u < birth + death {
            x -= 1;
            jumps.push((time, x as f64));
        } else if u < birth + death + div {
            // division
            builder.push_segment(
                time,
                MotionRecord::Steps {
                    t0: seg_t0,
                    x0: seg_x0,
                    jumps: std::mem::take(&mut jumps),
                },
            );
            let pre = x as f64;
            let child =
                biased_kernel_sample(model, &TraitValue::Count(x), time, t, rng)?;
            let child_n = match child {
                TraitValue::Count(n) => n,
                _ => unreachable!(),
            };
            builder.push_jump(time, pre, child_n as f64);
            x = child_n;
            seg_t0 = time;
            seg_x0 = x as f64;
        }
        // else: thinning rejection, nothing happens
    }
    builder.push_segment(
        t,
        MotionRecord::Steps {
            t0: seg_t0,
            x0: seg_x0,
            jumps,
        },
    );
    Ok(builder.finish())
}

/// The tagged-cell comparison process: unbiased motion, unbiased rate B,
/// one child chosen uniformly at each division.
pub fn simulate_tagged_cell(
    model: &ModelSpec,
    x0: &TraitValue,
    t: f64,
    rng: &mut impl Rng,
) -> Result<LineagePath> {
    simulate_tagged_cell_from(model, x0, 0.0, t, rng)
}

/// Tagged cell on [s0, t].
pub fn simulate_tagged_cell_from(
    model: &ModelSpec,
    x0: &TraitValue,
    s0: f64,
    t: f64,
    rng: &mut impl Rng,
) -> Result<LineagePath> {
    if t < s0 {
        return Err(Error::InvalidInput(format!(
            "horizon {t} must be >= start {s0}"
        )));
    }
    model.trait_value(x0.as_f64())?;
    let mut builder = PathBuilder::new(s0, t);
    let mut x = *x0;
    let mut s = s0;
    loop {
        let life = simulate_life(model, &x, s, t, rng)?;
        match life.division {
            Some((t_div, x_div)) => {
                builder.push_segment(t_div, life.motion);
                let x_death = model.trait_value(x_div)?;
                let draw = model.offspring_sample(&x_death, rng);
                if draw.count() == 0 {
                    return Err(Error::Extinct(t_div));
                }
                let child = draw.children[rng.random_range(0..draw.count())];
                builder.push_jump(t_div, x_div, child.as_f64());
                x = child;
                s = t_div;
            }
            None => {
                builder.push_segment(t, life.motion);
                return Ok(builder.finish());
            }
        }
    }
}

/// Draw an initial trait from pi_t: atoms reweighted by m(x, 0, t).
pub fn sample_pi_t(
    model: &ModelSpec,
    atoms: &[(TraitValue, f64)],
    t: f64,
    rng: &mut impl Rng,
) -> Result<TraitValue> {
    if atoms.is_empty() {
        return Err(Error::InvalidInput("pi_t needs at least one atom".into()));
    }
    let mut weights = Vec::with_capacity(atoms.len());
    let mut total = 0.0;
    for (x, w) in atoms {
        if *w < 0.0 {
            return Err(Error::InvalidInput("pi_t weights must be >= 0".into()));
        }
        let m = model.mean_population(x, 0.0, t)?;
        weights.push(w * m);
        total += w * m;
    }
    if total <= 0.0 {
        return Err(Error::InvalidInput("pi_t weights are all zero".into()));
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for ((x, _), w) in atoms.iter().zip(&weights) {
        acc += w;
        if target <= acc {
            return Ok(*x);
        }
    }
    Ok(atoms.last().unwrap().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn parasite() -> ModelSpec {
        ModelSpec::Parasite {
            g: 1.0,
            sigma2: 0.5,
            alpha: 1.0,
            beta: 0.5,
            step: 1e-3,
        }
    }

    #[test]
    fn biased_rate_examples() {
        // any binary model at s = t: 2 B(x)
        let lin = ModelSpec::LinearGrowth { a: 1.0, alpha: 1.0 };
        let x = TraitValue::Real(1.7);
        let r = biased_rate_closed(&lin, &x, 2.0, 2.0);
        assert!((r - 2.0 * 1.7).abs() < 1e-12);

        // parasite g=1, beta=0.5, alpha=1, x=1, tau=2 ln 2 -> 2
        let p = parasite();
        let tau = 2.0 * std::f64::consts::LN_2;
        let r = biased_rate_closed(&p, &TraitValue::Real(1.0), 0.0, tau);
        assert!((r - 2.0).abs() < 1e-12, "{r}");

        // exp_growth alpha = a, x = 1, a tau = ln 2 -> 1.5 alpha x
        let e = ModelSpec::ExpGrowth {
            a: 0.1,
            alpha: AlphaFn::Constant(0.1),
        };
        let tau = std::f64::consts::LN_2 / 0.1;
        let r = biased_rate_closed(&e, &TraitValue::Real(1.0), 0.0, tau);
        assert!((r - 1.5 * 0.1).abs() < 1e-12, "{r}");
    }

    #[test]
    fn kernel_uniform_at_horizon() {
        let p = parasite();
        let mut rng = stream_rng(9, 1, 0);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                biased_kernel_sample(&p, &TraitValue::Real(1.0), 2.0, 2.0, &mut rng)
                    .unwrap()
                    .as_f64()
            })
            .sum::<f64>()
            / n as f64;
        // unbiased at the horizon: uniform on [0, x], mean x/2
        let se = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn kernel_biased_mean_matches_quadrature() {
        // density (1+2y)/2 on [0,1] at tau = 2 ln 2: mean 7/12
        let p = parasite();
        let tau = 2.0 * std::f64::consts::LN_2;
        let mut rng = stream_rng(10, 1, 0);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                biased_kernel_sample(&p, &TraitValue::Real(1.0), 0.0, tau, &mut rng)
                    .unwrap()
                    .as_f64()
            })
            .sum::<f64>()
            / n as f64;
        let se = 0.3 / (n as f64).sqrt();
        assert!((mean - 7.0 / 12.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn deterministic_split_kernels() {
        let mut rng = stream_rng(11, 1, 0);
        let lin = ModelSpec::LinearGrowth { a: 1.0, alpha: 1.0 };
        let y = biased_kernel_sample(&lin, &TraitValue::Real(4.0), 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(y, TraitValue::Real(2.0));
        let yule = ModelSpec::Yule {
            b: 1.0,
            mean_offspring: 2,
        };
        let y = biased_kernel_sample(&yule, &TraitValue::Real(3.0), 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(y, TraitValue::Real(3.0));
    }

    #[test]
    fn motion_step_trivialities() {
        let mut rng = stream_rng(12, 1, 0);
        // parasite at s = t: plain drift (bias term vanishes)
        let p = parasite();
        let d = parasite_biased_drift(&p, 2.0, 3.0, 3.0);
        assert!((d - 1.0 * 2.0).abs() < 1e-12);
        // linear growth: same as the unbiased flow
        let lin = ModelSpec::LinearGrowth { a: 2.0, alpha: 1.0 };
        let y = biased_motion_step(&lin, &TraitValue::Real(1.0), 0.0, 5.0, 2.0, &mut rng).unwrap();
        assert_eq!(y, TraitValue::Real(5.0));
        // invalid dt
        assert!(biased_motion_step(&lin, &TraitValue::Real(1.0), 0.0, 1.0, 2.0, &mut rng).is_err());
    }

    #[test]
    fn plasmid_rates_at_zero_match_spec_example() {
        let m = ModelSpec::PlasmidBd {
            lambda: 1.0,
            mu: 0.5,
        };
        let (lam, mu_) = (1.0, 0.5);
        let tau: f64 = 1.3;
        let c = ((lam - mu_) * tau as f64).exp_m1() / (lam - mu_);
        let (birth, death) = plasmid_biased_rates(&m, 0, 0.0, tau);
        assert!((birth - lam * (1.0 + c)).abs() < 1e-12);
        assert!((death - (mu_ * (1.0 - c)).max(0.0)).abs() < 1e-12);
        assert!(birth > lam);
    }

    #[test]
    fn aux_horizon_zero_is_empty() {
        let yule = ModelSpec::Yule {
            b: 1.0,
            mean_offspring: 2,
        };
        let mut rng = stream_rng(13, 1, 0);
        let path = simulate_auxiliary(&yule, &TraitValue::Real(1.0), 0.0, &mut rng).unwrap();
        assert_eq!(path.division_count(), 0);
        assert_eq!(path.terminal(), 1.0);
    }

    #[test]
    fn tagged_horizon_zero_is_empty() {
        let yule = ModelSpec::Yule {
            b: 1.0,
            mean_offspring: 2,
        };
        let mut rng = stream_rng(14, 1, 0);
        let path = simulate_tagged_cell(&yule, &TraitValue::Real(1.0), 0.0, &mut rng).unwrap();
        assert_eq!(path.division_count(), 0);
    }

    #[test]
    fn pi_t_trivial_cases() {
        let e = ModelSpec::ExpGrowth {
            a: 0.1,
            alpha: AlphaFn::Constant(0.1),
        };
        let mut rng = stream_rng(15, 1, 0);
        // single atom
        let v = sample_pi_t(&e, &[(TraitValue::Real(2.0), 1.0)], 5.0, &mut rng).unwrap();
        assert_eq!(v, TraitValue::Real(2.0));
        // all-zero weights rejected
        assert!(sample_pi_t(&e, &[(TraitValue::Real(2.0), 0.0)], 5.0, &mut rng).is_err());
        // t = 0: raw weights
        let mut ones = 0;
        let n = 20_000;
        for _ in 0..n {
            let v = sample_pi_t(
                &e,
                &[(TraitValue::Real(0.0), 0.25), (TraitValue::Real(1.0), 0.75)],
                0.0,
                &mut rng,
            )
            .unwrap();
            if v == TraitValue::Real(1.0) {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 3.0 * (0.75f64 * 0.25 / n as f64).sqrt());
    }

    #[test]
    fn pi_t_reweights_by_mean_growth() {
        // exp_growth a=alpha=0.1, t=10, atoms {0: 1/2, 1: 1/2} -> P(1) = e/(1+e)
        let e = ModelSpec::ExpGrowth {
            a: 0.1,
            alpha: AlphaFn::Constant(0.1),
        };
        let mut rng = stream_rng(16, 1, 0);
        let n = 40_000;
        let mut ones = 0;
        for _ in 0..n {
            let v = sample_pi_t(
                &e,
                &[(TraitValue::Real(0.0), 0.5), (TraitValue::Real(1.0), 0.5)],
                10.0,
                &mut rng,
            )
            .unwrap();
            if v == TraitValue::Real(1.0) {
                ones += 1;
            }
        }
        let want = 1f64.exp() / (1.0 + 1f64.exp());
        let freq = ones as f64 / n as f64;
        let se = (want * (1.0 - want) / n as f64).sqrt();
        assert!((freq - want).abs() < 3.5 * se, "freq {freq} want {want}");
    }
}
