//! Uniform sampling from simulated trees, division-count statistics, and
//! paired-Monte-Carlo verification of the mean-growth, Many-to-One,
//! whole-tree, fork, Feynman-Kac and sampling-limit identities.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{
    sample_pi_t, simulate_auxiliary_from, simulate_tagged_cell_from, RateFormula,
};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, TraitValue};
use crate::numeric::{fmt_g17, gauss_legendre};
use crate::path::{LineagePath, TraitPath};
use crate::population::{
    lineage_of, population_count_mc, population_snapshot, simulate_population, Caps, Label,
    PopulationTree,
};
use crate::rng::{
    mix2, replicate_key, stream_rng, DOMAIN_ANALYSIS, DOMAIN_AUXILIARY, DOMAIN_BOOTSTRAP,
    DOMAIN_INIT, DOMAIN_NESTED, DOMAIN_POPULATION, DOMAIN_SAMPLING, DOMAIN_TAGGED,
};
use crate::stats::{ks_bootstrap_ci, ks_two_sample, EmpiricalDistribution, MCEstimate};

/// Registered lineage functionals F for the Many-to-One checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum Functional {
    One,
    TerminalTrait,
    TraitAt { s: f64 },
    GfDivisions { z: f64 },
    TerminalIn { lo: f64, hi: f64 },
}

impl Functional {
    pub fn eval(&self, path: &TraitPath) -> f64 {
        match *self {
            Functional::One => 1.0,
            Functional::TerminalTrait => path.terminal(),
            Functional::TraitAt { s } => path.trait_at(s),
            Functional::GfDivisions { z } => z.powi(path.division_count() as i32),
            Functional::TerminalIn { lo, hi } => {
                let v = path.terminal();
                f64::from(v >= lo && v < hi)
            }
        }
    }

    /// Evaluate on a tree individual without materializing its lineage.
    fn eval_on_tree(&self, tree: &PopulationTree, label: &Label, t: f64) -> f64 {
        match *self {
            Functional::One => 1.0,
            Functional::TerminalTrait => tree.individuals[label].motion.eval(t),
            Functional::TraitAt { s } => ancestor_trait_at(tree, label, s),
            Functional::GfDivisions { z } => z.powi(label.depth() as i32),
            Functional::TerminalIn { lo, hi } => {
                let v = tree.individuals[label].motion.eval(t);
                f64::from(v >= lo && v < hi)
            }
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Functional::One => "1".into(),
            Functional::TerminalTrait => "terminal_trait".into(),
            Functional::TraitAt { s } => format!("trait_at({s})"),
            Functional::GfDivisions { z } => format!("z^D(z={z})"),
            Functional::TerminalIn { lo, hi } => format!("1{{terminal in [{lo},{hi})}}"),
        }
    }
}

/// Scalar functions of a single trait value, for the fork and Feynman-Kac
/// identities (which evaluate marginals at a fixed time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFn {
    One,
    Identity,
    IndicatorIn { lo: f64, hi: f64 },
}

impl ScalarFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::One => 1.0,
            ScalarFn::Identity => x,
            ScalarFn::IndicatorIn { lo, hi } => f64::from(x >= lo && x < hi),
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            ScalarFn::One => "1".into(),
            ScalarFn::Identity => "x".into(),
            ScalarFn::IndicatorIn { lo, hi } => format!("1{{[{lo},{hi})}}"),
        }
    }
}

/// Time-only weights for the whole-tree identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    One,
    Time,
}

impl WeightFn {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            WeightFn::One => 1.0,
            WeightFn::Time => s,
        }
    }
}

/// Budgets, tolerances and the seed for one checker invocation.
#[derive(Debug, Clone, Copy)]
pub struct CheckOpts {
    pub seed: u64,
    pub caps: Caps,
    pub ci_level: f64,
    pub z_threshold: f64,
    pub quad_nodes: usize,
    pub aux_per_node: usize,
    pub nested_inner: usize,
    pub nested_budget: usize,
    pub resample_budget: usize,
    pub check_grid: bool,
}

impl Default for CheckOpts {
    fn default() -> Self {
        CheckOpts {
            seed: 0,
            caps: Caps::default(),
            ci_level: 0.99,
            z_threshold: 3.0,
            quad_nodes: 64,
            aux_per_node: 200,
            nested_inner: 50,
            nested_budget: 4_000_000,
            resample_budget: 1000,
            check_grid: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhsValue {
    Estimate(MCEstimate),
    Exact(f64),
}

impl RhsValue {
    pub fn mean(&self) -> f64 {
        match self {
            RhsValue::Estimate(e) => e.mean,
            RhsValue::Exact(v) => *v,
        }
    }

    pub fn std_error(&self) -> f64 {
        match self {
            RhsValue::Estimate(e) => e.std_error,
            RhsValue::Exact(_) => 0.0,
        }
    }

    fn as_estimate(&self, ci_level: f64) -> MCEstimate {
        match self {
            RhsValue::Estimate(e) => *e,
            RhsValue::Exact(v) => MCEstimate::exact(*v, ci_level),
        }
    }
}

/// Paired LHS/RHS estimates of one identity with the pass verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub identity: String,
    pub lhs: MCEstimate,
    pub rhs: RhsValue,
    pub z_score: f64,
    pub pass: bool,
    pub policy: String,
}

impl VerificationReport {
    fn build(identity: String, lhs: MCEstimate, rhs: RhsValue, opts: &CheckOpts) -> Self {
        let rhs_est = rhs.as_estimate(opts.ci_level);
        let z = lhs.z_against(&rhs_est);
        let overlap = lhs.ci_overlaps(&rhs_est);
        let z_ok = z.abs() <= opts.z_threshold;
        let pass = z_ok || overlap;
        let policy = format!(
            "|z| <= {} ({}) or {:.0}% CI overlap ({})",
            opts.z_threshold,
            if z_ok { "met" } else { "not met" },
            opts.ci_level * 100.0,
            if overlap { "met" } else { "not met" }
        );
        VerificationReport {
            identity,
            lhs,
            rhs,
            z_score: z,
            pass,
            policy,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}\n",
            self.identity,
            fmt_g17(self.lhs.mean),
            fmt_g17(self.lhs.std_error),
            fmt_g17(self.rhs.mean()),
            fmt_g17(self.rhs.std_error()),
            fmt_g17(self.z_score),
            self.pass
        )
    }
}

pub const REPORT_CSV_HEADER: &str = "identity,lhs_mean,lhs_se,rhs_mean,rhs_se,z,pass\n";

// ---------------------------------------------------------------------------
// sampling from trees

/// Uniform draw from the population alive at t, then its ancestral lineage.
pub fn sample_uniform_lineage(
    tree: &PopulationTree,
    t: f64,
    rng: &mut impl Rng,
) -> Result<LineagePath> {
    let snapshot = population_snapshot(tree, t)?;
    if snapshot.is_empty() {
        return Err(Error::Extinct(tree.extinct_at.unwrap_or(t)));
    }
    let pick = rng.random_range(0..snapshot.len());
    lineage_of(tree, &snapshot[pick].0, t)
}

/// Number of recorded division events along a path.
pub fn division_count(path: &TraitPath) -> usize {
    path.division_count()
}

// Trait of the unique ancestor of `label` alive at time s, for a label
// alive at some later time. Walking up from the leaf, the first prefix born
// no later than s is that ancestor; checking the leaf first makes the
// lineage value right-continuous at division instants.
fn ancestor_trait_at(tree: &PopulationTree, label: &Label, s: f64) -> f64 {
    let mut cur = label.clone();
    loop {
        let ind = &tree.individuals[&cur];
        if ind.birth_time <= s {
            return ind.motion.eval(s);
        }
        cur = cur.parent().expect("some ancestor is alive at s");
    }
}

// ---------------------------------------------------------------------------
// Many-to-One (Theorem 3.1)

/// LHS: MC of sum_{u in V_t} F(lineage of u) over population replicates.
pub fn population_functional_mc(
    model: &ModelSpec,
    x0: &TraitValue,
    t: f64,
    functional: &Functional,
    n: usize,
    opts: &CheckOpts,
) -> Result<MCEstimate> {
    let sums: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let key = replicate_key(opts.seed, DOMAIN_POPULATION, i as u64);
            let tree = simulate_population(model, &[*x0], 0.0, t, opts.caps, key)?;
            let mut acc = 0.0;
            for ind in tree.alive_at(t) {
                acc += functional.eval_on_tree(&tree, &ind.label, t);
            }
            Ok(acc)
        })
        .collect();
    Ok(MCEstimate::from_samples(&sums?, opts.ci_level))
}

/// MC of F over auxiliary paths with horizon t started from x0 at time 0.
pub fn auxiliary_functional_mc(
    model: &ModelSpec,
    x0: &TraitValue,
    t: f64,
    functional: &Functional,
    n: usize,
    opts: &CheckOpts,
    formula: RateFormula,
) -> Result<MCEstimate> {
    let vals: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed, DOMAIN_AUXILIARY, i as u64);
            let path = simulate_auxiliary_from(model, x0, 0.0, t, &mut rng, formula)?;
            Ok(functional.eval(&path))
        })
        .collect();
    Ok(MCEstimate::from_samples(&vals?, opts.ci_level))
}

/// E[sum_{u in V_t} F] vs m(x0,0,t) E[F(Y^{(t)})], with the auxiliary side
/// simulated under `formula` (Derived for the real check; Published* for the
/// erratum demonstrations).
pub fn check_many_to_one_with_formula(
    model: &ModelSpec,
    x0: &TraitValue,
    t: f64,
    functional: &Functional,
    n_pop: usize,
    n_aux: usize,
    opts: &CheckOpts,
    formula: RateFormula,
) -> Result<VerificationReport> {
    let m = model.mean_population(x0, 0.0, t)?;
    let name = format!(
        "many_to_one[{} F={} t={t}]",
        model.id(),
        functional.describe()
    );
    if *functional == Functional::One {
        // identical code path to the mean-growth MC check: LHS counts N_t,
        // RHS is exactly m(x0, 0, t)
        let lhs = population_count_mc(model, x0, 0.0, t, n_pop, opts.caps, opts.seed)?;
        return Ok(VerificationReport::build(name, lhs, RhsValue::Exact(m), opts));
    }
    let lhs = population_functional_mc(model, x0, t, functional, n_pop, opts)?;
    let aux = auxiliary_functional_mc(model, x0, t, functional, n_aux, opts, formula)?;
    Ok(VerificationReport::build(
        name,
        lhs,
        RhsValue::Estimate(aux.scaled(m)),
        opts,
    ))
}

pub fn check_many_to_one(
    model: &ModelSpec,
    x0: &TraitValue,
    t: f64,
    functional: &Functional,
    n_pop: usize,
    n_aux: usize,
    opts: &CheckOpts,
) -> Result<VerificationReport> {
    check_many_to_one_with_formula(
        model,
        x0,
        t,
        functional,
        n_pop,
        n_aux,
        opts,
        RateFormula::Derived,
    )
}

// ---------------------------------------------------------------------------
// whole tree (Prop 3.2)

/// E[sum over individuals dead by T of weight(beta(u))] against
/// int_0^T m(x0,0,s) E[weight(s) B(Y_s^{(s)})] ds (MC inside quadrature).
pub fn check_whole_tree(
    model: &ModelSpec,
    x0: &TraitValue,
    horizon: f64,
    weight: &WeightFn,
    n_pop: usize,
    opts: &CheckOpts,
) -> Result<VerificationReport> {
    let name = format!("whole_tree[{} T={horizon}]", model.id());
    let lhs_samples: Result<Vec<f64>> = (0..n_pop)
        .into_par_iter()
        .map(|i| {
            let key = replicate_key(opts.seed, DOMAIN_POPULATION, i as u64);
            let tree = simulate_population(model, &[*x0], 0.0, horizon, opts.caps, key)?;
            Ok(tree
                .individuals
                .values()
                .filter_map(|u| u.death_time)
                .map(|d| weight.eval(d))
                .sum())
        })
        .collect();
    let lhs = MCEstimate::from_samples(&lhs_samples?, opts.ci_level);

    let rhs = whole_tree_rhs(model, x0, horizon, weight, opts.quad_nodes, opts, 0)?;
    if opts.check_grid && horizon > 0.0 {
        let rhs2 = whole_tree_rhs(model, x0, horizon, weight, opts.quad_nodes * 2, opts, 1)?;
        let diff = (rhs.mean - rhs2.mean).abs();
        let allowed = 3.0 * (rhs.std_error.powi(2) + rhs2.std_error.powi(2)).sqrt()
            + 1e-9 * rhs.mean.abs().max(1.0);
        if diff > allowed {
            return Err(Error::QuadratureGrid {
                n: opts.quad_nodes,
                n2: opts.quad_nodes * 2,
                diff,
                allowed,
            });
        }
    }
    Ok(VerificationReport::build(
        name,
        lhs,
        RhsValue::Estimate(rhs),
        opts,
    ))
}

fn whole_tree_rhs(
    model: &ModelSpec,
    x0: &TraitValue,
    horizon: f64,
    weight: &WeightFn,
    nodes: usize,
    opts: &CheckOpts,
    salt: u64,
) -> Result<MCEstimate> {
    if horizon == 0.0 {
        return Ok(MCEstimate::exact(0.0, opts.ci_level));
    }
    let (xs, ws) = gauss_legendre(nodes);
    let c = horizon / 2.0;
    let per_node: Result<Vec<(f64, f64)>> = (0..nodes)
        .into_par_iter()
        .map(|k| {
            let s_k = c * xs[k] + c;
            let m_k = model.mean_population(x0, 0.0, s_k)?;
            let vals: Result<Vec<f64>> = (0..opts.aux_per_node)
                .map(|j| {
                    let mut rng = stream_rng(
                        opts.seed,
                        DOMAIN_AUXILIARY,
                        mix2(mix2(salt, k as u64), j as u64),
                    );
                    let path =
                        simulate_auxiliary_from(model, x0, 0.0, s_k, &mut rng, RateFormula::Derived)?;
                    let y = model.trait_value(path.terminal())?;
                    Ok(model.division_rate(&y, s_k))
                })
                .collect();
            let est = MCEstimate::from_samples(&vals?, opts.ci_level);
            let scale = ws[k] * c * m_k * weight.eval(s_k);
            Ok((scale * est.mean, (scale * est.std_error).powi(2)))
        })
        .collect();
    let per_node = per_node?;
    let mean: f64 = per_node.iter().map(|(v, _)| v).sum();
    let var: f64 = per_node.iter().map(|(_, v)| v).sum();
    Ok(MCEstimate {
        n: nodes * opts.aux_per_node,
        mean,
        std_error: var.sqrt(),
        ci_level: opts.ci_level,
    })
}

// ---------------------------------------------------------------------------
// forks (Corollary of the fork formula)

/// E[sum_{u != v in V_t} f(X_s^u) g(X_s^v)] against the two-integral RHS
/// with J2 and nested auxiliary MC.
pub fn check_forks(
    model: &ModelSpec,
    x0: &TraitValue,
    s: f64,
    t: f64,
    f: &ScalarFn,
    g: &ScalarFn,
    n_pop: usize,
    opts: &CheckOpts,
) -> Result<VerificationReport> {
    if s > t {
        return Err(Error::InvalidInput(format!("fork needs s <= t, {s} > {t}")));
    }
    let name = format!(
        "forks[{} f={} g={} s={s} t={t}]",
        model.id(),
        f.describe(),
        g.describe()
    );
    let lhs_samples: Result<Vec<f64>> = (0..n_pop)
        .into_par_iter()
        .map(|i| {
            let key = replicate_key(opts.seed, DOMAIN_POPULATION, i as u64);
            let tree = simulate_population(model, &[*x0], 0.0, t, opts.caps, key)?;
            let (mut sf, mut sg, mut sfg) = (0.0, 0.0, 0.0);
            for ind in tree.alive_at(t) {
                let a = ancestor_trait_at(&tree, &ind.label, s);
                let fv = f.eval(a);
                let gv = g.eval(a);
                sf += fv;
                sg += gv;
                sfg += fv * gv;
            }
            Ok(sf * sg - sfg)
        })
        .collect();
    let lhs = MCEstimate::from_samples(&lhs_samples?, opts.ci_level);
    let rhs = fork_rhs(model, x0, s, t, f, g, opts)?;
    Ok(VerificationReport::build(
        name,
        lhs,
        RhsValue::Estimate(rhs),
        opts,
    ))
}

fn fork_rhs(
    model: &ModelSpec,
    x0: &TraitValue,
    s: f64,
    t: f64,
    f: &ScalarFn,
    g: &ScalarFn,
    opts: &CheckOpts,
) -> Result<MCEstimate> {
    if t == 0.0 {
        return Ok(MCEstimate::exact(0.0, opts.ci_level));
    }
    let constant_functionals = *f == ScalarFn::One && *g == ScalarFn::One;
    if constant_functionals {
        // P_{r,s} 1 = 1, so both integrals merge into one over [0, t]
        return fork_integral_merged(model, x0, t, opts);
    }
    let budget = opts.quad_nodes * opts.aux_per_node * (1 + 2 * opts.nested_inner);
    if budget > opts.nested_budget {
        return Err(Error::NestedBudget {
            requested: budget,
            budget: opts.nested_budget,
        });
    }
    // first integral: ancestors dying in [s, t]
    let i1 = fork_integral_late(model, x0, s, t, f, g, opts)?;
    // second integral: ancestors dying in [0, s], children continued by
    // nested auxiliary MC to time s
    let i2 = fork_integral_early(model, x0, s, t, f, g, opts)?;
    Ok(MCEstimate {
        n: i1.n + i2.n,
        mean: i1.mean + i2.mean,
        std_error: (i1.std_error.powi(2) + i2.std_error.powi(2)).sqrt(),
        ci_level: opts.ci_level,
    })
}

fn quadrature_mc<E>(
    model: &ModelSpec,
    x0: &TraitValue,
    lo: f64,
    hi: f64,
    nodes: usize,
    opts: &CheckOpts,
    salt: u64,
    eval: E,
) -> Result<MCEstimate>
where
    E: Fn(f64, usize) -> Result<f64> + Sync,
{
    if hi <= lo {
        return Ok(MCEstimate::exact(0.0, opts.ci_level));
    }
    let (xs, ws) = gauss_legendre(nodes);
    let c = (hi - lo) / 2.0;
    let d = (hi + lo) / 2.0;
    let per_node: Result<Vec<(f64, f64)>> = (0..nodes)
        .into_par_iter()
        .map(|k| {
            let r_k = c * xs[k] + d;
            let m_k = model.mean_population(x0, 0.0, r_k)?;
            let vals: Result<Vec<f64>> = (0..opts.aux_per_node)
                .map(|j| eval(r_k, (mix2(mix2(salt, k as u64), j as u64)) as usize))
                .collect();
            let est = MCEstimate::from_samples(&vals?, opts.ci_level);
            let scale = ws[k] * c * m_k;
            Ok((scale * est.mean, (scale * est.std_error).powi(2)))
        })
        .collect();
    let per_node = per_node?;
    Ok(MCEstimate {
        n: nodes * opts.aux_per_node,
        mean: per_node.iter().map(|(v, _)| v).sum(),
        std_error: per_node.iter().map(|(_, v)| v).sum::<f64>().sqrt(),
        ci_level: opts.ci_level,
    })
}

fn fork_integral_merged(
    model: &ModelSpec,
    x0: &TraitValue,
    t: f64,
    opts: &CheckOpts,
) -> Result<MCEstimate> {
    quadrature_mc(model, x0, 0.0, t, opts.quad_nodes, opts, 0xF0, |r, key| {
        let mut rng = stream_rng(opts.seed, DOMAIN_AUXILIARY, key as u64);
        let path = simulate_auxiliary_from(model, x0, 0.0, r, &mut rng, RateFormula::Derived)?;
        let y = model.trait_value(path.terminal())?;
        Ok(model.division_rate(&y, r) * model.j2_mean_product(&y, r, t)?)
    })
}

fn fork_integral_late(
    model: &ModelSpec,
    x0: &TraitValue,
    s: f64,
    t: f64,
    f: &ScalarFn,
    g: &ScalarFn,
    opts: &CheckOpts,
) -> Result<MCEstimate> {
    quadrature_mc(model, x0, s, t, opts.quad_nodes, opts, 0xF1, |r, key| {
        let mut rng = stream_rng(opts.seed, DOMAIN_AUXILIARY, key as u64);
        let path = simulate_auxiliary_from(model, x0, 0.0, r, &mut rng, RateFormula::Derived)?;
        let y_s = path.trait_at(s);
        let y_r = model.trait_value(path.terminal())?;
        Ok(f.eval(y_s)
            * g.eval(y_s)
            * model.division_rate(&y_r, r)
            * model.j2_mean_product(&y_r, r, t)?)
    })
}

fn fork_integral_early(
    model: &ModelSpec,
    x0: &TraitValue,
    s: f64,
    t: f64,
    f: &ScalarFn,
    g: &ScalarFn,
    opts: &CheckOpts,
) -> Result<MCEstimate> {
    quadrature_mc(model, x0, 0.0, s, opts.quad_nodes, opts, 0xF2, |r, key| {
        let mut rng = stream_rng(opts.seed, DOMAIN_AUXILIARY, key as u64);
        let path = simulate_auxiliary_from(model, x0, 0.0, r, &mut rng, RateFormula::Derived)?;
        let y_r = model.trait_value(path.terminal())?;
        // theta-coupled children of the splitting ancestor
        let draw = model.offspring_sample(&y_r, &mut rng);
        if draw.count() < 2 {
            return Ok(0.0);
        }
        let phi = |child: &TraitValue, h: &ScalarFn, salt: u64| -> Result<f64> {
            let m_child = model.mean_population(child, r, t)?;
            let mut acc = 0.0;
            for j in 0..opts.nested_inner {
                let mut nested_rng = stream_rng(
                    opts.seed,
                    DOMAIN_NESTED,
                    mix2(mix2(key as u64, salt), j as u64),
                );
                let nested = simulate_auxiliary_from(
                    model,
                    child,
                    r,
                    t,
                    &mut nested_rng,
                    RateFormula::Derived,
                )?;
                acc += h.eval(nested.trait_at(s));
            }
            Ok(m_child * acc / opts.nested_inner as f64)
        };
        let c1 = &draw.children[0];
        let c2 = &draw.children[1];
        let j2 = phi(c1, f, 1)? * phi(c2, g, 2)? + phi(c2, f, 3)? * phi(c1, g, 4)?;
        Ok(model.division_rate(&y_r, r) * j2)
    })
}

// ---------------------------------------------------------------------------
// Feynman-Kac representation

/// Compares auxiliary MC of f(Y_s^{(t)}) against the tagged-particle
/// importance-sampling representation.
#[allow(clippy::too_many_arguments)]
pub fn check_feynman_kac(
    model: &ModelSpec,
    x0: &TraitValue,
    r: f64,
    s: f64,
    t: f64,
    f: &ScalarFn,
    n: usize,
    opts: &CheckOpts,
) -> Result<VerificationReport> {
    if !(r <= s && s <= t) {
        return Err(Error::InvalidInput(format!(
            "feynman_kac needs r <= s <= t, got {r}, {s}, {t}"
        )));
    }
    let name = format!("feynman_kac[{} f={} r={r} s={s} t={t}]", model.id(), f.describe());
    let aux_vals: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed, DOMAIN_AUXILIARY, i as u64);
            let path = simulate_auxiliary_from(model, x0, r, t, &mut rng, RateFormula::Derived)?;
            Ok(f.eval(path.trait_at(s)))
        })
        .collect();
    let lhs = MCEstimate::from_samples(&aux_vals?, opts.ci_level);

    let m_start = model.mean_population(x0, r, t)?;
    let tagged_vals: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed, DOMAIN_TAGGED, i as u64);
            let path = simulate_tagged_cell_from(model, x0, r, s, &mut rng)?;
            let exponent = integrate_growth_rate(model, &path, r, s)?;
            if exponent > 700.0 {
                return Err(Error::WeightOverflow(exponent));
            }
            let x_s = model.trait_value(path.terminal())?;
            Ok(exponent.exp() * model.mean_population(&x_s, s, t)? * f.eval(x_s.as_f64())
                / m_start)
        })
        .collect();
    let rhs = MCEstimate::from_samples(&tagged_vals?, opts.ci_level);
    Ok(VerificationReport::build(
        name,
        lhs,
        RhsValue::Estimate(rhs),
        opts,
    ))
}

/// int_{from}^{to} B(X_v, v) (m(X_v) - 1) dv along a simulated path.
pub fn integrate_growth_rate(
    model: &ModelSpec,
    path: &TraitPath,
    from: f64,
    to: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for seg in &path.segments {
        let lo = seg.start.max(from);
        let hi = seg.end.min(to);
        if hi <= lo {
            continue;
        }
        acc += segment_rate_integral(model, &seg.motion, lo, hi)?;
    }
    Ok(acc)
}

fn segment_rate_integral(
    model: &ModelSpec,
    motion: &crate::motion::MotionRecord,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    use crate::motion::MotionRecord as MR;
    let growth = |x: &TraitValue| model.mean_offspring(x) - 1.0;
    Ok(match model {
        ModelSpec::Yule { b, .. } | ModelSpec::TestExtinct { b, .. } => {
            let x = model.trait_value(motion.eval(lo))?;
            b * growth(&x) * (hi - lo)
        }
        ModelSpec::TwoTypeSwitch { .. } => {
            let x = model.trait_value(motion.eval(lo))?;
            model.division_rate(&x, lo) * growth(&x) * (hi - lo)
        }
        ModelSpec::LinearGrowth { a, alpha } => {
            // B = alpha (x0 + a (v - t0)): exact quadratic integral
            let (x0, t0) = match motion {
                MR::Flow { x0, t0, .. } => (*x0, *t0),
                _ => unreachable!("linear growth stores flows"),
            };
            alpha * (x0 * (hi - lo) + a * ((hi - t0).powi(2) - (lo - t0).powi(2)) / 2.0)
        }
        ModelSpec::ExpGrowth { a, alpha } => {
            let (x0, t0) = match motion {
                MR::Flow { x0, t0, .. } => (*x0, *t0),
                _ => unreachable!("exp growth stores flows"),
            };
            // int alpha(v) x0 e^{a (v - t0)} dv
            x0 * (a * (lo - t0)).exp() * alpha.growth_weighted_integral(*a, lo, hi)
        }
        ModelSpec::Parasite { alpha, beta, step, .. } => {
            // trapezoid at the integrator resolution
            let mut acc = 0.0;
            let mut v = lo;
            while v < hi {
                let h = step.min(hi - v);
                let x_a = motion.eval(v);
                let x_b = motion.eval(v + h);
                acc += (alpha * (x_a + x_b) / 2.0 + beta) * h;
                v += h;
            }
            acc
        }
        ModelSpec::PlasmidBd { .. } => {
            // B = x piecewise constant: exact sum over jump intervals
            let (x0, t0, jumps) = match motion {
                MR::Steps { x0, t0, jumps } => (*x0, *t0, jumps),
                _ => unreachable!("plasmid stores step records"),
            };
            let mut acc = 0.0;
            let mut x = x0;
            let mut prev = t0;
            for &(tj, xj) in jumps {
                let a = prev.max(lo);
                let b = tj.min(hi);
                if b > a {
                    acc += x * (b - a);
                }
                x = xj;
                prev = tj;
            }
            let a = prev.max(lo);
            if hi > a {
                acc += x * (hi - a);
            }
            acc
        }
    })
}

// ---------------------------------------------------------------------------
// sampling limit (Theorem 4.1)

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingRow {
    pub n_init: usize,
    pub ks_distance: f64,
    pub p_value: f64,
    pub ci: (f64, f64),
}

/// For each initial population size n: simulate nu_n-initialized populations,
/// sample uniform lineages conditioned on survival, and compare the
/// division-count law against auxiliary paths initialized from pi_t.
pub fn check_sampling_convergence(
    model: &ModelSpec,
    atoms: &[(TraitValue, f64)],
    n_grid: &[usize],
    t: f64,
    replicates: usize,
    opts: &CheckOpts,
) -> Result<Vec<SamplingRow>> {
    if n_grid.is_empty() {
        return Err(Error::InvalidInput("empty n grid".into()));
    }
    let total_w: f64 = atoms.iter().map(|(_, w)| w).sum();
    if !(total_w > 0.0) {
        return Err(Error::InvalidInput("atom weights must not all be zero".into()));
    }

    // auxiliary reference sample, initialized from pi_t
    let aux_counts: Result<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed, DOMAIN_AUXILIARY, i as u64);
            let start = sample_pi_t(model, atoms, t, &mut rng)?;
            let path =
                simulate_auxiliary_from(model, &start, 0.0, t, &mut rng, RateFormula::Derived)?;
            Ok(path.division_count() as f64)
        })
        .collect();
    let aux = EmpiricalDistribution::new(aux_counts?)?;

    let mut rows = Vec::with_capacity(n_grid.len());
    for (gi, &n_init) in n_grid.iter().enumerate() {
        let counts: Result<Vec<f64>> = (0..replicates)
            .into_par_iter()
            .map(|i| {
                let mut pick_rng =
                    stream_rng(opts.seed, DOMAIN_SAMPLING, mix2(gi as u64, i as u64));
                for attempt in 0..opts.resample_budget {
                    let key = replicate_key(
                        opts.seed,
                        DOMAIN_INIT,
                        mix2(mix2(gi as u64, i as u64), attempt as u64),
                    );
                    let mut init_rng = stream_rng(opts.seed, DOMAIN_INIT, key);
                    let init: Vec<TraitValue> = (0..n_init)
                        .map(|_| categorical(atoms, total_w, &mut init_rng))
                        .collect();
                    let tree = simulate_population(model, &init, 0.0, t, opts.caps, key)?;
                    match sample_uniform_lineage(&tree, t, &mut pick_rng) {
                        Ok(path) => return Ok(path.division_count() as f64),
                        Err(Error::Extinct(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::ResampleBudget(opts.resample_budget))
            })
            .collect();
        let sampled = EmpiricalDistribution::new(counts?)?;
        let ks = ks_two_sample(&sampled, &aux);
        let mut boot_rng = stream_rng(opts.seed, DOMAIN_BOOTSTRAP, gi as u64);
        let ci = ks_bootstrap_ci(&sampled, &aux, 200, 0.95, &mut boot_rng);
        rows.push(SamplingRow {
            n_init,
            ks_distance: ks.statistic,
            p_value: ks.p_value,
            ci,
        });
    }
    Ok(rows)
}

fn categorical(atoms: &[(TraitValue, f64)], total: f64, rng: &mut impl Rng) -> TraitValue {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (x, w) in atoms {
        acc += w;
        if target <= acc {
            return *x;
        }
    }
    atoms.last().unwrap().0
}

// ---------------------------------------------------------------------------
// figure data: three division-count series

#[derive(Debug, Clone, PartialEq)]
pub struct FigureData {
    pub uniform: Vec<usize>,
    pub auxiliary: Vec<usize>,
    pub tagged: Vec<usize>,
    pub ks_uniform_vs_auxiliary: (f64, f64),
    pub ks_tagged_vs_auxiliary: (f64, f64),
}

/// Division-count distributions of (i) a uniform sample from full trees
/// conditioned on survival, (ii) the auxiliary process, (iii) the tagged
/// cell, each over `replicates` runs.
pub fn figure_division_counts(
    model: &ModelSpec,
    x0: &TraitValue,
    t: f64,
    replicates: usize,
    opts: &CheckOpts,
) -> Result<FigureData> {
    let uniform: Result<Vec<usize>> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut pick_rng = stream_rng(opts.seed, DOMAIN_ANALYSIS, i as u64);
            for attempt in 0..opts.resample_budget {
                let key = replicate_key(
                    opts.seed,
                    DOMAIN_POPULATION,
                    mix2(i as u64, attempt as u64),
                );
                let tree = simulate_population(model, &[*x0], 0.0, t, opts.caps, key)?;
                match sample_uniform_lineage(&tree, t, &mut pick_rng) {
                    Ok(path) => return Ok(path.division_count()),
                    Err(Error::Extinct(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::ResampleBudget(opts.resample_budget))
        })
        .collect();
    let auxiliary: Result<Vec<usize>> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed, DOMAIN_AUXILIARY, i as u64);
            let path =
                simulate_auxiliary_from(model, x0, 0.0, t, &mut rng, RateFormula::Derived)?;
            Ok(path.division_count())
        })
        .collect();
    let tagged: Result<Vec<usize>> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed, DOMAIN_TAGGED, i as u64);
            let path = simulate_tagged_cell_from(model, x0, 0.0, t, &mut rng)?;
            Ok(path.division_count())
        })
        .collect();
    let (uniform, auxiliary, tagged) = (uniform?, auxiliary?, tagged?);
    let to_emp = |v: &[usize]| {
        EmpiricalDistribution::new(v.iter().map(|&c| c as f64).collect()).unwrap()
    };
    let ks_ua = ks_two_sample(&to_emp(&uniform), &to_emp(&auxiliary));
    let ks_ta = ks_two_sample(&to_emp(&tagged), &to_emp(&auxiliary));
    Ok(FigureData {
        uniform,
        auxiliary,
        tagged,
        ks_uniform_vs_auxiliary: (ks_ua.statistic, ks_ua.p_value),
        ks_tagged_vs_auxiliary: (ks_ta.statistic, ks_ta.p_value),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_and_path_functionals() {
        let p = TraitPath {
            horizon: 1.0,
            segments: vec![crate::path::PathSegment {
                start: 0.0,
                end: 1.0,
                motion: crate::motion::MotionRecord::constant(2.0, 0.0),
            }],
            jumps: vec![],
        };
        assert_eq!(Functional::One.eval(&p), 1.0);
        assert_eq!(Functional::TerminalTrait.eval(&p), 2.0);
        assert_eq!(Functional::GfDivisions { z: 0.5 }.eval(&p), 1.0);
        assert_eq!(Functional::TerminalIn { lo: 1.5, hi: 2.5 }.eval(&p), 1.0);
        assert_eq!(ScalarFn::Identity.eval(3.0), 3.0);
    }

    #[test]
    fn functional_config_parses() {
        let f: Functional = serde_json::from_value(serde_json::json!({"id": "gf_divisions", "z": 0.5}))
            .unwrap();
        assert_eq!(f, Functional::GfDivisions { z: 0.5 });
        let bad: std::result::Result<Functional, _> =
            serde_json::from_value(serde_json::json!({"id": "gf_divisions", "zz": 0.5}));
        assert!(bad.is_err());
    }
}
