//! Event-driven exact simulation of the branching population, recording the
//! complete genealogy under Ulam-Harris labels.
//!
//! Division times are exact: deterministic trait flows invert the integrated
//! hazard in closed form; the parasite diffusion thins candidate divisions
//! against a per-step bound on B along the interpolated path; the plasmid
//! walk is a competing-clock jump chain. Each individual consumes only its
//! own label-derived stream, so tree topology does not depend on traversal
//! or scheduling order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{ModelSpec, OffspringDraw, TraitKind, TraitValue};
use crate::motion::MotionRecord;
use crate::numeric::{fmt_g17, OrdF64};
use crate::path::{PathJump, PathSegment, TraitPath};
use crate::rng::{individual_rng, label_hash, replicate_key, DOMAIN_POPULATION};
use crate::stats::MCEstimate;

/// Ulam-Harris label: the root of tree i is `[i+1]`, its children append
/// 1-based child indices. Lexicographic order doubles as the deterministic
/// tie-break for simultaneous events.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(pub Vec<u32>);

impl Label {
    pub fn root(i: u32) -> Self {
        Label(vec![i])
    }

    pub fn child(&self, index: u32) -> Self {
        let mut path = self.0.clone();
        path.push(index);
        Label(path)
    }

    pub fn parent(&self) -> Option<Label> {
        if self.0.len() <= 1 {
            None
        } else {
            Some(Label(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Number of divisions separating this individual from its root.
    pub fn depth(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn hash_u64(&self) -> u64 {
        label_hash(&self.0)
    }

    pub fn parse(s: &str) -> Result<Label> {
        let parts: std::result::Result<Vec<u32>, _> =
            s.split('.').map(str::parse::<u32>).collect();
        parts
            .map(Label)
            .map_err(|e| Error::InvalidInput(format!("bad label '{s}': {e}")))
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, part) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{part}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub label: Label,
    pub birth_time: f64,
    /// None while alive at the horizon.
    pub death_time: Option<f64>,
    pub trait_at_birth: TraitValue,
    pub motion: MotionRecord,
    /// Offspring count of the recorded division (0 if alive at horizon, or
    /// if the division produced no children).
    pub offspring: u32,
}

impl Individual {
    pub fn alive_at(&self, s: f64) -> bool {
        self.birth_time <= s && self.death_time.is_none_or(|d| s < d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Caps {
    pub max_individuals: usize,
    pub max_events: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            max_individuals: 1_000_000,
            max_events: 10_000_000,
        }
    }
}

/// Full genealogical record of one simulated population.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTree {
    pub individuals: BTreeMap<Label, Individual>,
    pub start_time: f64,
    pub horizon: f64,
    pub seed: u64,
    pub caps: Caps,
    pub trait_kind: TraitKind,
    pub extinct_at: Option<f64>,
}

impl PopulationTree {
    pub fn n_alive_at(&self, s: f64) -> usize {
        self.individuals.values().filter(|u| u.alive_at(s)).count()
    }

    pub fn alive_at(&self, s: f64) -> impl Iterator<Item = &Individual> {
        self.individuals.values().filter(move |u| u.alive_at(s))
    }
}

// result of simulating one individual's life from birth to division/horizon
pub(crate) struct Life {
    pub(crate) motion: MotionRecord,
    pub(crate) division: Option<(f64, f64)>, // (time, trait just before division)
    pub(crate) events: usize,
}

fn exponential(rng: &mut impl Rng) -> f64 {
    -rng.random::<f64>().ln()
}

pub(crate) fn simulate_life(
    model: &ModelSpec,
    x: &TraitValue,
    birth: f64,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<Life> {
    let xv = x.as_f64();
    match model {
        ModelSpec::Yule { b, .. } | ModelSpec::TestExtinct { b, .. } => {
            let t_div = birth + exponential(rng) / b;
            flow_life(model, x, birth, horizon, t_div, rng)
        }
        ModelSpec::TwoTypeSwitch { .. } => {
            let rate = model.division_rate(x, birth);
            let t_div = birth + exponential(rng) / rate;
            flow_life(model, x, birth, horizon, t_div, rng)
        }
        ModelSpec::LinearGrowth { a, alpha } => {
            // integrated hazard H(d) = alpha x d + a alpha d^2 / 2
            let e = exponential(rng);
            let d = (-alpha * xv + ((alpha * xv).powi(2) + 2.0 * a * alpha * e).sqrt())
                / (a * alpha);
            flow_life(model, x, birth, horizon, birth + d, rng)
        }
        ModelSpec::ExpGrowth { a, alpha } => {
            let t_div = if xv == 0.0 {
                f64::INFINITY
            } else {
                invert_exp_growth_hazard(alpha, *a, xv, birth, exponential(rng))
            };
            flow_life(model, x, birth, horizon, t_div, rng)
        }
        ModelSpec::Parasite {
            g,
            sigma2,
            alpha,
            beta,
            step,
        } => Ok(parasite_life(
            xv, birth, horizon, *g, *sigma2, *alpha, *beta, *step, rng,
        )),
        ModelSpec::PlasmidBd { lambda, mu } => {
            Ok(plasmid_life(xv, birth, horizon, *lambda, *mu, rng))
        }
    }
}

fn flow_life(
    model: &ModelSpec,
    x: &TraitValue,
    birth: f64,
    horizon: f64,
    t_div: f64,
    rng: &mut impl Rng,
) -> Result<Life> {
    // deterministic motions draw nothing from rng
    let motion = model.evolve_trait(x, birth, horizon.max(birth), rng)?;
    let division = if t_div <= horizon {
        Some((t_div, motion.eval(t_div)))
    } else {
        None
    };
    Ok(Life {
        motion,
        division,
        events: 1,
    })
}

/// Invert E = x int_birth^T alpha(r) e^{a (r - birth)} dr piece by piece.
fn invert_exp_growth_hazard(
    alpha: &crate::models::AlphaFn,
    a: f64,
    x: f64,
    birth: f64,
    e: f64,
) -> f64 {
    use crate::models::AlphaFn;
    let pieces: Vec<(f64, f64)> = match alpha {
        AlphaFn::Constant(v) => vec![(birth, *v)],
        AlphaFn::Piecewise { times, values } => {
            let mut p: Vec<(f64, f64)> = times
                .iter()
                .zip(values)
                .map(|(t, v)| (*t, *v))
                .filter(|(t, _)| *t > birth)
                .collect();
            p.insert(0, (birth, alpha.value(birth)));
            p
        }
    };
    let mut remaining = e;
    for (i, &(lo, v)) in pieces.iter().enumerate() {
        let e_lo = (a * (lo - birth)).exp();
        if let Some(&(hi, _)) = pieces.get(i + 1) {
            let e_hi = (a * (hi - birth)).exp();
            let mass = x * v * (e_hi - e_lo) / a;
            if remaining > mass {
                remaining -= mass;
                continue;
            }
        }
        // division inside this (possibly unbounded) piece
        let target = e_lo + a * remaining / (x * v);
        return birth + target.ln() / a;
    }
    unreachable!("last piece is unbounded");
}

#[allow(clippy::too_many_arguments)]
fn parasite_life(
    x0: f64,
    birth: f64,
    horizon: f64,
    g: f64,
    sigma2: f64,
    alpha: f64,
    beta: f64,
    step: f64,
    rng: &mut impl Rng,
) -> Life {
    let mut values = vec![x0];
    let mut x = x0;
    let mut time = birth;
    let mut events = 0usize;
    while time < horizon {
        let h = step.min(horizon - time);
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let x_next = (x + g * x * h + (2.0 * sigma2 * x * h).sqrt() * z).max(0.0);
        events += 1;
        // thin candidate divisions against the max of B over the step
        let bound = alpha * x.max(x_next) + beta;
        let mut u = time;
        loop {
            u += exponential(rng) / bound;
            if u >= time + h {
                break;
            }
            let w = (u - time) / h;
            let xu = x * (1.0 - w) + x_next * w;
            if rng.random::<f64>() * bound <= alpha * xu + beta {
                values.push(xu);
                return Life {
                    motion: MotionRecord::Grid {
                        t0: birth,
                        step,
                        t_end: u,
                        values,
                    },
                    division: Some((u, xu)),
                    events: events + 1,
                };
            }
        }
        x = x_next;
        values.push(x);
        time += h;
    }
    Life {
        motion: MotionRecord::Grid {
            t0: birth,
            step,
            t_end: horizon,
            values,
        },
        division: None,
        events,
    }
}

fn plasmid_life(
    x0: f64,
    birth: f64,
    horizon: f64,
    lambda: f64,
    mu: f64,
    rng: &mut impl Rng,
) -> Life {
    let mut jumps = Vec::new();
    let mut x = x0 as u64;
    let mut time = birth;
    let mut events = 0usize;
    loop {
        // birth lambda*x, death mu*x, division B(x) = x
        let total = (lambda + mu + 1.0) * x as f64;
        if total <= 0.0 {
            break; // x = 0 is inert: no motion and no division
        }
        time += exponential(rng) / total;
        if time >= horizon {
            break;
        }
        events += 1;
        let u: f64 = rng.random::<f64>() * (lambda + mu + 1.0);
        if u < lambda {
            x += 1;
        } else if u < lambda + mu {
            x -= 1;
        } else {
            return Life {
                motion: MotionRecord::Steps {
                    t0: birth,
                    x0,
                    jumps,
                },
                division: Some((time, x as f64)),
                events,
            };
        }
        jumps.push((time, x as f64));
    }
    Life {
        motion: MotionRecord::Steps {
            t0: birth,
            x0,
            jumps,
        },
        division: None,
        events,
    }
}

/// Simulate one population from `init` (one root per entry, born at
/// `start`) up to `horizon`. `seed` is the replicate-level key; individual
/// substreams derive from it by label.
pub fn simulate_population(
    model: &ModelSpec,
    init: &[TraitValue],
    start: f64,
    horizon: f64,
    caps: Caps,
    seed: u64,
) -> Result<PopulationTree> {
    if init.is_empty() {
        return Err(Error::InvalidInput("init must be nonempty".into()));
    }
    if horizon < start {
        return Err(Error::InvalidInput(format!(
            "horizon {horizon} must be >= start {start}"
        )));
    }
    if caps.max_individuals == 0 || caps.max_events == 0 {
        return Err(Error::InvalidInput("caps must be positive".into()));
    }
    for x in init {
        model.trait_value(x.as_f64())?;
    }

    let mut tree = PopulationTree {
        individuals: BTreeMap::new(),
        start_time: start,
        horizon,
        seed,
        caps,
        trait_kind: model.trait_kind(),
        extinct_at: None,
    };
    // (division time, label) min-heap; ties break lexicographically
    let mut heap: BinaryHeap<Reverse<(OrdF64, Label)>> = BinaryHeap::new();
    // offspring draws made at spawn time from the individual's own stream
    let mut pending: HashMap<Label, OffspringDraw> = HashMap::new();
    let mut events = 0usize;
    let mut alive = 0usize;

    fn spawn(
        model: &ModelSpec,
        seed: u64,
        caps: Caps,
        horizon: f64,
        tree: &mut PopulationTree,
        heap: &mut BinaryHeap<Reverse<(OrdF64, Label)>>,
        pending: &mut HashMap<Label, OffspringDraw>,
        events: &mut usize,
        label: Label,
        birth: f64,
        x: TraitValue,
    ) -> Result<()> {
        if tree.individuals.len() >= caps.max_individuals {
            return Err(Error::CapExceeded {
                what: format!("max_individuals = {}", caps.max_individuals),
                time_reached: birth,
                partial: Box::new(tree.clone()),
            });
        }
        let mut rng = individual_rng(seed, label.hash_u64());
        let life = simulate_life(model, &x, birth, horizon, &mut rng)?;
        *events += life.events;
        if *events > caps.max_events {
            return Err(Error::CapExceeded {
                what: format!("max_events = {}", caps.max_events),
                time_reached: birth,
                partial: Box::new(tree.clone()),
            });
        }
        if let Some((t_div, x_div)) = life.division {
            // offspring randomness continues the same label stream, after
            // the life draws
            let x_death = model.trait_value(x_div)?;
            pending.insert(label.clone(), model.offspring_sample(&x_death, &mut rng));
            heap.push(Reverse((OrdF64(t_div), label.clone())));
        }
        tree.individuals.insert(
            label.clone(),
            Individual {
                label,
                birth_time: birth,
                death_time: life.division.map(|(t, _)| t),
                trait_at_birth: x,
                motion: life.motion,
                offspring: 0,
            },
        );
        Ok(())
    }

    for (i, x) in init.iter().enumerate() {
        spawn(
            model,
            seed,
            caps,
            horizon,
            &mut tree,
            &mut heap,
            &mut pending,
            &mut events,
            Label::root(i as u32 + 1),
            start,
            *x,
        )?;
        alive += 1;
    }

    while let Some(Reverse((OrdF64(t_div), label))) = heap.pop() {
        let draw = pending.remove(&label).expect("scheduled division has a draw");
        let k = draw.count();
        tree.individuals.get_mut(&label).unwrap().offspring = k as u32;
        alive = alive + k - 1;
        for (j, child_x) in draw.children.iter().enumerate() {
            spawn(
                model,
                seed,
                caps,
                horizon,
                &mut tree,
                &mut heap,
                &mut pending,
                &mut events,
                label.child(j as u32 + 1),
                t_div,
                *child_x,
            )?;
        }
        if alive == 0 {
            tree.extinct_at = Some(t_div);
        }
    }
    Ok(tree)
}

/// All individuals alive at s with their traits reconstructed at s.
pub fn population_snapshot(tree: &PopulationTree, s: f64) -> Result<Vec<(Label, TraitValue)>> {
    if s < tree.start_time || s > tree.horizon {
        return Err(Error::InvalidInput(format!(
            "snapshot time {s} outside [{}, {}]",
            tree.start_time, tree.horizon
        )));
    }
    let mut out = Vec::new();
    for ind in tree.individuals.values() {
        if ind.alive_at(s) {
            out.push((
                ind.label.clone(),
                raw_trait(tree.trait_kind, ind.motion.eval(s)),
            ));
        }
    }
    Ok(out)
}

fn raw_trait(kind: TraitKind, v: f64) -> TraitValue {
    match kind {
        TraitKind::Real => TraitValue::Real(v),
        TraitKind::Count => TraitValue::Count(v.round() as u64),
        TraitKind::Flag => TraitValue::Flag(v != 0.0),
    }
}

/// Piecewise trait trajectory of u's ancestral line on [start, t], with the
/// division times of its ancestors.
pub fn lineage_of(tree: &PopulationTree, u: &Label, t: f64) -> Result<TraitPath> {
    let ind = tree
        .individuals
        .get(u)
        .ok_or_else(|| Error::InvalidInput(format!("label {u} not in tree")))?;
    if !ind.alive_at(t) {
        return Err(Error::InvalidInput(format!(
            "individual {u} not alive at {t}"
        )));
    }
    let mut chain = Vec::new();
    let mut cur = u.clone();
    loop {
        chain.push(cur.clone());
        match cur.parent() {
            Some(p) => cur = p,
            None => break,
        }
    }
    chain.reverse();

    let mut segments = Vec::new();
    let mut jumps = Vec::new();
    for (i, label) in chain.iter().enumerate() {
        let a = &tree.individuals[label];
        let end = if i + 1 == chain.len() {
            t
        } else {
            a.death_time.expect("ancestor of an alive individual has died")
        };
        segments.push(PathSegment {
            start: a.birth_time,
            end,
            motion: a.motion.clone(),
        });
        if i + 1 < chain.len() {
            let child = &tree.individuals[&chain[i + 1]];
            jumps.push(PathJump {
                time: end,
                pre: a.motion.eval(end),
                post: child.trait_at_birth.as_f64(),
            });
        }
    }
    Ok(TraitPath {
        horizon: t,
        segments,
        jumps,
    })
}

/// Monte Carlo of N_t over n populations started from a single x at time s.
pub fn population_count_mc(
    model: &ModelSpec,
    x: &TraitValue,
    s: f64,
    t: f64,
    n: usize,
    caps: Caps,
    seed: u64,
) -> Result<MCEstimate> {
    if n < 2 {
        return Err(Error::InvalidInput("replicate count must be >= 2".into()));
    }
    let counts: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let key = replicate_key(seed, DOMAIN_POPULATION, i as u64);
            match simulate_population(model, &[*x], s, t, caps, key) {
                Ok(tree) => Ok(tree.n_alive_at(t) as f64),
                Err(Error::CapExceeded {
                    what,
                    time_reached,
                    partial,
                }) => Err(Error::CapExceeded {
                    what: format!("replicate {i}: {what}"),
                    time_reached,
                    partial,
                }),
                Err(e) => Err(e),
            }
        })
        .collect();
    Ok(MCEstimate::from_samples(&counts?, 0.99))
}

/// One-row-per-individual CSV (deterministic order, 17 significant digits).
pub fn tree_to_csv(tree: &PopulationTree) -> String {
    let mut out = String::from("label,parent,alpha,beta,trait_at_birth,trait_at_horizon\n");
    for ind in tree.individuals.values() {
        let parent = ind
            .label
            .parent()
            .map(|p| p.to_string())
            .unwrap_or_default();
        let beta = ind.death_time.map(fmt_g17).unwrap_or_default();
        let at_horizon = if ind.death_time.is_none() {
            fmt_g17(ind.motion.eval(tree.horizon))
        } else {
            String::new()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            ind.label,
            parent,
            fmt_g17(ind.birth_time),
            beta,
            fmt_g17(ind.trait_at_birth.as_f64()),
            at_horizon
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yule() -> ModelSpec {
        ModelSpec::Yule {
            b: 1.0,
            mean_offspring: 2,
        }
    }

    #[test]
    fn horizon_zero_keeps_initials_only() {
        let tree = simulate_population(
            &yule(),
            &[TraitValue::Real(1.0), TraitValue::Real(2.0)],
            0.0,
            0.0,
            Caps::default(),
            7,
        )
        .unwrap();
        assert_eq!(tree.individuals.len(), 2);
        assert!(tree.individuals.values().all(|u| u.death_time.is_none()));
        let snap = population_snapshot(&tree, 0.0).unwrap();
        assert_eq!(snap.len(), 2);
        assert_eq!(snap[0].0, Label::root(1));
    }

    #[test]
    fn determinism_same_seed_same_tree() {
        let m = ModelSpec::LinearGrowth { a: 1.0, alpha: 1.0 };
        let a = simulate_population(&m, &[TraitValue::Real(1.0)], 0.0, 2.0, Caps::default(), 5)
            .unwrap();
        let b = simulate_population(&m, &[TraitValue::Real(1.0)], 0.0, 2.0, Caps::default(), 5)
            .unwrap();
        assert_eq!(a, b);
        let c = simulate_population(&m, &[TraitValue::Real(1.0)], 0.0, 2.0, Caps::default(), 6)
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_prefix_closed_and_birth_matches_parent_death() {
        let m = ModelSpec::LinearGrowth { a: 1.0, alpha: 1.0 };
        let tree =
            simulate_population(&m, &[TraitValue::Real(1.0)], 0.0, 3.0, Caps::default(), 11)
                .unwrap();
        assert!(tree.individuals.len() > 4, "want a nontrivial tree");
        for (label, ind) in &tree.individuals {
            if let Some(parent) = label.parent() {
                let p = &tree.individuals[&parent];
                assert_eq!(p.death_time, Some(ind.birth_time));
                assert!(*label.0.last().unwrap() <= p.offspring);
            } else {
                assert_eq!(ind.birth_time, 0.0);
            }
        }
    }

    #[test]
    fn cap_errors_carry_partial_tree() {
        let m = yule();
        let err = simulate_population(
            &m,
            &[TraitValue::Real(1.0)],
            0.0,
            30.0,
            Caps {
                max_individuals: 50,
                max_events: 1_000_000,
            },
            3,
        )
        .unwrap_err();
        match err {
            Error::CapExceeded {
                partial,
                time_reached,
                ..
            } => {
                assert_eq!(partial.individuals.len(), 50);
                assert!(time_reached > 0.0 && time_reached < 30.0);
            }
            other => panic!("expected CapExceeded, got {other}"),
        }
    }

    #[test]
    fn extinction_is_recorded() {
        let m = ModelSpec::TestExtinct { b: 5.0, p0: 0.9 };
        let mut seen_extinct = false;
        for seed in 0..20 {
            let tree =
                simulate_population(&m, &[TraitValue::Real(1.0)], 0.0, 4.0, Caps::default(), seed)
                    .unwrap();
            if let Some(te) = tree.extinct_at {
                assert!(te <= 4.0);
                assert_eq!(tree.n_alive_at(4.0), 0);
                seen_extinct = true;
            }
        }
        assert!(seen_extinct, "p0=0.9 should go extinct often");
    }

    #[test]
    fn lineage_depth_counts_divisions_and_traits_halve() {
        let m = ModelSpec::LinearGrowth { a: 1.0, alpha: 1.0 };
        let tree =
            simulate_population(&m, &[TraitValue::Real(1.0)], 0.0, 3.0, Caps::default(), 13)
                .unwrap();
        let t = 3.0;
        for (label, _) in population_snapshot(&tree, t).unwrap() {
            let path = lineage_of(&tree, &label, t).unwrap();
            assert!(path.check_consistency());
            assert_eq!(path.division_count(), label.depth());
            for j in &path.jumps {
                assert!((j.post - j.pre / 2.0).abs() < 1e-12, "halving split");
            }
        }
    }

    #[test]
    fn snapshot_outside_window_errors() {
        let tree =
            simulate_population(&yule(), &[TraitValue::Real(1.0)], 0.0, 1.0, Caps::default(), 2)
                .unwrap();
        assert!(population_snapshot(&tree, 1.5).is_err());
    }
}
