//! Command-line front end: seeded runs of the simulators and checkers from
//! JSON config files, CSV emission with self-describing headers.
//!
//! Every output file starts with comment lines carrying the command, a hash
//! of the canonical config, the seed, and the canonical config itself, so a
//! file can be reproduced byte-for-byte from its own header.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    check_feynman_kac, check_forks, check_many_to_one, check_sampling_convergence,
    check_whole_tree, figure_division_counts, sample_uniform_lineage, CheckOpts, Functional,
    ScalarFn, VerificationReport, WeightFn, REPORT_CSV_HEADER,
};
use crate::auxiliary::{simulate_auxiliary_from, simulate_tagged_cell_from, RateFormula};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, TraitValue};
use crate::motion::MotionRecord;
use crate::numeric::fmt_g17;
use crate::path::TraitPath;
use crate::population::{simulate_population, tree_to_csv, Caps};
use crate::rng::{mix2, replicate_key, stream_rng, DOMAIN_ANALYSIS, DOMAIN_AUXILIARY, DOMAIN_POPULATION, DOMAIN_TAGGED};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Auxiliary,
    Tagged,
    Sample,
    Verify,
    Figure,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Auxiliary => "auxiliary",
            Command::Tagged => "tagged",
            Command::Sample => "sample",
            Command::Verify => "verify",
            Command::Figure => "figure",
        }
    }
}

fn default_init() -> Vec<f64> {
    vec![1.0]
}
fn default_replicates() -> usize {
    1
}
fn default_max_individuals() -> usize {
    1_000_000
}
fn default_max_events() -> usize {
    10_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CapsSection {
    #[serde(default = "default_max_individuals")]
    pub max_individuals: usize,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
}

impl Default for CapsSection {
    fn default() -> Self {
        CapsSection {
            max_individuals: default_max_individuals(),
            max_events: default_max_events(),
        }
    }
}

impl From<CapsSection> for Caps {
    fn from(c: CapsSection) -> Caps {
        Caps {
            max_individuals: c.max_individuals,
            max_events: c.max_events,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: f64,
    #[serde(default = "default_init")]
    pub init: Vec<f64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub caps: CapsSection,
    /// 0 = machine parallelism
    #[serde(default)]
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<Functional>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<ScalarFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<ScalarFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_population: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_auxiliary: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_per_node: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nested_inner: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: serde_json::Value,
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub cap_individuals: Option<usize>,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::ConfigParse(format!(
                "line {} column {}: {}",
                e.line(),
                e.column(),
                e
            ))
        })?;
        if cfg.run.replicates < 1 {
            return Err(Error::ConfigParse("run.replicates must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.run.seed = seed;
        }
        if let Some(reps) = o.replicates {
            self.run.replicates = reps;
        }
        if let Some(threads) = o.threads {
            self.run.threads = threads;
        }
        if let Some(cap) = o.cap_individuals {
            self.run.caps.max_individuals = cap;
        }
        if let Some(out) = &o.out {
            self.output = Some(OutputSection {
                path: Some(out.clone()),
            });
        }
    }

    /// Canonical single-line JSON (serde_json maps are key-sorted).
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    fn out_path(&self) -> Result<PathBuf> {
        self.output
            .as_ref()
            .and_then(|o| o.path.clone())
            .ok_or_else(|| Error::ConfigParse("no output path (--out or output.path)".into()))
    }

    fn model(&self) -> Result<ModelSpec> {
        ModelSpec::from_config(&self.model)
    }

    fn init_traits(&self, model: &ModelSpec) -> Result<Vec<TraitValue>> {
        self.run
            .init
            .iter()
            .map(|v| model.trait_value(*v))
            .collect()
    }

    fn check_opts(&self) -> CheckOpts {
        let v = self.verify.clone().unwrap_or_default();
        let d = CheckOpts::default();
        CheckOpts {
            seed: self.run.seed,
            caps: self.run.caps.clone().into(),
            quad_nodes: v.quadrature_nodes.unwrap_or(d.quad_nodes),
            aux_per_node: v.aux_per_node.unwrap_or(d.aux_per_node),
            nested_inner: v.nested_inner.unwrap_or(d.nested_inner),
            ..d
        }
    }
}

fn header(command: &str, cfg: &RunConfig) -> String {
    format!(
        "# spinesim {command}\n# config_hash={:016x}\n# seed={}\n# config={}\n",
        cfg.hash(),
        cfg.run.seed,
        cfg.canonical()
    )
}

/// Extract the canonical config line from a previously written output file.
pub fn config_from_header(text: &str) -> Result<(String, RunConfig)> {
    let mut command = None;
    let mut config = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# spinesim ") {
            command = Some(rest.trim().to_string());
        }
        if let Some(rest) = line.strip_prefix("# config=") {
            config = Some(RunConfig::from_json_str(rest)?);
        }
    }
    match (command, config) {
        (Some(c), Some(cfg)) => Ok((c, cfg)),
        _ => Err(Error::ConfigParse("missing header lines".into())),
    }
}

fn path_csv(path: &TraitPath, out: &mut String) {
    let mut emit = |t: f64, x: f64, event: &str| {
        out.push_str(&format!("{},{},{}\n", fmt_g17(t), fmt_g17(x), event));
    };
    for (i, seg) in path.segments.iter().enumerate() {
        emit(seg.start, seg.motion.eval(seg.start), "motion");
        if let MotionRecord::Grid { t0, step, t_end, values } = &seg.motion {
            // interior integrator points
            for (k, v) in values.iter().enumerate().skip(1) {
                let tk = (t0 + k as f64 * step).min(*t_end);
                if tk > seg.start && tk < seg.end {
                    emit(tk, *v, "motion");
                }
            }
        }
        if let MotionRecord::Steps { jumps, .. } = &seg.motion {
            for &(tj, xj) in jumps {
                if tj > seg.start && tj < seg.end {
                    emit(tj, xj, "motion");
                }
            }
        }
        if i < path.jumps.len() {
            let j = &path.jumps[i];
            emit(j.time, j.pre, "division");
        }
    }
    emit(path.horizon, path.terminal(), "motion");
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Identities accepted by `verify`.
pub const VERIFY_IDENTITIES: &[&str] = &[
    "many_to_one",
    "whole_tree",
    "forks",
    "feynman_kac",
    "sampling",
];

fn run_verify(identity: &str, cfg: &RunConfig) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let init = cfg.init_traits(&model)?;
    let x0 = init[0];
    let t = cfg.run.horizon;
    let v = cfg.verify.clone().unwrap_or_default();
    let opts = cfg.check_opts();
    let n = cfg.run.replicates;
    let mut rows = Vec::new();
    match identity {
        "many_to_one" => {
            let functional = v.functional.unwrap_or(Functional::One);
            let n_pop = v.n_population.unwrap_or(n);
            let n_aux = v.n_auxiliary.unwrap_or(n);
            let rep = check_many_to_one(&model, &x0, t, &functional, n_pop, n_aux, &opts)?;
            rows.push(rep.csv_row());
        }
        "whole_tree" => {
            let weight = v.weight.unwrap_or(WeightFn::One);
            let rep = check_whole_tree(&model, &x0, t, &weight, n, &opts)?;
            rows.push(rep.csv_row());
        }
        "forks" => {
            let f = v.f.unwrap_or(ScalarFn::One);
            let g = v.g.unwrap_or(ScalarFn::One);
            let s = v.s.unwrap_or(t);
            let rep = check_forks(&model, &x0, s, t, &f, &g, n, &opts)?;
            rows.push(rep.csv_row());
        }
        "feynman_kac" => {
            let f = v.f.unwrap_or(ScalarFn::Identity);
            let r = v.r.unwrap_or(0.0);
            let s = v.s.unwrap_or(t);
            let rep = check_feynman_kac(&model, &x0, r, s, t, &f, n, &opts)?;
            rows.push(rep.csv_row());
        }
        "sampling" => {
            let atoms: Vec<(TraitValue, f64)> = match &v.atoms {
                Some(list) => list
                    .iter()
                    .map(|(x, w)| Ok((model.trait_value(*x)?, *w)))
                    .collect::<Result<_>>()?,
                None => vec![(x0, 1.0)],
            };
            let n_grid = v.n_grid.clone().unwrap_or_else(|| vec![1, 10, 100]);
            let out = check_sampling_convergence(&model, &atoms, &n_grid, t, n, &opts)?;
            for row in out {
                rows.push(format!(
                    "sampling[{} t={} n_init={}],{},{},{},{},{},{}\n",
                    model.id(),
                    t,
                    row.n_init,
                    fmt_g17(row.ks_distance),
                    fmt_g17((row.ci.1 - row.ci.0) / 2.0),
                    fmt_g17(row.p_value),
                    fmt_g17(0.0),
                    fmt_g17(0.0),
                    row.p_value > 0.01
                ));
            }
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown identity '{other}'; expected one of {VERIFY_IDENTITIES:?}"
            )))
        }
    }
    Ok(rows)
}

/// Dispatch a parsed command. Returns the path written.
pub fn run(command: Command, identity: Option<&str>, cfg: &RunConfig) -> Result<PathBuf> {
    let out_path = cfg.out_path()?;
    let command_line = match (command, identity) {
        (Command::Verify, Some(id)) => format!("verify {id}"),
        (c, _) => c.name().to_string(),
    };
    let mut out = header(&command_line, cfg);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;

    pool.install(|| -> Result<()> {
        let model = cfg.model()?;
        let init = cfg.init_traits(&model)?;
        let seed = cfg.run.seed;
        let t = cfg.run.horizon;
        let caps: Caps = cfg.run.caps.clone().into();
        match command {
            Command::Simulate => {
                out.push_str("label,parent,alpha,beta,trait_at_birth,trait_at_horizon\n");
                for i in 0..cfg.run.replicates {
                    if cfg.run.replicates > 1 {
                        out.push_str(&format!("# replicate={i}\n"));
                    }
                    let key = replicate_key(seed, DOMAIN_POPULATION, i as u64);
                    let tree = simulate_population(&model, &init, 0.0, t, caps, key)?;
                    let body = tree_to_csv(&tree);
                    out.push_str(body.split_once('\n').map(|x| x.1).unwrap_or(""));
                }
            }
            Command::Auxiliary => {
                out.push_str("time,trait,event\n");
                for i in 0..cfg.run.replicates {
                    if cfg.run.replicates > 1 {
                        out.push_str(&format!("# replicate={i}\n"));
                    }
                    let mut rng = stream_rng(seed, DOMAIN_AUXILIARY, i as u64);
                    let path = simulate_auxiliary_from(
                        &model,
                        &init[0],
                        0.0,
                        t,
                        &mut rng,
                        RateFormula::Derived,
                    )?;
                    path_csv(&path, &mut out);
                }
            }
            Command::Tagged => {
                out.push_str("time,trait,event\n");
                for i in 0..cfg.run.replicates {
                    if cfg.run.replicates > 1 {
                        out.push_str(&format!("# replicate={i}\n"));
                    }
                    let mut rng = stream_rng(seed, DOMAIN_TAGGED, i as u64);
                    let path = simulate_tagged_cell_from(&model, &init[0], 0.0, t, &mut rng)?;
                    path_csv(&path, &mut out);
                }
            }
            Command::Sample => {
                out.push_str("time,trait,event\n");
                for i in 0..cfg.run.replicates {
                    if cfg.run.replicates > 1 {
                        out.push_str(&format!("# replicate={i}\n"));
                    }
                    let mut pick_rng = stream_rng(seed, DOMAIN_ANALYSIS, i as u64);
                    let mut path = None;
                    for attempt in 0..1000 {
                        let key =
                            replicate_key(seed, DOMAIN_POPULATION, mix2(i as u64, attempt));
                        let tree = simulate_population(&model, &init, 0.0, t, caps, key)?;
                        match sample_uniform_lineage(&tree, t, &mut pick_rng) {
                            Ok(p) => {
                                path = Some(p);
                                break;
                            }
                            Err(Error::Extinct(_)) => continue,
                            Err(e) => return Err(e),
                        }
                    }
                    let path = path.ok_or(Error::ResampleBudget(1000))?;
                    path_csv(&path, &mut out);
                }
            }
            Command::Verify => {
                let id = identity.ok_or_else(|| {
                    Error::InvalidInput("verify needs an identity argument".into())
                })?;
                out.push_str(REPORT_CSV_HEADER);
                for row in run_verify(id, cfg)? {
                    out.push_str(&row);
                }
            }
            Command::Figure => {
                let opts = cfg.check_opts();
                let data =
                    figure_division_counts(&model, &init[0], t, cfg.run.replicates, &opts)?;
                out.push_str("series,divisions,count,frequency\n");
                let n = cfg.run.replicates as f64;
                for (name, counts) in [
                    ("uniform_sample", &data.uniform),
                    ("auxiliary", &data.auxiliary),
                    ("tagged", &data.tagged),
                ] {
                    let max = counts.iter().copied().max().unwrap_or(0);
                    let mut freq = vec![0usize; max + 1];
                    for &c in counts.iter() {
                        freq[c] += 1;
                    }
                    for (d, &c) in freq.iter().enumerate() {
                        out.push_str(&format!("{},{},{},{}\n", name, d, c, fmt_g17(c as f64 / n)));
                    }
                }
                out.push_str(&format!(
                    "# ks uniform_sample_vs_auxiliary D={} p={}\n",
                    fmt_g17(data.ks_uniform_vs_auxiliary.0),
                    fmt_g17(data.ks_uniform_vs_auxiliary.1)
                ));
                out.push_str(&format!(
                    "# ks tagged_vs_auxiliary D={} p={}\n",
                    fmt_g17(data.ks_tagged_vs_auxiliary.0),
                    fmt_g17(data.ks_tagged_vs_auxiliary.1)
                ));
            }
        }
        Ok(())
    })?;

    write_output(&out_path, &out)?;
    Ok(out_path)
}

/// Map an error to the process exit code contract: 2 for configuration or
/// validation problems, 3 for cap-guard aborts, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::ConfigParse(_)
        | Error::UnknownModel(_)
        | Error::InvalidInput(_) => 2,
        Error::CapExceeded { .. } => 3,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config(tmp: &Path) -> RunConfig {
        let mut cfg = RunConfig::from_json_str(
            r#"{
                "model": {"id": "yule", "b": 1.0, "m": 2},
                "run": {"horizon": 0.0, "seed": 42}
            }"#,
        )
        .unwrap();
        cfg.output = Some(OutputSection {
            path: Some(tmp.join("out.csv")),
        });
        cfg
    }

    #[test]
    fn config_parse_reports_position() {
        let err = RunConfig::from_json_str("{ bad json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "{msg}");
        assert!(msg.contains("column"), "{msg}");
    }

    #[test]
    fn horizon_zero_simulate_emits_initial_rows() {
        let dir = std::env::temp_dir().join(format!("spinesim-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = minimal_config(&dir);
        let path = run(Command::Simulate, None, &cfg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let data_rows: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("label"))
            .collect();
        assert_eq!(data_rows.len(), 1);
        assert!(data_rows[0].starts_with("1,,"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_round_trips() {
        let dir = std::env::temp_dir().join(format!("spinesim-test-h-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = minimal_config(&dir);
        let path = run(Command::Simulate, None, &cfg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let (cmd, recovered) = config_from_header(&text).unwrap();
        assert_eq!(cmd, "simulate");
        assert_eq!(recovered, cfg);
        std::fs::remove_dir_all(&dir).ok();
    }
}
