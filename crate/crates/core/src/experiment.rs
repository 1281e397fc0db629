//! Evaluation runs, metric series, run comparison and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{greedy_idleness_policy, random_walk_policy};
use crate::env::{average_idleness, idleness_std, worst_idleness, AttritionEvent, EnvConfig, EnvError, Observation, PatrolEnv};
use crate::graph::PatrolGraph;
use crate::policy::{argmax_action, sample_action, ActorParams, PolicyError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error("horizon mismatch: `{a}` has {a_len} steps but `{b}` has {b_len}")]
    HorizonMismatch {
        a: String,
        a_len: usize,
        b: String,
        b_len: usize,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Magec,
    Random,
    Greedy,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Magec => "magec",
            PolicyKind::Random => "random",
            PolicyKind::Greedy => "greedy",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "magec" => Ok(PolicyKind::Magec),
            "random" => Ok(PolicyKind::Random),
            "greedy" => Ok(PolicyKind::Greedy),
            other => Err(format!("unknown policy `{other}` (magec, random, greedy)")),
        }
    }
}

/// Decision maker for agents waiting at a node.
pub enum Controller<'a> {
    Magec {
        actor: &'a ActorParams,
        stochastic: bool,
    },
    Random,
    Greedy,
}

impl Controller<'_> {
    fn decide(&self, observations: &[Observation], rng: &mut ChaCha8Rng) -> Result<Vec<usize>, ExperimentError> {
        Ok(match self {
            Controller::Magec { actor, stochastic } => {
                let refs: Vec<&Observation> = observations.iter().collect();
                actor
                    .distributions(&refs)?
                    .iter()
                    .map(|logp| {
                        if *stochastic {
                            sample_action(logp, rng).0
                        } else {
                            argmax_action(logp)
                        }
                    })
                    .collect()
            }
            Controller::Random => observations.iter().map(|o| random_walk_policy(o, rng)).collect(),
            Controller::Greedy => observations.iter().map(greedy_idleness_policy).collect(),
        })
    }
}

/// Per-step series of one run. Index `t` describes the state at clock `t`,
/// after any attrition due at `t` and before that step's decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub seed: u64,
    pub avg_idleness: Vec<f64>,
    pub worst_idleness: Vec<f64>,
    pub idleness_std: Vec<f64>,
    pub living_agents: Vec<usize>,
    pub belief_staleness: Vec<f64>,
    /// `node_idleness[t][v]`.
    pub node_idleness: Vec<Vec<f64>>,
}

impl MetricsRecord {
    pub fn horizon(&self) -> usize {
        self.avg_idleness.len()
    }

    pub fn time_averaged_idleness(&self) -> f64 {
        mean(&self.avg_idleness)
    }

    /// Time-averaged ζ̄ over steps `from..`.
    pub fn time_averaged_idleness_from(&self, from: usize) -> f64 {
        mean(&self.avg_idleness[from.min(self.horizon())..])
    }

    pub fn final_idleness(&self) -> f64 {
        self.avg_idleness.last().copied().unwrap_or(0.0)
    }

    /// Largest idleness each node reaches over steps `from..`: the longest
    /// stretch without a visit, counting an unfinished one at the end.
    pub fn max_visit_gap_from(&self, from: usize) -> Vec<f64> {
        let m = self.node_idleness.first().map_or(0, Vec::len);
        (0..m)
            .map(|v| {
                self.node_idleness[from.min(self.horizon())..]
                    .iter()
                    .map(|row| row[v])
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn max_visit_gap(&self) -> Vec<f64> {
        self.max_visit_gap_from(0)
    }

    pub fn to_csv(&self) -> String {
        let m = self.node_idleness.first().map_or(0, Vec::len);
        let mut out = String::from("t,avg_idleness,worst_idleness,idleness_std,living_agents,belief_staleness");
        for v in 0..m {
            let _ = write!(out, ",node_{v}");
        }
        out.push('\n');
        for t in 0..self.horizon() {
            let _ = write!(
                out,
                "{t},{:?},{:?},{:?},{},{:?}",
                self.avg_idleness[t],
                self.worst_idleness[t],
                self.idleness_std[t],
                self.living_agents[t],
                self.belief_staleness[t]
            );
            for z in &self.node_idleness[t] {
                let _ = write!(out, ",{z:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty metrics file")?;
        let m = header.split(',').filter(|c| c.starts_with("node_")).count();
        let mut rec = MetricsRecord {
            seed,
            avg_idleness: Vec::new(),
            worst_idleness: Vec::new(),
            idleness_std: Vec::new(),
            living_agents: Vec::new(),
            belief_staleness: Vec::new(),
            node_idleness: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 6 + m {
                return Err(format!("row {} has {} cells, expected {}", i + 2, cells.len(), 6 + m));
            }
            let num = |c: &str| c.parse::<f64>().map_err(|_| format!("row {}: bad number `{c}`", i + 2));
            rec.avg_idleness.push(num(cells[1])?);
            rec.worst_idleness.push(num(cells[2])?);
            rec.idleness_std.push(num(cells[3])?);
            rec.living_agents
                .push(cells[4].parse().map_err(|_| format!("row {}: bad agent count", i + 2))?);
            rec.belief_staleness.push(num(cells[5])?);
            rec.node_idleness
                .push(cells[6..].iter().map(|c| num(c)).collect::<Result<_, _>>()?);
        }
        Ok(rec)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs `controller` for `horizon` steps. Agents mid-edge continue without
/// consulting the controller.
pub fn simulate(
    graph: &Arc<PatrolGraph>,
    n_agents: usize,
    env_cfg: &EnvConfig,
    controller: &mut Controller<'_>,
    horizon: u64,
    seed: u64,
) -> Result<MetricsRecord, ExperimentError> {
    let mut env = PatrolEnv::new(
        graph.clone(),
        n_agents,
        EnvConfig {
            seed,
            ..env_cfg.clone()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let cap = horizon as usize;
    let mut rec = MetricsRecord {
        seed,
        avg_idleness: Vec::with_capacity(cap),
        worst_idleness: Vec::with_capacity(cap),
        idleness_std: Vec::with_capacity(cap),
        living_agents: Vec::with_capacity(cap),
        belief_staleness: Vec::with_capacity(cap),
        node_idleness: Vec::with_capacity(cap),
    };
    for _ in 0..horizon {
        let z = env.world().idleness();
        rec.avg_idleness.push(average_idleness(z));
        rec.worst_idleness.push(worst_idleness(z));
        rec.idleness_std.push(idleness_std(z));
        rec.node_idleness.push(z.to_vec());
        let living = env.living_agents();
        rec.living_agents.push(living.len());
        rec.belief_staleness.push(env.mean_belief_staleness());

        let mut actions = Vec::with_capacity(living.len());
        let mut waiting = Vec::new();
        let mut observations = Vec::new();
        for (k, &a) in living.iter().enumerate() {
            let forced = env.world().continue_action(a)?;
            actions.push(forced.unwrap_or(0));
            if forced.is_none() {
                waiting.push(k);
                observations.push(env.observe(a)?);
            }
        }
        if !observations.is_empty() {
            for (k, a) in waiting.into_iter().zip(controller.decide(&observations, &mut rng)?) {
                actions[k] = a;
            }
        }
        env.step(&actions)?;
    }
    Ok(rec)
}

/// Everything an evaluation sweep needs besides the graph and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub policy: PolicyKind,
    pub agents: usize,
    pub env: EnvConfig,
    pub horizon: u64,
    /// One run per seed.
    pub seeds: Vec<u64>,
    pub stochastic: bool,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("repeat count must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(ExperimentError::Config("horizon must be at least 1".into()));
        }
        self.env.validate()?;
        Ok(())
    }
}

/// Per-run records plus their step-wise mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub policy: PolicyKind,
    pub agents: usize,
    pub nodes: usize,
    pub attrition: Vec<AttritionEvent>,
    pub runs: Vec<MetricsRecord>,
}

/// Repeats `simulate` once per seed in parallel. `actor` is required for
/// the learned policy and ignored otherwise.
pub fn run_evaluation(
    graph: &Arc<PatrolGraph>,
    cfg: &EvalConfig,
    actor: Option<&ActorParams>,
) -> Result<Evaluation, ExperimentError> {
    cfg.validate()?;
    if cfg.policy == PolicyKind::Magec && actor.is_none() {
        return Err(ExperimentError::Config("the magec policy needs a checkpoint".into()));
    }
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut controller = match cfg.policy {
                PolicyKind::Magec => Controller::Magec {
                    actor: actor.expect("checked"),
                    stochastic: cfg.stochastic,
                },
                PolicyKind::Random => Controller::Random,
                PolicyKind::Greedy => Controller::Greedy,
            };
            simulate(graph, cfg.agents, &cfg.env, &mut controller, cfg.horizon, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Evaluation {
        policy: cfg.policy,
        agents: cfg.agents,
        nodes: graph.node_count(),
        attrition: cfg.env.attrition.clone(),
        runs,
    })
}

/// Step-wise arithmetic mean across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanSeries {
    pub avg_idleness: Vec<f64>,
    pub worst_idleness: Vec<f64>,
    pub idleness_std: Vec<f64>,
    pub living_agents: Vec<f64>,
    pub belief_staleness: Vec<f64>,
}

const MEAN_HEADER: &str = "t,avg_idleness,worst_idleness,idleness_std,living_agents,belief_staleness";

impl MeanSeries {
    pub fn of(runs: &[MetricsRecord]) -> Self {
        let horizon = runs.first().map_or(0, MetricsRecord::horizon);
        let n = runs.len() as f64;
        let avg = |f: &dyn Fn(&MetricsRecord, usize) -> f64| -> Vec<f64> {
            (0..horizon).map(|t| runs.iter().map(|r| f(r, t)).sum::<f64>() / n).collect()
        };
        Self {
            avg_idleness: avg(&|r, t| r.avg_idleness[t]),
            worst_idleness: avg(&|r, t| r.worst_idleness[t]),
            idleness_std: avg(&|r, t| r.idleness_std[t]),
            living_agents: avg(&|r, t| r.living_agents[t] as f64),
            belief_staleness: avg(&|r, t| r.belief_staleness[t]),
        }
    }

    pub fn horizon(&self) -> usize {
        self.avg_idleness.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{MEAN_HEADER}\n");
        for t in 0..self.horizon() {
            let _ = writeln!(
                out,
                "{t},{:?},{:?},{:?},{:?},{:?}",
                self.avg_idleness[t],
                self.worst_idleness[t],
                self.idleness_std[t],
                self.living_agents[t],
                self.belief_staleness[t]
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(MEAN_HEADER) {
            return Err("unexpected header".into());
        }
        let mut s = MeanSeries {
            avg_idleness: Vec::new(),
            worst_idleness: Vec::new(),
            idleness_std: Vec::new(),
            living_agents: Vec::new(),
            belief_staleness: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let cells: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|c| c.parse().map_err(|_| format!("row {}: bad number `{c}`", i + 2)))
                .collect::<Result<_, _>>()?;
            if cells.len() != 5 {
                return Err(format!("row {} has {} values, expected 5", i + 2, cells.len()));
            }
            s.avg_idleness.push(cells[0]);
            s.worst_idleness.push(cells[1]);
            s.idleness_std.push(cells[2]);
            s.living_agents.push(cells[3]);
            s.belief_staleness.push(cells[4]);
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub time_averaged_idleness: f64,
    pub final_idleness: f64,
    pub max_visit_gap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub policy: PolicyKind,
    pub agents: usize,
    pub nodes: usize,
    pub horizon: usize,
    pub attrition: Vec<AttritionEvent>,
    pub runs: Vec<RunSummary>,
    /// Time average of the mean series (equals the mean of run averages).
    pub time_averaged_idleness: f64,
    pub final_idleness: f64,
}

impl Evaluation {
    pub fn mean_series(&self) -> MeanSeries {
        MeanSeries::of(&self.runs)
    }

    pub fn summary(&self) -> EvaluationSummary {
        let mean = self.mean_series();
        EvaluationSummary {
            policy: self.policy,
            agents: self.agents,
            nodes: self.nodes,
            horizon: mean.horizon(),
            attrition: self.attrition.clone(),
            runs: self
                .runs
                .iter()
                .map(|r| RunSummary {
                    seed: r.seed,
                    time_averaged_idleness: r.time_averaged_idleness(),
                    final_idleness: r.final_idleness(),
                    max_visit_gap: r.max_visit_gap(),
                })
                .collect(),
            time_averaged_idleness: self::mean(&mean.avg_idleness),
            final_idleness: mean.avg_idleness.last().copied().unwrap_or(0.0),
        }
    }

    /// Writes `metrics_run<i>.csv`, `metrics_mean.csv`, `summary.json` and
    /// `plot.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, run) in self.runs.iter().enumerate() {
            let path = dir.join(format!("metrics_run{i}.csv"));
            fs::write(&path, run.to_csv()).map_err(io_err(&path))?;
        }
        let mean = self.mean_series();
        let path = dir.join("metrics_mean.csv");
        fs::write(&path, mean.to_csv()).map_err(io_err(&path))?;
        let path = dir.join("summary.json");
        let json = serde_json::to_string_pretty(&self.summary()).expect("serializable");
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
        let path = dir.join("plot.svg");
        let markers: Vec<u64> = self.attrition.iter().map(|e| e.step).collect();
        let svg = svg_line_plot(
            &format!("{} - average idleness", self.policy.name()),
            &[(self.policy.name().to_string(), mean.avg_idleness.clone())],
            &markers,
        );
        fs::write(&path, svg).map_err(io_err(&path))?;
        Ok(())
    }
}

/// A labeled mean series to compare.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRun {
    pub label: String,
    pub series: MeanSeries,
    pub attrition_steps: Vec<u64>,
}

impl LabeledRun {
    /// Loads an evaluation output directory.
    pub fn load(dir: &Path, label: impl Into<String>) -> Result<Self, ExperimentError> {
        let path = dir.join("metrics_mean.csv");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let series = MeanSeries::from_csv(&text).map_err(|message| ExperimentError::Parse {
            path: path.display().to_string(),
            message,
        })?;
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let summary: EvaluationSummary = serde_json::from_str(&text).map_err(|e| ExperimentError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self {
            label: label.into(),
            series,
            attrition_steps: summary.attrition.iter().map(|e| e.step).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub time_averaged_idleness: f64,
    pub final_idleness: f64,
    pub peak_idleness: f64,
    pub mean_worst_idleness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Sorted by time-averaged ζ̄, best first.
    pub rows: Vec<ComparisonRow>,
    pub svg: String,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,time_averaged_idleness,final_idleness,peak_idleness,mean_worst_idleness\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.label, r.time_averaged_idleness, r.final_idleness, r.peak_idleness, r.mean_worst_idleness
            );
        }
        out
    }
}

pub fn compare(runs: &[LabeledRun]) -> Result<Comparison, ExperimentError> {
    let first = runs
        .first()
        .ok_or_else(|| ExperimentError::Config("nothing to compare".into()))?;
    for r in &runs[1..] {
        if r.series.horizon() != first.series.horizon() {
            return Err(ExperimentError::HorizonMismatch {
                a: first.label.clone(),
                a_len: first.series.horizon(),
                b: r.label.clone(),
                b_len: r.series.horizon(),
            });
        }
    }
    let mut rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            time_averaged_idleness: mean(&r.series.avg_idleness),
            final_idleness: r.series.avg_idleness.last().copied().unwrap_or(0.0),
            peak_idleness: r.series.avg_idleness.iter().copied().fold(0.0, f64::max),
            mean_worst_idleness: mean(&r.series.worst_idleness),
        })
        .collect();
    rows.sort_by(|a, b| a.time_averaged_idleness.total_cmp(&b.time_averaged_idleness));
    let mut markers: Vec<u64> = runs.iter().flat_map(|r| r.attrition_steps.iter().copied()).collect();
    markers.sort_unstable();
    markers.dedup();
    let series: Vec<(String, Vec<f64>)> = runs
        .iter()
        .map(|r| (r.label.clone(), r.series.avg_idleness.clone()))
        .collect();
    let svg = svg_line_plot("average idleness", &series, &markers);
    Ok(Comparison { rows, svg })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of each series against its step index, with dashed vertical
/// markers.
pub fn svg_line_plot(title: &str, series: &[(String, Vec<f64>)], markers: &[u64]) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 160.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let len = series.iter().map(|(_, s)| s.len()).max().unwrap_or(0).max(2);
    let ymax = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|y| y.is_finite())
        .fold(0.0, f64::max)
        .max(1e-9);
    let x_of = |t: f64| left + pw * t / (len - 1) as f64;
    let y_of = |y: f64| top + ph * (1.0 - y / ymax);
    let escape = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = top + ph * (1.0 - frac);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.1}</text>"#,
            left - 6.0,
            y + 4.0,
            ymax * frac
        );
        let x = left + pw * frac;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{:.0}</text>"#,
            top + ph + 18.0,
            (len - 1) as f64 * frac
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    for &m in markers {
        let x = x_of(m as f64);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
            top + ph
        );
    }
    for (k, (label, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(t, &y)| format!("{:.2},{:.2}", x_of(t as f64), y_of(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 16.0 * k as f64 + 8.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(label));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{random_geometric, GeneratorConfig};

    fn graph() -> Arc<PatrolGraph> {
        Arc::new(random_geometric(&GeneratorConfig::new(8, 2)).unwrap())
    }

    fn eval_cfg(policy: PolicyKind) -> EvalConfig {
        EvalConfig {
            policy,
            agents: 3,
            env: EnvConfig::default(),
            horizon: 120,
            seeds: vec![1, 2, 3],
            stochastic: false,
        }
    }

    #[test]
    fn attrition_drops_living_series() {
        let mut cfg = eval_cfg(PolicyKind::Random);
        cfg.env.attrition = vec![AttritionEvent { step: 30, agent: 0 }, AttritionEvent { step: 70, agent: 2 }];
        let ev = run_evaluation(&graph(), &cfg, None).unwrap();
        for run in &ev.runs {
            assert_eq!(run.living_agents[29], 3);
            assert_eq!(run.living_agents[30], 2);
            assert_eq!(run.living_agents[69], 2);
            assert_eq!(run.living_agents[70], 1);
        }
    }

    #[test]
    fn full_information_has_zero_staleness() {
        let ev = run_evaluation(&graph(), &eval_cfg(PolicyKind::Greedy), None).unwrap();
        assert!(ev.runs.iter().all(|r| r.belief_staleness.iter().all(|&s| s == 0.0)));
    }

    #[test]
    fn mean_series_is_arithmetic_mean() {
        let ev = run_evaluation(&graph(), &eval_cfg(PolicyKind::Random), None).unwrap();
        let mean = ev.mean_series();
        for t in 0..120 {
            let expect = (ev.runs[0].avg_idleness[t] + ev.runs[1].avg_idleness[t] + ev.runs[2].avg_idleness[t]) / 3.0;
            assert_eq!(mean.avg_idleness[t], expect);
        }
    }

    #[test]
    fn csv_round_trips() {
        let ev = run_evaluation(&graph(), &eval_cfg(PolicyKind::Random), None).unwrap();
        let back = MetricsRecord::from_csv(&ev.runs[0].to_csv(), ev.runs[0].seed).unwrap();
        assert_eq!(back, ev.runs[0]);
        let mean = ev.mean_series();
        assert_eq!(MeanSeries::from_csv(&mean.to_csv()).unwrap(), mean);
    }

    #[test]
    fn magec_requires_checkpoint() {
        assert!(matches!(
            run_evaluation(&graph(), &eval_cfg(PolicyKind::Magec), None),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn compare_sorts_and_checks_horizons() {
        let g = graph();
        let random = run_evaluation(&g, &eval_cfg(PolicyKind::Random), None).unwrap();
        let greedy = run_evaluation(&g, &eval_cfg(PolicyKind::Greedy), None).unwrap();
        let runs = vec![
            LabeledRun {
                label: "random".into(),
                series: random.mean_series(),
                attrition_steps: vec![],
            },
            LabeledRun {
                label: "greedy".into(),
                series: greedy.mean_series(),
                attrition_steps: vec![],
            },
        ];
        let cmp = compare(&runs).unwrap();
        assert!(cmp.rows[0].time_averaged_idleness <= cmp.rows[1].time_averaged_idleness);
        assert_eq!(cmp.svg.matches("<polyline").count(), 2);

        let single = compare(&runs[..1]).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.svg.matches("<polyline").count(), 1);

        let mut short = runs[1].clone();
        short.label = "short".into();
        short.series.avg_idleness.truncate(50);
        let err = compare(&[runs[0].clone(), short]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("random") && msg.contains("short"), "{msg}");
    }
}
