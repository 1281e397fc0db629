use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use magec_core::env::{parse_attrition, EnvConfig};
use magec_core::experiment::{compare, run_evaluation, EvalConfig, LabeledRun, PolicyKind};
use magec_core::graph::{random_geometric, GeneratorConfig, PatrolGraph};
use magec_core::policy::ActorParams;
use magec_core::trainer::{metrics_csv, train, TrainConfig};

#[derive(Parser)]
#[command(name = "magec", version, about = "Train and evaluate multi-agent graph patrolling policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an actor/critic pair with MAPPO.
    Train(TrainArgs),
    /// Run a policy on a graph under a disturbance schedule.
    Evaluate(EvalArgs),
    /// Tabulate and plot several evaluation output directories.
    Compare(CompareArgs),
    /// Inspect or create graph files.
    #[command(subcommand)]
    Graph(GraphCommand),
}

/// Observation and communication settings shared by train and evaluate.
#[derive(Args)]
struct EnvArgs {
    /// `key = value` file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observation radius in meters, or `inf`.
    #[arg(long)]
    obs_radius: Option<String>,
    /// Probability that one telemetry message is received.
    #[arg(long)]
    comm_success: Option<f64>,
    /// Idleness at which the node feature saturates.
    #[arg(long)]
    zeta_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    agents: Option<usize>,
    /// Environment-step budget.
    #[arg(long)]
    total_steps: Option<u64>,
    /// Message-passing layers K.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Write `checkpoints/actor_<step>.ckpt` every this many iterations (0 = never).
    #[arg(long, default_value_t = 10)]
    checkpoint_every: u64,
    #[command(flatten)]
    env: EnvArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value = "magec")]
    policy: PolicyKind,
    /// Actor checkpoint file, or a training output directory holding `actor.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    agents: Option<usize>,
    /// `<step>:<agent>,<step>:<agent>`, or `none`.
    #[arg(long)]
    attrition: Option<String>,
    #[arg(long)]
    horizon: Option<u64>,
    /// Number of runs; seeds default to 0..repeats.
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated run seeds; overrides `--repeats`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Sample actions instead of taking the most likely one.
    #[arg(long)]
    stochastic_eval: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Evaluation directories, optionally as `label=dir`.
    #[arg(required = true)]
    runs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Parse a graph file and print its size.
    Validate { file: PathBuf },
    /// Write a random connected geometric graph.
    Generate {
        #[arg(long)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Side of the square in meters [default: 6·√nodes].
        #[arg(long)]
        side: Option<f64>,
        #[arg(long)]
        connect_radius: Option<f64>,
        #[arg(long)]
        max_degree: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Compare(args) => run_compare(args),
        Command::Graph(cmd) => run_graph(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_graph(path: &Path) -> Result<Arc<PatrolGraph>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let graph = PatrolGraph::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Arc::new(graph))
}

/// Reads `key = value` lines, skipping blanks and `#` comments.
fn read_pairs(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), i + 1);
        };
        pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn apply_env_flags(env: &mut EnvConfig, args: &EnvArgs) -> Result<()> {
    if let Some(r) = &args.obs_radius {
        env.set("obs_radius", r).map_err(anyhow::Error::msg)?;
    }
    if let Some(p) = args.comm_success {
        env.comm_success = p;
    }
    if let Some(z) = args.zeta_scale {
        env.zeta_scale = z;
    }
    if let Some(s) = args.seed {
        env.seed = s;
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow::anyhow!("bad value `{v}` for {key}"))
}

/// Training keys first, environment keys otherwise.
fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "agents" => cfg.n_agents = parse_num(key, value)?,
        "total_steps" => cfg.total_steps = parse_num(key, value)?,
        "envs" => cfg.envs = parse_num(key, value)?,
        "epochs" => cfg.epochs = parse_num(key, value)?,
        "minibatches" => cfg.minibatches = parse_num(key, value)?,
        "gamma" => cfg.gamma = parse_num(key, value)?,
        "lambda" => cfg.lambda = parse_num(key, value)?,
        "clip" => cfg.clip = parse_num(key, value)?,
        "entropy_coef" => cfg.entropy_coef = parse_num(key, value)?,
        "value_coef" => cfg.value_coef = parse_num(key, value)?,
        "actor_lr" => cfg.actor_lr = parse_num(key, value)?,
        "critic_lr" => cfg.critic_lr = parse_num(key, value)?,
        "max_grad_norm" => cfg.max_grad_norm = parse_num(key, value)?,
        "layers" => cfg.actor.layers = parse_num(key, value)?,
        "hidden" => cfg.actor.hidden = parse_num(key, value)?,
        "critic_hidden" => cfg.critic_hidden = parse_num(key, value)?,
        _ => cfg.env.set(key, value).map_err(anyhow::Error::msg)?,
    }
    Ok(())
}

fn train_config_text(cfg: &TrainConfig) -> String {
    let mut out = format!(
        "agents = {}\ntotal_steps = {}\nenvs = {}\nepochs = {}\nminibatches = {}\ngamma = {}\nlambda = {}\n\
         clip = {}\nentropy_coef = {}\nvalue_coef = {}\nactor_lr = {}\ncritic_lr = {}\nmax_grad_norm = {}\n\
         layers = {}\nhidden = {}\ncritic_hidden = {}\n",
        cfg.n_agents,
        cfg.total_steps,
        cfg.envs,
        cfg.epochs,
        cfg.minibatches,
        cfg.gamma,
        cfg.lambda,
        cfg.clip,
        cfg.entropy_coef,
        cfg.value_coef,
        cfg.actor_lr,
        cfg.critic_lr,
        cfg.max_grad_norm,
        cfg.actor.layers,
        cfg.actor.hidden,
        cfg.critic_hidden,
    );
    out.push_str(&cfg.env.to_text());
    out
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.env.config {
        for (line, k, v) in read_pairs(path)? {
            set_train_key(&mut cfg, &k, &v).with_context(|| format!("{}:{line}", path.display()))?;
        }
    }
    apply_env_flags(&mut cfg.env, &args.env)?;
    if let Some(s) = args.env.seed {
        cfg.seed = s;
    }
    if let Some(a) = args.agents {
        cfg.n_agents = a;
    }
    if let Some(s) = args.total_steps {
        cfg.total_steps = s;
    }
    if let Some(k) = args.layers {
        cfg.actor.layers = k;
    }
    if let Some(h) = args.hidden {
        cfg.actor.hidden = h;
    }
    cfg.actor.max_neighbors = cfg.env.max_neighbors;
    cfg.episode_len = cfg.env.episode_len;
    cfg.env.validate()?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("train.cfg"), train_config_text(&cfg))?;
    let ckpt_dir = args.out.join("checkpoints");
    let every = args.checkpoint_every;
    let mut iteration = 0u64;
    let mut failure = None;
    let outcome = train(graph, &cfg, |row, actor, _| {
        iteration += 1;
        eprintln!(
            "step {:>8}  reward {:>9.3}  eval ζ̄ {:>8.2}  entropy {:.3}",
            row.step, row.mean_episode_reward, row.eval_avg_idleness, row.entropy
        );
        if every > 0 && iteration.is_multiple_of(every) && failure.is_none() {
            let path = ckpt_dir.join(format!("actor_{}.ckpt", row.step));
            if let Err(e) = fs::create_dir_all(&ckpt_dir).and_then(|_| fs::write(&path, actor.to_text())) {
                failure = Some(anyhow::anyhow!("writing {}: {e}", path.display()));
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    write(&args.out.join("actor.ckpt"), outcome.actor.to_text())?;
    write(&args.out.join("critic.ckpt"), outcome.critic.to_text())?;
    write(&args.out.join("policy-info.txt"), outcome.actor.policy_info())?;
    write(&args.out.join("train_metrics.csv"), metrics_csv(&outcome.rows))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Resolves a checkpoint argument to the actor file and the training
/// config written beside it, if any.
fn resolve_checkpoint(path: &Path) -> (PathBuf, Option<PathBuf>) {
    let file = if path.is_dir() { path.join("actor.ckpt") } else { path.to_path_buf() };
    let cfg = file.parent().map(|d| d.join("train.cfg")).filter(|p| p.is_file());
    (file, cfg)
}

fn run_evaluate(args: EvalArgs) -> Result<()> {
    if args.policy == PolicyKind::Magec && args.checkpoint.is_none() {
        Cli::command()
            .error(
                clap::error::ErrorKind::MissingRequiredArgument,
                "--checkpoint is required for --policy magec",
            )
            .exit();
    }
    let graph = load_graph(&args.graph)?;
    let mut env = EnvConfig::default();
    let mut agents = 4;
    let mut horizon = 1800;
    let mut repeats = 3;
    let mut actor = None;
    if let (PolicyKind::Magec, Some(ckpt)) = (args.policy, &args.checkpoint) {
        let (file, train_cfg) = resolve_checkpoint(ckpt);
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        actor = Some(ActorParams::from_text(&text).with_context(|| format!("loading {}", file.display()))?);
        // The policy's input normalization comes from its training run.
        if let Some(path) = train_cfg {
            for (_, k, v) in read_pairs(&path)? {
                if k == "zeta_scale" || k == "max_neighbors" {
                    env.set(&k, &v).map_err(anyhow::Error::msg)?;
                }
            }
        }
    }
    if let Some(path) = &args.env.config {
        for (line, k, v) in read_pairs(path)? {
            let at = || format!("{}:{line}", path.display());
            match k.as_str() {
                "agents" => agents = parse_num(&k, &v).with_context(at)?,
                "horizon" => horizon = parse_num(&k, &v).with_context(at)?,
                "repeats" => repeats = parse_num(&k, &v).with_context(at)?,
                _ => env.set(&k, &v).map_err(anyhow::Error::msg).with_context(at)?,
            }
        }
    }
    apply_env_flags(&mut env, &args.env)?;
    if let Some(a) = &args.attrition {
        env.attrition = parse_attrition(a).map_err(anyhow::Error::msg)?;
    }
    let cfg = EvalConfig {
        policy: args.policy,
        agents: args.agents.unwrap_or(agents),
        env,
        horizon: args.horizon.unwrap_or(horizon),
        seeds: args
            .seeds
            .unwrap_or_else(|| (0..args.repeats.unwrap_or(repeats) as u64).collect()),
        stochastic: args.stochastic_eval,
    };
    let evaluation = run_evaluation(&graph, &cfg, actor.as_ref())?;
    evaluation.write(&args.out)?;
    let summary = evaluation.summary();
    println!(
        "{}: time-averaged ζ̄ {:.3} over {} run(s); wrote {}",
        cfg.policy.name(),
        summary.time_averaged_idleness,
        evaluation.runs.len(),
        args.out.display()
    );
    Ok(())
}

fn run_compare(args: CompareArgs) -> Result<()> {
    let mut runs = Vec::new();
    for spec in &args.runs {
        let (label, dir) = match spec.split_once('=') {
            Some((l, d)) => (l.to_string(), PathBuf::from(d)),
            None => {
                let dir = PathBuf::from(spec);
                let label = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| spec.clone());
                (label, dir)
            }
        };
        runs.push(LabeledRun::load(&dir, label)?);
    }
    let comparison = compare(&runs)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("comparison.csv"), comparison.to_csv())?;
    write(&args.out.join("comparison.svg"), &comparison.svg)?;
    for row in &comparison.rows {
        println!("{:<20} {:>10.3}", row.label, row.time_averaged_idleness);
    }
    Ok(())
}

fn run_graph(cmd: GraphCommand) -> Result<()> {
    match cmd {
        GraphCommand::Validate { file } => {
            let g = load_graph(&file)?;
            println!(
                "{}: ok, {} nodes, {} edges, max degree {}, longest edge {:.3} m",
                file.display(),
                g.node_count(),
                g.edge_count(),
                g.max_degree(),
                g.max_edge_weight()
            );
            Ok(())
        }
        GraphCommand::Generate {
            nodes,
            seed,
            out,
            side,
            connect_radius,
            max_degree,
        } => {
            let mut cfg = GeneratorConfig::new(nodes, seed);
            if let Some(s) = side {
                cfg.side = s;
            }
            if let Some(r) = connect_radius {
                cfg.connect_radius = r;
            }
            if let Some(d) = max_degree {
                cfg.max_degree = d;
            }
            let g = random_geometric(&cfg)?;
            write(&out, g.to_text())?;
            println!("wrote {} ({} nodes, {} edges)", out.display(), g.node_count(), g.edge_count());
            Ok(())
        }
    }
}
