//! Command-line front end. Each subcommand parses flags, calls the library,
//! and writes files; no numeric work happens here.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::lipo::{batch_advantages, AdvantageMethod, GroupsFile, LipoConfig};
use crate::merge::{merge_models_with, MergeConfig, MergeMethod, StepRule};
use crate::par::Schedule;
use crate::reward::{extract_boxed, reward, RewardKind, RewardSpec};
use crate::sim::{default_tasks, run_simulation, SimConfig};

#[derive(Debug, Parser)]
#[command(
    name = "lipo-amm",
    version,
    about = "Length-informed advantages and adaptive task-vector merging"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge fine-tuned checkpoints that share a base model.
    Merge(MergeArgs),
    /// Compute group advantages from a JSON file of rollout groups.
    Advantages(AdvantageArgs),
    /// Score one prediction against a target.
    Reward(RewardArgs),
    /// Run the toy policy-optimization simulator.
    Simulate(SimulateArgs),
    /// List the tensors of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StepRuleArg {
    Adaptive,
    Fixed,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "amm")]
    pub method: MergeMethod,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = MergeConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = MergeConfig::default().gamma)]
    pub gamma: f64,
    #[arg(long, default_value_t = MergeConfig::default().lambda)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "adaptive")]
    pub step_rule: StepRuleArg,
    /// Step constant c under the adaptive rule, learning rate under the fixed rule.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Task Arithmetic scaling coefficient.
    #[arg(long, default_value_t = MergeConfig::default().ta_coefficient)]
    pub ta_coefficient: f64,
    #[arg(long)]
    pub wudi_compat: bool,
    /// Run layers on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct AdvantageArgs {
    #[arg(long, value_enum, default_value = "lipo")]
    pub method: AdvantageMethod,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = LipoConfig::default().eta)]
    pub eta: f64,
    #[arg(long, default_value_t = LipoConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = LipoConfig::default().length_threshold)]
    pub lt: usize,
    #[arg(long, default_value_t = LipoConfig::default().min_length)]
    pub lmin: usize,
    #[arg(long, default_value_t = LipoConfig::default().phi)]
    pub phi: f64,
    #[arg(long, default_value_t = LipoConfig::default().eps)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    #[arg(long, value_enum)]
    pub kind: RewardKind,
    #[arg(long, allow_hyphen_values = true)]
    pub pred: String,
    #[arg(long, allow_hyphen_values = true)]
    pub target: String,
    #[arg(long)]
    pub no_normalize: bool,
    /// Score the last \boxed{} answer of the prediction; a missing box scores 0.
    #[arg(long)]
    pub extract_boxed: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Flat `key = value` file; missing keys take defaults.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Overrides the config file's advantage_method.
    #[arg(long, value_enum)]
    pub method: Option<AdvantageMethod>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on domain errors, 2 on usage errors.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { stdout } else { stderr };
            let _ = write!(sink, "{rendered}");
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Merge(a) => merge(a, out),
        Command::Advantages(a) => advantages(a, out),
        Command::Reward(a) => reward_cmd(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn merge(a: MergeArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = MergeConfig {
        method: a.method,
        steps: a.steps,
        step_rule: match a.step_rule {
            StepRuleArg::Adaptive => StepRule::Adaptive { c: a.lr },
            StepRuleArg::Fixed => StepRule::Fixed { lr: a.lr },
        },
        gamma: a.gamma,
        lambda: a.lambda,
        ta_coefficient: a.ta_coefficient,
        wudi_compat: a.wudi_compat,
        ..MergeConfig::default()
    };
    cfg.validate()?;
    let base = read_checkpoint(&a.base)?;
    let models = a
        .models
        .iter()
        .map(read_checkpoint)
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = a.models.iter().map(|p| p.display().to_string()).collect();
    let tuned: Vec<(&str, &_)> = ids.iter().map(String::as_str).zip(&models).collect();
    let schedule = if a.sequential {
        Schedule::Sequential
    } else {
        Schedule::default()
    };
    let (merged, report) = merge_models_with(&base, &tuned, &cfg, schedule)?;
    write_checkpoint(&merged, &a.out)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&a.report, json).map_err(|e| Error::io(&a.report, e))?;
    writeln!(
        out,
        "merged {} models into {} ({} linear layers, method {:?})",
        models.len(),
        a.out.display(),
        report.layers.len(),
        a.method
    )
    .map_err(io_err)
}

fn advantages(a: AdvantageArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = LipoConfig {
        eta: a.eta,
        alpha: a.alpha,
        length_threshold: a.lt,
        min_length: a.lmin,
        phi: a.phi,
        eps: a.eps,
    };
    cfg.validate()?;
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let groups: GroupsFile = serde_json::from_str(&text)?;
    let reports = batch_advantages(&groups.groups, a.method, &cfg, Schedule::Sequential)?;
    let json = serde_json::to_string_pretty(&reports)?;
    std::fs::write(&a.output, json).map_err(|e| Error::io(&a.output, e))?;
    let triggered: usize = reports.iter().map(|r| r.stats.pairs_triggered).sum();
    writeln!(
        out,
        "{} groups, {} triggered pairs -> {}",
        reports.len(),
        triggered,
        a.output.display()
    )
    .map_err(io_err)
}

fn reward_cmd(a: RewardArgs, out: &mut dyn Write) -> Result<()> {
    let spec = RewardSpec {
        kind: a.kind,
        normalize: !a.no_normalize,
    };
    let score = if a.extract_boxed {
        extract_boxed(&a.pred).map_or(0.0, |p| reward(&p, &a.target, &spec))
    } else {
        reward(&a.pred, &a.target, &spec)
    };
    writeln!(out, "{score}").map_err(io_err)
}

fn simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = SimConfig::from_kv_file(&a.config)?;
    cfg.seed = a.seed;
    if let Some(m) = a.method {
        cfg.advantage_method = m;
    }
    let outcome = run_simulation(&cfg, &default_tasks())?;
    outcome.metrics.write_csv_file(&a.out)?;
    let (len, rew) = outcome.metrics.tail_means(0.25);
    writeln!(
        out,
        "{} steps, method {:?}, final-quarter mean length {len:.2}, mean reward {rew:.4}",
        outcome.metrics.len(),
        cfg.advantage_method
    )
    .map_err(io_err)
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = read_checkpoint(&a.path)?;
    writeln!(out, "{}: {} tensors", a.path.display(), ckpt.len()).map_err(io_err)?;
    for (name, t) in ckpt.tensors() {
        writeln!(out, "{name}\t{}\t{:?}", t.dtype(), t.shape()).map_err(io_err)?;
    }
    for (k, v) in ckpt.metadata() {
        writeln!(out, "# {k} = {v}").map_err(io_err)?;
    }
    Ok(())
}
