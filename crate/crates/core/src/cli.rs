//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::check::run_checks;
use crate::config::RunConfig;
use crate::dataset::{
    emit_csv, ingest_csv, normalize, partition_counts, policy_partition, write_manifest, DomainDataset, DomainTag,
    NormStats,
};
use crate::eval::{emit_report, rank_policies, run_cross_well, run_inside_well, ExperimentSpec, PolicyChoice};
use crate::model::{CdaModel, Dims};
use crate::scm::{make_domain_pair, simulate_dataset};
use crate::trainer::{train_steps, RunFiles, TrainState, CHECKPOINT_FILE};

pub const STATS_FILE: &str = "norm_stats.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "cda", version, about = "Causal domain adaptation forecaster")]
pub struct Cli {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `train.lambda=0`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    /// Seed for simulation and training.
    #[arg(long, global = true, env = "CDA_SEED")]
    pub seed: Option<u64>,
    /// Print the fully materialised configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate episodes from the configured structural model.
    Simulate(SimulateArgs),
    /// Read a CSV, validate it and summarise it.
    Ingest(IngestArgs),
    /// Train a model on a source and a target domain.
    Train(TrainArgs),
    /// Run an evaluation protocol.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Rank treatments for one episode with a trained model.
    RankPolicies(RankArgs),
    /// Run the built-in property checks.
    Check,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 40)]
    pub length: usize,
    #[arg(short = 'o', long)]
    pub out: PathBuf,
    /// Also simulate a target domain under the configured shift.
    #[arg(long)]
    pub target_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Domain::Source)]
    pub domain: Domain,
    /// Write a schema manifest alongside.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Re-emit the parsed data as CSV.
    #[arg(long)]
    pub emit: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Domain {
    Source,
    Target,
}

impl From<Domain> for DomainTag {
    fn from(d: Domain) -> Self {
        match d {
            Domain::Source => DomainTag::Source,
            Domain::Target => DomainTag::Target,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub source: PathBuf,
    /// Defaults to the source data.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Run directory; defaults to `runs/lambda<λ>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Forecast the held-out suffix of every target well.
    InsideWell(EvalArgs),
    /// Forecast held-out target wells.
    CrossWell(CrossWellArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to the target prefixes.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CrossWellArgs {
    #[command(flatten)]
    pub common: EvalArgs,
    #[arg(long, value_enum, default_value_t = PolicyCondition::Both)]
    pub with_policy: PolicyCondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyCondition {
    Yes,
    No,
    Both,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Raw CSV holding the episode.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub episode: String,
    /// Index of the first treated step of the window.
    #[arg(long)]
    pub start: usize,
    #[arg(long)]
    pub len: usize,
    /// Comma-separated treatment names; defaults to the whole vocabulary.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Vec<String>,
    /// A treatment name or `observed`.
    #[arg(long, default_value = "none")]
    pub reference: String,
    #[arg(long, value_enum, default_value_t = Domain::Target)]
    pub domain: Domain,
    #[arg(short = 'o', long)]
    pub out: Option<PathBuf>,
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn read(path: &Path, tag: DomainTag, cfg: &RunConfig) -> Result<DomainDataset> {
    ingest_csv(path, tag, &cfg.data.vocabulary).with_context(|| format!("reading {}", path.display()))
}

fn choice(name: &str, vocabulary: &[String]) -> Result<PolicyChoice> {
    if name == "observed" {
        return Ok(PolicyChoice::Observed);
    }
    vocabulary
        .iter()
        .position(|v| v == name)
        .map(PolicyChoice::Treatment)
        .ok_or_else(|| anyhow!("unknown treatment '{name}'; vocabulary is [{}]", vocabulary.join(", ")))
}

fn spec_of(cfg: &RunConfig, jobs: Option<usize>) -> ExperimentSpec {
    let mut eval = cfg.eval.clone();
    if let Some(j) = jobs {
        eval.jobs = j;
    }
    ExperimentSpec {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        eval,
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve_config(cli)?;
    if cli.print_config {
        writeln!(out, "{}", cfg.to_json())?;
        return Ok(0);
    }
    let Some(command) = &cli.command else {
        bail!("no subcommand given; see --help");
    };
    let seed = cfg.train.seed;
    match command {
        Command::Simulate(a) => {
            let mut spec = cfg.scm.spec.clone();
            spec.treatment_names = cfg.data.vocabulary.clone();
            match &a.target_out {
                None => {
                    let ds = simulate_dataset(&spec, a.episodes, a.length, seed)?;
                    emit_csv(&ds, &a.out)?;
                    writeln!(out, "wrote {} episodes, {} records to {}", ds.len(), ds.records(), a.out.display())?;
                }
                Some(t) => {
                    let (s, tg) = make_domain_pair(&spec, &cfg.scm.shift, &cfg.scm.sizes(a.episodes, a.length), seed)?;
                    emit_csv(&s, &a.out)?;
                    emit_csv(&tg, t)?;
                    writeln!(
                        out,
                        "wrote {} source episodes to {} and {} target episodes to {}",
                        s.len(),
                        a.out.display(),
                        tg.len(),
                        t.display()
                    )?;
                }
            }
        }
        Command::Ingest(a) => {
            let ds = read(&a.input, a.domain.into(), &cfg)?;
            writeln!(out, "episodes {}", ds.len())?;
            writeln!(out, "records {}", ds.records())?;
            for (name, c) in partition_counts(&policy_partition(&ds)) {
                writeln!(out, "policy {name}: {} wells, {} records", c.wells, c.records)?;
            }
            if let Some(m) = &a.manifest {
                write_manifest(&ds, m)?;
            }
            if let Some(e) = &a.emit {
                emit_csv(&ds, e)?;
            }
        }
        Command::Train(a) => {
            let dir = a
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("runs/lambda{}-seed{}", cfg.train.lambda, seed)));
            fs::create_dir_all(&dir)?;
            let source = read(&a.source, DomainTag::Source, &cfg)?;
            let target = match &a.target {
                Some(t) => read(t, DomainTag::Target, &cfg)?,
                None => source.clone().with_tag(DomainTag::Target),
            };
            source.check_compatible(&target)?;
            let (source, stats) = normalize(&source, None)?;
            let (target, _) = normalize(&target, Some(&stats))?;
            let files = RunFiles::in_dir(&dir);
            let mut state = if a.resume {
                TrainState::load(&dir.join(CHECKPOINT_FILE))?
            } else {
                let dims = Dims {
                    d_x: source.d_x,
                    k: source.k(),
                    u_dim: source.u_dim,
                };
                let model = CdaModel::new(cfg.model.clone(), dims, seed)?;
                TrainState::new(cfg.train.clone(), model, &source, &target)?
            };
            fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
            fs::write(dir.join(STATS_FILE), serde_json::to_string_pretty(&stats)?)?;
            let remaining = state.planned_steps().saturating_sub(state.step);
            train_steps(&mut state, &source, &target, remaining, &files, None)?;
            state.save(&dir.join(CHECKPOINT_FILE))?;
            if let Some(last) = state.history.last() {
                writeln!(
                    out,
                    "trained {} steps; last l_seq source {:.6} target {:.6}, l_dom {:.6}",
                    state.step, last.loss.l_seq_source, last.loss.l_seq_target, last.loss.l_dom
                )?;
            }
            writeln!(out, "run directory {}", dir.display())?;
        }
        Command::Eval(EvalCommand::InsideWell(a)) => {
            let target = read(&a.target, DomainTag::Target, &cfg)?;
            let source = a.source.as_ref().map(|p| read(p, DomainTag::Source, &cfg)).transpose()?;
            let report = run_inside_well(source.as_ref(), &target, &spec_of(&cfg, a.jobs), None)?;
            emit_report(&report, &a.out)?;
            writeln!(out, "wrote {} result rows to {}", report.rows.len(), a.out.display())?;
        }
        Command::Eval(EvalCommand::CrossWell(a)) => {
            let c = &a.common;
            let target = read(&c.target, DomainTag::Target, &cfg)?;
            let source = c.source.as_ref().map(|p| read(p, DomainTag::Source, &cfg)).transpose()?;
            let spec = spec_of(&cfg, c.jobs);
            let conditions: &[bool] = match a.with_policy {
                PolicyCondition::Yes => &[true],
                PolicyCondition::No => &[false],
                PolicyCondition::Both => &[true, false],
            };
            let mut report = crate::eval::ExperimentReport::default();
            for &w in conditions {
                report.merge(run_cross_well(source.as_ref(), &target, &spec, w, None)?);
            }
            emit_report(&report, &c.out)?;
            writeln!(out, "wrote {} result rows to {}", report.rows.len(), c.out.display())?;
        }
        Command::RankPolicies(a) => {
            let state = TrainState::load(&a.run.join(CHECKPOINT_FILE))?;
            let stats: NormStats = serde_json::from_str(
                &fs::read_to_string(a.run.join(STATS_FILE)).context("reading normalisation stats")?,
            )?;
            let ds = read(&a.data, a.domain.into(), &cfg)?;
            let (ds, _) = normalize(&ds, Some(&stats))?;
            let ep = ds
                .episode(&a.episode)
                .ok_or_else(|| anyhow!("episode '{}' not found", a.episode))?;
            let vocab = &ds.vocabulary;
            let candidates: Vec<PolicyChoice> = if a.candidates.is_empty() {
                (0..vocab.len()).map(PolicyChoice::Treatment).collect()
            } else {
                a.candidates.iter().map(|c| choice(c, vocab)).collect::<Result<_>>()?
            };
            let reference = choice(&a.reference, vocab)?;
            let ranking = rank_policies(
                &state.model,
                ep,
                a.start,
                a.len,
                &candidates,
                reference,
                a.domain.into(),
                &stats,
                vocab,
            )?;
            let text = serde_json::to_string_pretty(&ranking)?;
            match &a.out {
                Some(p) => fs::write(p, text)?,
                None => writeln!(out, "{text}")?,
            }
        }
        Command::Check => {
            let results = run_checks(seed);
            let mut failed = Vec::new();
            for c in &results {
                let status = if c.passed { "pass" } else { "FAIL" };
                writeln!(out, "{status} {}: {}", c.name, c.detail)?;
                if !c.passed {
                    failed.push(c.name);
                }
            }
            if !failed.is_empty() {
                writeln!(out, "failing: {}", failed.join(", "))?;
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Parses `argv` and runs; returns the process exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}
