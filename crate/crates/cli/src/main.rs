//! Operator surface for the laboratory: run training from declarative
//! configs, evaluate stored checkpoints, rebuild collapse-forensics tables
//! from logged batches, and run ranked sweeps over config grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use arlab_core::config::RunConfig;
use arlab_core::diagnostics::{
    flow_from_samples, group_kl_attribution, median_entropy, oob_token_stats,
    ratios_from_records, write_flow_csv, REFERENCE_EPS,
};
use arlab_core::records::{load_turn_records, RunPaths};
use arlab_core::trainer::{evaluate, load_train_state, train, TrainReport};

#[derive(Parser)]
#[command(name = "arlab", version, about = "Desk-scale policy-optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or, with --force, resume) a training run from a config file.
    Train(TrainArgs),
    /// Evaluate a stored checkpoint at the evaluation temperature.
    Eval(EvalArgs),
    /// Rebuild the forensics tables from a run's stored batches.
    Diagnose(DiagnoseArgs),
    /// Train every cell of a config grid and write a ranked summary.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file path, or a bare name resolved as configs/<name>.toml.
    #[arg(long)]
    config: String,
    /// Seed override; recorded in the manifest like any other override.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path config override, e.g. --set objective.variant=GSPO.
    /// Repeatable; later overrides win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory (default runs/<config>-<variant>-s<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Proceed into a non-empty run directory, resuming a stored run.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding config.toml and checkpoints.
    run: PathBuf,
    /// Evaluate the checkpoint written after this stage rather than the
    /// final one (requires trainer.checkpoint_every > 0 at training time).
    #[arg(long)]
    stage: Option<u64>,
    /// Episode count (default: the run's eval_episodes).
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation seed (default: the run's training seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Run directory with stored batches (trainer.log_batches_every > 0).
    run: PathBuf,
    /// Directory receiving the tables (default <run>/diagnostics).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep grid file: a base config plus cells of dotted-path overrides.
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving one run per cell and seed plus summary.csv.
    #[arg(long)]
    out: PathBuf,
    /// Proceed even when cell run directories already exist.
    #[arg(long)]
    force: bool,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

/// A bare name with no path separator and no extension names a preset under
/// configs/; anything else is a literal path.
fn resolve_config_path(name: &str) -> PathBuf {
    let direct = Path::new(name);
    if direct.exists() || name.contains(std::path::MAIN_SEPARATOR) || name.ends_with(".toml") {
        direct.to_path_buf()
    } else {
        Path::new("configs").join(format!("{name}.toml"))
    }
}

fn parse_overrides(set: &[String], seed: Option<u64>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::with_capacity(set.len() + 1);
    for pair in set {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("override '{pair}' is not of the form KEY=VALUE"))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    if let Some(seed) = seed {
        out.push(("trainer.seed".to_string(), seed.to_string()));
    }
    Ok(out)
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut entries| entries.next().is_some()).unwrap_or(false)
}

fn print_report(run_dir: &Path, report: &TrainReport) {
    if let Some(bc) = &report.bc {
        println!(
            "cloning cold start: {} episodes kept, final loss {:.4}",
            bc.kept_episodes,
            bc.losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    println!("stages run: {}", report.stages_run);
    match &report.final_eval {
        Some(e) => println!(
            "final eval (stage {}): success {:.4}, mean return {:.4}, valid format {:.4}",
            e.stage, e.success_rate, e.mean_return, e.valid_format_ratio
        ),
        None => println!("no evaluations recorded"),
    }
    println!("stable: {}", report.stable);
    println!("run directory: {}", run_dir.display());
}

fn run_train(a: TrainArgs) -> Result<()> {
    let path = resolve_config_path(&a.config);
    let overrides = parse_overrides(&a.set, a.seed)?;
    let cfg = RunConfig::load(&path, &overrides)
        .with_context(|| format!("loading config {}", path.display()))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let out = a.out.unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{stem}-{}-s{}",
            cfg.objective.variant.name().to_lowercase(),
            cfg.trainer.seed
        ))
    });
    if !a.force && is_nonempty_dir(&out) {
        bail!(
            "run directory {} already exists; pass --force to resume or write elsewhere",
            out.display()
        );
    }
    let override_strings: Vec<String> =
        overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let report = train(&cfg, &out, &override_strings)
        .with_context(|| format!("training in {}", out.display()))?;
    print_report(&out, &report);
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let paths = RunPaths::new(&a.run);
    let cfg = RunConfig::load(&paths.config(), &[])
        .with_context(|| format!("loading {}", paths.config().display()))?;
    let checkpoint = match a.stage {
        Some(stage) => paths.checkpoint(stage),
        None => paths.final_checkpoint(),
    };
    if !checkpoint.exists() {
        bail!("no checkpoint at {}", checkpoint.display());
    }
    let state = load_train_state(&checkpoint)?;
    let episodes = a.episodes.unwrap_or(cfg.trainer.eval_episodes);
    let seed = a.seed.unwrap_or(cfg.trainer.seed);
    let summary = evaluate(&state.policy, &cfg.env, &cfg.policy, episodes, seed)?;
    println!(
        "checkpoint {} (trained through stage {})",
        checkpoint.display(),
        state.next_stage
    );
    println!(
        "episodes {episodes}, seed {seed}: success {:.4}, mean return {:.4}, valid format {:.4}",
        summary.success_rate, summary.mean_return, summary.valid_format_ratio
    );
    Ok(())
}

/// Stage indices of the stored batches in a run directory, sorted.
fn stored_batch_stages(run: &Path) -> Result<Vec<u64>> {
    let mut stages = Vec::new();
    for entry in fs::read_dir(run).with_context(|| format!("reading {}", run.display()))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stage) = name
            .strip_prefix("batch_")
            .and_then(|rest| rest.strip_suffix(".jsonl"))
            .and_then(|digits| digits.parse::<u64>().ok())
        {
            stages.push(stage);
        }
    }
    stages.sort_unstable();
    Ok(stages)
}

const KL_CELL_LABELS: [(&str, &str, &str); 8] = [
    ("neg", "below", "low"),
    ("neg", "below", "high"),
    ("neg", "above", "low"),
    ("neg", "above", "high"),
    ("pos", "below", "low"),
    ("pos", "below", "high"),
    ("pos", "above", "low"),
    ("pos", "above", "high"),
];

fn run_diagnose(a: DiagnoseArgs) -> Result<()> {
    let stages = stored_batch_stages(&a.run)?;
    if stages.is_empty() {
        bail!(
            "no batches stored in {}; train with trainer.log_batches_every > 0",
            a.run.display()
        );
    }
    let paths = RunPaths::new(&a.run);
    let cfg = RunConfig::load(&paths.config(), &[])
        .with_context(|| format!("loading {}", paths.config().display()))?;
    let out = a.out.unwrap_or_else(|| a.run.join("diagnostics"));
    fs::create_dir_all(&out)?;

    let mut oob_csv = String::from("stage,total,lower_neg,upper_pos\n");
    let mut kl_csv = String::from("stage,cell,advantage,ratio,entropy,share\n");
    for &stage in &stages {
        let samples = load_turn_records(&paths.batch_records(stage))
            .with_context(|| format!("reading stage {stage} batch"))?;
        let batch = ratios_from_records(&samples);
        let oob = oob_token_stats(&batch, REFERENCE_EPS.0, REFERENCE_EPS.1);
        writeln!(oob_csv, "{stage},{},{},{}", oob.total, oob.lower_neg, oob.upper_pos)
            .expect("string write");
        let attribution = group_kl_attribution(&batch, median_entropy(&batch));
        for (cell, share) in attribution.shares.iter().enumerate() {
            let (adv, ratio, entropy) = KL_CELL_LABELS[cell];
            writeln!(kl_csv, "{stage},{cell},{adv},{ratio},{entropy},{share}")
                .expect("string write");
        }
        let flows = flow_from_samples(cfg.env.id, &samples);
        let mut flow_bytes = Vec::new();
        write_flow_csv(&mut flow_bytes, &flows)?;
        fs::write(out.join(format!("flow_stage_{stage:06}.csv")), flow_bytes)?;

        let top_cell = attribution
            .shares
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).expect("shares are finite"))
            .map(|(cell, share)| (KL_CELL_LABELS[cell], share))
            .expect("eight cells");
        println!(
            "stage {stage}: {} sequences, oob total {:.4} lower-neg {:.4} upper-pos {:.4}, \
             top kl cell A={} s={} H={} share {:.3}, {} transitions",
            samples.len(),
            oob.total,
            oob.lower_neg,
            oob.upper_pos,
            top_cell.0 .0,
            top_cell.0 .1,
            top_cell.0 .2,
            top_cell.1,
            flows.len(),
        );
    }
    fs::write(out.join("oob.csv"), oob_csv)?;
    fs::write(out.join("kl_groups.csv"), kl_csv)?;
    println!("{} stages diagnosed into {}", stages.len(), out.display());
    Ok(())
}

/// Declarative sweep grid: every cell starts from the base config and adds
/// its own dotted-path overrides; each cell runs once per seed.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepGrid {
    /// Base config path or preset name, resolved like --config.
    base: String,
    /// Seeds per cell; empty means the base config's seed.
    #[serde(default)]
    seeds: Vec<u64>,
    cells: Vec<SweepCell>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepCell {
    name: String,
    #[serde(default)]
    set: Vec<String>,
}

struct SweepRow {
    cell: String,
    seed: Option<u64>,
    outcome: Result<(TrainReport, PathBuf)>,
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))?;
    let grid: SweepGrid = toml::from_str(&text)
        .with_context(|| format!("parsing {}", a.config.display()))?;
    let mut base = resolve_config_path(&grid.base);
    if !base.exists() {
        if let Some(parent) = a.config.parent() {
            let relative = parent.join(&grid.base);
            if relative.exists() {
                base = relative;
            }
        }
    }
    let seeds: Vec<Option<u64>> = if grid.seeds.is_empty() {
        vec![None]
    } else {
        grid.seeds.iter().map(|s| Some(*s)).collect()
    };
    fs::create_dir_all(&a.out)?;

    let mut rows = Vec::new();
    for cell in &grid.cells {
        for &seed in &seeds {
            let outcome = run_sweep_cell(&base, cell, seed, &a.out, a.force);
            let label = match seed {
                Some(s) => format!("{} seed {s}", cell.name),
                None => cell.name.clone(),
            };
            match &outcome {
                Ok((report, dir)) => println!(
                    "cell {label}: success {:.4}, stable {}, {}",
                    report.final_eval.as_ref().map(|e| e.success_rate).unwrap_or(f64::NAN),
                    report.stable,
                    dir.display()
                ),
                Err(e) => println!("cell {label}: FAILED: {e:#}"),
            }
            rows.push(SweepRow { cell: cell.name.clone(), seed, outcome });
        }
    }

    // Completed rows ranked by final success, failed rows at the bottom.
    rows.sort_by(|x, y| {
        let key = |r: &SweepRow| {
            r.outcome
                .as_ref()
                .ok()
                .and_then(|(rep, _)| rep.final_eval.as_ref().map(|e| e.success_rate))
                .unwrap_or(f64::NEG_INFINITY)
        };
        key(y).partial_cmp(&key(x)).expect("success rates are finite")
    });
    let mut summary =
        String::from("rank,cell,seed,final_success,mean_return,stable,run_dir,error\n");
    println!("\nrank  cell                     seed      success   stable");
    for (rank, row) in rows.iter().enumerate() {
        let seed_text = row.seed.map(|s| s.to_string()).unwrap_or_default();
        match &row.outcome {
            Ok((report, dir)) => {
                let (success, mean_return) = report
                    .final_eval
                    .as_ref()
                    .map(|e| (e.success_rate, e.mean_return))
                    .unwrap_or((f64::NAN, f64::NAN));
                writeln!(
                    summary,
                    "{},{},{},{},{},{},{},",
                    rank + 1,
                    row.cell,
                    seed_text,
                    success,
                    mean_return,
                    report.stable,
                    dir.display()
                )
                .expect("string write");
                println!(
                    "{:<5} {:<24} {:<9} {:<9.4} {}",
                    rank + 1,
                    row.cell,
                    seed_text,
                    success,
                    if report.stable { "stable" } else { "unstable" }
                );
            }
            Err(e) => {
                let message = format!("{e:#}").replace(',', ";").replace('\n', " ");
                writeln!(summary, "{},{},{},,,,,{}", rank + 1, row.cell, seed_text, message)
                    .expect("string write");
                println!("{:<5} {:<24} {:<9} FAILED: {e:#}", rank + 1, row.cell, seed_text);
            }
        }
    }
    let summary_path = a.out.join("summary.csv");
    fs::write(&summary_path, summary)?;
    println!("\nsummary written to {}", summary_path.display());
    Ok(())
}

fn run_sweep_cell(
    base: &Path,
    cell: &SweepCell,
    seed: Option<u64>,
    out_root: &Path,
    force: bool,
) -> Result<(TrainReport, PathBuf)> {
    let overrides = parse_overrides(&cell.set, seed)?;
    let cfg = RunConfig::load(base, &overrides)
        .with_context(|| format!("loading config {}", base.display()))?;
    let dir = out_root.join(match seed {
        Some(s) => format!("{}-s{s}", cell.name),
        None => cell.name.clone(),
    });
    if !force && is_nonempty_dir(&dir) {
        bail!("cell directory {} already exists; pass --force", dir.display());
    }
    let override_strings: Vec<String> =
        overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let report = train(&cfg, &dir, &override_strings)?;
    Ok((report, dir))
}
