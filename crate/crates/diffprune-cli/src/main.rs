//! `diffprune` — train, prune, store, and evaluate sparse task diffs over a
//! frozen base model.
//!
//! Training progress goes to stderr; results and artifact paths go to
//! stdout. Every artifact-producing subcommand exits 0 only after its output
//! file is fully written (writes are atomic: temp file + rename).

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use diffprune::analysis::{
    per_layer_sparsity, sparsity_sweep, storage_cost, sweep_csv, zero_group_fraction,
    StorageScheme,
};
use diffprune::codec::{
    apply_patch, check_compatible, read_checkpoint, read_diff, write_checkpoint, write_diff,
    Checkpoint,
};
use diffprune::config::{self, RunConfig};
use diffprune::model::{build, Model};
use diffprune::pipeline::{
    accuracy_with, evaluate, finetune_fixed_mask, full_finetune, last_layer_finetune,
    nonadaptive_diff_prune, pretrain, project_l0, EpochRecord,
};
use diffprune::reparam::{finalize, DiffVector};
use diffprune::space::GroupPartition;
use diffprune::task::{build_suite, TaskDataset, TaskSuite};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "diffprune",
    about = "Sparse task diffs over a frozen base model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train base parameters on the suite's base task and save a checkpoint.
    Pretrain {
        /// Key=value config file; unset keys take defaults.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a gated sparse diff against a frozen checkpoint (stochastic
    /// gates, then one seeded draw to materialize the diff). Project and
    /// finetune it with the `project` and `finetune-mask` subcommands.
    FinetuneDiff(FinetuneDiffArgs),
    /// Train a baseline diff: full finetuning, last-layer finetuning, or
    /// non-adaptive (dense train, magnitude-prune, mask finetune).
    Baseline(BaselineArgs),
    /// Keep only the top-k magnitude entries of a diff (heads exempt).
    Project {
        #[arg(long)]
        diff: PathBuf,
        /// Target rate t in (0, 1]: keeps ceil(t * non-head dim) entries.
        #[arg(long)]
        sparsity: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-optimize a diff's values with its support frozen.
    FinetuneMask {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        diff: PathBuf,
        /// Task name from the suite (see `eval --list`).
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a diff onto a base checkpoint, producing a patched checkpoint.
    Apply {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        diff: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report support size, per-layer distribution, storage cost, and
    /// optionally the zero-group fraction of a diff.
    Stats {
        #[arg(long)]
        diff: PathBuf,
        /// Group scheme for the zero-group report ("per-segment").
        #[arg(long)]
        groups: Option<GroupScheme>,
        /// Base checkpoint to verify compatibility against.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on one suite task's validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Task name; pass --list to show available names.
        #[arg(long, required_unless_present = "list")]
        task: Option<String>,
        /// List the suite's task names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Run every method over the config's sparsity grid and seeds; emits
    /// `sparsity,method,accuracy` CSV (median accuracy across seeds).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint to reuse; omitting it pretrains first.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Also write the CSV to this path (always printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FinetuneDiffArgs {
    /// Frozen base checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Task name from the suite.
    #[arg(long)]
    task: String,
    /// Per-group gates on top of per-parameter gates.
    #[arg(long, conflicts_with = "unstructured")]
    structured: bool,
    /// Per-parameter gates only.
    #[arg(long)]
    unstructured: bool,
    /// Target rate override (recorded for later `project`).
    #[arg(long)]
    sparsity: Option<f64>,
    /// Penalty weight override.
    #[arg(long)]
    lambda: Option<f64>,
    /// Seed override for this run's gates, batches, and finalization.
    #[arg(long)]
    seed: Option<u64>,
    /// Config file overriding the checkpoint's embedded config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    kind: BaselineKind,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    task: String,
    /// Target rate for the non-adaptive kind (full and last-layer are dense).
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Full,
    LastLayer,
    NonAdaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupScheme {
    PerSegment,
}

/// Restore the default SIGPIPE disposition so a downstream `head`/`less`
/// closing the pipe ends the process quietly instead of panicking the
/// stdout writer.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out } => cmd_pretrain(&config, &out),
        Command::FinetuneDiff(args) => cmd_finetune_diff(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Project {
            diff,
            sparsity,
            out,
        } => cmd_project(&diff, sparsity, &out),
        Command::FinetuneMask {
            base,
            diff,
            task,
            out,
        } => cmd_finetune_mask(&base, &diff, &task, &out),
        Command::Apply { base, diff, out } => cmd_apply(&base, &diff, &out),
        Command::Stats { diff, groups, base } => cmd_stats(&diff, groups, base.as_deref()),
        Command::Eval { ckpt, task, list } => cmd_eval(&ckpt, task.as_deref(), list),
        Command::Sweep { config, base, out } => cmd_sweep(&config, base.as_deref(), out.as_deref()),
    }
}

// ─── shared plumbing ───

/// The run configuration for a command operating on an existing artifact:
/// the `--config` file when given, otherwise the artifact's embedded
/// resolved config.
fn config_for(meta: &str, override_path: Option<&Path>, source: &str) -> Result<RunConfig> {
    match override_path {
        Some(p) => config::load(p).with_context(|| format!("reading {}", p.display())),
        None => config::parse(meta)
            .with_context(|| format!("{source} carries no usable embedded config")),
    }
}

/// Builds the model described by `cfg` and checks it against the
/// checkpoint's parameter space, so a config/checkpoint mismatch fails
/// before any training starts.
fn model_for(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Box<dyn Model>> {
    let model = build(cfg)?;
    check_compatible(&ckpt.space, model.space())
        .context("checkpoint does not match the configured model")?;
    Ok(model)
}

fn load_base(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn task_of<'s>(suite: &'s TaskSuite, name: &str) -> Result<&'s TaskDataset> {
    suite.task(name).ok_or_else(|| {
        anyhow!(
            "unknown task {name:?}; available: {}",
            suite.names().join(", ")
        )
    })
}

fn print_epochs(stage: &str, records: &[EpochRecord]) {
    for r in records {
        let gates = r
            .expected_l0
            .map(|e| format!("  E[L0] {e:.1}"))
            .unwrap_or_default();
        eprintln!(
            "[{stage}] epoch {:>3}  loss {:.4}  val {:.4}{gates}  ({:.1} ms)",
            r.epoch, r.train_loss, r.val_accuracy, r.wall_ms
        );
    }
}

fn save_diff(path: &Path, dv: &DiffVector, cfg: &RunConfig) -> Result<()> {
    write_diff(path, dv, &cfg.resolved()).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

// ─── subcommands ───

fn cmd_pretrain(config: &Path, out: &Path) -> Result<()> {
    let cfg = config::load(config).with_context(|| format!("reading {}", config.display()))?;
    let model = build(&cfg)?;
    let suite = build_suite(&cfg)?;
    let outcome = pretrain(model.as_ref(), &suite.base, &cfg)?;
    print_epochs("pretrain", &outcome.epochs);
    let ckpt = Checkpoint {
        space: model.space().clone(),
        theta: outcome.result,
        meta: cfg.resolved(),
    };
    write_checkpoint(out, &ckpt).with_context(|| format!("writing {}", out.display()))?;
    let acc = evaluate(model.as_ref(), &ckpt.theta, &suite.base.val)?;
    println!("base task val accuracy {acc:.4}");
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_finetune_diff(args: FinetuneDiffArgs) -> Result<()> {
    if !args.structured && !args.unstructured {
        bail!("pass either --structured or --unstructured");
    }
    let ckpt = load_base(&args.base)?;
    let mut cfg = config_for(&ckpt.meta, args.config.as_deref(), "base checkpoint")?;
    cfg.structured = args.structured;
    if let Some(t) = args.sparsity {
        cfg.sparsity = t;
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let model = model_for(&cfg, &ckpt)?;
    let suite = build_suite(&cfg)?;
    let data = task_of(&suite, &args.task)?;

    let outcome = diffprune::pipeline::train_l0(model.as_ref(), &ckpt.theta, data, &cfg)?;
    print_epochs("gates", &outcome.epochs);
    let dv = finalize(&outcome.result, cfg.seed)?;
    let acc = accuracy_with(model.as_ref(), &ckpt.theta, Some(&dv), &data.val)?;
    println!(
        "task {} val accuracy {acc:.4}  support {} of {}",
        args.task,
        dv.support_len(),
        dv.space().dim()
    );
    save_diff(&args.out, &dv, &cfg)
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let ckpt = load_base(&args.base)?;
    let mut cfg = config_for(&ckpt.meta, args.config.as_deref(), "base checkpoint")?;
    if let Some(t) = args.sparsity {
        cfg.sparsity = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let model = model_for(&cfg, &ckpt)?;
    let suite = build_suite(&cfg)?;
    let data = task_of(&suite, &args.task)?;

    let run = match args.kind {
        BaselineKind::Full => full_finetune(model.as_ref(), &ckpt.theta, data, &cfg)?,
        BaselineKind::LastLayer => last_layer_finetune(model.as_ref(), &ckpt.theta, data, &cfg)?,
        BaselineKind::NonAdaptive => {
            nonadaptive_diff_prune(model.as_ref(), &ckpt.theta, data, &cfg)?
        }
    };
    print_epochs("train", &run.stages.train);
    print_epochs("finetune", &run.stages.finetune);
    let acc = accuracy_with(model.as_ref(), &ckpt.theta, Some(&run.diff), &data.val)?;
    println!(
        "task {} val accuracy {acc:.4}  support {} of {}",
        args.task,
        run.diff.support_len(),
        run.diff.space().dim()
    );
    save_diff(&args.out, &run.diff, &cfg)
}

fn cmd_project(diff: &Path, sparsity: f64, out: &Path) -> Result<()> {
    let file = read_diff(diff).with_context(|| format!("reading {}", diff.display()))?;
    let mut cfg = config_for(&file.meta, None, "diff file")?;
    cfg.sparsity = sparsity;
    cfg.validate()?;
    let projected = project_l0(&file.diff, sparsity)?;
    println!(
        "kept {} of {} entries (non-head budget {})",
        projected.support_len(),
        file.diff.support_len(),
        (sparsity * projected.space().nonhead_dim() as f64).ceil() as usize
    );
    save_diff(out, &projected, &cfg)
}

fn cmd_finetune_mask(base: &Path, diff: &Path, task: &str, out: &Path) -> Result<()> {
    let ckpt = load_base(base)?;
    let file = read_diff(diff).with_context(|| format!("reading {}", diff.display()))?;
    let cfg = config_for(&file.meta, None, "diff file")?;
    let model = model_for(&cfg, &ckpt)?;
    check_compatible(&ckpt.space, file.diff.space())?;
    let suite = build_suite(&cfg)?;
    let data = task_of(&suite, task)?;

    let outcome = finetune_fixed_mask(model.as_ref(), &ckpt.theta, &file.diff, data, &cfg)?;
    print_epochs("finetune", &outcome.epochs);
    let acc = accuracy_with(model.as_ref(), &ckpt.theta, Some(&outcome.result), &data.val)?;
    println!(
        "task {task} val accuracy {acc:.4}  support {} of {}",
        outcome.result.support_len(),
        outcome.result.space().dim()
    );
    save_diff(out, &outcome.result, &cfg)
}

fn cmd_apply(base: &Path, diff: &Path, out: &Path) -> Result<()> {
    let ckpt = load_base(base)?;
    let file = read_diff(diff).with_context(|| format!("reading {}", diff.display()))?;
    let patched = apply_patch(&ckpt, &file)?;
    write_checkpoint(out, &patched).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_stats(diff: &Path, groups: Option<GroupScheme>, base: Option<&Path>) -> Result<()> {
    let file = read_diff(diff).with_context(|| format!("reading {}", diff.display()))?;
    let dv = &file.diff;
    let space = dv.space();
    if let Some(base) = base {
        let ckpt = load_base(base)?;
        check_compatible(&ckpt.space, space)?;
        println!("compatible with {}", base.display());
    }

    let d = space.dim() as u64;
    let nnz = dv.support_len() as u64;
    println!("dim {d}");
    println!("support {nnz}");
    println!(
        "nonhead_support {} of {} (rate {:.6})",
        dv.nonhead_support_len(),
        space.nonhead_dim(),
        dv.nonhead_support_len() as f64 / space.nonhead_dim().max(1) as f64
    );
    let sparse = storage_cost(d, nnz, StorageScheme::PositionsAndValues);
    let dense = storage_cost(d, nnz, StorageScheme::FullWeights);
    println!(
        "storage_sparse_bytes {} ({:.3} MB)",
        sparse.bytes,
        sparse.megabytes()
    );
    println!(
        "storage_dense_bytes {} ({:.3} MB)",
        dense.bytes,
        dense.megabytes()
    );

    let report = per_layer_sparsity(dv);
    for row in &report.rows {
        println!(
            "layer {} entries {} fraction {:.4}",
            row.layer, row.nonzeros, row.fraction
        );
    }

    if let Some(GroupScheme::PerSegment) = groups {
        let part = GroupPartition::per_segment(space, 0.0);
        let frac = zero_group_fraction(dv, &part);
        println!("zero_group_fraction {frac:.4}");
    }
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, task: Option<&str>, list: bool) -> Result<()> {
    let ckpt = load_base(ckpt_path)?;
    let cfg = config_for(&ckpt.meta, None, "checkpoint")?;
    let suite = build_suite(&cfg)?;
    if list {
        for name in suite.names() {
            println!("{name}");
        }
        return Ok(());
    }
    let task = task.expect("clap requires --task unless --list");
    let model = model_for(&cfg, &ckpt)?;
    let data = task_of(&suite, task)?;
    let acc = evaluate(model.as_ref(), &ckpt.theta, &data.val)?;
    println!("task {task} accuracy {acc:.4}");
    Ok(())
}

fn cmd_sweep(config: &Path, base: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = config::load(config).with_context(|| format!("reading {}", config.display()))?;
    let model = build(&cfg)?;
    let suite = build_suite(&cfg)?;
    let theta = match base {
        Some(p) => {
            let ckpt = load_base(p)?;
            check_compatible(&ckpt.space, model.space())
                .context("checkpoint does not match the sweep config's model")?;
            ckpt.theta
        }
        None => {
            eprintln!("[sweep] no --base given; pretraining first");
            let outcome = pretrain(model.as_ref(), &suite.base, &cfg)?;
            print_epochs("pretrain", &outcome.epochs);
            outcome.result
        }
    };
    let rows = sparsity_sweep(model.as_ref(), &theta, &suite, &cfg)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
