use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use mimrec::checks::{causality, uniform_law};
use mimrec::corpus::{load_interactions, read_attribute_records, Dataset, InteractionFormat};
use mimrec::eval::{emit_report, load_report, render_table, ReportEntry};
use mimrec::experiment::{
    ablation_variants, report_entry, run_evaluate, run_finetune, run_pretrain, save_into, ExperimentConfig, Prepared,
};
use mimrec::synth::{generate, SynthSpec};
use mimrec::trainer::{audit_with_fault, load_checkpoint, save_checkpoint, toy_config, AuditLoss, Checkpoint};

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_DIR: &str = "checkpoint";
const AUDIT_TOLERANCE: f64 = 1e-4;
const UNIFORM_TOLERANCE: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(name = "mimrec", version, about = "Self-supervised sequential recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter raw interactions to a k-core and write a dataset directory.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic dataset with planted sequential and attribute structure.
    Synth(SynthArgs),
    /// Pretrain with the self-supervised objectives.
    Pretrain(RunArgs),
    /// Fine-tune for next-item prediction.
    Finetune(FinetuneArgs),
    /// Rank held-out items with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Full model plus one run per removed objective.
    Ablate(RunArgs),
    /// Train-fraction or pretraining-epoch sweep.
    Sweep(SweepArgs),
    /// Gradient audit plus invariant checks; exits 2 on failure.
    Audit(AuditArgs),
    /// Merge report.json files from run directories into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat dotted-key TOML config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.mip_weight=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to a timestamped directory under the output root.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// tsv (user, item, timestamp) or jsonl.
    #[arg(long, default_value = "tsv")]
    format: InteractionFormat,
    #[arg(long, default_value_t = 5)]
    k_core: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 50)]
    attrs: usize,
    #[arg(long, default_value_t = 4)]
    attrs_per_item: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 3.0)]
    concentration: f64,
    #[arg(long, default_value_t = 0.1)]
    attr_noise: f64,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0.8)]
    popularity_skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained checkpoint directory.
    #[arg(long, conflicts_with = "from_scratch", required_unless_present = "from_scratch")]
    init: Option<PathBuf>,
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    label: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fine-tune on these shares of users, from one pretrained checkpoint.
    #[arg(long, value_delimiter = ',', conflicts_with = "pretrain_epochs", required_unless_present = "pretrain_epochs")]
    fractions: Vec<f64>,
    /// Fine-tune from checkpoints taken after these pretraining epochs.
    #[arg(long, value_delimiter = ',')]
    pretrain_epochs: Vec<usize>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    seeds: Vec<u64>,
    /// Scale analytic gradients by 1 + FAULT before comparing.
    #[arg(long)]
    fault: Option<f64>,
    #[arg(long, default_value_t = 100)]
    causality_trials: usize,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories holding report.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Write the merged report here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Invariant(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let invariant = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<mimrec::Error>(),
                Some(
                    mimrec::Error::NonFiniteGradient(_)
                        | mimrec::Error::DivergenceDetected { .. }
                        | mimrec::Error::MaskAllFalseRow { .. }
                )
            )
        });
        if invariant {
            Failure::Invariant(e)
        } else {
            Failure::Usage(e)
        }
    }
}

impl From<mimrec::Error> for Failure {
    fn from(e: mimrec::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(e)) => {
            eprintln!("invariant failure: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Resolved config plus the directory the run writes into.
struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn start(&self, command: &str) -> anyhow::Result<Run> {
        let cfg = self.config()?;
        let dir = match &self.run_dir {
            Some(d) => d.clone(),
            None => fresh_run_dir(&cfg.output_root(), command),
        };
        Ok(Run { cfg, dir })
    }
}

impl Run {
    /// Creates the run directory and writes the resolved config into it.
    /// Called once all inputs have loaded.
    fn open(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating run directory {}", self.dir.display()))?;
        self.cfg.save(self.dir.join(CONFIG_FILE))?;
        info!("run directory {}", self.dir.display());
        Ok(())
    }
}

fn fresh_run_dir(root: &Path, command: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-{command}"));
    let mut dir = base.clone();
    let mut n = 2;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    dir
}

fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<Prepared> {
    Prepared::load(cfg).with_context(|| format!("loading dataset from {} (set data.dir)", cfg.data.dir))
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("input {} does not exist", path.display());
    }
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<(), Failure> {
    require_file(&a.interactions)?;
    let raw = load_interactions(&a.interactions, a.format)?;
    let attrs = match &a.attributes {
        Some(p) => {
            require_file(p)?;
            let f = fs::File::open(p).map_err(mimrec::Error::from)?;
            Some(read_attribute_records(std::io::BufReader::new(f), p)?)
        }
        None => None,
    };
    let ds = Dataset::preprocess(&raw, attrs.as_deref(), a.k_core)?;
    ds.save(&a.out)?;
    println!("{}", ds.stats());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        n_users: a.users,
        n_items: a.items,
        n_attrs: a.attrs,
        attrs_per_item: a.attrs_per_item,
        n_clusters: a.clusters,
        transition_concentration: a.concentration,
        attr_noise: a.attr_noise,
        seq_len_range: (a.min_len, a.max_len),
        popularity_skew: a.popularity_skew,
        seed: a.seed,
        ..Default::default()
    };
    let world = generate(&spec)?;
    let raw_dir = a.out.join("raw");
    world.write(&raw_dir)?;
    fs::write(a.out.join("synth.json"), serde_json::to_string_pretty(&spec).map_err(mimrec::Error::from)?)
        .map_err(mimrec::Error::from)?;
    let raw = load_interactions(raw_dir.join("interactions.tsv"), InteractionFormat::Tsv)?;
    let path = raw_dir.join("attributes.jsonl");
    let f = fs::File::open(&path).map_err(mimrec::Error::from)?;
    let attrs = read_attribute_records(std::io::BufReader::new(f), &path)?;
    let ds = Dataset::preprocess(&raw, Some(&attrs), 5)?;
    ds.save(&a.out)?;
    println!("{}", ds.stats());
    Ok(())
}

fn cmd_pretrain(a: RunArgs) -> Result<(), Failure> {
    let run = a.start("pretrain")?;
    let prep = prepare(&run.cfg)?;
    run.open()?;
    let periodic = run.dir.join("checkpoints");
    let ckpt = run_pretrain(&run.cfg, &prep, &mut save_into(&periodic))?;
    save_checkpoint(&ckpt, run.dir.join(CHECKPOINT_DIR))?;
    if let Some(last) = ckpt.history.last() {
        println!("pretrained {} epochs, final loss {:.6}", ckpt.epoch, last.loss);
    }
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<(), Failure> {
    let run = a.run.start("finetune")?;
    let prep = prepare(&run.cfg)?;
    let init = match &a.init {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    run.open()?;
    let ckpt = run_finetune(&run.cfg, &prep, init.as_ref())?;
    save_checkpoint(&ckpt, run.dir.join(CHECKPOINT_DIR))?;
    let best = ckpt.history.iter().filter_map(|r| r.valid_ndcg10).fold(f64::NEG_INFINITY, f64::max);
    println!("fine-tuned, best valid NDCG@10 {best:.4} at epoch {}", ckpt.epoch);
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let run = a.run.start("evaluate")?;
    let prep = prepare(&run.cfg)?;
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    run.open()?;
    let result = run_evaluate(&run.cfg, &prep, &ckpt)?;
    let entries = vec![report_entry(&run.cfg, &a.label, &result)?];
    emit_report(&entries, &run.dir)?;
    print!("{}", render_table(&entries));
    Ok(())
}

/// Pretrain (when configured), fine-tune and evaluate into `dir`.
fn pipeline(cfg: &ExperimentConfig, prep: &Prepared, dir: &Path, label: &str) -> anyhow::Result<ReportEntry> {
    fs::create_dir_all(dir)?;
    cfg.save(dir.join(CONFIG_FILE))?;
    let init = if cfg.train.pretrain_epochs > 0 {
        let ckpt = run_pretrain(cfg, prep, &mut |_| Ok(()))?;
        save_checkpoint(&ckpt, dir.join("pretrained"))?;
        Some(ckpt)
    } else {
        None
    };
    let ft = run_finetune(cfg, prep, init.as_ref())?;
    save_checkpoint(&ft, dir.join("finetuned"))?;
    let entry = report_entry(cfg, label, &run_evaluate(cfg, prep, &ft)?)?;
    emit_report(std::slice::from_ref(&entry), dir)?;
    Ok(entry)
}

fn cmd_ablate(a: RunArgs) -> Result<(), Failure> {
    let run = a.start("ablate")?;
    let prep = prepare(&run.cfg)?;
    run.open()?;
    let mut entries = Vec::new();
    for (label, cfg) in ablation_variants(&run.cfg) {
        info!("ablation run {label}");
        let sub = run.dir.join(label.trim_start_matches('-').to_lowercase());
        let label = label.replace('-', "¬");
        entries.push(pipeline(&cfg, &prep, &sub, &label)?);
    }
    emit_report(&entries, &run.dir)?;
    print!("{}", render_table(&entries));
    Ok(())
}

fn finetune_and_report(cfg: &ExperimentConfig, prep: &Prepared, init: Option<&Checkpoint>, dir: &Path, label: &str) -> anyhow::Result<ReportEntry> {
    fs::create_dir_all(dir)?;
    cfg.save(dir.join(CONFIG_FILE))?;
    let ft = run_finetune(cfg, prep, init)?;
    save_checkpoint(&ft, dir.join("finetuned"))?;
    let entry = report_entry(cfg, label, &run_evaluate(cfg, prep, &ft)?)?;
    emit_report(std::slice::from_ref(&entry), dir)?;
    Ok(entry)
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let run = a.run.start("sweep")?;
    let prep = prepare(&run.cfg)?;
    run.open()?;
    let mut entries = Vec::new();
    if !a.fractions.is_empty() {
        let init = if run.cfg.train.pretrain_epochs > 0 {
            let ckpt = run_pretrain(&run.cfg, &prep, &mut |_| Ok(()))?;
            save_checkpoint(&ckpt, run.dir.join("pretrained"))?;
            Some(ckpt)
        } else {
            None
        };
        for &f in &a.fractions {
            let mut cfg = run.cfg.clone();
            cfg.set("train.train_fraction", f.into())?;
            cfg.validate()?;
            let label = format!("fraction={f}");
            info!("sweep run {label}");
            entries.push(finetune_and_report(&cfg, &prep, init.as_ref(), &run.dir.join(&label), &label)?);
        }
    } else {
        let max = a.pretrain_epochs.iter().copied().max().unwrap_or(0);
        let mut cfg = run.cfg.clone();
        cfg.set("train.pretrain_epochs", (max as i64).into())?;
        cfg.set("train.checkpoint_every", 1i64.into())?;
        let mut snapshots: Vec<Checkpoint> = Vec::new();
        if max > 0 {
            let wanted = &a.pretrain_epochs;
            run_pretrain(&cfg, &prep, &mut |c| {
                if wanted.contains(&c.epoch) {
                    snapshots.push(c.clone());
                }
                Ok(())
            })?;
        }
        for &e in &a.pretrain_epochs {
            let label = format!("pretrain_epochs={e}");
            info!("sweep run {label}");
            let init = snapshots.iter().find(|c| c.epoch == e);
            if e > 0 && init.is_none() {
                return Err(anyhow::anyhow!("no checkpoint for pretraining epoch {e}").into());
            }
            entries.push(finetune_and_report(&run.cfg, &prep, init, &run.dir.join(&label), &label)?);
        }
    }
    emit_report(&entries, &run.dir)?;
    print!("{}", render_table(&entries));
    Ok(())
}

struct AuditLine {
    check: String,
    value: f64,
    tolerance: f64,
    pass: bool,
}

fn cmd_audit(a: AuditArgs) -> Result<(), Failure> {
    let mut lines = Vec::new();
    let cfg = toy_config();
    for loss in AuditLoss::all() {
        for &seed in &a.seeds {
            let r = audit_with_fault(&loss, &cfg, seed, a.fault)?;
            lines.push(AuditLine {
                check: format!("gradient {} seed {seed} (worst {})", r.loss, r.worst_tensor),
                value: r.max_rel_error,
                tolerance: AUDIT_TOLERANCE,
                pass: r.max_rel_error < AUDIT_TOLERANCE,
            });
        }
    }
    let u = uniform_law(&[1, 2, 4], a.seeds.first().copied().unwrap_or(0))?;
    lines.push(AuditLine {
        check: format!("uniform-logit law over {} terms", u.n_terms),
        value: u.max_deviation,
        tolerance: UNIFORM_TOLERANCE,
        pass: u.max_deviation <= UNIFORM_TOLERANCE,
    });
    let c = causality(a.causality_trials, a.seeds.first().copied().unwrap_or(0))?;
    lines.push(AuditLine {
        check: format!("causal prefix unchanged ({} trials)", c.trials),
        value: c.causal_violations as f64,
        tolerance: 0.0,
        pass: c.causal_violations == 0,
    });
    lines.push(AuditLine {
        check: "bidirectional prefix sees suffix".into(),
        value: c.bidirectional_changed as f64,
        tolerance: 1.0,
        pass: c.bidirectional_changed >= 1,
    });

    for l in &lines {
        println!("{} {:<48} {:.3e} (tol {:.0e})", if l.pass { "PASS" } else { "FAIL" }, l.check, l.value, l.tolerance);
    }
    if let Some(dir) = &a.run_dir {
        let json_lines: Vec<_> = lines
            .iter()
            .map(|l| serde_json::json!({ "check": l.check, "value": l.value, "tolerance": l.tolerance, "pass": l.pass }))
            .collect();
        fs::create_dir_all(dir).map_err(mimrec::Error::from)?;
        fs::write(dir.join("audit.json"), serde_json::to_string_pretty(&json_lines).map_err(mimrec::Error::from)?)
            .map_err(mimrec::Error::from)?;
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    if failed > 0 {
        return Err(Failure::Invariant(anyhow::anyhow!("{failed} check(s) failed")));
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    let mut entries = Vec::new();
    for dir in &a.runs {
        entries.extend(load_report(dir).with_context(|| format!("reading {}/report.json", dir.display()))?);
    }
    if let Some(out) = &a.out {
        emit_report(&entries, out)?;
    }
    print!("{}", render_table(&entries));
    Ok(())
}
