//! Command-line front end. The `structlearn` binary is a thin wrapper around
//! [`run`].
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 numerical or
//! runtime failure. Human-readable progress goes to standard error; machine
//! output goes only to the files named on the command line (and to standard
//! output with `eval --print-report`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::{OptimizerKind, TrainOptions, TrainingConfig};
use crate::corpus::{generate_synthetic, make_folds, Corpus, FoldSplit, Granularity, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, FoldScore};
use crate::gradcheck::{self, Fault};
use crate::pairing::PairCache;
use crate::trainer::{self, FoldRun};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TAXONOMY_FILE: &str = "taxonomy.json";

#[derive(Debug, Parser)]
#[command(
    name = "structlearn",
    version,
    about = "Structured contrastive/ordinal adapter training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its taxonomy.
    Synth(SynthArgs),
    /// Dump the contrastive and ordinal pair sets of every anchor.
    Pairs(PairsArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Two-stage training on one fold, all folds, or a plain split.
    Train(TrainArgs),
    /// Score checkpoints on seen and unseen categories.
    Eval(EvalArgs),
    /// Train and score a list of configurations into one CSV table.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 155)]
    pub seed: u64,
    /// Output directory; receives corpus.jsonl and taxonomy.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub n_categories: usize,
    #[arg(long, default_value_t = 2)]
    pub aspects_per_category: usize,
    #[arg(long, default_value_t = 600)]
    pub n_claims: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.15)]
    pub noise: f64,
    /// Spacing of action levels along the ordinal direction.
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dual_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub unlabeled_fraction: f64,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub taxonomy: PathBuf,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        Corpus::load(&self.corpus, &self.taxonomy)
    }
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[command(flatten)]
    pub data: CorpusArgs,
    /// `aspect` or `category`.
    #[arg(long, default_value = "aspect")]
    pub granularity: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    SignFlip,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Optional config; its seed is used unless --seed is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Write every trial result (and the worst instance) as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupt the analytic gradient to prove the check can fail.
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
    Adamw,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML or JSON configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set stage1_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adamw)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Start stage 2 from a fresh adapter instead of the stage-1 one.
    #[arg(long)]
    pub reinit_adapter: bool,
    /// Record every stage-1 batch in the run log.
    #[arg(long)]
    pub log_batches: bool,
    /// Single-threaded execution (results are identical either way).
    #[arg(long)]
    pub sequential: bool,
    /// Add clustering statistics of the adapted train embeddings.
    #[arg(long)]
    pub clustering: bool,
}

impl RunArgs {
    fn config(&self) -> Result<TrainingConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainingConfig::load(p)?,
            None => TrainingConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn options(&self) -> Result<TrainOptions> {
        let options = TrainOptions {
            optimizer: match self.optimizer {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Adamw => OptimizerKind::AdamW {
                    weight_decay: self.weight_decay,
                },
            },
            threshold: self.threshold,
            reinit_adapter_stage2: self.reinit_adapter,
            log_batches: self.log_batches,
            parallel: !self.sequential,
            ..TrainOptions::default()
        };
        options.validate()?;
        Ok(options)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: CorpusArgs,
    /// Train only this cross-category fold.
    #[arg(long, conflicts_with = "full")]
    pub fold: Option<usize>,
    /// Train on a plain train/test split of the whole corpus.
    #[arg(long)]
    pub full: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One checkpoint per fold, in fold order, or a single checkpoint used for
    /// every fold.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    pub data: CorpusArgs,
    /// Fold file written by `train`.
    #[arg(long)]
    pub folds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub clustering: bool,
    /// Also write the report to standard output.
    #[arg(long)]
    pub print_report: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Configurations to run, in table order.
    #[arg(long = "config", required = true, num_args = 1..)]
    pub configs: Vec<PathBuf>,
    /// Overrides applied to every configuration.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: CorpusArgs,
    #[arg(long)]
    pub clustering: bool,
    #[arg(long)]
    pub sequential: bool,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // help and version go to stdout by request; everything else to stderr
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pairs(a) => cmd_pairs(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Grid(a) => cmd_grid(&a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_categories: a.n_categories,
        aspects_per_category: a.aspects_per_category,
        n_claims: a.n_claims,
        dim: a.dim,
        noise_sigma: a.noise,
        step: a.step,
        dual_fraction: a.dual_fraction,
        unlabeled_fraction: a.unlabeled_fraction,
    };
    let corpus = generate_synthetic(&spec, a.seed)?;
    create_dir(&a.out)?;
    corpus.save(a.out.join(CORPUS_FILE))?;
    corpus.taxonomy().save(a.out.join(TAXONOMY_FILE))?;
    eprintln!(
        "wrote {} claims (d = {}, {} categories) to {}",
        corpus.len(),
        corpus.dim(),
        spec.n_categories,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_pairs(a: &PairsArgs) -> Result<()> {
    let granularity: Granularity = a.granularity.parse()?;
    let corpus = a.data.load()?;
    let pool: Vec<usize> = (0..corpus.len()).collect();
    let dump = PairCache::build(&corpus, &pool, granularity, true).dump(&corpus);
    dump.save(&a.out)?;
    eprintln!("wrote pair sets of {} anchors to {}", dump.anchors.len(), a.out.display());
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.trials == 0 {
        return Err(Error::InvalidParam("--trials 0: nothing to check".into()));
    }
    let seed = match (a.seed, &a.config) {
        (Some(s), _) => s,
        (None, Some(p)) => TrainingConfig::load(p)?.seed,
        (None, None) => TrainingConfig::default().seed,
    };
    let fault = match a.inject_fault {
        Some(FaultArg::SignFlip) => Fault::SignFlip,
        None => Fault::None,
    };
    let results = gradcheck::run_trials(seed, a.trials, fault)?;
    eprintln!("{:>6} {:>20} {:>8} {:>8} {:>6}", "trial", "seed", "max_rel", "zero_dA", "meta");
    for (i, t) in results.iter().enumerate() {
        eprintln!(
            "{i:>6} {:>20} {:>8.1e} {:>8} {:>6} {}",
            t.seed,
            t.max_rel_error,
            t.structural_zero,
            t.meta_reproducible,
            if t.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = results
        .iter()
        .max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error))
        .expect("at least one trial");
    let failed = results.iter().filter(|t| !t.passed()).count();
    let worst_instance = gradcheck::Instance::random(worst.seed, false)?;
    if let Some(out) = &a.out {
        let doc = serde_json::json!({
            "tolerance": gradcheck::TOLERANCE,
            "fd_step": gradcheck::FD_STEP,
            "trials": results,
            "worst": worst_instance,
        });
        write(out, &(serde_json::to_string_pretty(&doc).expect("serializes") + "\n"))?;
    }
    if failed > 0 {
        eprintln!(
            "worst instance (replay with --seed {} --trials 1):\n{}",
            worst.seed,
            serde_json::to_string(&worst_instance).expect("serializes")
        );
        return Err(Error::Numerical(format!(
            "{failed} of {} gradient checks failed (worst relative error {:.3e})",
            results.len(),
            worst.max_rel_error
        )));
    }
    eprintln!(
        "all {} checks passed (worst relative error {:.3e})",
        results.len(),
        worst.max_rel_error
    );
    Ok(())
}

fn checkpoint_of(run: &FoldRun) -> Checkpoint {
    Checkpoint::new(run.adapter.clone(), Some(run.head.clone()), run.meta.clone())
}

fn save_run(out: &Path, name: &str, run: &FoldRun) -> Result<()> {
    checkpoint_of(run).save(out.join(format!("{name}.ckpt")))?;
    run.log.save(out.join(format!("{name}.runlog.jsonl")))?;
    write(
        &out.join(format!("{name}.score.json")),
        &(serde_json::to_string_pretty(&run.score).expect("serializes") + "\n"),
    )
}

/// Folds for `config` on `corpus`.
pub fn folds_for(config: &TrainingConfig, corpus: &Corpus) -> Result<Vec<FoldSplit>> {
    let fs = config.fold_spec;
    make_folds(corpus, fs.n_folds, fs.unseen_per_fold, fs.test_fraction, config.seed)
}

/// Trains every fold and aggregates the report.
pub fn train_all(
    config: &TrainingConfig,
    options: &TrainOptions,
    corpus: &Corpus,
    clustering: bool,
) -> Result<(Vec<FoldSplit>, Vec<FoldRun>, EvalReport)> {
    let folds = folds_for(config, corpus)?;
    let runs = trainer::run_folds(config, options, corpus, &folds, clustering)?;
    let report = eval::seen_unseen_report(runs.iter().map(|r| r.score.clone()).collect(), folds.len(), None)?;
    Ok((folds, runs, report))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = a.run.config()?;
    let options = a.run.options()?;
    let corpus = a.data.load()?;
    create_dir(&a.out)?;
    config.save(a.out.join("config.toml"))?;

    if a.full {
        let split = FoldSplit::full(&corpus, config.fold_spec.test_fraction, config.seed)?;
        FoldSplit::save_all(std::slice::from_ref(&split), a.out.join("folds.json"))?;
        let run = trainer::run_fold(&config, &options, &corpus, &split, a.run.clustering)?;
        save_run(&a.out, "full", &run)?;
        eprintln!("full split: test F1 {:.4}", run.score.seen_f1);
        return Ok(());
    }

    let folds = folds_for(&config, &corpus)?;
    FoldSplit::save_all(&folds, a.out.join("folds.json"))?;
    if let Some(k) = a.fold {
        let fold = folds
            .get(k)
            .ok_or_else(|| Error::Folds(format!("fold {k} out of range (0..{})", folds.len())))?;
        let run = trainer::run_fold(&config, &options, &corpus, fold, a.run.clustering)?;
        save_run(&a.out, &format!("fold{k}"), &run)?;
        eprintln!("fold {k}: seen F1 {:.4}, unseen F1 {:.4}", run.score.seen_f1, run.score.unseen_f1);
        return Ok(());
    }

    let runs = trainer::run_folds(&config, &options, &corpus, &folds, a.run.clustering)?;
    for (k, run) in runs.iter().enumerate() {
        save_run(&a.out, &format!("fold{k}"), run)?;
    }
    let report = eval::seen_unseen_report(runs.iter().map(|r| r.score.clone()).collect(), folds.len(), None)?;
    eval::emit_report(&report, a.out.join("report.json"))?;
    eprintln!(
        "{} folds: S avg {:.4}, US avg {:.4}, delta {:.4}",
        folds.len(),
        report.s_avg,
        report.us_avg,
        report.delta
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Error::InvalidParam(format!("threshold {} not in (0, 1)", a.threshold)));
    }
    let corpus = a.data.load()?;
    let folds = FoldSplit::load_all(&a.folds)?;
    if folds.is_empty() {
        return Err(Error::Folds("fold file lists no folds".into()));
    }
    let checkpoints = a.checkpoint.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    if checkpoints.len() != 1 && checkpoints.len() != folds.len() {
        return Err(Error::InvalidParam(format!(
            "{} checkpoints for {} folds (give one, or one per fold)",
            checkpoints.len(),
            folds.len()
        )));
    }
    let mut scores = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        let ck = &checkpoints[if checkpoints.len() == 1 { 0 } else { k }];
        ck.check_dim(corpus.dim())?;
        let head = ck
            .head
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no task head".into()))?;
        let seen = corpus.indices_of(&fold.seen_test_ids)?;
        let unseen = corpus.indices_of(&fold.unseen_test_ids)?;
        let clustering = if a.clustering {
            Some(trainer::adapted_clustering(
                &ck.adapter,
                &corpus,
                &corpus.indices_of(&fold.train_ids)?,
            )?)
        } else {
            None
        };
        scores.push(FoldScore {
            fold_id: fold.fold_id,
            seen_f1: trainer::score(&ck.adapter, head, &corpus, &seen, a.threshold)?,
            unseen_f1: if unseen.is_empty() {
                0.0
            } else {
                trainer::score(&ck.adapter, head, &corpus, &unseen, a.threshold)?
            },
            clustering,
        });
    }
    // a lone plain split is the "full dataset" column
    let plain = folds.len() == 1 && folds[0].unseen_categories.is_empty();
    let full_f1 = plain.then(|| scores[0].seen_f1);
    let report = eval::seen_unseen_report(scores, folds.len(), full_f1)?;
    eval::emit_report(&report, &a.out)?;
    if a.print_report {
        print!("{}", report.to_json());
    }
    eprintln!(
        "S avg {:.4}, US avg {:.4}, delta {:.4} -> {}",
        report.s_avg,
        report.us_avg,
        report.delta,
        a.out.display()
    );
    Ok(())
}

fn mean_silhouette(report: &EvalReport) -> Option<f64> {
    let s: Vec<f64> = report
        .folds
        .iter()
        .filter_map(|f| f.clustering.as_ref())
        .map(|c| c.silhouette)
        .collect();
    (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
}

pub fn cmd_grid(a: &GridArgs) -> Result<()> {
    let corpus = a.data.load()?;
    let options = TrainOptions {
        parallel: !a.sequential,
        ..TrainOptions::default()
    };
    let mut header: Option<String> = None;
    let mut lines = Vec::new();
    for path in &a.configs {
        let mut config = TrainingConfig::load(path)?;
        config.apply_overrides(&a.overrides)?;
        if let Some(seed) = a.seed {
            config.seed = seed;
        }
        config.validate()?;
        let (_, _, report) = train_all(&config, &options, &corpus, a.clustering)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let flags: Vec<&str> = config.flags.iter().map(|f| f.as_str()).collect();
        let this_header = format!("config,flags,{},silhouette", report.csv_header());
        match &header {
            None => header = Some(this_header),
            Some(h) if *h != this_header => {
                return Err(Error::Config(format!(
                    "{}: fold layout differs from the first configuration",
                    path.display()
                )));
            }
            Some(_) => {}
        }
        let sil = mean_silhouette(&report).map(|s| format!("{s:.4}")).unwrap_or_default();
        lines.push(format!("{name},{},{},{sil}", flags.join("+"), report.csv_row()));
        eprintln!("{name}: US avg {:.4}, S avg {:.4}", report.us_avg, report.s_avg);
    }
    let mut text = header.expect("at least one configuration") + "\n";
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    write(&a.out, &text)
}
