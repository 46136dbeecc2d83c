use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use zsvqa::dataset::{
    build_splits, count_word_frequencies, load_dataset, select_heldout_words, split_statistics, DualMembership,
    Instance, ZeroShotSplits,
};
use zsvqa::eval::EvalReport;
use zsvqa::features::{ClassMode, ExemplarPooling, FeatureConfig, Stores};
use zsvqa::model::{model_grad_check, Checkpoint, GradCheckOptions, Interaction, MaskConfig};
use zsvqa::run::{evaluate_checkpoint, train_run, RunConfig};
use zsvqa::sweep::{run_sweep, SweepAxis, SweepSpec};
use zsvqa::synth;
use zsvqa::textproc::StemAlgorithm;
use zsvqa::training::{AdadeltaConfig, TrainConfig};

/// Zero-shot multiple-choice VQA: splits, training, evaluation and sweeps.
#[derive(Parser)]
#[command(name = "zsvqa", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build zero-shot splits from a dataset file.
    Split(SplitArgs),
    /// Per-split statistics of written splits.
    Stats(StatsArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
    /// One training and evaluation per value of a configuration axis.
    Sweep(SweepArgs),
    /// Write a generated dataset and image features.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Words seen fewer than this many times may be held out.
    #[arg(long, default_value_t = 20)]
    threshold: usize,
    /// Held-out val words; default half the eligible pool.
    #[arg(long, requires = "test_words")]
    val_words: Option<usize>,
    #[arg(long, requires = "val_words")]
    test_words: Option<usize>,
    #[arg(long, value_enum, default_value_t = Dual::Test)]
    dual_membership: Dual,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dual {
    Test,
    Val,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory written by `split`.
    #[arg(long)]
    splits: PathBuf,
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[arg(long)]
    text_out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    /// Image feature file.
    #[arg(long)]
    images: PathBuf,
    /// Detection file.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Exemplar feature file.
    #[arg(long)]
    exemplars: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(Vec<Instance>, ZeroShotSplits, Stores)> {
        let dataset = load_dataset(&self.dataset)?;
        let splits = ZeroShotSplits::read(&self.splits, &dataset)?;
        let stores = Stores::open(&self.images, self.detections.as_deref(), self.exemplars.as_deref())?;
        Ok((dataset, splits, stores))
    }
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value_t = 300)]
    embedding_dim: usize,
    /// GloVe-format vectors for the word tables.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    finetune_lr: f64,
    #[arg(long)]
    share_embeddings: bool,
    #[arg(long)]
    stem_question: bool,
    #[arg(long)]
    stem_answer: bool,
    #[arg(long, default_value = "porter")]
    stem_algorithm: StemAlgorithm,
    #[arg(long)]
    visual_question: bool,
    #[arg(long)]
    visual_answer: bool,
    #[arg(long, default_value_t = 1)]
    exemplar_k: usize,
    #[arg(long, value_enum, default_value_t = Pooling::Flat)]
    exemplar_pooling: Pooling,
    /// Add the detection bag of words to the image input.
    #[arg(long)]
    use_detections: bool,
    #[arg(long, default_value_t = 0.5)]
    detection_threshold: f64,
    #[arg(long, value_enum, default_value_t = Classes::Learned)]
    class_mode: Classes,
    #[arg(long, default_value_t = 300)]
    class_dim: usize,
    #[arg(long, default_value_t = 2048)]
    hidden: usize,
    #[arg(long, default_value_t = 2048)]
    hidden2: usize,
    #[arg(long, default_value = "multiplicative")]
    mode: Interaction,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0.0)]
    aug_ratio: f64,
    /// none, question, image or both.
    #[arg(long, default_value = "none")]
    mask: MaskConfig,
    #[arg(long, default_value_t = 0.95)]
    rho: f64,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    train_fraction: f64,
    /// Record wall-clock seconds per epoch in the history.
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pooling {
    Flat,
    PerWord,
}

#[derive(Clone, Copy, ValueEnum)]
enum Classes {
    Learned,
    Semantic,
}

impl ConfigArgs {
    fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            features: FeatureConfig {
                embedding_dim: self.embedding_dim,
                pretrained: self.pretrained.clone(),
                finetune_lr: self.finetune_lr,
                share_embeddings: self.share_embeddings,
                stem_question: self.stem_question,
                stem_answer: self.stem_answer,
                stem_algorithm: self.stem_algorithm,
                visual_question: self.visual_question,
                visual_answer: self.visual_answer,
                exemplar_k: self.exemplar_k,
                exemplar_pooling: match self.exemplar_pooling {
                    Pooling::Flat => ExemplarPooling::Flat,
                    Pooling::PerWord => ExemplarPooling::PerWord,
                },
                detections: self.use_detections,
                detection_threshold: self.detection_threshold,
                class_mode: match self.class_mode {
                    Classes::Learned => ClassMode::Learned,
                    Classes::Semantic => ClassMode::Semantic,
                },
                class_dim: self.class_dim,
            },
            hidden: self.hidden,
            hidden2: self.hidden2,
            interaction: self.mode,
            train: TrainConfig {
                batch_size: self.batch_size,
                max_epochs: self.max_epochs,
                patience: self.patience,
                aug_ratio: self.aug_ratio,
                mask: self.mask,
                seed,
                adadelta: AdadeltaConfig { rho: self.rho, epsilon: self.epsilon },
                train_fraction: self.train_fraction,
                record_time: self.timing,
            },
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Per-epoch records, one JSON object per line.
    #[arg(long)]
    history_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

fn pick(splits: &ZeroShotSplits, which: SplitName) -> &[Instance] {
    match which {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// JSON report.
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dims: usize,
    #[arg(long, default_value = "multiplicative")]
    mode: Interaction,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Fail when the worst relative error reaches this.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// embedding_dim, finetune_lr, stem_algorithm, exemplar_k,
    /// detection_threshold, aug_ratio, interaction_mode, mask_config or
    /// train_fraction.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Vector file per embedding_dim value, `{dim}` replaced.
    #[arg(long)]
    pretrained_template: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    eval_split: SplitName,
    #[arg(long)]
    csv_out: Option<PathBuf>,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Separable,
    Grounded,
    Zipf,
    Random,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Number of questions.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    image_dim: usize,
    /// Vocabulary size (zipf, random).
    #[arg(long, default_value_t = 3000)]
    vocab: usize,
    /// Distinct images (zipf).
    #[arg(long, default_value_t = 1500)]
    images: usize,
    /// Classes (grounded).
    #[arg(long, default_value_t = 8)]
    concepts: usize,
    /// Image noise scale (grounded).
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn split(a: SplitArgs, seed: u64) -> Result<serde_json::Value> {
    let dataset = load_dataset(&a.dataset)?;
    let counts = count_word_frequencies(&dataset);
    let sizes = a.val_words.zip(a.test_words);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (val_words, test_words) = select_heldout_words(&counts, a.threshold, sizes, &mut rng)?;
    let dual = match a.dual_membership {
        Dual::Test => DualMembership::Test,
        Dual::Val => DualMembership::Val,
    };
    let splits = build_splits(&dataset, &val_words, &test_words, dual)?;
    let files = splits.write(&a.out)?;
    Ok(json!({
        "command": "split",
        "seed": seed,
        "train": splits.train.len(),
        "val": splits.val.len(),
        "test": splits.test.len(),
        "dropped": splits.dropped.len(),
        "dual_membership": splits.dual_membership,
        "heldout_val": splits.heldout_val.len(),
        "heldout_test": splits.heldout_test.len(),
        "files": files,
    }))
}

fn stats(a: StatsArgs) -> Result<serde_json::Value> {
    let dataset = load_dataset(&a.dataset)?;
    let splits = ZeroShotSplits::read(&a.splits, &dataset)?;
    let s = split_statistics(&splits);
    let text = s.to_text();
    print!("{text}");
    if let Some(p) = &a.text_out {
        write_file(p, &text)?;
    }
    if let Some(p) = &a.json_out {
        write_file(p, &(serde_json::to_string_pretty(&s)? + "\n"))?;
    }
    Ok(json!({ "command": "stats", "statistics": s }))
}

fn train(a: TrainArgs, seed: u64) -> Result<serde_json::Value> {
    let (dataset, splits, stores) = a.data.load()?;
    let cfg = a.config.run_config(seed);
    let run = train_run(&cfg, &dataset, &splits, &stores)?;
    run.checkpoint.save(&a.checkpoint_out)?;
    if let Some(p) = &a.history_out {
        write_file(p, &run.outcome.history_jsonl())?;
    }
    Ok(json!({
        "command": "train",
        "seed": seed,
        "epochs": run.outcome.history.len(),
        "best_epoch": run.outcome.best_epoch,
        "best_val_accuracy": run.outcome.best_val_accuracy,
        "train_instances": run.outcome.train_instances,
        "tables": run.tables,
        "checkpoint": a.checkpoint_out,
        "history": a.history_out,
    }))
}

fn eval(a: EvalArgs, seed: u64) -> Result<serde_json::Value> {
    let (dataset, splits, stores) = a.data.load()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let report = evaluate_checkpoint(&ck, &dataset, &splits, pick(&splits, a.split), &stores, seed)?;
    if let Some(p) = &a.report_out {
        write_file(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if let Some(p) = &a.csv_out {
        write_file(p, &format!("{}\n{}\n", EvalReport::csv_header("checkpoint"), report.csv_row(&a.checkpoint.display().to_string())))?;
    }
    Ok(json!({ "command": "eval", "seed": seed, "report": report }))
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> Result<serde_json::Value> {
    let opts = GradCheckOptions { dims: a.dims, interaction: a.mode, seed, eps: a.eps, ..GradCheckOptions::default() };
    let r = model_grad_check(&opts)?;
    if !(r.max_relative_error < a.tolerance) {
        bail!(
            "max relative error {:.3e} >= {:.1e} at {}[{}] (analytic {}, numeric {})",
            r.max_relative_error,
            a.tolerance,
            r.worst_param,
            r.worst_index,
            r.worst_analytic,
            r.worst_numeric
        );
    }
    Ok(json!({
        "command": "gradcheck",
        "seed": seed,
        "mode": a.mode.as_str(),
        "dims": a.dims,
        "max_relative_error": r.max_relative_error,
        "entries_checked": r.entries_checked,
    }))
}

fn sweep(a: SweepArgs, seed: u64) -> Result<serde_json::Value> {
    let (dataset, splits, stores) = a.data.load()?;
    let spec = SweepSpec {
        axis: a.axis,
        values: a.values,
        base: a.config.run_config(seed),
        pretrained_template: a.pretrained_template,
    };
    let result = run_sweep(&spec, &dataset, &splits, pick(&splits, a.eval_split), &stores)?;
    if let Some(p) = &a.csv_out {
        write_file(p, &result.to_csv())?;
    }
    if let Some(p) = &a.json_out {
        write_file(p, &(serde_json::to_string_pretty(&result)? + "\n"))?;
    }
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    Ok(json!({ "command": "sweep", "seed": seed, "runs": result.rows.len(), "failed": failed, "result": result }))
}

fn synth_cmd(a: SynthArgs, seed: u64) -> Result<serde_json::Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = match a.kind {
        SynthKind::Separable => synth::separable(a.n, a.image_dim, &mut rng)?,
        SynthKind::Grounded => synth::grounded(a.n, a.concepts, a.image_dim, a.noise, &mut rng)?,
        SynthKind::Zipf => synth::zipf_corpus(a.n, a.vocab, a.images, a.image_dim, &mut rng)?,
        SynthKind::Random => synth::balanced_random(a.n, a.vocab, a.image_dim, &mut rng)?,
    };
    let files = data.write(&a.out)?;
    Ok(json!({ "command": "synth", "seed": seed, "records": data.records.len(), "images": data.images.len(), "files": files }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Split(a) => split(a, seed),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Sweep(a) => sweep(a, seed),
        Command::Synth(a) => synth_cmd(a, seed),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
