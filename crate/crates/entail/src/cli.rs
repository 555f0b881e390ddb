//! The `entail` command line.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, missing input paths),
//! 2 failure while running.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use entail_core::corpus::{gen_nli, gen_pairs, gen_sentiment, Dataset, Metric, TaskKind};
use entail_core::encoder::Model;
use entail_core::entailment::Template;
use entail_core::partition::{partition_parameters, PartitionMode};
use entail_core::serve::DeltaStore;
use entail_core::trainer::{
    evaluate, fold_examples, grid_search, intermediate_train, mean_std, format_mean_std, pretrain_mlm, sample_folds,
    train_fewshot, Checkpoint, FewShotOutcome, FewShotTask, FoldSpec, GridResult, GridSpace, Hyperparams, Report,
    TaskDelta,
};
use entail_core::vocab::PseudotokenRegistry;
use serde::Serialize;

use crate::artifact::{load_checkpoint, load_delta, save_checkpoint, save_delta};
use crate::data::{dataset_paths, load_dataset, load_template, save_dataset};
use crate::shared::{read_requests, results_jsonl, SharedStore};
use crate::{recipe, write_json, Error};

/// Default output directory when `--out` is not given.
pub const OUT_ENV: &str = "ENTAIL_OUT";
pub const CONFIG_ECHO: &str = "run_config.json";

#[derive(Parser, Debug)]
#[command(name = "entail", version, about = "Few-shot classification by entailment over a frozen encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic dataset as <task>.task.json and <task>.jsonl.
    GenData(GenDataArgs),
    /// Masked-LM pretraining of a fresh encoder into a base checkpoint.
    Pretrain(PretrainArgs),
    /// Full fine-tuning on entailment pairs.
    Intermediate(IntermediateArgs),
    /// k-shot training over several folds; one delta per fold plus a report.
    Fewshot(FewshotArgs),
    /// Hyperparameter search on a held-aside dev fold.
    Grid(GridArgs),
    /// Score saved deltas on a dataset's test split.
    Eval(EvalArgs),
    /// Batched inference over JSONL requests for any registered tasks.
    Infer(InferArgs),
    /// Parameter counts and trainable ratios of a checkpoint, or a delta summary.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct OutArg {
    /// Output directory [default: $ENTAIL_OUT, else ./entail-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl OutArg {
    pub fn resolve(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("entail-out"))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    Sentiment,
    Nli,
    Pairs,
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: SynthTask,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    #[arg(long, default_value_t = recipe::MLM_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug, Serialize)]
pub struct TaskArgs {
    /// Task spec JSON.
    #[arg(long)]
    pub task_spec: PathBuf,
    /// Examples JSONL; the last quarter is the test split.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct IntermediateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task spec JSON of an entailment dataset [default: generated]
    #[arg(long, requires = "data")]
    pub task_spec: Option<PathBuf>,
    #[arg(long, requires = "task_spec")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 14)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value = "efficient", value_parser = parse_mode)]
    pub mode: PartitionMode,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub grad_accum: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Train on both label descriptions.
    #[arg(long)]
    pub symmetric: bool,
    /// Template JSON [default: "it was great" or the plain pair format]
    #[arg(long)]
    pub template: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<PartitionMode, String> {
    s.parse().map_err(|e: entail_core::Error| e.to_string())
}

impl TrainArgs {
    fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct FewshotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Pseudotoken counts j+1; several values run a sweep.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub pseudotokens: Vec<usize>,
    /// Pick hyperparameters by grid search on an extra dev fold first.
    #[arg(long)]
    pub grid: bool,
    /// Train folds on separate threads.
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug, Serialize)]
pub struct GridArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    pub pseudotokens: usize,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Delta directories, one per fold.
    #[arg(long, num_args = 1.., required = true)]
    pub deltas: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Delta directories to register.
    #[arg(long, num_args = 1.., required = true)]
    pub deltas: Vec<PathBuf>,
    /// Requests JSONL: {id, task, s1, s2?} per line.
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub max_batch: usize,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    /// Checkpoint or delta directory.
    pub path: PathBuf,
    /// Pseudotoken count j+1 assumed for the efficient-mode ratio.
    #[arg(long, default_value_t = 5)]
    pub pseudotokens: usize,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<entail_core::Error> for Failure {
    fn from(e: entail_core::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

/// Parse `argv` (program name first) and run it.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nSee `entail --help`.");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn require(paths: &[&Path]) -> Outcome {
    for p in paths {
        if !p.exists() {
            return Err(Failure::Usage(format!("{} does not exist", p.display())));
        }
    }
    Ok(())
}

fn echo(dir: &Path, command: &Command) -> Outcome {
    write_json(&dir.join(CONFIG_ECHO), command)?;
    Ok(())
}

fn run(command: Command) -> Outcome {
    match &command {
        Command::GenData(a) => gen_data(a, &command),
        Command::Pretrain(a) => pretrain(a, &command),
        Command::Intermediate(a) => intermediate(a, &command),
        Command::Fewshot(a) => fewshot(a, &command),
        Command::Grid(a) => grid(a, &command),
        Command::Eval(a) => eval(a, &command),
        Command::Infer(a) => infer(a, &command),
        Command::Inspect(a) => inspect(a),
    }
}

fn gen_data(a: &GenDataArgs, command: &Command) -> Outcome {
    let data = match a.task {
        SynthTask::Sentiment => gen_sentiment(a.n, a.seed)?,
        SynthTask::Nli => gen_nli(a.n, a.seed)?,
        SynthTask::Pairs => gen_pairs(a.n, a.seed)?,
    };
    let out = a.out.resolve();
    save_dataset(&out, &data)?;
    echo(&out, command)?;
    let (spec, jsonl) = dataset_paths(&out, &data.spec.name);
    println!("wrote {} examples ({} test) to {} and {}", data.len(), data.n_test, jsonl.display(), spec.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs, command: &Command) -> Outcome {
    let vocab = recipe::vocabulary();
    let cfg = recipe::encoder_config(&vocab);
    let mut model = Model::<f32>::init(&cfg, a.seed)?;
    let corpus = recipe::mlm_corpus(&vocab, a.seed)?;
    let hp = Hyperparams { lr: a.lr, batch_size: a.batch_size, ..recipe::mlm_hyperparams(a.seed) };
    let outcome = pretrain_mlm(&mut model, &corpus, a.steps, &hp)?;
    let mut checkpoint = Checkpoint::new(model, vocab)?;
    checkpoint.record("pretrain", a.seed);
    let out = a.out.resolve();
    save_checkpoint(&checkpoint, &out)?;
    echo(&out, command)?;
    println!(
        "masked-LM loss {:.4} -> {:.4} over {} steps; checkpoint {}",
        outcome.initial_loss,
        outcome.final_loss,
        a.steps,
        &checkpoint.fingerprint()[..12]
    );
    Ok(())
}

fn intermediate(a: &IntermediateArgs, command: &Command) -> Outcome {
    require(&[&a.checkpoint])?;
    if let (Some(s), Some(d)) = (&a.task_spec, &a.data) {
        require(&[s, d])?;
    }
    let base = load_checkpoint(&a.checkpoint)?;
    let nli = match (&a.task_spec, &a.data) {
        (Some(s), Some(d)) => load_dataset(s, d)?,
        _ => gen_nli(recipe::NLI_SIZE, a.seed)?,
    };
    let hp = Hyperparams { lr: a.lr, batch_size: a.batch_size, epochs: a.epochs, ..recipe::nli_hyperparams(a.seed) };
    let outcome = intermediate_train(&base, &nli, &hp)?;
    let out = a.out.resolve();
    save_checkpoint(&outcome.checkpoint, &out)?;
    echo(&out, command)?;
    println!(
        "entailment test accuracy {:.1} after {} epochs; checkpoint {}",
        outcome.test_accuracy,
        outcome.epoch_losses.len(),
        &outcome.checkpoint.fingerprint()[..12]
    );
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    data: Dataset,
    template: Option<Template>,
}

fn load_inputs(checkpoint: &Path, task: &TaskArgs, template: Option<&Path>) -> Outcome<Loaded> {
    let mut paths = vec![checkpoint, task.task_spec.as_path(), task.data.as_path()];
    paths.extend(template);
    require(&paths)?;
    Ok(Loaded {
        checkpoint: load_checkpoint(checkpoint)?,
        data: load_dataset(&task.task_spec, &task.data)?,
        template: template.map(load_template).transpose()?,
    })
}

fn template_for(loaded: &Loaded, n_pseudotokens: usize) -> Outcome<Template> {
    Ok(match &loaded.template {
        Some(t) => Template { n_pseudotokens, ..t.clone() },
        None => recipe::default_template(&loaded.data.spec, n_pseudotokens)?,
    })
}

/// Train every fold, in order or on scoped threads; the results are the
/// same either way.
fn train_folds(
    checkpoint: &Checkpoint,
    task: FewShotTask<'_>,
    folds: &[FoldSpec],
    mode: PartitionMode,
    hp: &Hyperparams,
    symmetric: bool,
    parallel: bool,
) -> Outcome<Vec<FewShotOutcome>> {
    let results: Vec<entail_core::Result<FewShotOutcome>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = folds
                .iter()
                .map(|f| s.spawn(move || train_fewshot(checkpoint, task, f, mode, hp, symmetric)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
        })
    } else {
        folds.iter().map(|f| train_fewshot(checkpoint, task, f, mode, hp, symmetric)).collect()
    };
    Ok(results.into_iter().collect::<entail_core::Result<_>>()?)
}

#[derive(Serialize)]
struct SweepLine {
    n_pseudotokens: usize,
    summary: String,
    mean: f64,
    std: f64,
}

fn fewshot(a: &FewshotArgs, command: &Command) -> Outcome {
    let loaded = load_inputs(&a.checkpoint, &a.task, a.train.template.as_deref())?;
    if a.pseudotokens.is_empty() {
        return Err(Failure::Usage("--pseudotokens needs at least one value".into()));
    }
    let out = a.out.resolve();
    let sweep = a.pseudotokens.len() > 1;
    let mut lines = Vec::new();
    for &n in &a.pseudotokens {
        let dir = if sweep { out.join(format!("pseudotokens-{n}")) } else { out.clone() };
        let report = fewshot_setting(&loaded, a, n, &dir)?;
        println!("j+1 = {n}: {} {}", report.metric_name(), report.summary);
        lines.push(SweepLine { n_pseudotokens: n, summary: report.summary.clone(), mean: report.mean, std: report.std });
    }
    if sweep {
        write_json(&out.join("sweep.json"), &lines)?;
    }
    echo(&out, command)?;
    Ok(())
}

trait MetricName {
    fn metric_name(&self) -> &'static str;
}

impl MetricName for Report {
    fn metric_name(&self) -> &'static str {
        match self.metric {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
        }
    }
}

fn fewshot_setting(loaded: &Loaded, a: &FewshotArgs, n: usize, dir: &Path) -> Outcome<Report> {
    let template = template_for(loaded, n)?;
    let data = &loaded.data;
    let task = FewShotTask { spec: &data.spec, template: &template, pool: data.train() };
    let t = &a.train;
    let mut hp = t.hyperparams();
    let n_folds = if a.grid { t.folds + 1 } else { t.folds };
    let mut folds = sample_folds(data, t.k, n_folds, t.seed)?;
    if a.grid {
        let dev_fold = folds.pop().expect("one extra fold");
        let dev = fold_examples(data.train(), &dev_fold)?;
        let result = grid_search(&GridSpace::appendix(), &hp, &loaded.checkpoint, task, &folds, &dev, t.mode, t.symmetric)?;
        write_json(&dir.join("grid.json"), &result)?;
        hp = result.best;
    }
    let outcomes = train_folds(&loaded.checkpoint, task, &folds, t.mode, &hp, t.symmetric, a.parallel)?;
    let pairs: Vec<(&Model<f32>, &TaskDelta)> = outcomes
        .iter()
        .map(|o| (o.model.as_ref().unwrap_or(&loaded.checkpoint.model), &o.delta))
        .collect();
    let scores = evaluate(&pairs, &loaded.checkpoint.vocab, &data.spec, data.test())?;
    for (fold, o) in folds.iter().zip(&outcomes) {
        let fold_dir = dir.join(format!("fold-{}", fold.index));
        save_delta(&o.delta, &fold_dir.join("delta"))?;
        if let Some(model) = &o.model {
            let mut ck = Checkpoint::new(model.clone(), loaded.checkpoint.vocab.clone())?;
            ck.lineage = loaded.checkpoint.lineage.clone();
            ck.record("fewshot", fold.seed);
            save_checkpoint(&ck, &fold_dir.join("model"))?;
        }
    }
    let report = Report {
        task: data.spec.name.clone(),
        mode: t.mode,
        k: t.k,
        metric: data.spec.metric,
        n_pseudotokens: n,
        symmetric: t.symmetric,
        scores,
        mean: 0.0,
        std: 0.0,
        summary: String::new(),
        hyperparams: hp,
        seeds: folds.iter().map(|f| f.seed).collect(),
        lineage: loaded.checkpoint.lineage.clone(),
    }
    .finish();
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn grid(a: &GridArgs, command: &Command) -> Outcome {
    let loaded = load_inputs(&a.checkpoint, &a.task, a.train.template.as_deref())?;
    let template = template_for(&loaded, a.pseudotokens)?;
    let data = &loaded.data;
    let task = FewShotTask { spec: &data.spec, template: &template, pool: data.train() };
    let t = &a.train;
    let mut folds = sample_folds(data, t.k, t.folds + 1, t.seed)?;
    let dev_fold = folds.pop().expect("one extra fold");
    let dev = fold_examples(data.train(), &dev_fold)?;
    let result: GridResult =
        grid_search(&GridSpace::appendix(), &t.hyperparams(), &loaded.checkpoint, task, &folds, &dev, t.mode, t.symmetric)?;
    let out = a.out.resolve();
    write_json(&out.join("grid.json"), &result)?;
    echo(&out, command)?;
    for (hp, s) in &result.scores {
        println!("lr {:e} wd {} batch {} accum {}: {s:.1}", hp.lr, hp.weight_decay, hp.batch_size, hp.grad_accum);
    }
    let b = &result.best;
    println!("best: lr {:e} wd {} batch {} accum {}", b.lr, b.weight_decay, b.batch_size, b.grad_accum);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    task: String,
    metric: Metric,
    deltas: Vec<String>,
    scores: Vec<f64>,
    mean: f64,
    std: f64,
    summary: String,
}

fn eval(a: &EvalArgs, command: &Command) -> Outcome {
    let mut paths: Vec<&Path> = vec![&a.checkpoint, &a.task.task_spec, &a.task.data];
    paths.extend(a.deltas.iter().map(PathBuf::as_path));
    require(&paths)?;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.task.task_spec, &a.task.data)?;
    let deltas = a.deltas.iter().map(|d| load_delta(d)).collect::<crate::Result<Vec<_>>>()?;
    let pairs: Vec<(&Model<f32>, &TaskDelta)> = deltas.iter().map(|d| (&checkpoint.model, d)).collect();
    let scores = evaluate(&pairs, &checkpoint.vocab, &data.spec, data.test())?;
    let (mean, std) = mean_std(&scores);
    let report = EvalReport {
        task: data.spec.name.clone(),
        metric: data.spec.metric,
        deltas: a.deltas.iter().map(|p| p.display().to_string()).collect(),
        scores,
        mean,
        std,
        summary: format_mean_std(mean, std),
    };
    let out = a.out.resolve();
    write_json(&out.join("eval.json"), &report)?;
    echo(&out, command)?;
    println!("{}: {}", report.task, report.summary);
    Ok(())
}

fn infer(a: &InferArgs, command: &Command) -> Outcome {
    let mut paths: Vec<&Path> = vec![&a.checkpoint, &a.batch];
    paths.extend(a.deltas.iter().map(PathBuf::as_path));
    require(&paths)?;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let store = SharedStore::new(DeltaStore::new(&checkpoint.model));
    for d in &a.deltas {
        store.register(load_delta(d)?, false)?;
    }
    let requests = read_requests(&a.batch)?;
    let mut results = store.infer(&checkpoint.model, &checkpoint.vocab, &requests, a.max_batch)?;
    results.sort_by_key(|r| r.id);
    let out = a.out.resolve();
    std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
    let path = out.join("results.jsonl");
    std::fs::write(&path, results_jsonl(&results)).map_err(|source| Error::Io { path: path.clone(), source })?;
    echo(&out, command)?;
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    println!("{} results ({failed} failed) written to {}", results.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct ModeCount {
    mode: PartitionMode,
    trainable: usize,
    total: usize,
    ratio: String,
}

#[derive(Serialize)]
struct GroupCount {
    group: String,
    parameters: usize,
}

#[derive(Serialize)]
struct CheckpointSummary {
    fingerprint: String,
    lineage: Vec<entail_core::trainer::LineageEntry>,
    parameters: usize,
    groups: Vec<GroupCount>,
    pseudotokens: usize,
    modes: Vec<ModeCount>,
}

#[derive(Serialize)]
struct DeltaSummary {
    task: String,
    mode: PartitionMode,
    kind: TaskKind,
    n_classes: usize,
    pseudotoken_rows: usize,
    parameters: usize,
    fingerprint: String,
}

fn inspect(a: &InspectArgs) -> Outcome {
    require(&[&a.path])?;
    let manifest: crate::artifact::Manifest = crate::read_json(&a.path.join(crate::artifact::MANIFEST))?;
    let text = match manifest.contents {
        crate::artifact::Contents::Delta { .. } => {
            let d = load_delta(&a.path)?;
            crate::to_json(&DeltaSummary {
                task: d.task.clone(),
                mode: d.mode,
                kind: d.kind,
                n_classes: d.n_classes,
                pseudotoken_rows: d.registry.len(),
                parameters: d.parameter_count(),
                fingerprint: d.fingerprint.clone(),
            })
        }
        crate::artifact::Contents::Checkpoint { .. } => {
            let ck = load_checkpoint(&a.path)?;
            let model = &ck.model;
            let mut groups: Vec<GroupCount> = Vec::new();
            for (info, p) in model.infos().iter().zip(model.params()) {
                let name = format!("{:?}", info.group);
                match groups.iter_mut().find(|g| g.group == name) {
                    Some(g) => g.parameters += p.len(),
                    None => groups.push(GroupCount { group: name, parameters: p.len() }),
                }
            }
            let template = Template::single("it was", "great", a.pseudotokens)
                .with_class_descriptions(&["terrible", "great"]);
            let cfg = model.config();
            let mut registry = PseudotokenRegistry::new(cfg.vocab_size, cfg.d_model);
            template.register(&mut registry, 0, &ck.vocab, model.param(model.layout().vocab_embedding))?;
            let modes = [PartitionMode::Full, PartitionMode::Efficient, PartitionMode::HeadOnly]
                .into_iter()
                .map(|mode| {
                    let r = partition_parameters(model, mode, &registry)?.ratio();
                    Ok(ModeCount { mode, trainable: r.trainable, total: r.total, ratio: r.to_string() })
                })
                .collect::<entail_core::Result<Vec<_>>>()?;
            crate::to_json(&CheckpointSummary {
                fingerprint: ck.fingerprint(),
                lineage: ck.lineage.clone(),
                parameters: model.parameter_count(),
                groups,
                pseudotokens: registry.len(),
                modes,
            })
        }
    };
    print!("{text}");
    Ok(())
}
