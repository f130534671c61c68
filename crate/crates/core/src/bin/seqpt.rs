use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqpt::checkpoint;
use seqpt::harness::{
    evaluate, finetune_stage, make_synthetic_task, prepare_data, pretrain_stage, run_experiment, ExperimentConfig,
    SyntheticConfig, Variant,
};
use seqpt::lstmcore::ClipTarget;
use seqpt::models::{Example, InputKind, LabelMode, ModelSpec, Objective, Params, RowObjective, RunOptions};
use seqpt::numkernel::{Matrix, RngState};
use seqpt::textpipe::{load_corpus, tokenize, CorpusFormat, Level, RawCorpus, Vocabulary, EOS};
use seqpt::train::{gradient_check, LrSchedule, TrainConfig};
use seqpt::{Error, Result};

#[derive(Parser)]
#[command(name = "seqpt", version, about = "LSTM pretraining (sequence autoencoder / language model) and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from corpus files and print corpus statistics.
    Preprocess(PreprocessArgs),
    /// Run the LM or SA pretraining stage of a config.
    Pretrain(StageArgs),
    /// Fine-tune a classifier (pretraining first when the variant needs it).
    Train(StageArgs),
    /// Test error of a fine-tuned checkpoint on a config's data.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every objective's gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Full pipeline for every configured variant, with reports.
    Experiment(ExperimentArgs),
    /// Write the synthetic long-range task as corpus files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Corpus files; labeled-tsv or plain-lines.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "labeled-tsv")]
    format: CorpusFormat,
    #[arg(long, default_value = "word")]
    level: Level,
    #[arg(long, default_value_t = 2)]
    min_count: usize,
    /// Where to write the vocabulary (JSON).
    #[arg(long, default_value = "vocab.json")]
    vocab_out: PathBuf,
}

/// Config file plus flag overrides shared by the pipeline commands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=0.5` or `--set data.synthetic.n_train=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    dropout: DropoutFlags,
}

/// Training flags. They apply to the fine-tuning config, or to the pretraining
/// config for `pretrain`.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    /// constant | plateau:FACTOR | step:EVERY:FACTOR
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    truncate_k: Option<usize>,
    #[arg(long)]
    cell_clip: Option<f64>,
    /// cell | hidden
    #[arg(long)]
    clip_target: Option<String>,
    #[arg(long)]
    grad_max_norm: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_delta: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct DropoutFlags {
    #[arg(long)]
    embed_dim_drop: Option<f64>,
    #[arg(long)]
    word_drop: Option<f64>,
    #[arg(long)]
    head_drop: Option<f64>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// none | lm | sa
    #[arg(long, default_value = "sa")]
    variant: Variant,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// test | valid
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// lm | sa | classify | linear_gain | joint | next_row_lm | row_autoencoder | all
    #[arg(long, default_value = "all")]
    objective: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    length: usize,
    /// Also write the text report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Only print the resolved config.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_valid: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    n_unlabeled: usize,
    #[arg(long, default_value_t = 8)]
    vocab: usize,
    #[arg(long, default_value_t = 12)]
    length: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

fn parse_schedule(s: &str) -> Result<LrSchedule> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |x: &str| -> Result<f64> { x.parse().map_err(|_| Error::Config(format!("bad number {x:?} in schedule"))) };
    match parts.as_slice() {
        ["constant"] => Ok(LrSchedule::Constant),
        ["plateau", f] => Ok(LrSchedule::Plateau { factor: num(f)? }),
        ["step", every, f] => Ok(LrSchedule::StepDecay {
            every: every.parse().map_err(|_| Error::Config(format!("bad step interval {every:?}")))?,
            factor: num(f)?,
        }),
        _ => Err(Error::Config(format!("schedule {s:?}: expected constant, plateau:F or step:N:F"))),
    }
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(s) = &self.schedule {
            t.schedule = parse_schedule(s)?;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.max_steps {
            t.max_steps = v;
        }
        if let Some(v) = self.truncate_k {
            t.truncate_k = v;
        }
        if let Some(v) = self.cell_clip {
            t.cell_clip = v;
        }
        if let Some(v) = &self.clip_target {
            t.clip_target = match v.as_str() {
                "cell" => ClipTarget::Cell,
                "hidden" => ClipTarget::Hidden,
                other => return Err(Error::Config(format!("clip target {other:?}: expected cell or hidden"))),
            };
        }
        if let Some(v) = self.grad_max_norm {
            t.grad_max_norm = v;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.min_delta {
            t.min_delta = v;
        }
        Ok(())
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {part} is not a table")))?;
    }
    Err(Error::Config("--set needs a key".into()))
}

fn parse_value(raw: &str) -> toml::Value {
    // anything that is not a TOML literal is taken as a string
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn load_config(args: &ConfigArgs, pretrain_flags: bool) -> Result<ExperimentConfig> {
    let mut table: toml::Table = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut cfg = ExperimentConfig::from_toml_str(&toml::to_string(&table).expect("table serializes"))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    args.train
        .apply(if pretrain_flags { &mut cfg.pretrain } else { &mut cfg.train })?;
    let d = &args.dropout;
    if d.embed_dim_drop.is_some() || d.word_drop.is_some() || d.head_drop.is_some() {
        let (_, mut drop) = cfg.model_spec()?;
        drop.embed_dim_drop = d.embed_dim_drop.unwrap_or(drop.embed_dim_drop);
        drop.word_drop = d.word_drop.unwrap_or(drop.word_drop);
        drop.head_drop = d.head_drop.unwrap_or(drop.head_drop);
        cfg.dropout = Some(drop);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let mut lists = Vec::new();
    let mut labeled = 0usize;
    for p in &a.inputs {
        match load_corpus(p, a.format, None)? {
            RawCorpus::Text(docs) => {
                labeled += docs.iter().filter(|d| d.label.is_some()).count();
                lists.extend(docs.iter().map(|d| tokenize(&d.text, a.level)));
            }
            RawCorpus::Rows(_) => return Err(Error::Config("row-matrix corpora have no vocabulary".into())),
        }
    }
    let vocab = Vocabulary::build(&lists, a.min_count, a.level)?;
    vocab.save(&a.vocab_out)?;
    let tokens: usize = lists.iter().map(Vec::len).sum();
    let unk: usize = lists
        .iter()
        .map(|l| vocab.encode(l).iter().filter(|&&id| id == seqpt::textpipe::UNK).count())
        .sum();
    println!("documents   {}", lists.len());
    println!("labeled     {labeled}");
    println!("tokens      {tokens}");
    println!("vocabulary  {} (incl. 3 specials)", vocab.len());
    println!("unk rate    {:.4}", if tokens == 0 { 0.0 } else { unk as f64 / tokens as f64 });
    println!("vocab hash  {}", vocab.hash());
    println!("wrote       {}", a.vocab_out.display());
    Ok(())
}

fn pretrain(a: &StageArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, true)?;
    let data = prepare_data(&cfg)?;
    let dir = output_dir(&cfg)?;
    let r = pretrain_stage(&cfg, &data, a.variant, &dir)?;
    println!(
        "{}: {} steps, best step {}, validation error {}{}",
        r.summary.stage,
        r.summary.steps_run,
        r.summary.best_step,
        r.summary.best_valid_error.map_or("-".into(), |e| format!("{e:.4}")),
        if r.reused { " (reused)" } else { "" }
    );
    println!("checkpoint: {}", dir.join(format!("{}.sqpt", r.summary.stage)).display());
    Ok(())
}

fn train(a: &StageArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, false)?;
    let data = prepare_data(&cfg)?;
    let dir = output_dir(&cfg)?;
    let pre = match a.variant {
        Variant::None => None,
        v => Some(pretrain_stage(&cfg, &data, v, &dir)?),
    };
    let r = finetune_stage(&cfg, &data, a.variant, pre.as_ref(), &dir)?;
    let test = evaluate(&r.params, &data.test, &cfg.train.lstm())?;
    println!(
        "{}: {} steps, best step {}, validation error {}, test error {test:.4}{}",
        r.summary.stage,
        r.summary.steps_run,
        r.summary.best_step,
        r.summary.best_valid_error.map_or("-".into(), |e| format!("{e:.4}")),
        if r.reused { " (reused)" } else { "" }
    );
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, false)?;
    let data = prepare_data(&cfg)?;
    let ck = checkpoint::load(&a.checkpoint)?;
    if let (Some(v), Some(h)) = (&data.vocab, &ck.meta.vocab_hash) {
        if v.hash() != *h {
            return Err(Error::Config(format!(
                "{} was trained with a different vocabulary",
                a.checkpoint.display()
            )));
        }
    }
    let split = match a.split.as_str() {
        "test" => &data.test,
        "valid" => &data.valid,
        other => return Err(Error::Config(format!("unknown split {other:?} (test, valid)"))),
    };
    let err = evaluate(&ck.params, split, &cfg.train.lstm())?;
    println!("{} error {err:.6} over {} documents", a.split, split.len());
    Ok(())
}

fn tiny_params(spec: &ModelSpec, objective: &Objective, seed: u64) -> Result<Params> {
    let mut p = Params::init(spec, objective.components(), &mut RngState::new(seed))?;
    // widen the default init so every path carries a usable signal
    let mut rng = RngState::new(seed).substream(1);
    for (_, t) in p.tensors_mut() {
        for v in t.data_mut() {
            *v += (rng.next_f64() - 0.5) * 0.6;
        }
    }
    if let Some(e) = p.stack.embedding.as_mut() {
        e.row_mut(0).fill(0.0);
    }
    Ok(p)
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let all = [
        "lm",
        "sa",
        "classify",
        "linear_gain",
        "joint",
        "next_row_lm",
        "row_autoencoder",
    ];
    let names: Vec<&str> = if a.objective == "all" { all.to_vec() } else { vec![a.objective.as_str()] };
    let len = a.length.clamp(2, 10);
    let mut rng = RngState::new(a.seed).substream(2);
    let mut text = Vec::new();
    let mut ok = true;
    for name in names {
        let (objective, real) = match name {
            "lm" => (Objective::Lm, false),
            "sa" => (Objective::Sa, false),
            "classify" => (Objective::Classify { mode: LabelMode::Last }, false),
            "linear_gain" => (Objective::Classify { mode: LabelMode::LinearGain }, false),
            "joint" => (Objective::Joint { lambda: 1.0 }, false),
            "next_row_lm" => (Objective::Rows { objective: RowObjective::NextRowLm }, true),
            "row_autoencoder" => (Objective::Rows { objective: RowObjective::RowAutoencoder }, true),
            other => return Err(Error::Config(format!("unknown objective {other:?}"))),
        };
        let classes = if objective.is_supervised() { 3 } else { 0 };
        let spec = ModelSpec {
            level: if real { InputKind::Real } else { InputKind::Word },
            vocab_size: if real { 0 } else { 7 },
            row_dim: if real { 3 } else { 0 },
            embed_dim: if real { 0 } else { 3 },
            layers: 1,
            hidden: 4,
            num_classes: classes,
            head_hidden: 0,
        };
        let examples: Vec<Example> = (0..2)
            .map(|i| {
                let label = (classes > 0).then_some(i % 3);
                if real {
                    Example::Rows { rows: Matrix::uniform(len, 3, 1.0, &mut rng), label }
                } else {
                    let mut ids: Vec<u32> = (0..len - 1).map(|_| 3 + rng.below(4) as u32).collect();
                    ids.push(EOS);
                    Example::Tokens { ids, label }
                }
            })
            .collect();
        let params = tiny_params(&spec, &objective, a.seed)?;
        let report = gradient_check(&params, &objective, &examples, &RunOptions::default())?;
        report.write_text(&mut text).map_err(|e| Error::Io { path: "<report>".into(), source: e })?;
        ok &= report.passed;
    }
    let text = String::from_utf8(text).expect("report is utf-8");
    print!("{text}");
    if let Some(p) = &a.report {
        fs::write(p, &text).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    Ok(ok)
}

fn experiment(a: &ExperimentArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, false)?;
    if a.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let report = run_experiment(&cfg)?;
    print!("{}", report.to_table());
    println!("reports in {}", cfg.resolved_output_dir().display());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let sc = SyntheticConfig {
        vocab: a.vocab,
        length: a.length,
        classes: a.classes,
        n_train: a.n_train,
        n_valid: a.n_valid,
        n_test: a.n_test,
        n_unlabeled: a.n_unlabeled,
    };
    let n = sc.n_train + sc.n_valid + sc.n_test + sc.n_unlabeled;
    let docs = make_synthetic_task(a.seed, n, sc.vocab, sc.length, sc.classes)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let write = |name: &str, lines: Vec<String>| -> Result<()> {
        let path = a.out.join(name);
        let mut body = lines.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(&path, body).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        println!("{} ({} documents)", path.display(), lines.len());
        Ok(())
    };
    let tsv = |d: &[seqpt::textpipe::RawDocument]| -> Vec<String> {
        d.iter().map(|x| format!("{}\t{}", x.label.unwrap_or(0), x.text)).collect()
    };
    let (train, rest) = docs.split_at(sc.n_train);
    let (valid, rest) = rest.split_at(sc.n_valid);
    let (test, unl) = rest.split_at(sc.n_test);
    write("train.tsv", tsv(train))?;
    write("valid.tsv", tsv(valid))?;
    write("test.tsv", tsv(test))?;
    if !unl.is_empty() {
        write("unlabeled.txt", unl.iter().map(|d| d.text.clone()).collect())?;
    }
    Ok(())
}

fn report_error(e: &Error) {
    eprintln!("error: {e}");
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        eprintln!("  caused by: {s}");
        src = s.source();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check FAILED");
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
        Command::Experiment(a) => experiment(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
