use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use vlseg::dataset::{DataConfig, Dataset, Split};
use vlseg::eval::{
    evaluate, prompt_stability, run_ablation, AblationSpec, NetPredictor, PromptSelection,
    StabilityConfig, Subset,
};
use vlseg::nn::{count_parameters, Checkpoint, NetworkConfig};
use vlseg::synth::SceneConfig;
use vlseg::text::EmbedMode;
use vlseg::train::{train, TrainConfig};
use vlseg::vocab::{validate_expansion, ConflictRecord, ExpandedVocabulary, LabelSchema};
use vlseg::{Error, Result};

/// Text-prompted volumetric segmentation on synthetic scenes.
#[derive(Parser)]
#[command(name = "vlseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write its manifest.
    GenData(GenDataArgs),
    /// Train a network and write checkpoints and the loss curve.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Per-variant Dice of every prompt phrasing and seeded typos.
    Stability(StabilityArgs),
    /// Train and compare fusion-stage / deep-supervision variants.
    Ablate(AblateArgs),
    /// Label-schema and vocabulary tools.
    #[command(subcommand)]
    Vocab(VocabCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Canonical,
    AllVariants,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lexicon,
    Hash,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetPreset {
    /// Four stages, channels 16/32/64/64, G = 8.
    Desk,
    /// Six stages, channels 32..320, G = 32.
    Full,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Data config (JSON or TOML); the desk preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cubic grid side; object sizes scale with it.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    embed_mode: Option<ModeArg>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args)]
struct NetworkArgs {
    /// Network config file (JSON or TOML). Overrides --preset.
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: NetPreset,
}

impl NetworkArgs {
    fn load(&self) -> Result<NetworkConfig> {
        let cfg = match &self.network {
            Some(p) => load_structured(p)?,
            None => match self.preset {
                NetPreset::Desk => NetworkConfig::desk(),
                NetPreset::Full => NetworkConfig::full_scale(),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainOverrides {
    /// Train config (TOML or JSON); the desk preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Cubic patch side.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_structured(p)?,
            None => TrainConfig::desk(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations_per_epoch = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.patch {
            cfg.patch_size = [v; 3];
        }
        if let Some(v) = self.lr {
            cfg.lr0 = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and loss_curve.tsv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    network: NetworkArgs,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "canonical")]
    prompts: SelectionArg,
    /// Probability threshold of the finest-scale sigmoid.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Writes rows.tsv and summary.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    typo_seed: u64,
    /// Restrict to these target keys (e.g. sphere@left); all when absent.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    /// Writes variants.tsv and spread.tsv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for per-run checkpoints and the comparison table.
    #[arg(long)]
    out: PathBuf,
    /// Full ablation spec (TOML or JSON). Overrides the options below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    network: NetworkArgs,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Subcommand)]
enum VocabCommand {
    /// Check an expanded vocabulary against its label schema.
    Validate {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Parse conflict-record documents.
    CheckConflicts {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_structured<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_str(&text)?),
        _ => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Outcome of a command that ran to completion: `false` means it finished
/// with reported failures.
type Outcome = Result<bool>;

fn gen_data(a: GenDataArgs) -> Outcome {
    let mut cfg: DataConfig = match &a.config {
        Some(p) => load_structured(p)?,
        None => DataConfig::desk(),
    };
    if let Some(n) = a.grid {
        cfg.scene = SceneConfig {
            qualifier_axes: cfg.scene.qualifier_axes.clone(),
            ..SceneConfig::desk_scaled(n)
        };
    }
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.n_val {
        cfg.n_val = v;
    }
    if let Some(v) = a.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(m) = a.embed_mode {
        cfg.embedder.mode = match m {
            ModeArg::Lexicon => EmbedMode::Lexicon,
            ModeArg::Hash => EmbedMode::Hash,
        };
    }
    if let Some(d) = a.embed_dim {
        cfg.embedder.dim = d;
    }
    let ds = Dataset::write(&cfg, &a.out)?;
    let violations = validate_expansion(&cfg.scene.label_schema(), &cfg.scene.vocabulary());
    for v in &violations {
        eprintln!("vocabulary: {} {}: {}", v.rule_id.id(), v.key, v.message);
    }
    println!(
        "wrote {} cases ({} train, {} val, {} test) to {}",
        ds.len(),
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        a.out.display()
    );
    Ok(violations.is_empty())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let ds = Dataset::open(&a.data)?;
    let net = a.network.load()?;
    let tc = a.train.load()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_text(&a.out.join("train_config.toml"), &tc.to_toml())?;
    write_text(&a.out.join("network.json"), &net.to_json())?;
    println!(
        "training {} parameters for {} steps",
        count_parameters(&net),
        tc.total_steps()
    );
    let outcome = train(&ds, &net, &tc, Some(&a.out))?;
    if let Some(p) = outcome.curve.last() {
        println!("final loss {:.5}", p.loss);
    }
    println!("checkpoint written to {}", a.out.join(vlseg::train::FINAL_CHECKPOINT).display());
    Ok(true)
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let ds = Dataset::open(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut predictor = NetPredictor::new(ck, ds.prompt_embedder()?)?;
    predictor.threshold = a.threshold;
    let selection = match a.prompts {
        SelectionArg::Canonical => PromptSelection::Canonical,
        SelectionArg::AllVariants => PromptSelection::AllVariants,
    };
    let report = evaluate(&mut predictor, &ds, a.split.into(), selection)?;
    for (name, s) in [
        ("all", Subset::All),
        ("positive", Subset::Positive),
        ("spatial", Subset::Spatial),
        ("negative", Subset::Negative),
    ] {
        if let Some(x) = report.summary(s) {
            println!(
                "{name:>8}: {} rows, mean dice {:.4}, hit@5% {:.4}, predicted fraction {:.5}",
                x.rows, x.mean_dice, x.hit_rate_5, x.mean_pred_fraction
            );
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("rows.tsv"), &report.to_tsv())?;
        write_text(
            &dir.join("summary.json"),
            &serde_json::to_string_pretty(&report.summary_json())?,
        )?;
    }
    for e in &report.errors {
        eprintln!("{}: {}", e.case_id, e.message);
    }
    Ok(report.errors.is_empty())
}

fn stability_cmd(a: StabilityArgs) -> Outcome {
    let ds = Dataset::open(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut predictor = NetPredictor::new(ck, ds.prompt_embedder()?)?;
    let cfg = StabilityConfig {
        split: a.split.into(),
        typo_seed: a.typo_seed,
        targets: a.targets,
    };
    let report = prompt_stability(&mut predictor, &ds, &cfg)?;
    print!("{}", report.spread_tsv());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("variants.tsv"), &report.to_tsv())?;
        write_text(&dir.join("spread.tsv"), &report.spread_tsv())?;
    }
    Ok(report.skipped.is_empty())
}

fn ablate_cmd(a: AblateArgs) -> Outcome {
    let ds = Dataset::open(&a.data)?;
    let spec = match &a.spec {
        Some(p) => load_structured(p)?,
        None => AblationSpec::standard(a.network.load()?, a.train.load()?, a.seeds.clone()),
    };
    let table = run_ablation(&ds, &spec, Some(&a.out))?;
    print!("{}", table.to_tsv());
    if let Some(o) = &table.ordering {
        println!(
            "ordering {} - {} on spatial prompts: {:+.4} (margin {:.2}): {}",
            o.better,
            o.worse,
            o.difference,
            o.margin,
            if o.holds { "holds" } else { "does not hold" }
        );
    }
    Ok(true)
}

fn vocab_cmd(c: VocabCommand) -> Outcome {
    match c {
        VocabCommand::Validate { schema, vocab } => {
            let schema = LabelSchema::parse(&read_text(&schema)?)?;
            let vocab = ExpandedVocabulary::parse(&read_text(&vocab)?)?;
            let violations = validate_expansion(&schema, &vocab);
            if violations.is_empty() {
                println!("ok");
            }
            for v in &violations {
                println!("{}\t{}\t{}", v.rule_id.id(), v.key, v.message);
            }
            Ok(violations.is_empty())
        }
        VocabCommand::CheckConflicts { files } => {
            let mut ok = true;
            for f in files {
                match read_text(&f).and_then(|t| ConflictRecord::parse(&t)) {
                    Ok(r) => println!(
                        "{}: ok (conflict: {}, severity: {:?})",
                        f.display(),
                        r.has_conflict,
                        r.conflict_severity
                    ),
                    Err(e) => {
                        ok = false;
                        println!("{}: {e}", f.display());
                    }
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Stability(a) => stability_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Vocab(c) => vocab_cmd(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
