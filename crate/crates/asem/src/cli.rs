//! The `asem` command-line surface.
//!
//! Subcommands mirror the pipeline: `gen-data`, `pretrain`, `train`,
//! `extract`, `score`, `eer`, `fuse`, `probe`, `report`. Every command
//! validates its inputs before writing anything, is idempotent given
//! identical inputs and `--seed`, and echoes its effective configuration
//! into the output directory. Exit codes: 0 success, 1 usage error, 2
//! data/validation error, 3 numerical failure.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::GanKind;
use crate::network::ModelState;
use crate::synthdata::{self, Corpus};
use crate::trainer;
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "asem", version, about = "Adversarial speaker embeddings: train, score, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic domain-shifted corpus pair.
    GenData(GenDataArgs),
    /// Pretrain the embedding function and classifier on source data.
    Pretrain(PretrainArgs),
    /// Adversarial training of a pretrained model with a GAN variant.
    Train(TrainArgs),
    /// Extract unit-norm embeddings for every recording of a corpus.
    Extract(ExtractArgs),
    /// Score verification trials by cosine similarity.
    Score(ScoreArgs),
    /// Compute the equal error rate of a score file.
    Eer(EerArgs),
    /// Average several aligned score files (FuseGAN-style fusion).
    Fuse(FuseArgs),
    /// Domain probe: held-out domain-classification accuracy of embeddings.
    Probe(ProbeArgs),
    /// Summary table: EER per model and condition, plus probe accuracies.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ConfigOpts {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the relevant seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOpts {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Output directory (source.asec, target.asec, config.toml).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Source corpus file.
    #[arg(long)]
    source: PathBuf,
    /// Output directory (model.asem, history.txt, config.toml).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// GAN variant: sgan | lsgan | relgan | gradrev.
    #[arg(long)]
    variant: GanKind,
    /// Enable the auxiliary speaker classifier on the discriminator.
    #[arg(long)]
    aux: bool,
    /// Source corpus file.
    #[arg(long)]
    source: PathBuf,
    /// Target (adaptation) corpus file.
    #[arg(long)]
    target: PathBuf,
    /// Pretrained checkpoint; pretraining runs internally when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory (model.asem, history.txt, config.toml).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Corpus to embed.
    #[arg(long)]
    corpus: PathBuf,
    /// Output embedding file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Trial list file.
    #[arg(long)]
    trials: PathBuf,
    /// Embedding file covering every id in the trials.
    #[arg(long)]
    embeddings: PathBuf,
    /// Output score file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EerArgs {
    /// Score file.
    #[arg(long)]
    scores: PathBuf,
    /// Trial list the scores are aligned to.
    #[arg(long)]
    trials: PathBuf,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Score files to average (all aligned to the same trial list).
    #[arg(required = true)]
    scores: Vec<PathBuf>,
    /// Output score file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Embedding file of source-domain recordings.
    #[arg(long)]
    source_embeddings: PathBuf,
    /// Embedding file of target-domain recordings.
    #[arg(long)]
    target_embeddings: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Condition trial lists as NAME=FILE; repeat for several conditions.
    #[arg(long = "trials", value_name = "NAME=FILE", required = true)]
    trials: Vec<String>,
    /// Score files as NAME=FILE, one per model.
    #[arg(value_name = "NAME=FILE", required = true)]
    scores: Vec<String>,
    /// Probe embedding pairs as NAME=SRC_EMB,TGT_EMB (optional per model).
    #[arg(long = "probe", value_name = "NAME=SRC,TGT")]
    probes: Vec<String>,
    /// Output directory (report.txt, report.csv).
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Entry point used by the `asem` binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Pretrain(args) => pretrain_cmd(args),
        Command::Train(args) => train_cmd(args),
        Command::Extract(args) => extract_cmd(args),
        Command::Score(args) => score_cmd(args),
        Command::Eer(args) => eer_cmd(args),
        Command::Fuse(args) => fuse_cmd(args),
        Command::Probe(args) => probe_cmd(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn echo_config(config: &RunConfig, dir: &Path) -> Result<()> {
    config.save(&dir.join("config.toml"))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut config = args.config.load()?;
    if let Some(seed) = args.config.seed {
        config.synth.seed = seed;
    }
    let (source, target) = synthdata::generate(&config.synth)?;
    ensure_dir(&args.out_dir)?;
    echo_config(&config, &args.out_dir)?;
    source.write(&args.out_dir.join("source.asec"))?;
    target.write(&args.out_dir.join("target.asec"))?;
    println!(
        "wrote {} source and {} target recordings to {}",
        source.len(),
        target.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// Fill num_speakers from the corpus when the config leaves it at 0.
fn resolve_speakers(config: &mut RunConfig, corpus: &Corpus) -> Result<()> {
    let k = trainer::speaker_label_map(corpus).len();
    if config.network.num_speakers == 0 {
        config.network.num_speakers = k;
    } else if config.network.num_speakers != k {
        return Err(Error::invalid(
            "config",
            format!(
                "num_speakers is {} but the training corpus has {k} speakers",
                config.network.num_speakers
            ),
        ));
    }
    Ok(())
}

fn pretrain_cmd(args: PretrainArgs) -> Result<()> {
    let mut config = args.config.load()?;
    if let Some(seed) = args.config.seed {
        config.trainer.seed = seed;
    }
    // always build the aux head so every variant can train from this model
    config.network.aux_head = true;
    let source = Corpus::read(&args.source)?;
    resolve_speakers(&mut config, &source)?;
    let model = ModelState::init(config.network.clone(), config.trainer.seed)?;
    let (model, history) = trainer::pretrain(model, &source, &config.trainer)?;
    ensure_dir(&args.out_dir)?;
    echo_config(&config, &args.out_dir)?;
    model.save(&args.out_dir.join("model.asem"))?;
    history.write(&args.out_dir.join("history.txt"))?;
    let last_task = history.steps().last().map(|s| s.task);
    match last_task {
        Some(loss) => println!(
            "pretrained {} epochs ({} steps), final task loss {loss:.4}",
            config.trainer.pretrain_epochs,
            history.steps().count()
        ),
        None => println!("pretraining ran no steps"),
    }
    if history.aborted {
        println!("warning: pretraining aborted on a non-finite loss; kept last good checkpoint");
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut config = args.config.load()?;
    if let Some(seed) = args.config.seed {
        config.trainer.seed = seed;
    }
    config.trainer.variant.kind = args.variant;
    config.trainer.variant.aux = args.aux;

    let source = Corpus::read(&args.source)?;
    let target = Corpus::read(&args.target)?;
    let split = trainer::make_validation_split(&source, &target, &config.trainer)?;

    let model = match &args.model {
        Some(path) => {
            let model = ModelState::load(path)?;
            config.network = model.config.clone();
            resolve_speakers(&mut config, &split.train_source)?;
            model
        }
        None => {
            config.network.aux_head = true;
            resolve_speakers(&mut config, &split.train_source)?;
            let fresh = ModelState::init(config.network.clone(), config.trainer.seed)?;
            let (pretrained, _) = trainer::pretrain(fresh, &split.train_source, &config.trainer)?;
            pretrained
        }
    };

    let (best, history) = trainer::train(
        model,
        &split.train_source,
        &target,
        &split.validation,
        &config.trainer,
    )?;
    ensure_dir(&args.out_dir)?;
    echo_config(&config, &args.out_dir)?;
    best.save(&args.out_dir.join("model.asem"))?;
    history.write(&args.out_dir.join("history.txt"))?;
    println!(
        "trained variant {} for {} epochs; best validation EER {:.4}",
        config.trainer.variant.label(),
        history.epochs().count(),
        history.best_val_eer().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn extract_cmd(args: ExtractArgs) -> Result<()> {
    let model = ModelState::load(&args.model)?;
    let corpus = Corpus::read(&args.corpus)?;
    let table = eval::extract(&corpus, &model)?;
    table.write(&args.out)?;
    println!("wrote {} embeddings to {}", table.len(), args.out.display());
    Ok(())
}

fn score_cmd(args: ScoreArgs) -> Result<()> {
    let trials = eval::TrialList::read(&args.trials)?;
    let table = eval::EmbeddingTable::read(&args.embeddings)?;
    let scores = eval::score_trials(&trials, &table)?;
    scores.write(&args.out)?;
    println!("scored {} trials to {}", scores.len(), args.out.display());
    Ok(())
}

fn eer_cmd(args: EerArgs) -> Result<()> {
    let trials = eval::TrialList::read(&args.trials)?;
    let scores = eval::ScoreSet::read(&args.scores)?;
    let eer = eval::compute_eer(&scores, &trials)?;
    println!("{eer:.4}");
    Ok(())
}

fn fuse_cmd(args: FuseArgs) -> Result<()> {
    let sets: Vec<eval::ScoreSet> = args
        .scores
        .iter()
        .map(|p| eval::ScoreSet::read(p))
        .collect::<Result<_>>()?;
    let fused = eval::fuse(&sets)?;
    fused.write(&args.out)?;
    println!("fused {} score sets into {}", sets.len(), args.out.display());
    Ok(())
}

fn embeddings_as_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let table = eval::EmbeddingTable::read(path)?;
    Ok(table.iter().map(|(_, v)| v.clone()).collect())
}

fn probe_cmd(args: ProbeArgs) -> Result<()> {
    let source = embeddings_as_rows(&args.source_embeddings)?;
    let target = embeddings_as_rows(&args.target_embeddings)?;
    let cfg = eval::ProbeConfig {
        seed: args.seed,
        ..eval::ProbeConfig::default()
    };
    let acc = eval::domain_probe(&source, &target, &cfg)?;
    println!("{acc:.4}");
    Ok(())
}

fn parse_named(spec: &str, what: &str) -> Result<(String, String)> {
    spec.split_once('=')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| Error::invalid("report", format!("{what} must be NAME=..., got `{spec}`")))
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let mut conditions: Vec<(String, eval::TrialList)> = Vec::new();
    for spec in &args.trials {
        let (name, file) = parse_named(spec, "--trials")?;
        conditions.push((name, eval::TrialList::read(Path::new(&file))?));
    }
    let mut models: Vec<(String, eval::ScoreSet)> = Vec::new();
    for spec in &args.scores {
        let (name, file) = parse_named(spec, "score argument")?;
        models.push((name, eval::ScoreSet::read(Path::new(&file))?));
    }
    let mut probes: BTreeMap<String, f64> = BTreeMap::new();
    for spec in &args.probes {
        let (name, files) = parse_named(spec, "--probe")?;
        let (src, tgt) = files.split_once(',').ok_or_else(|| {
            Error::invalid("report", "--probe needs NAME=SRC_EMB,TGT_EMB")
        })?;
        let source = embeddings_as_rows(Path::new(src))?;
        let target = embeddings_as_rows(Path::new(tgt))?;
        let cfg = eval::ProbeConfig {
            seed: args.seed,
            ..eval::ProbeConfig::default()
        };
        probes.insert(name, eval::domain_probe(&source, &target, &cfg)?);
    }

    // per model, per condition: EER of the scores restricted to that condition
    let mut rows: Vec<(String, Vec<f64>, Option<f64>)> = Vec::new();
    for (model_name, scores) in &models {
        let by_pair: BTreeMap<(&str, &str), f64> = scores
            .scores
            .iter()
            .map(|s| ((s.enroll.as_str(), s.test.as_str()), s.score))
            .collect();
        let mut eers = Vec::new();
        for (cond_name, trials) in &conditions {
            let mut subset = Vec::with_capacity(trials.len());
            for t in &trials.trials {
                let score = by_pair
                    .get(&(t.enroll.as_str(), t.test.as_str()))
                    .ok_or_else(|| {
                        Error::invalid(
                            "report",
                            format!(
                                "model `{model_name}` has no score for trial ({}, {}) of condition `{cond_name}`",
                                t.enroll, t.test
                            ),
                        )
                    })?;
                subset.push(eval::TrialScore {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                    score: *score,
                });
            }
            let eer = eval::compute_eer(&eval::ScoreSet { scores: subset }, trials)?;
            eers.push(eer);
        }
        rows.push((model_name.clone(), eers, probes.get(model_name).copied()));
    }

    let mut text = String::new();
    text.push_str(&format!("{:<16} {:<10}", "model", "classifier"));
    for (cond, _) in &conditions {
        text.push_str(&format!(" {:>12}", format!("eer_{cond}")));
    }
    text.push_str(&format!(" {:>10}\n", "probe_acc"));
    let mut csv = String::from("model,classifier");
    for (cond, _) in &conditions {
        csv.push_str(&format!(",eer_{cond}"));
    }
    csv.push_str(",probe_acc\n");
    for (name, eers, probe) in &rows {
        text.push_str(&format!("{name:<16} {:<10}", "COSINE"));
        csv.push_str(&format!("{name},COSINE"));
        for eer in eers {
            text.push_str(&format!(" {eer:>12.4}"));
            csv.push_str(&format!(",{eer:.4}"));
        }
        match probe {
            Some(p) => {
                text.push_str(&format!(" {p:>10.4}\n"));
                csv.push_str(&format!(",{p:.4}\n"));
            }
            None => {
                text.push_str(&format!(" {:>10}\n", "-"));
                csv.push('\n');
            }
        }
    }

    ensure_dir(&args.out_dir)?;
    std::fs::write(args.out_dir.join("report.txt"), &text)
        .map_err(|e| Error::io("writing report.txt", e))?;
    std::fs::write(args.out_dir.join("report.csv"), &csv)
        .map_err(|e| Error::io("writing report.csv", e))?;
    print!("{text}");
    Ok(())
}
