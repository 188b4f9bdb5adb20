//! Command-line entry point. `run` parses arguments, executes one
//! subcommand and maps the outcome to an exit code.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::baselines::{train_exp_lfm, train_lfm, ExpLfmConfig, LfmConfig};
use crate::corpus::{read_reviews, split_train_test, write_reviews_tsv, Corpus, CorpusConfig, RatingScale, RawReview};
use crate::diagnostics::{
    experience_tables, facet_preference_study, identify_experts, model_divergence, proxy_bin_study, salient_words,
    DivergenceKind, DivergenceMatrix,
};
use crate::error::{Error, Result};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{run_em, write_log_csv, TrainConfig, TrainedModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Seed fallback when `--seed` is absent; without either the seed is 0.
pub const SEED_ENV: &str = "XPREC_SEED";

#[derive(Debug, Parser)]
#[command(name = "xprec", version, about = "Experience-aware rating prediction from review text")]
struct Cli {
    /// Worker threads; 1 forces sequential execution. Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an indexed corpus and a train/validation/test split from raw reviews.
    Ingest(IngestArgs),
    /// Generate a synthetic review corpus with ground truth.
    Synth(SynthArgs),
    /// Train the joint model.
    Train(TrainArgs),
    /// Predict ratings for reviews with a trained model.
    Predict(PredictArgs),
    /// Mean squared error of a trained model on held-out reviews.
    Eval(EvalArgs),
    /// Train a latent factor baseline and report its held-out error.
    Baseline(BaselineArgs),
    /// Diagnostics over corpora and trained models.
    #[command(subcommand)]
    Diag(DiagCommand),
}

#[derive(Debug, Clone, Args, Serialize)]
struct CorpusArgs {
    /// Reviews as 5-column TSV or JSON lines (by extension).
    #[arg(long)]
    input: PathBuf,
    /// Users with fewer training reviews are merged into the background user.
    #[arg(long, default_value_t = 50)]
    min_user_reviews: usize,
    #[arg(long, default_value_t = 5)]
    min_word_count: u64,
    #[arg(long)]
    keep_stopwords: bool,
    #[arg(long, default_value_t = 1.0)]
    rating_min: f64,
    #[arg(long, default_value_t = 5.0)]
    rating_max: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SplitArgs {
    /// Most recent reviews per user withheld for testing.
    #[arg(long, default_value_t = 3)]
    test_k: usize,
    /// Fraction of each user's remaining reviews used for validation.
    #[arg(long, default_value_t = 0.1)]
    validation: f64,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    split_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON synth configuration; defaults to the planted configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    users: Option<usize>,
    /// Width of each level's vocabulary window.
    #[arg(long)]
    vocab_window: Option<usize>,
    /// Reviews TSV.
    #[arg(long)]
    out: PathBuf,
    /// Ground truth JSON.
    #[arg(long)]
    truth_out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experience levels.
    #[arg(long = "E", alias = "levels")]
    levels: Option<usize>,
    /// Facets.
    #[arg(long = "Z", alias = "facets")]
    facets: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    em_iterations: Option<usize>,
    #[arg(long)]
    burn_in_sweeps: Option<usize>,
    #[arg(long)]
    sweeps_per_em: Option<usize>,
    /// Comma-separated supervision strengths to select from on validation.
    #[arg(long, value_delimiter = ',')]
    rho: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV.
    #[arg(long)]
    log_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// TSV of user, item, prediction; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ignore review text and predict from the user's last level.
    #[arg(long)]
    no_text: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum BaselineKind {
    Lfm,
    ExpLfm,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, value_enum)]
    kind: BaselineKind,
    /// Experience levels for exp-lfm.
    #[arg(long = "E", alias = "levels", default_value_t = 5)]
    levels: usize,
    #[arg(long, default_value_t = 5)]
    rank: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Language,
    Facet,
}

#[derive(Debug, Subcommand)]
enum DiagCommand {
    /// Pairwise divergence between the levels of a trained model.
    ModelDivergence {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Highest-lift words of one facet at one level (both 1-based).
    SalientWords {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        facet: usize,
        #[arg(long, default_value_t = 15)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distribution of users over last levels and of reviews before advancing.
    ExperienceTables {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 50)]
        min_reviews: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Language model divergence between users binned by an external proxy.
    ProxyBins {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// TSV of user id and proxy score.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 5)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Facet preference divergence between users binned by an external proxy.
    FacetPreferences {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 5)]
        bins: usize,
        #[arg(long = "Z", alias = "facets", default_value_t = 20)]
        facets: usize,
        #[arg(long, default_value_t = 200)]
        sweeps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank users by experience against 0/1 ground truth (TSV of user id, label).
    Experts {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// 1-based level from which users count as experienced.
        #[arg(long)]
        threshold: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run the command line `argv` (program name first) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| execute(cli)));
    match outcome {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_internal() {
                EXIT_INTERNAL
            } else {
                EXIT_DATA
            }
        }
        Err(_) => {
            eprintln!("error: internal failure (panic)");
            EXIT_INTERNAL
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        // A second call in the same process keeps the first pool.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already configured");
        }
    }
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Diag(d) => diag(d),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::invalid(format!("input file {} does not exist", path.display())));
    }
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Error::invalid(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn log_config<T: Serialize>(name: &str, config: &T) -> Result<()> {
    info!("{name} config: {}", serde_json::to_string(config)?);
    Ok(())
}

fn load_reviews(args: &CorpusArgs) -> Result<(Vec<RawReview>, CorpusConfig)> {
    let scale = RatingScale::new(args.rating_min, args.rating_max)?;
    let parsed = read_reviews(&args.input, &scale)?;
    for w in parsed.warnings.iter().take(20) {
        log::warn!("{w}");
    }
    if parsed.malformed > 0 {
        log::warn!("{} malformed records skipped in {}", parsed.malformed, args.input.display());
    }
    let config = CorpusConfig {
        min_user_reviews: args.min_user_reviews,
        min_word_count: args.min_word_count,
        remove_stopwords: !args.keep_stopwords,
        scale,
    };
    Ok((parsed.reviews, config))
}

fn build_corpus(args: &CorpusArgs) -> Result<Corpus> {
    let (reviews, config) = load_reviews(args)?;
    log_config("corpus", &config)?;
    Corpus::build(&reviews, &config)
}

fn ingest(a: IngestArgs) -> Result<()> {
    require_file(&a.corpus.input)?;
    require_parent(&a.out)?;
    if let Some(p) = &a.split_out {
        require_parent(p)?;
    }
    log_config("split", &a.split)?;
    let corpus = build_corpus(&a.corpus)?;
    let split = split_train_test(&corpus, a.split.test_k, a.split.validation)?;
    corpus.save(&a.out)?;
    if let Some(p) = &a.split_out {
        split.save(p)?;
    }
    info!(
        "{} users, {} items, {} words, {} documents ({} train, {} validation, {} test)",
        corpus.num_users(),
        corpus.num_items(),
        corpus.vocab_size(),
        corpus.docs.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    require_parent(&a.out)?;
    require_parent(&a.truth_out)?;
    let seed = resolve_seed(a.seed)?;
    let mut config = match &a.config {
        Some(p) => {
            require_file(p)?;
            serde_json::from_reader(io::BufReader::new(File::open(p)?))?
        }
        None => SynthConfig::planted(seed),
    };
    if a.seed.is_some() || a.config.is_none() {
        config.seed = seed;
    }
    if let Some(u) = a.users {
        config.users = u;
    }
    if a.vocab_window.is_some() {
        config.vocab_window = a.vocab_window;
    }
    log_config("synth", &config)?;
    let s = generate(&config)?;
    write_reviews_tsv(File::create(&a.out)?, &s.reviews)?;
    s.truth.save(&a.truth_out)?;
    info!("{} reviews written to {}", s.reviews.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    require_file(&a.corpus.input)?;
    require_parent(&a.out)?;
    if let Some(p) = &a.log_out {
        require_parent(p)?;
    }
    let mut config: TrainConfig = match &a.config {
        Some(p) => {
            require_file(p)?;
            serde_json::from_reader(io::BufReader::new(File::open(p)?))?
        }
        None => TrainConfig::default(),
    };
    if a.seed.is_some() || a.config.is_none() {
        config.sampler.seed = resolve_seed(a.seed)?;
    }
    if let Some(e) = a.levels {
        config.sampler.levels = e;
    }
    if let Some(z) = a.facets {
        config.sampler.facets = z;
    }
    if let Some(n) = a.em_iterations {
        config.em_iterations = n;
    }
    if let Some(n) = a.burn_in_sweeps {
        config.burn_in_sweeps = n;
    }
    if let Some(n) = a.sweeps_per_em {
        config.sweeps_per_em = n;
    }
    if let Some(r) = a.rho {
        config.rho_grid = r;
    }
    config.validate()?;
    log_config("split", &a.split)?;
    log_config("train", &config)?;
    let corpus = build_corpus(&a.corpus)?;
    let split = split_train_test(&corpus, a.split.test_k, a.split.validation)?;
    let model = run_em(&corpus, &split, &config)?;
    model.save(&a.out)?;
    if let Some(p) = &a.log_out {
        write_log_csv(File::create(p)?, &model.log)?;
    }
    info!("selected rho {} (validation mse {:?})", model.rho, model.validation_mse);
    if !split.test.is_empty() {
        println!("test_mse={}", model.evaluate_mse(&corpus, &split.test)?);
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.input)?;
    if let Some(p) = &a.out {
        require_parent(p)?;
    }
    let model = TrainedModel::load(&a.model)?;
    let reviews = read_reviews(&a.input, &model.index.scale)?.reviews;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = BufWriter::new(sink);
    for r in &reviews {
        let text = (!a.no_text).then_some(r.text.as_str());
        writeln!(out, "{}\t{}\t{}", r.user_id, r.item_id, model.predict_rating(&r.user_id, &r.item_id, text)?)?;
    }
    out.flush()?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.test)?;
    let model = TrainedModel::load(&a.model)?;
    let reviews = read_reviews(&a.test, &model.index.scale)?.reviews;
    println!("mse={}", model.evaluate_reviews(&reviews)?);
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    require_file(&a.corpus.input)?;
    require_parent(&a.out)?;
    let lfm = LfmConfig {
        rank: a.rank,
        epochs: a.epochs,
        seed: resolve_seed(a.seed)?,
        ..LfmConfig::default()
    };
    log_config("split", &a.split)?;
    let corpus = build_corpus(&a.corpus)?;
    let split = split_train_test(&corpus, a.split.test_k, a.split.validation)?;
    let mut train_docs = split.train.clone();
    train_docs.extend(&split.validation);
    train_docs.sort_unstable();
    let scale = corpus.scale;
    let mse = |f: &dyn Fn(usize, usize) -> f64| -> Option<f64> {
        (!split.test.is_empty()).then(|| {
            split
                .test
                .iter()
                .map(|&id| {
                    let d = &corpus.docs[corpus.position_of(id).expect("split ids index the corpus")];
                    (d.rating - f(d.user, d.item)).powi(2)
                })
                .sum::<f64>()
                / split.test.len() as f64
        })
    };
    let test_mse = match a.kind {
        BaselineKind::Lfm => {
            log_config("lfm", &lfm)?;
            let m = train_lfm(&corpus, &train_docs, &lfm)?;
            m.save(&a.out)?;
            mse(&|u, i| m.predict(Some(u), Some(i), &scale))
        }
        BaselineKind::ExpLfm => {
            let config = ExpLfmConfig {
                levels: a.levels,
                lfm,
                ..ExpLfmConfig::default()
            };
            log_config("exp-lfm", &config)?;
            let m = train_exp_lfm(&corpus, &train_docs, &config)?;
            m.save(&a.out)?;
            mse(&|u, i| m.predict(Some(u), Some(i), &scale))
        }
    };
    if let Some(v) = test_mse {
        println!("test_mse={v}");
    }
    Ok(())
}

fn read_user_table(path: &Path) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(false)
        .from_path(path)?;
    reader
        .records()
        .map(|r| {
            let r = r?;
            if r.len() != 2 {
                return Err(Error::invalid(format!("{}: expected two columns", path.display())));
            }
            Ok((r[0].to_string(), r[1].to_string()))
        })
        .collect()
}

/// Proxy score per user of `corpus`; users missing from the table get none.
fn read_scores(path: &Path, corpus: &Corpus) -> Result<Vec<f64>> {
    let mut scores = vec![None; corpus.num_users()];
    for (user, value) in read_user_table(path)? {
        let v: f64 = value
            .parse()
            .map_err(|_| Error::invalid(format!("proxy score '{value}' for {user} is not a number")))?;
        if let Some(u) = corpus.user_index(&user) {
            scores[u] = Some(v);
        }
    }
    scores
        .into_iter()
        .enumerate()
        .map(|(u, s)| match s {
            Some(s) => Ok(s),
            None if Some(u) == corpus.background || corpus.user_doc_count(u) == 0 => Ok(0.0),
            None => Err(Error::invalid(format!("no proxy score for user {}", corpus.users[u]))),
        })
        .collect()
}

fn write_matrix(m: &DivergenceMatrix, out: &Path) -> Result<()> {
    m.write_csv(BufWriter::new(File::create(out)?))?;
    if !m.excluded.is_empty() {
        let one_based: Vec<usize> = m.excluded.iter().map(|e| e + 1).collect();
        log::warn!("levels without documents: {one_based:?}");
    }
    Ok(())
}

fn diag(d: DiagCommand) -> Result<()> {
    match d {
        DiagCommand::ModelDivergence { model, kind, out } => {
            require_file(&model)?;
            require_parent(&out)?;
            let kind = match kind {
                KindArg::Language => DivergenceKind::Language,
                KindArg::Facet => DivergenceKind::Facet,
            };
            let m = model_divergence(&TrainedModel::load(&model)?, kind)?;
            write_matrix(&m, &out)
        }
        DiagCommand::SalientWords {
            model,
            level,
            facet,
            k,
            out,
        } => {
            require_file(&model)?;
            require_parent(&out)?;
            if level == 0 || facet == 0 {
                return Err(Error::invalid("levels and facets are numbered from 1"));
            }
            let words = salient_words(&TrainedModel::load(&model)?, level - 1, facet - 1, k)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["rank", "word", "score"])?;
            for (i, (word, score)) in words.iter().enumerate() {
                w.write_record([(i + 1).to_string(), word.clone(), score.to_string()])?;
            }
            w.flush()?;
            Ok(())
        }
        DiagCommand::ExperienceTables { model, min_reviews, out } => {
            require_file(&model)?;
            require_parent(&out)?;
            let t = experience_tables(&TrainedModel::load(&model)?, min_reviews);
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["level", "user_share", "review_share"])?;
            for (e, (u, r)) in t.user_distribution.iter().zip(&t.review_proportions).enumerate() {
                w.write_record([(e + 1).to_string(), u.to_string(), r.to_string()])?;
            }
            w.flush()?;
            info!("{} qualifying users", t.qualifying_users);
            Ok(())
        }
        DiagCommand::ProxyBins {
            corpus,
            scores,
            bins,
            out,
        } => {
            require_file(&corpus.input)?;
            require_file(&scores)?;
            require_parent(&out)?;
            let c = build_corpus(&corpus)?;
            let (_, m) = proxy_bin_study(&c, &read_scores(&scores, &c)?, bins)?;
            write_matrix(&m, &out)
        }
        DiagCommand::FacetPreferences {
            corpus,
            scores,
            bins,
            facets,
            sweeps,
            seed,
            out,
        } => {
            require_file(&corpus.input)?;
            require_file(&scores)?;
            require_parent(&out)?;
            let seed = resolve_seed(seed)?;
            info!("facet preference study: Z={facets} sweeps={sweeps} seed={seed} bins={bins}");
            let c = build_corpus(&corpus)?;
            let scored = read_scores(&scores, &c)?;
            let eligible: Vec<Option<f64>> = scored
                .iter()
                .enumerate()
                .map(|(u, &s)| (Some(u) != c.background && c.user_doc_count(u) >= 2).then_some(s))
                .collect();
            let binned = crate::diagnostics::equal_frequency_bins(&eligible, bins)?;
            let m = facet_preference_study(&c, &binned, facets, sweeps, seed)?;
            write_matrix(&m, &out)
        }
        DiagCommand::Experts {
            model,
            truth,
            threshold,
            out,
        } => {
            require_file(&model)?;
            require_file(&truth)?;
            require_parent(&out)?;
            if threshold == 0 {
                return Err(Error::invalid("levels are numbered from 1"));
            }
            let model = TrainedModel::load(&model)?;
            let mut labels = vec![None; model.index.num_users()];
            for (user, value) in read_user_table(&truth)? {
                let label = match value.trim() {
                    "1" => true,
                    "0" => false,
                    other => return Err(Error::invalid(format!("label '{other}' for {user} is not 0 or 1"))),
                };
                if let Some(u) = model.index.user_index(&user) {
                    labels[u] = Some(label);
                }
            }
            let report = identify_experts(&model, &labels, threshold - 1)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["rank", "user", "last_level", "tenure", "relevant"])?;
            for (i, r) in report.ranking.iter().enumerate() {
                w.write_record([
                    (i + 1).to_string(),
                    model.index.users[r.user].clone(),
                    (r.last_level + 1).to_string(),
                    r.tenure.to_string(),
                    (r.relevant as u8).to_string(),
                ])?;
            }
            w.flush()?;
            println!("f1={} ndcg={}", report.f1, report.ndcg);
            Ok(())
        }
    }
}
