use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mona_core::decoding::{corpus_wer, load_arpa, read_nbest_file, write_nbest_file, ArpaNGram, DecodeConfig, NBestList};
use mona_core::harness::{
    corpus_lm, decode_condition, eval_utterances, generate_corpus, read_csv, report, run_variant, spearman_columns,
    write_csv, Column, Condition, Corpus, ExperimentConfig, LmConfig, Split, SyntheticCorpusConfig, Variant,
};
use mona_core::lisa::{
    ensemble_candidates, export_finetune_dataset, rescore, score_results, write_jsonl, CandidateSet, ChatClient,
    EnsembleMode, FinetuneSplit, MockClient, PromptTemplate, PromptVariant, RequestConfig, RescorePolicy,
};
use mona_core::model::{load_checkpoint, save_checkpoint};
use mona_core::parallel::Strategy;

#[derive(Parser)]
#[command(name = "mona", version, about = "Cross-modal silent speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSON) and optionally its training-text LM.
    Generate(GenerateArgs),
    /// Train one loss variant for one seed.
    Train(TrainArgs),
    /// Beam-search a held-out split and write N-best lists.
    Decode(DecodeArgs),
    /// Rescore N-best lists with a chat model.
    Rescore(RescoreArgs),
    /// Export chat-format fine-tuning records from N-best lists.
    Export(ExportArgs),
    /// Summarise metrics CSVs from one or more runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with corpus settings; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write a back-off LM estimated from the training sentences.
    #[arg(long)]
    lm_out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    lm_order: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment TOML.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    variant: String,
    #[arg(long)]
    seed: u64,
    /// Corpus JSON; overrides the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run directory parent; the run writes `<out>/<run-id>/{metrics.csv,model.ckpt}`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = DecodeConfig::TRAINING_BEAM)]
    beam: usize,
    /// ARPA language model; decodes without one when absent.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    nbest_out: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    split: SplitArg,
    #[arg(long, default_value = "silent")]
    condition: String,
    /// Candidates kept per utterance.
    #[arg(long, default_value_t = 10)]
    nbest: usize,
    #[arg(long, default_value_t = 1.0)]
    lm_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    word_bonus: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClientArg {
    Mock,
    Live,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MockArg {
    Identity,
    Oracle,
}

#[derive(Args)]
struct CandidateArgs {
    /// N-best file(s); several files form an ensemble, matched by utterance id.
    #[arg(long, required = true, num_args = 1..)]
    nbest: Vec<PathBuf>,
    /// Beams per utterance for a single list, or per model for an ensemble.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Ensemble merge: `top1`, `round-robin` or `concatenate`.
    #[arg(long, default_value = "round-robin")]
    ensemble: String,
    #[arg(long, default_value = "direct")]
    template: String,
}

#[derive(Args)]
struct RescoreArgs {
    #[command(flatten)]
    candidates: CandidateArgs,
    #[arg(long, value_enum)]
    client: ClientArg,
    #[arg(long, value_enum, default_value = "identity")]
    mock: MockArg,
    /// Corpus JSON with reference transcripts (needed for WER and the oracle mock).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Rescoring results as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "gpt-3.5-turbo-16k-0613")]
    model: String,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value = "https://api.openai.com/v1/chat/completions")]
    url: String,
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    candidates: CandidateArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (containing metrics.csv) or CSV files.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Combined metrics CSV.
    #[arg(long)]
    csv: PathBuf,
    /// WER/CTC-vs-epoch series CSV.
    #[arg(long)]
    series: Option<PathBuf>,
    /// Two columns to correlate, e.g. `wer_silent,test_wer_silent`.
    #[arg(long)]
    spearman: Option<String>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Rescore(a) => rescore_cmd(a),
        Command::Export(a) => export(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Corpus::from_json(&text)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticCorpusConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticCorpusConfig::default(),
    };
    cfg.seed = a.seed;
    let corpus = generate_corpus(&cfg)?;
    create(&a.out)?.write_all(corpus.to_json()?.as_bytes())?;
    println!("wrote {} utterances to {}", corpus.utterances.len(), a.out.display());
    if let Some(lm_out) = &a.lm_out {
        let lm = corpus_lm(
            &corpus,
            &LmConfig {
                order: a.lm_order,
                ..Default::default()
            },
        )?;
        create(lm_out)?.write_all(lm.to_arpa().as_bytes())?;
        println!("wrote {}-gram LM to {}", a.lm_order, lm_out.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if a.corpus.is_some() {
        cfg.corpus_path = a.corpus;
    }
    let variant: Variant = a.variant.parse()?;
    let corpus = cfg.load_corpus()?;
    let lm = corpus_lm(&corpus, &cfg.lm)?;
    let run = run_variant(&cfg, &corpus, Some(&lm), variant, a.seed)?;
    let dir = a.out.join(&run.run_id);
    std::fs::create_dir_all(&dir)?;
    write_csv(&run.records, create(&dir.join("metrics.csv"))?)?;
    save_checkpoint(&run.params, &dir.join("model.ckpt"))?;
    if let Some(last) = run.records.last() {
        println!(
            "{} epoch {}: silent WER {:.3}, vocal WER {:.3}, audio WER {:.3}",
            run.run_id,
            last.epoch,
            last.wer_silent.unwrap_or(f64::NAN),
            last.wer_vocal.unwrap_or(f64::NAN),
            last.wer_audio.unwrap_or(f64::NAN)
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let corpus = load_corpus(&a.corpus)?;
    let lm: Option<ArpaNGram> = match &a.lm {
        Some(p) => Some(
            File::open(p)
                .map_err(anyhow::Error::from)
                .and_then(|f| Ok(load_arpa(BufReader::new(f))?))
                .with_context(|| format!("loading {}", p.display()))?,
        ),
        None => None,
    };
    let condition: Condition = a.condition.parse()?;
    let cfg = DecodeConfig {
        beam_width: a.beam,
        lm_weight: if lm.is_some() { a.lm_weight } else { 0.0 },
        word_bonus: a.word_bonus,
        ..Default::default()
    };
    let split = a.split.into();
    let lists = decode_condition(&params, &corpus, split, condition, lm.as_ref(), &cfg, a.nbest, Strategy::Parallel)?;
    create(&a.nbest_out)?.write_all(write_nbest_file(&lists).as_bytes())?;
    let refs: HashMap<&str, &str> = eval_utterances(&corpus, split, condition)
        .into_iter()
        .map(|u| (u.id.as_str(), u.text.as_str()))
        .collect();
    let w = corpus_wer(lists.iter().map(|(id, l)| (l.top().text.as_str(), refs[id.as_str()])))?;
    println!("{} utterances, top-1 WER {:.4}; wrote {}", lists.len(), w, a.nbest_out.display());
    Ok(())
}

fn candidate_sets(a: &CandidateArgs) -> Result<Vec<CandidateSet>> {
    let files = a
        .nbest
        .iter()
        .map(|p| {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(read_nbest_file(BufReader::new(f))?)
        })
        .collect::<Result<Vec<_>>>()?;
    if files.len() == 1 {
        return files
            .into_iter()
            .next()
            .expect("one file")
            .iter()
            .map(|(id, l)| Ok(CandidateSet::from_nbest(id.clone(), l, a.top)?))
            .collect();
    }
    let mode = match a.ensemble.as_str() {
        "top1" => EnsembleMode::TopOne,
        "round-robin" => EnsembleMode::RoundRobin(a.top),
        "concatenate" => EnsembleMode::Concatenate(a.top),
        other => bail!("unknown ensemble mode {other:?}"),
    };
    let maps: Vec<HashMap<String, NBestList>> = files.iter().map(|f| f.iter().cloned().collect()).collect();
    files[0]
        .iter()
        .map(|(id, _)| {
            let lists = maps
                .iter()
                .enumerate()
                .map(|(i, m)| m.get(id).cloned().with_context(|| format!("{id} missing from {}", a.nbest[i].display())))
                .collect::<Result<Vec<_>>>()?;
            Ok(ensemble_candidates(id.clone(), &lists, mode)?)
        })
        .collect()
}

fn references(corpus: &Corpus) -> HashMap<String, String> {
    corpus.utterances.iter().map(|u| (u.id.clone(), u.text.clone())).collect()
}

fn rescore_cmd(a: RescoreArgs) -> Result<()> {
    let sets = candidate_sets(&a.candidates)?;
    let variant: PromptVariant = a.candidates.template.parse()?;
    let template = PromptTemplate::new(variant);
    let refs = a.corpus.as_deref().map(load_corpus).transpose()?.map(|c| references(&c));
    let client: Box<dyn ChatClient> = match a.client {
        ClientArg::Mock => match a.mock {
            MockArg::Identity => Box::new(MockClient::Identity {
                template: template.clone(),
            }),
            MockArg::Oracle => Box::new(MockClient::Oracle {
                template: template.clone(),
                references: refs.clone().context("the oracle mock needs --corpus")?,
            }),
        },
        ClientArg::Live => live_client(&a)?,
    };
    let policy = RescorePolicy {
        max_in_flight: a.max_in_flight,
        request: RequestConfig {
            model: a.model.clone(),
            temperature: a.temperature,
            system: None,
        },
        ..Default::default()
    };
    let results = rescore(&sets, client.as_ref(), &template, &policy)?;
    if let Some(out) = &a.out {
        write_jsonl(&results, create(out)?)?;
    }
    let failed: HashSet<&str> = results.iter().filter(|r| r.error.is_some()).map(|r| r.id.as_str()).collect();
    for id in &failed {
        eprintln!("request failed for {id}");
    }
    match refs {
        Some(refs) => {
            let s = score_results(&sets, &results, &refs, policy.fallback)?;
            println!(
                "{} utterances ({} noncompliant): top-1 WER {:.4}, rescored WER {:.4} (excluding noncompliant {:.4})",
                s.total, s.noncompliant, s.top1, s.included, s.excluded
            );
        }
        None => println!("rescored {} utterances", results.len()),
    }
    Ok(())
}

#[cfg(feature = "live")]
fn live_client(a: &RescoreArgs) -> Result<Box<dyn ChatClient>> {
    Ok(Box::new(mona_core::lisa::LiveClient::from_env(
        &a.url,
        &a.api_key_env,
        std::time::Duration::from_secs(60),
    )?))
}

#[cfg(not(feature = "live"))]
fn live_client(_: &RescoreArgs) -> Result<Box<dyn ChatClient>> {
    bail!("this build has no live client; rebuild with the `live` feature")
}

fn export(a: ExportArgs) -> Result<()> {
    let sets = candidate_sets(&a.candidates)?;
    let template = PromptTemplate::new(a.candidates.template.parse()?);
    let refs = references(&load_corpus(&a.corpus)?);
    let rep = export_finetune_dataset(&sets, &refs, &template, FinetuneSplit { size: a.size, seed: a.seed })?;
    write_jsonl(&rep.records, create(&a.out)?)?;
    for (id, why) in &rep.skipped {
        eprintln!("skipped {id}: {why}");
    }
    println!(
        "exported {} records, held out {}, skipped {}",
        rep.records.len(),
        rep.held_out.len(),
        rep.skipped.len()
    );
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    for p in &a.runs {
        let file = if p.is_dir() { p.join("metrics.csv") } else { p.clone() };
        let f = File::open(&file).with_context(|| format!("opening {}", file.display()))?;
        records.extend(read_csv(BufReader::new(f)).with_context(|| format!("reading {}", file.display()))?);
    }
    let r = report(&records)?;
    print!("{}", r.table());
    write_csv(&records, create(&a.csv)?)?;
    if let Some(s) = &a.series {
        create(s)?.write_all(r.series_csv().as_bytes())?;
    }
    if let Some(spec) = &a.spearman {
        let (x, y) = spec.split_once(',').context("--spearman expects two comma-separated columns")?;
        let (cx, cy): (Column, Column) = (x.trim().parse()?, y.trim().parse()?);
        let (rho, p) = spearman_columns(&records, cx, cy)?;
        println!("spearman({x}, {y}) = {rho:.4} (p = {p:.4})");
    }
    Ok(())
}
