use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use poslab::corpus::{load_corpus, modulate_position, serialize_corpus, AttributeKind, Document};
use poslab::evaluation::{evaluate, perplexity_csv, pooled_perplexity, PerplexityMode};
use poslab::experiments::{
    emit_plot, prepare_corpus, sweep_answer_position, sweep_noise_ratio, ExperimentSpec, PlotKind, Sweep, SweepAxis,
};
use poslab::text::Vocab;
use poslab::training::{train, write_log, Checkpoint, TrainPools};

#[derive(Parser)]
#[command(name = "poslab", version, about = "Positional-bias laboratory on synthetic biographies")]
struct Cli {
    /// Output directory; every other path is resolved against it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Experiment spec as JSON; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    persons: Option<usize>,
    /// Held-out validation persons.
    #[arg(long, global = true)]
    n_val: Option<usize>,
    /// Held-out test persons.
    #[arg(long, global = true)]
    n_test: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    d_model: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    /// Comma-separated training seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated recipes, e.g. `ar,d-ar,d-ar+shuffle`.
    #[arg(long, global = true, value_delimiter = ',')]
    recipes: Option<Vec<String>>,
    /// Corruption ratio used by the D-AR recipe.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// Load this corpus JSON instead of generating one.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    skip_checkpoints: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate profiles, documents and QA splits; writes corpus.json and vocab.json.
    GenCorpus,
    /// Train one model; writes checkpoint.json and train_log.csv.
    Train {
        /// Position of the first sentence in every training document.
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Evaluate a checkpoint on the test split; writes report.csv and perplexity.csv.
    Eval {
        #[arg(long, default_value = "checkpoint.json")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Train and evaluate one model per answer position.
    SweepPosition {
        /// Comma-separated positions; defaults to 1..=9.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Train and evaluate one model per corruption ratio.
    SweepNoise {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Render a series CSV as SVG next to it.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// position, noise or perplexity.
        #[arg(long)]
        kind: String,
    },
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let mut spec = match &cli.config {
        Some(p) => ExperimentSpec::from_file(&resolve(&cli.out, p))?,
        None => ExperimentSpec::default(),
    };
    let o = &cli.overrides;
    if let Some(n) = o.persons {
        spec.corpus.n_persons = n;
    }
    if let Some(n) = o.n_val {
        spec.corpus.n_val = n;
    }
    if let Some(n) = o.n_test {
        spec.corpus.n_test = n;
    }
    if let Some(s) = o.steps {
        spec.train.total_steps = s;
    }
    if let Some(b) = o.batch_size {
        spec.train.batch_size = b;
    }
    if let Some(lr) = o.lr {
        spec.train.lr0 = lr;
    }
    if let Some(d) = o.d_model {
        spec.model.d_model = d;
        spec.model.d_ff = 4 * d;
    }
    if let Some(l) = o.layers {
        spec.model.n_layers = l;
    }
    if let Some(s) = &o.seeds {
        spec.seeds = s.clone();
    }
    if let Some(r) = &o.recipes {
        spec.recipes = r.clone();
    }
    if let Some(r) = o.ratio {
        spec.train.corruption_ratio = r;
    }
    if let Some(c) = &o.corpus {
        spec.corpus.corpus_file = Some(c.clone());
    }
    spec.skip_checkpoints |= o.skip_checkpoints;
    spec.validate()?;
    Ok(spec)
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

/// The single training config selected by the spec's first recipe and seed.
fn single_train(spec: &ExperimentSpec) -> Result<poslab::training::TrainConfig> {
    let mut t = spec.train.clone();
    if let Some(r) = spec.recipes.first() {
        t = t.with_recipe(r)?;
    }
    if let Some(&s) = spec.seeds.first() {
        t.seed = s;
    }
    Ok(t)
}

fn modulated(docs: &[Document], k: usize, sets: &[u32]) -> Result<Vec<Document>> {
    docs.iter()
        .filter(|d| sets.contains(&d.template_set))
        .map(|d| Ok(modulate_position(d, k)?))
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::GenCorpus => {
            let spec = load_spec(cli)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let split = prepare_corpus(&spec.corpus, out).context("corpus generation failed")?;
            serialize_corpus(&split, &out.join("corpus.json"))?;
            split.build_vocab().save(&out.join("vocab.json"))?;
            println!(
                "{} persons, {} documents, {} train / {} val / {} test questions",
                split.n_persons(),
                split.documents.len(),
                split.qa_train.len(),
                split.qa_val.len(),
                split.qa_test.len()
            );
        }
        Command::Train { k } => {
            let spec = load_spec(cli)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let split = prepare_corpus(&spec.corpus, out).context("corpus stage failed")?;
            serialize_corpus(&split, &out.join("corpus.json"))?;
            let vocab = split.build_vocab();
            vocab.save(&out.join("vocab.json"))?;
            let cfg = single_train(&spec)?;
            let docs = modulated(&split.documents, *k, &cfg.template_set_ids).context("modulate stage failed")?;
            let pools = TrainPools {
                documents: docs.iter().collect(),
                qa: split.qa_train.iter().collect(),
            };
            let run = train(&pools, &vocab, &spec.model, &cfg).context("train stage failed")?;
            write_log(&run.log, &out.join("train_log.csv"))?;
            run.checkpoint.save(&out.join("checkpoint.json"))?;
            println!("{} trained for {} steps, checkpoint sha256 {}", cfg.recipe_name(), run.checkpoint.step, run.checkpoint.hash()?);
        }
        Command::Eval { checkpoint, k } => {
            let spec = load_spec(cli)?;
            let corpus_path = resolve(out, spec.corpus.corpus_file.as_deref().unwrap_or(Path::new("corpus.json")));
            let split = load_corpus(&corpus_path).context("corpus stage failed")?;
            let vocab = Vocab::load(&out.join("vocab.json")).unwrap_or_else(|_| split.build_vocab());
            let ckpt = Checkpoint::load(&resolve(out, checkpoint)).context("checkpoint load failed")?;
            if ckpt.params.config.vocab_size != vocab.len() {
                bail!("checkpoint vocabulary size {} differs from corpus vocabulary {}", ckpt.params.config.vocab_size, vocab.len());
            }
            let sets = single_train(&spec)?.template_set_ids;
            let docs = modulated(&split.documents, *k, &sets)?;
            let test: std::collections::HashSet<&str> = split.test_profiles.iter().map(|p| p.person_name.as_str()).collect();
            let test_docs: Vec<Document> = docs
                .iter()
                .filter(|d| test.contains(d.title.as_str()) && d.template_set == sets[0])
                .cloned()
                .collect();
            let qa: Vec<_> = split
                .qa_test
                .iter()
                .map(|q| {
                    let pos = test_docs
                        .iter()
                        .find(|d| d.title == q.person_name)
                        .and_then(|d| d.position_of(q.attribute_kind))
                        .map_or(q.source_sentence_index, |p| p + 1);
                    poslab::corpus::QaPair {
                        source_sentence_index: pos,
                        ..q.clone()
                    }
                })
                .collect();
            let report = evaluate(&ckpt.params, &vocab, &qa, spec.eval.groups, &spec.eval.decode).context("evaluate stage failed")?;
            report.write_csv(&out.join("report.csv"))?;
            let mut ppl = vec![];
            for mode in [PerplexityMode::InContext, PerplexityMode::TitleOnly] {
                ppl.push(pooled_perplexity(&ckpt.params, &vocab, &test_docs, AttributeKind::Birthday, mode)?);
            }
            std::fs::write(out.join("perplexity.csv"), perplexity_csv(&ppl))?;
            println!("macro EM {:.2}, macro F1 {:.2} over {} questions", report.macro_em, report.macro_f1, report.total());
        }
        Command::SweepPosition { values } => {
            let mut spec = load_spec(cli)?;
            if let Some(v) = values {
                spec.sweep = Some(Sweep {
                    axis: SweepAxis::AnswerPosition,
                    values: v.clone(),
                });
            }
            let res = sweep_answer_position(&spec, out)?;
            emit_plot(&out.join("position_series.csv"), PlotKind::Position)?;
            emit_plot(&out.join("perplexity_series.csv"), PlotKind::Perplexity)?;
            println!("{} runs, spec sha256 {}", res.runs.len(), res.spec_hash);
        }
        Command::SweepNoise { values } => {
            let mut spec = load_spec(cli)?;
            if let Some(v) = values {
                spec.sweep = Some(Sweep {
                    axis: SweepAxis::CorruptionRatio,
                    values: v.clone(),
                });
            }
            if spec.recipes.is_empty() {
                spec.recipes = vec!["d-ar".into()];
            }
            let res = sweep_noise_ratio(&spec, out)?;
            emit_plot(&out.join("noise_series.csv"), PlotKind::Noise)?;
            println!("{} runs, spec sha256 {}", res.runs.len(), res.spec_hash);
        }
        Command::Plot { csv, kind } => {
            let svg = emit_plot(&resolve(out, csv), PlotKind::parse(kind)?)?;
            println!("{}", svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source text; skip repeats.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
