//! Experiment specs, sweep protocols and their CSV/SVG artifacts.

mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_profiles, load_corpus, modulate_position, serialize_corpus, split_corpus_with, AttributeKind,
    AttributePools, CorpusSplit, Document, QaPair, N_ATTRIBUTES,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, perplexity_csv, pooled_perplexity, DecodeOptions, MetricsReport, PerplexityMode, PerplexityRecord};
use crate::model::ModelConfig;
use crate::text::Vocab;
use crate::training::{sha256_hex, train, write_log, TrainConfig, TrainPools};

pub use plot::{emit_plot, render_svg, PlotKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub n_persons: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub profile_seed: u64,
    pub split_seed: u64,
    pub template_sets: Vec<u32>,
    /// JSON object of user value pools, relative to the output directory.
    pub pools_file: Option<PathBuf>,
    /// Load this corpus instead of generating one.
    pub corpus_file: Option<PathBuf>,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_persons: 300,
            n_val: 50,
            n_test: 50,
            profile_seed: 1234,
            split_seed: 0,
            template_sets: vec![1],
            pools_file: None,
            corpus_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    /// Position groups; 9 keeps every sentence position separate.
    pub groups: usize,
    pub decode: DecodeOptions,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            groups: N_ATTRIBUTES,
            decode: DecodeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Birthday sentence moved to position `k` in every training document.
    AnswerPosition,
    CorruptionRatio,
    TotalSteps,
    /// `d_model`, with `d_ff = 4 * d_model`.
    ModelSize,
}

impl SweepAxis {
    fn tag(self) -> &'static str {
        match self {
            SweepAxis::AnswerPosition => "k",
            SweepAxis::CorruptionRatio => "r",
            SweepAxis::TotalSteps => "steps",
            SweepAxis::ModelSize => "d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub corpus: CorpusParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalParams,
    /// Recipe names, see [`TrainConfig::with_recipe`]. Empty uses `train`
    /// as given.
    pub recipes: Vec<String>,
    /// Training seeds. Empty uses `train.seed`.
    pub seeds: Vec<u64>,
    pub sweep: Option<Sweep>,
    /// Skip writing checkpoints (hashes are still recorded).
    pub skip_checkpoints: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            corpus: CorpusParams::default(),
            model: ModelConfig {
                d_model: 64,
                d_ff: 256,
                max_seq_len: 64,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalParams::default(),
            recipes: vec![],
            seeds: vec![],
            sweep: None,
            skip_checkpoints: false,
        }
    }
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })
    }

    /// Canonical JSON and its SHA-256.
    pub fn fingerprint(&self) -> Result<(String, String)> {
        let json = serde_json::to_string_pretty(self)? + "\n";
        let hash = sha256_hex(json.as_bytes());
        Ok((json, hash))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.groups == 0 {
            return Err(Error::Config("eval.groups must be at least 1".into()));
        }
        for r in &self.recipes {
            self.train.clone().with_recipe(r)?;
        }
        if let Some(s) = &self.sweep {
            for &v in &s.values {
                let ok = match s.axis {
                    SweepAxis::AnswerPosition => v.fract() == 0.0 && (1.0..=N_ATTRIBUTES as f64).contains(&v),
                    SweepAxis::CorruptionRatio => (0.0..1.0).contains(&v),
                    SweepAxis::TotalSteps | SweepAxis::ModelSize => v.fract() == 0.0 && v >= 1.0,
                };
                if !ok {
                    return Err(Error::Config(format!("sweep value {v} is invalid for axis {:?}", s.axis)));
                }
            }
        }
        Ok(())
    }

    /// One entry per (recipe, seed, sweep value).
    fn plan(&self) -> Result<Vec<RunPlan>> {
        let recipes: Vec<Option<&str>> = if self.recipes.is_empty() {
            vec![None]
        } else {
            self.recipes.iter().map(|r| Some(r.as_str())).collect()
        };
        let seeds = if self.seeds.is_empty() { vec![self.train.seed] } else { self.seeds.clone() };
        let values: Vec<Option<f64>> = match &self.sweep {
            Some(s) if !s.values.is_empty() => s.values.iter().map(|&v| Some(v)).collect(),
            _ => vec![None],
        };
        let mut out = vec![];
        for r in &recipes {
            for &seed in &seeds {
                for &v in &values {
                    let mut train = match r {
                        Some(name) => self.train.clone().with_recipe(name)?,
                        None => self.train.clone(),
                    };
                    train.seed = seed;
                    let mut model = self.model.clone();
                    let mut k = 1;
                    if let (Some(s), Some(v)) = (&self.sweep, v) {
                        match s.axis {
                            SweepAxis::AnswerPosition => k = v as usize,
                            SweepAxis::CorruptionRatio => train.corruption_ratio = v,
                            SweepAxis::TotalSteps => train.total_steps = v as usize,
                            SweepAxis::ModelSize => {
                                model.d_model = v as usize;
                                model.d_ff = 4 * v as usize;
                            }
                        }
                    }
                    out.push(RunPlan {
                        recipe: train.recipe_name(),
                        seed,
                        value: v,
                        k,
                        train,
                        model,
                    });
                }
            }
        }
        Ok(out)
    }
}

struct RunPlan {
    recipe: String,
    seed: u64,
    value: Option<f64>,
    k: usize,
    train: TrainConfig,
    model: ModelConfig,
}

/// Outcome of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub recipe: String,
    pub seed: u64,
    pub value: Option<f64>,
    /// Position of the first original sentence in the training documents.
    pub k: usize,
    pub report: MetricsReport,
    /// EM/F1 (percent) on questions about the first original sentence.
    pub first_em: f64,
    pub first_f1: f64,
    pub first_n: usize,
    pub perplexity: Vec<PerplexityRecord>,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub spec_hash: String,
    pub runs: Vec<RunResult>,
}

/// Wraps a failure with the name of the stage that produced it.
fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_value(v: f64) -> String {
    let s = format!("{v}");
    s.replace('.', "p")
}

/// Generates or loads the corpus described by `params`, resolving files
/// against `out`.
pub fn prepare_corpus(params: &CorpusParams, out: &Path) -> Result<CorpusSplit> {
    if let Some(f) = &params.corpus_file {
        return load_corpus(&out.join(f));
    }
    let pools = match &params.pools_file {
        Some(f) => AttributePools::from_file(&out.join(f))?,
        None => AttributePools::default(),
    };
    let profiles = generate_profiles(params.n_persons, &pools, params.profile_seed)?;
    split_corpus_with(&profiles, params.n_val, params.n_test, params.split_seed, &params.template_sets)
}

/// Test-split QA with sentence positions as they appear in `documents`.
fn located_test_qa(split: &CorpusSplit, documents: &[Document]) -> Result<Vec<QaPair>> {
    let by_title: BTreeMap<&str, &Document> = documents.iter().map(|d| (d.title.as_str(), d)).collect();
    split
        .qa_test
        .iter()
        .map(|q| {
            let doc = by_title
                .get(q.person_name.as_str())
                .ok_or_else(|| Error::Validation(format!("no document for {:?}", q.person_name)))?;
            let pos = doc
                .position_of(q.attribute_kind)
                .ok_or_else(|| Error::Validation(format!("{:?} lacks {}", q.person_name, q.attribute_kind)))?;
            Ok(QaPair {
                source_sentence_index: pos + 1,
                ..q.clone()
            })
        })
        .collect()
}

/// Generates the corpus, trains one model per planned run, evaluates on the
/// test split and writes every artifact under `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<SweepResult> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let (spec_json, spec_hash) = spec.fingerprint()?;
    write(&out.join("spec.json"), &spec_json).map_err(|e| Error::Config(format!("output directory not writable: {e}")))?;
    let provenance = serde_json::json!({
        "version": concat!("poslab ", env!("CARGO_PKG_VERSION")),
        "spec_sha256": spec_hash,
        "recipes": spec.recipes,
        "seeds": spec.seeds,
        "train_seed": spec.train.seed,
        "profile_seed": spec.corpus.profile_seed,
        "split_seed": spec.corpus.split_seed,
    });
    write(&out.join("provenance.json"), &(serde_json::to_string_pretty(&provenance)? + "\n"))?;

    let split = stage("corpus", prepare_corpus(&spec.corpus, out))?;
    let vocab = split.build_vocab();
    stage("corpus", serialize_corpus(&split, &out.join("corpus.json")))?;
    stage("corpus", vocab.save(&out.join("vocab.json")))?;

    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let mut results = Vec::new();
    for plan in spec.plan()? {
        let name = match plan.value {
            Some(v) => format!(
                "{}-seed{}-{}{}",
                plan.recipe.to_lowercase(),
                plan.seed,
                spec.sweep.as_ref().map_or("v", |s| s.axis.tag()),
                fmt_value(v)
            ),
            None => format!("{}-seed{}", plan.recipe.to_lowercase(), plan.seed),
        };
        let dir = runs_dir.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let result = run_one(spec, &plan, &split, &vocab, &dir)?;
        results.push(result);
        // Summaries are rewritten after every run so partial sweeps keep them.
        write_summaries(spec, &results, out)?;
    }
    Ok(SweepResult {
        spec_hash,
        runs: results,
    })
}

fn run_one(spec: &ExperimentSpec, plan: &RunPlan, split: &CorpusSplit, vocab: &Vocab, dir: &Path) -> Result<RunResult> {
    let documents: Vec<Document> = stage(
        "modulate",
        split
            .documents
            .iter()
            .filter(|d| plan.train.template_set_ids.contains(&d.template_set))
            .map(|d| modulate_position(d, plan.k))
            .collect(),
    )?;
    let pools = TrainPools {
        documents: documents.iter().collect(),
        qa: split.qa_train.iter().collect(),
    };
    let run = stage("train", train(&pools, vocab, &plan.model, &plan.train))?;
    stage("train", write_log(&run.log, &dir.join("train_log.csv")))?;
    let checkpoint_hash = stage("train", run.checkpoint.hash())?;
    if !spec.skip_checkpoints {
        stage("train", run.checkpoint.save(&dir.join("checkpoint.json")))?;
    }
    let params = &run.checkpoint.params;

    let qa = stage("evaluate", located_test_qa(split, &documents))?;
    let report = stage("evaluate", evaluate(params, vocab, &qa, spec.eval.groups, &spec.eval.decode))?;
    stage("evaluate", report.write_csv(&dir.join("report.csv")))?;
    let first: Vec<_> = report
        .predictions
        .iter()
        .filter(|p| p.attribute_kind == AttributeKind::Birthday)
        .collect();
    let first_n = first.len();
    let mean = |f: &dyn Fn(&&crate::evaluation::Prediction) -> f64| {
        if first_n == 0 {
            0.0
        } else {
            100.0 * first.iter().map(f).sum::<f64>() / first_n as f64
        }
    };
    let (first_em, first_f1) = (mean(&|p| p.em), mean(&|p| p.f1));

    let test_names: std::collections::HashSet<&str> =
        split.test_profiles.iter().map(|p| p.person_name.as_str()).collect();
    let test_docs: Vec<Document> = documents
        .iter()
        .filter(|d| test_names.contains(d.title.as_str()) && d.template_set == plan.train.template_set_ids[0])
        .cloned()
        .collect();
    let mut perplexity = vec![];
    if !test_docs.is_empty() {
        for mode in [PerplexityMode::InContext, PerplexityMode::TitleOnly] {
            perplexity.push(stage(
                "perplexity",
                pooled_perplexity(params, vocab, &test_docs, AttributeKind::Birthday, mode),
            )?);
        }
        stage("perplexity", write(&dir.join("perplexity.csv"), &perplexity_csv(&perplexity)))?;
    }
    Ok(RunResult {
        recipe: plan.recipe.clone(),
        seed: plan.seed,
        value: plan.value,
        k: plan.k,
        report,
        first_em,
        first_f1,
        first_n,
        perplexity,
        checkpoint_hash,
    })
}

fn value_str(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

/// Per-run rows: `recipe,seed,value,k,macro_em,micro_em,first_em,first_f1,checkpoint_sha256`.
pub fn summary_csv(runs: &[RunResult]) -> String {
    let mut s = String::from("recipe,seed,value,k,macro_em,macro_f1,micro_em,first_em,first_f1,checkpoint_sha256\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            r.recipe,
            r.seed,
            value_str(r.value),
            r.k,
            r.report.macro_em,
            r.report.macro_f1,
            r.report.micro_em,
            r.first_em,
            r.first_f1,
            r.checkpoint_hash
        );
    }
    s
}

/// Per-run, per-attribute EM: `recipe,seed,value,attribute,em`.
pub fn attribute_csv(runs: &[RunResult]) -> String {
    let mut s = String::from("recipe,seed,value,attribute,em\n");
    for r in runs {
        for (k, em) in r.report.em_by_attribute() {
            if let Some(em) = em {
                let _ = writeln!(s, "{},{},{},{},{:.4}", r.recipe, r.seed, value_str(r.value), k, em);
            }
        }
    }
    s
}

/// Seed-averaged series keyed by `(recipe, x)`, in first-seen recipe order.
fn averaged<F: Fn(&RunResult) -> f64>(runs: &[RunResult], x: impl Fn(&RunResult) -> f64, y: F) -> Vec<(String, f64, f64, usize)> {
    let mut order: Vec<String> = vec![];
    let mut acc: BTreeMap<(usize, u64), (f64, f64, usize)> = BTreeMap::new();
    for r in runs {
        let ri = match order.iter().position(|o| o == &r.recipe) {
            Some(i) => i,
            None => {
                order.push(r.recipe.clone());
                order.len() - 1
            }
        };
        let e = acc.entry((ri, x(r).to_bits())).or_insert((x(r), 0.0, 0));
        e.1 += y(r);
        e.2 += 1;
    }
    let mut rows: Vec<(String, f64, f64, usize)> =
        acc.into_iter().map(|((ri, _), (xv, sum, n))| (order[ri].clone(), xv, sum / n as f64, n)).collect();
    rows.sort_by(|a, b| {
        let ia = order.iter().position(|o| o == &a.0);
        let ib = order.iter().position(|o| o == &b.0);
        ia.cmp(&ib).then(a.1.total_cmp(&b.1))
    });
    rows
}

/// `recipe,k,n_seeds,em,f1` averaged over seeds for first-sentence QA.
pub fn position_series_csv(runs: &[RunResult]) -> String {
    let em = averaged(runs, |r| r.k as f64, |r| r.first_em);
    let f1 = averaged(runs, |r| r.k as f64, |r| r.first_f1);
    let mut s = String::from("recipe,k,n_seeds,em,f1\n");
    for (a, b) in em.iter().zip(&f1) {
        let _ = writeln!(s, "{},{},{},{:.4},{:.4}", a.0, a.1, a.3, a.2, b.2);
    }
    s
}

/// `recipe,r,n_seeds,em,f1` with macro EM/F1 averaged over seeds.
pub fn noise_series_csv(runs: &[RunResult]) -> String {
    let x = |r: &RunResult| r.value.unwrap_or(0.0);
    let em = averaged(runs, x, |r| r.report.macro_em);
    let f1 = averaged(runs, x, |r| r.report.macro_f1);
    let mut s = String::from("recipe,r,n_seeds,em,f1\n");
    for (a, b) in em.iter().zip(&f1) {
        let _ = writeln!(s, "{},{},{},{:.4},{:.4}", a.0, a.1, a.3, a.2, b.2);
    }
    s
}

/// `recipe,k,mode,ppl`: geometric mean over seeds.
pub fn perplexity_series_csv(runs: &[RunResult]) -> String {
    let mut s = String::from("recipe,k,mode,ppl\n");
    for mode in [PerplexityMode::InContext, PerplexityMode::TitleOnly] {
        let pick = |r: &RunResult| {
            r.perplexity
                .iter()
                .find(|p| p.mode == mode)
                .map_or(f64::NAN, |p| p.ppl.ln())
        };
        for (recipe, k, log_ppl, _) in averaged(runs, |r| r.k as f64, pick) {
            let _ = writeln!(s, "{recipe},{k},{},{:.6}", mode.as_str(), log_ppl.exp());
        }
    }
    s
}

fn write_summaries(spec: &ExperimentSpec, runs: &[RunResult], out: &Path) -> Result<()> {
    write(&out.join("summary.csv"), &summary_csv(runs))?;
    write(&out.join("attributes.csv"), &attribute_csv(runs))?;
    match spec.sweep.as_ref().map(|s| s.axis) {
        Some(SweepAxis::AnswerPosition) => {
            write(&out.join("position_series.csv"), &position_series_csv(runs))?;
            write(&out.join("perplexity_series.csv"), &perplexity_series_csv(runs))?;
        }
        Some(SweepAxis::CorruptionRatio) => {
            write(&out.join("noise_series.csv"), &noise_series_csv(runs))?;
        }
        _ => {}
    }
    Ok(())
}

/// Answer-position protocol: each `k` trains on documents whose first
/// sentence sits at position `k`. Defaults to `k = 1..=9`.
pub fn sweep_answer_position(spec: &ExperimentSpec, out: &Path) -> Result<SweepResult> {
    let mut spec = spec.clone();
    let values = match spec.sweep.take() {
        Some(s) if s.axis == SweepAxis::AnswerPosition && !s.values.is_empty() => s.values,
        _ => (1..=N_ATTRIBUTES).map(|k| k as f64).collect(),
    };
    spec.sweep = Some(Sweep {
        axis: SweepAxis::AnswerPosition,
        values,
    });
    run_experiment(&spec, out)
}

/// Noise-ratio protocol: one model per corruption ratio.
pub fn sweep_noise_ratio(spec: &ExperimentSpec, out: &Path) -> Result<SweepResult> {
    let mut spec = spec.clone();
    let values = match spec.sweep.take() {
        Some(s) if s.axis == SweepAxis::CorruptionRatio && !s.values.is_empty() => s.values,
        _ => vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.9],
    };
    spec.sweep = Some(Sweep {
        axis: SweepAxis::CorruptionRatio,
        values,
    });
    run_experiment(&spec, out)
}
