//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stdout, bypassing the test harness capture.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use poslab::corpus::{
    generate_profiles, split_corpus, AttributeKind, AttributePools, CorpusSplit, Document, N_ATTRIBUTES,
};
use poslab::evaluation::{exact_match, sentence_nll, token_f1, PerplexityMode};
use poslab::experiments::{run_experiment, sweep_answer_position, ExperimentSpec, RunResult, Sweep, SweepAxis};
use poslab::model::{grad_check, loss_and_grads, Mode, ModelConfig, ModelParams};
use poslab::text::Vocab;
use poslab::training::{build_doc_example, build_qa_example, shuffle_sentences, train, TrainConfig, TrainPools};

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn corpus() -> (CorpusSplit, Vocab) {
    let profiles = generate_profiles(300, &AttributePools::default(), 1234).unwrap();
    let split = split_corpus(&profiles, 50, 50, 0).unwrap();
    let vocab = split.build_vocab();
    (split, vocab)
}

#[test]
fn c1_gradient_check() {
    let start = Instant::now();
    let (split, vocab) = corpus();
    let model = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_seq_len: 64,
        vocab_size: vocab.len(),
        attn_dropout: 0.3,
    };
    let params = ModelParams::<f64>::init(&model, 11).unwrap();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = [
        build_doc_example(&split.documents[0], &vocab, &cfg, 64, &mut rng).unwrap(),
        build_qa_example(&split.qa_train[3], &vocab, &cfg, 64, &mut rng).unwrap(),
        build_qa_example(&split.qa_train[10], &vocab, &cfg, 64, &mut rng).unwrap(),
    ];
    let examples: Vec<_> = data.iter().map(|e| e.as_example()).collect();
    let eval = grad_check(&params, &examples, Mode::Eval, 1e-5, 20, 1).unwrap();
    let drop = grad_check(&params, &examples, Mode::Train, 1e-5, 20, 2).unwrap();
    let worst = eval.max_relative_error.max(drop.max_relative_error);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-3 && secs < 60.0;
    report(
        1,
        pass,
        &format!(
            "max relative error {worst:.2e} over {} coordinates, {secs:.1}s",
            eval.coordinates + drop.coordinates
        ),
    );
    assert!(pass);
}

#[test]
fn c2_masked_loss_locality() {
    let (split, vocab) = corpus();
    let model = ModelConfig {
        d_model: 16,
        d_ff: 32,
        max_seq_len: 64,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let params = ModelParams::<f32>::init(&model, 3).unwrap();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut identical = 0;
    for _ in 0..100 {
        let qa = &split.qa_train[rng.random_range(0..split.qa_train.len())];
        let ex = build_qa_example(qa, &vocab, &cfg, 64, &mut rng).unwrap();
        let mut perturbed = ex.clone();
        for (label, &m) in perturbed.label_ids.iter_mut().zip(&ex.loss_mask) {
            if m == 0 {
                *label = rng.random_range(0..vocab.len() as u32);
            }
        }
        let (a, ga) = loss_and_grads(&params, &[ex.as_example()], Mode::Eval, 0).unwrap();
        let (b, gb) = loss_and_grads(&params, &[perturbed.as_example()], Mode::Eval, 0).unwrap();
        let same_grads = ga
            .tensors
            .iter()
            .zip(&gb.tensors)
            .all(|(x, y)| x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        if a.loss.to_bits() == b.loss.to_bits() && same_grads {
            identical += 1;
        }
    }
    let pass = identical == 100;
    report(2, pass, &format!("{identical}/100 examples bit-identical under label perturbation"));
    assert!(pass);
}

#[test]
fn c3_corruption_statistics() {
    let (split, vocab) = corpus();
    let noisy = TrainConfig {
        corruption_ratio: 0.2,
        ..TrainConfig::default()
    };
    let clean = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut content, mut corrupted, mut labels_equal, mut inputs_changed_ok) = (0usize, 0usize, true, true);
    for doc in &split.documents {
        let ex = build_doc_example(doc, &vocab, &noisy, 64, &mut rng).unwrap();
        let reference = build_doc_example(doc, &vocab, &clean, 64, &mut rng).unwrap();
        labels_equal &= ex.label_ids == reference.label_ids && ex.loss_mask == reference.loss_mask;
        for p in 0..ex.input_ids.len() {
            if !Vocab::is_special(reference.input_ids[p]) {
                content += 1;
            }
            let changed = ex.input_ids[p] != reference.input_ids[p];
            inputs_changed_ok &= changed == (ex.corruption_mask[p] == 1);
            corrupted += usize::from(ex.corruption_mask[p]);
        }
    }
    let frac = corrupted as f64 / content as f64;
    let pass = content >= 10_000 && (0.18..=0.22).contains(&frac) && labels_equal && inputs_changed_ok;
    report(
        3,
        pass,
        &format!("{corrupted}/{content} content positions corrupted = {frac:.4}; labels identical: {labels_equal}"),
    );
    assert!(pass);
}

#[test]
fn c4_shuffle_uniformity() {
    let doc = Document {
        title: "ada zorvik".into(),
        template_set: 1,
        sentences: vec!["one .".into(), "two .".into(), "three .".into()],
        source_attribute: vec![AttributeKind::Birthday, AttributeKind::Birthplace, AttributeKind::School],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts: HashMap<Vec<String>, u32> = HashMap::new();
    let mut multiset_ok = true;
    for _ in 0..6000 {
        let s = shuffle_sentences(&doc, &mut rng);
        let mut sorted = s.sentences.clone();
        sorted.sort();
        let mut want = doc.sentences.clone();
        want.sort();
        multiset_ok &= sorted == want && s.title == doc.title;
        *counts.entry(s.sentences).or_default() += 1;
    }
    let expected = 1000.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(5.0).unwrap().cdf(chi2);
    let pass = counts.len() == 6 && p > 0.01 && multiset_ok;
    report(4, pass, &format!("{} permutations, chi2 = {chi2:.3}, p = {p:.4}", counts.len()));
    assert!(pass);
}

#[test]
fn c5_memorization_sanity() {
    let start = Instant::now();
    let (split, vocab) = corpus();
    let docs: Vec<Document> = split.documents[..20].to_vec();
    let cfg = TrainConfig {
        qa_fraction: 0.0,
        batch_size: 20,
        total_steps: 600,
        lr0: 3e-3,
        eval_interval: 100,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        d_model: 64,
        d_ff: 256,
        max_seq_len: 64,
        ..ModelConfig::default()
    };
    let pools = TrainPools {
        documents: docs.iter().collect(),
        qa: vec![],
    };
    let run = train(&pools, &vocab, &model, &cfg).unwrap();
    let (mut nll, mut n) = (0.0, 0usize);
    for d in &docs {
        for target in 0..d.sentences.len() {
            let (a, b) = sentence_nll(&run.checkpoint.params, &vocab, d, target, PerplexityMode::InContext).unwrap();
            nll += a;
            n += b;
        }
    }
    let ppl = (nll / n as f64).exp();
    let secs = start.elapsed().as_secs_f64();
    let pass = ppl <= 1.05 && secs < 300.0;
    report(5, pass, &format!("in-context perplexity {ppl:.4} over {n} tokens, {secs:.1}s"));
    assert!(pass);
}

struct Sweep6 {
    runs: Vec<RunResult>,
    elapsed: Duration,
}

/// One answer-position sweep, 9 positions by AR and D-AR by 3 seeds,
/// shared by criteria 6 to 8.
fn position_sweep() -> &'static Sweep6 {
    static CELL: OnceLock<Sweep6> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            recipes: vec!["ar".into(), "d-ar".into()],
            seeds: vec![0, 1, 2],
            skip_checkpoints: true,
            ..ExperimentSpec::default()
        };
        let start = Instant::now();
        let res = sweep_answer_position(&spec, dir.path()).unwrap();
        Sweep6 {
            runs: res.runs,
            elapsed: start.elapsed(),
        }
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn first_em(runs: &[RunResult], recipe: &str, k: usize) -> f64 {
    mean(runs.iter().filter(|r| r.recipe == recipe && r.k == k).map(|r| r.first_em))
}

fn title_only_ppl(runs: &[RunResult], recipe: &str, k: usize) -> f64 {
    // Geometric mean over seeds.
    mean(
        runs.iter()
            .filter(|r| r.recipe == recipe && r.k == k)
            .flat_map(|r| &r.perplexity)
            .filter(|p| p.mode == PerplexityMode::TitleOnly)
            .map(|p| p.ppl.ln()),
    )
    .exp()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(rx.iter().copied()), mean(ry.iter().copied()));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn c6_positional_bias_trend() {
    let s = position_sweep();
    let ks: Vec<usize> = (1..=N_ATTRIBUTES).collect();
    let em: Vec<f64> = ks.iter().map(|&k| first_em(&s.runs, "AR", k)).collect();
    let ppl: Vec<f64> = ks.iter().map(|&k| title_only_ppl(&s.runs, "AR", k)).collect();
    let gap = em[0] - em[N_ATTRIBUTES - 1];
    let kf: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let rho = spearman(&kf, &ppl);
    let hours = s.elapsed.as_secs_f64() / 3600.0;
    let pass = gap >= 10.0 && rho > 0.0 && hours <= 2.0;
    let em_s: Vec<String> = em.iter().map(|e| format!("{e:.1}")).collect();
    let ppl_s: Vec<String> = ppl.iter().map(|p| format!("{p:.1}")).collect();
    report(
        6,
        pass,
        &format!(
            "AR EM by k [{}], EM(1) - EM(9) = {gap:.1}; title-only ppl by k [{}], spearman {rho:.3}; sweep {hours:.2} h",
            em_s.join(" "),
            ppl_s.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn c7_dar_mitigation_trend() {
    let s = position_sweep();
    let ks = 1..=N_ATTRIBUTES;
    let ar = mean(ks.clone().map(|k| first_em(&s.runs, "AR", k)));
    let dar = mean(ks.clone().map(|k| first_em(&s.runs, "D-AR", k)));
    let (ar9, dar9) = (first_em(&s.runs, "AR", 9), first_em(&s.runs, "D-AR", 9));
    let dar_s: Vec<String> = ks.map(|k| format!("{:.1}", first_em(&s.runs, "D-AR", k))).collect();
    let pass = dar - ar >= 5.0 && dar9 > ar9;
    // Unmodulated runs (k = 1) grouped by sentence position, shown for context.
    let grouped = |recipe: &str| {
        let runs: Vec<&RunResult> = s.runs.iter().filter(|r| r.recipe == recipe && r.k == 1).collect();
        let macro_em = mean(runs.iter().map(|r| r.report.macro_em));
        let last = mean(runs.iter().filter_map(|r| r.report.group(N_ATTRIBUTES).map(|g| g.em)));
        (macro_em, last)
    };
    let (g_ar, g_ar9) = grouped("AR");
    let (g_dar, g_dar9) = grouped("D-AR");
    report(
        7,
        pass,
        &format!(
            "D-AR EM by k [{}]; macro D-AR {dar:.2} vs AR {ar:.2}; k=9 D-AR {dar9:.1} vs AR {ar9:.1}; \
             unmodulated grouped macro D-AR {g_dar:.2} vs AR {g_ar:.2}, group 9 D-AR {g_dar9:.1} vs AR {g_ar9:.1}",
            dar_s.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn c8_per_attribute_ordering() {
    let s = position_sweep();
    let mut details = vec![];
    let mut pass = true;
    for seed in 0..3u64 {
        let run = s
            .runs
            .iter()
            .find(|r| r.recipe == "AR" && r.k == 1 && r.seed == seed)
            .expect("AR k=1 run");
        let by: HashMap<AttributeKind, f64> = run
            .report
            .em_by_attribute()
            .into_iter()
            .filter_map(|(k, e)| e.map(|e| (k, e)))
            .collect();
        let (b, h) = (by[&AttributeKind::Birthday], by[&AttributeKind::Hobby]);
        pass &= h < b;
        details.push(format!("seed {seed}: birthday {b:.1} hobby {h:.1}"));
    }
    report(8, pass, &details.join("; "));
    assert!(pass);
}

/// Reference normalizer, written independently of the library's.
fn reference_normalize(s: &str) -> String {
    static PUNCT: OnceLock<Regex> = OnceLock::new();
    static ARTICLES: OnceLock<Regex> = OnceLock::new();
    let punct = PUNCT.get_or_init(|| Regex::new(r"[!-/:-@\[-`{-~]").unwrap());
    let articles = ARTICLES.get_or_init(|| Regex::new(r"\b(a|an|the)\b").unwrap());
    let lower = s.to_lowercase();
    let no_punct = punct.replace_all(&lower, "");
    let no_art = articles.replace_all(&no_punct, " ");
    no_art.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn reference_em(pred: &str, gold: &str) -> f64 {
    if reference_normalize(pred) == reference_normalize(gold) {
        1.0
    } else {
        0.0
    }
}

fn reference_f1(pred: &str, gold: &str) -> f64 {
    let p = reference_normalize(pred);
    let g = reference_normalize(gold);
    let pt: Vec<&str> = p.split(' ').filter(|t| !t.is_empty()).collect();
    let gt: Vec<&str> = g.split(' ').filter(|t| !t.is_empty()).collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt == gt { 1.0 } else { 0.0 };
    }
    let count = |ts: &[&str]| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for t in ts {
            *m.entry(t.to_string()).or_insert(0) += 1;
        }
        m
    };
    let (cp, cg) = (count(&pt), count(&gt));
    let same: usize = cp.iter().map(|(t, &n)| n.min(*cg.get(t).unwrap_or(&0))).sum();
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / pt.len() as f64;
    let recall = same as f64 / gt.len() as f64;
    (2.0 * precision * recall) / (precision + recall)
}

const FIXTURES: [(&str, &str); 50] = [
    ("born in paris", "paris"),
    ("paris", "paris"),
    ("Paris", "paris"),
    ("PARIS!", "paris"),
    ("the paris", "paris"),
    ("a paris", "the paris"),
    ("an apple", "apple"),
    ("The Beatles.", "the beatles"),
    ("new york", "new york"),
    ("new york city", "new york"),
    ("york new", "new york"),
    ("", ""),
    ("", "paris"),
    ("paris", ""),
    ("   ", "the"),
    ("the", "a"),
    ("tokyo", "paris"),
    ("december 21 1988", "december 21 1988"),
    ("december 21, 1988", "december 21 1988"),
    ("december 21 1989", "december 21 1988"),
    ("21 december 1988", "december 21 1988"),
    ("december", "december 21 1988"),
    ("rock-climbing", "rockclimbing"),
    ("rock climbing", "rockclimbing"),
    ("o'brien", "obrien"),
    ("U.S.A.", "usa"),
    ("theatre", "the atre"),
    ("another", "an other"),
    ("anthem", "anthem"),
    ("a a a", ""),
    ("paris paris", "paris"),
    ("paris", "paris paris"),
    ("paris london paris", "paris paris london"),
    ("the the paris", "paris"),
    ("microsoft research", "microsoft"),
    ("the university of oxford", "university of oxford"),
    ("university oxford", "university of oxford"),
    ("  spaced   out  ", "spaced out"),
    ("tab\tseparated", "tab separated"),
    ("line\nbreak", "line break"),
    ("(parenthetical)", "parenthetical"),
    ("semi;colon", "semicolon"),
    ("under_score", "under score"),
    ("under_score", "under_score"),
    ("café", "cafe"),
    ("Café", "café"),
    ("1,000", "1000"),
    ("3.14", "314"),
    ("surgeon", "a surgeon"),
    ("software engineer", "engineer software developer"),
];

#[test]
fn c9_metric_oracle() {
    let mut mismatches = vec![];
    for (pred, gold) in FIXTURES {
        let (em, f1) = (exact_match(pred, gold), token_f1(pred, gold));
        let (rem, rf1) = (reference_em(pred, gold), reference_f1(pred, gold));
        if em != rem || f1 != rf1 {
            mismatches.push(format!("({pred:?}, {gold:?}): {em}/{f1} vs {rem}/{rf1}"));
        }
    }
    let anchor = token_f1("born in paris", "paris");
    let pass = mismatches.is_empty() && anchor == 0.5;
    report(
        9,
        pass,
        &format!("{} fixtures, {} mismatches, F1(born in paris, paris) = {anchor}", FIXTURES.len(), mismatches.len()),
    );
    assert!(pass, "{mismatches:#?}");
}

fn metric_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "svg" || x == "json") {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                let mut bytes = std::fs::read(&p).unwrap();
                // Wall-clock time is the one column expected to differ.
                if rel.ends_with("train_log.csv") {
                    let text = String::from_utf8(bytes).unwrap();
                    bytes = text
                        .lines()
                        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
                        .collect::<Vec<_>>()
                        .join("\n")
                        .into_bytes();
                }
                out.push((rel, bytes));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c10_determinism() {
    let spec = ExperimentSpec {
        corpus: poslab::experiments::CorpusParams {
            n_persons: 40,
            n_val: 5,
            n_test: 5,
            ..Default::default()
        },
        model: ModelConfig {
            d_model: 16,
            d_ff: 64,
            max_seq_len: 64,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            total_steps: 30,
            batch_size: 8,
            eval_interval: 10,
            ..TrainConfig::default()
        },
        recipes: vec!["ar".into(), "d-ar".into(), "shuffle".into(), "attn-drop".into()],
        seeds: vec![0, 1],
        sweep: Some(Sweep {
            axis: SweepAxis::AnswerPosition,
            values: vec![1.0, 9.0],
        }),
        ..ExperimentSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&spec, a.path()).unwrap();
    let rb = run_experiment(&spec, b.path()).unwrap();
    let hashes_a: Vec<&str> = ra.runs.iter().map(|r| r.checkpoint_hash.as_str()).collect();
    let hashes_b: Vec<&str> = rb.runs.iter().map(|r| r.checkpoint_hash.as_str()).collect();
    let (fa, fb) = (metric_files(a.path()), metric_files(b.path()));
    let pass = hashes_a == hashes_b && fa == fb && !fa.is_empty() && ra.spec_hash == rb.spec_hash;
    report(
        10,
        pass,
        &format!(
            "{} runs, {} artifacts byte-identical: {}, checkpoint hashes equal: {}",
            ra.runs.len(),
            fa.len(),
            fa == fb,
            hashes_a == hashes_b
        ),
    );
    assert!(pass);
}
