//! Example construction for the four recipes (plain next-token, denoising,
//! sentence shuffling, attention dropout), mixed batch sampling, Adam with
//! linear decay, and checkpoints.

mod adam;
mod checkpoint;
mod examples;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, CANONICAL_TEMPLATE_SET};
use crate::error::{Error, Result};
use crate::model::{loss_and_grads_with, Example, Mode, ModelConfig, ModelParams};
use crate::parallel::Exec;
use crate::text::Vocab;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{sha256_hex, Checkpoint, CHECKPOINT_VERSION};
pub use examples::{
    build_doc_example, build_qa_example, corrupt_tokens, qa_prompt, sample_batch, shuffle_sentences, ExampleKind,
    TrainExample, TrainPools,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fraction `R` of input positions replaced by random tokens; 0 disables
    /// denoising.
    pub corruption_ratio: f64,
    /// Keep the loss on targets whose input copy was replaced.
    pub denoise_loss_on_corrupted: bool,
    /// Also corrupt QA examples.
    pub corrupt_qa: bool,
    /// Fresh sentence permutation every time a document is sampled.
    pub shuffle: bool,
    /// Attention-dropout probability during training.
    pub attn_dropout: f64,
    pub qa_fraction: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr0: f64,
    pub seed: u64,
    /// Steps between training-log rows.
    pub eval_interval: usize,
    pub template_set_ids: Vec<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            corruption_ratio: 0.0,
            denoise_loss_on_corrupted: true,
            corrupt_qa: false,
            shuffle: false,
            attn_dropout: 0.0,
            qa_fraction: 0.5,
            batch_size: 32,
            total_steps: 3000,
            lr0: 3e-3,
            seed: 0,
            eval_interval: 100,
            template_set_ids: vec![CANONICAL_TEMPLATE_SET],
        }
    }
}

/// Ratio used by the denoising recipe unless overridden.
pub const DEFAULT_CORRUPTION_RATIO: f64 = 0.2;
/// Attention-dropout rate used by the dropout recipe unless overridden.
pub const DEFAULT_ATTN_DROPOUT: f64 = 0.5;

impl TrainConfig {
    /// Applies a recipe by name: `ar`, `d-ar`, `shuffle`, `attn-drop`, or a
    /// `+`-joined combination such as `d-ar+shuffle`.
    pub fn with_recipe(mut self, recipe: &str) -> Result<Self> {
        self.corruption_ratio = 0.0;
        self.shuffle = false;
        self.attn_dropout = 0.0;
        for part in recipe.split('+') {
            match part.trim().to_ascii_lowercase().as_str() {
                "ar" => {}
                "d-ar" | "dar" => self.corruption_ratio = DEFAULT_CORRUPTION_RATIO,
                "shuffle" => self.shuffle = true,
                "attn-drop" | "attndrop" => self.attn_dropout = DEFAULT_ATTN_DROPOUT,
                other => return Err(Error::Config(format!("unknown recipe {other:?}"))),
            }
        }
        Ok(self)
    }

    /// Canonical recipe label, e.g. `AR` or `D-AR+Shuffle`.
    pub fn recipe_name(&self) -> String {
        let mut parts = vec![];
        if self.corruption_ratio > 0.0 {
            parts.push("D-AR");
        }
        if self.shuffle {
            parts.push("Shuffle");
        }
        if self.attn_dropout > 0.0 {
            parts.push("AttnDrop");
        }
        if parts.is_empty() {
            "AR".into()
        } else {
            parts.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.corruption_ratio) {
            return bad(format!("corruption_ratio {} outside [0, 1)", self.corruption_ratio));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return bad(format!("attn_dropout {} outside [0, 1)", self.attn_dropout));
        }
        if !(0.0..=1.0).contains(&self.qa_fraction) {
            return bad(format!("qa_fraction {} outside [0, 1]", self.qa_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if self.template_set_ids.is_empty() {
            return bad("template_set_ids must not be empty".into());
        }
        Ok(())
    }
}

/// `lr0 * (1 - step / total_steps)`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    if config.total_steps == 0 {
        return config.lr0;
    }
    let s = step.min(config.total_steps) as f64;
    config.lr0 * (1.0 - s / config.total_steps as f64)
}

impl<'a> TrainPools<'a> {
    /// Documents rendered with the configured template sets, and the
    /// training-split QA pairs.
    pub fn from_split(split: &'a CorpusSplit, config: &TrainConfig) -> Self {
        Self {
            documents: split
                .documents
                .iter()
                .filter(|d| config.template_set_ids.contains(&d.template_set))
                .collect(),
            qa: split.qa_train.iter().collect(),
        }
    }
}

/// One row of the training log. Losses average the per-example losses of
/// that kind over the steps since the previous row; `None` if no example of
/// the kind was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub doc_loss: Option<f64>,
    pub qa_loss: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "step,lr,doc_loss,qa_loss,wall_ms";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(s, "{},{:.6e},{},{},{}", r.step, r.lr, opt(r.doc_loss), opt(r.qa_loss), r.wall_ms);
    }
    s
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Independent 64-bit seed for `purpose` at `step`.
fn derive_seed(seed: u64, purpose: u64, step: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(step);
    rng.next_u64()
}

const ORDER_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const DROPOUT_PURPOSE: u64 = 3;
const INIT_PURPOSE: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Default)]
struct Accum {
    doc: (f64, usize),
    qa: (f64, usize),
}

impl Accum {
    fn add(&mut self, kinds: &[ExampleKind], losses: &[f64]) {
        for (k, &l) in kinds.iter().zip(losses) {
            let slot = match k {
                ExampleKind::Document => &mut self.doc,
                ExampleKind::Qa => &mut self.qa,
            };
            slot.0 += l;
            slot.1 += 1;
        }
    }

    fn take(&mut self) -> (Option<f64>, Option<f64>) {
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        let out = (mean(self.doc), mean(self.qa));
        *self = Self::default();
        out
    }
}

/// Effective model config: vocabulary size from `vocab` when unset, and the
/// recipe's attention-dropout rate.
pub fn resolve_model_config(model: &ModelConfig, vocab: &Vocab, config: &TrainConfig) -> Result<ModelConfig> {
    let mut m = model.clone();
    if m.vocab_size == 0 {
        m.vocab_size = vocab.len();
    }
    if m.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            m.vocab_size,
            vocab.len()
        )));
    }
    m.attn_dropout = config.attn_dropout;
    m.validate()?;
    Ok(m)
}

pub fn train(pools: &TrainPools<'_>, vocab: &Vocab, model: &ModelConfig, config: &TrainConfig) -> Result<TrainRun> {
    train_with(Exec::default(), pools, vocab, model, config)
}

/// Runs `total_steps` Adam updates on batches from `pools`.
///
/// The first log row (step 0) is the loss of the initial model on the first
/// batch drawn without any noise, so recipes that share a seed start from the
/// same value. On a non-finite loss the error carries the last good
/// checkpoint.
pub fn train_with(
    exec: Exec,
    pools: &TrainPools<'_>,
    vocab: &Vocab,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    let model = resolve_model_config(model, vocab, config)?;
    let mut params = ModelParams::<f32>::init(&model, derive_seed(config.seed, INIT_PURPOSE, 0))?;
    let mut state = AdamState::new(&params);
    let mut order_rng = stream_rng(config.seed, ORDER_STREAM);
    let mut noise_rng = stream_rng(config.seed, NOISE_STREAM);
    let started = Instant::now();
    let mut log = Vec::new();

    let clean = TrainConfig {
        corruption_ratio: 0.0,
        shuffle: false,
        ..config.clone()
    };
    {
        let mut probe_order = order_rng.clone();
        let mut unused = stream_rng(config.seed, NOISE_STREAM);
        let batch = sample_batch(pools, vocab, &clean, model.max_seq_len, &mut probe_order, &mut unused)?;
        let exs: Vec<Example<'_>> = batch.iter().map(TrainExample::as_example).collect();
        let kinds: Vec<ExampleKind> = batch.iter().map(|e| e.kind).collect();
        let (report, _) = loss_and_grads_with(exec, &params, &exs, Mode::Eval, 0)?;
        let mut acc = Accum::default();
        acc.add(&kinds, &report.per_example);
        let (doc_loss, qa_loss) = acc.take();
        log.push(LogRow {
            step: 0,
            lr: lr_at(0, config),
            doc_loss,
            qa_loss,
            wall_ms: started.elapsed().as_millis(),
        });
    }

    let mut acc = Accum::default();
    for step in 0..config.total_steps {
        let batch = sample_batch(pools, vocab, config, model.max_seq_len, &mut order_rng, &mut noise_rng)?;
        let exs: Vec<Example<'_>> = batch.iter().map(TrainExample::as_example).collect();
        let kinds: Vec<ExampleKind> = batch.iter().map(|e| e.kind).collect();
        let dropout_seed = derive_seed(config.seed, DROPOUT_PURPOSE, step as u64);
        let (report, grads) = loss_and_grads_with(exec, &params, &exs, Mode::Train, dropout_seed)?;
        if !report.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: report.loss,
                last_good: Box::new(Checkpoint {
                    step,
                    params,
                    optimizer: state,
                }),
            });
        }
        let lr = lr_at(step, config);
        adam_step(&mut params, &grads, &mut state, lr)?;
        acc.add(&kinds, &report.per_example);
        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.total_steps {
            let (doc_loss, qa_loss) = acc.take();
            log.push(LogRow {
                step: done,
                lr,
                doc_loss,
                qa_loss,
                wall_ms: started.elapsed().as_millis(),
            });
        }
    }
    Ok(TrainRun {
        checkpoint: Checkpoint {
            step: config.total_steps,
            params,
            optimizer: state,
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_profiles, split_corpus, AttributePools};

    fn tiny() -> (CorpusSplit, Vocab, ModelConfig) {
        let ps = generate_profiles(8, &AttributePools::default(), 2).unwrap();
        let split = split_corpus(&ps, 1, 1, 3).unwrap();
        let vocab = split.build_vocab();
        let model = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 64,
            vocab_size: 0,
            attn_dropout: 0.0,
        };
        (split, vocab, model)
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_steps: steps,
            eval_interval: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_is_linear() {
        let c = cfg(3000);
        assert_eq!(lr_at(0, &c), c.lr0);
        assert_eq!(lr_at(3000, &c), 0.0);
        assert!((lr_at(1500, &c) - c.lr0 / 2.0).abs() < 1e-18);
    }

    #[test]
    fn recipes_parse() {
        let c = TrainConfig::default().with_recipe("d-ar+shuffle").unwrap();
        assert_eq!(c.corruption_ratio, 0.2);
        assert!(c.shuffle);
        assert_eq!(c.recipe_name(), "D-AR+Shuffle");
        assert_eq!(TrainConfig::default().recipe_name(), "AR");
        assert!(TrainConfig::default().with_recipe("bogus").is_err());
    }

    #[test]
    fn training_is_deterministic_and_logs_rows() {
        let (split, vocab, model) = tiny();
        let c = cfg(10);
        let pools = TrainPools::from_split(&split, &c);
        let a = train(&pools, &vocab, &model, &c).unwrap();
        let b = train(&pools, &vocab, &model, &c).unwrap();
        assert_eq!(a.checkpoint.hash().unwrap(), b.checkpoint.hash().unwrap());
        let steps: Vec<usize> = a.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10]);
        assert_eq!(a.checkpoint.optimizer.t, 10);
        let csv = log_csv(&a.log);
        assert!(csv.starts_with("step,lr,doc_loss,qa_loss,wall_ms\n"));
    }

    #[test]
    fn recipes_share_step_zero_loss() {
        let (split, vocab, model) = tiny();
        let ar = cfg(1);
        let pools = TrainPools::from_split(&split, &ar);
        let dar = TrainConfig {
            corruption_ratio: 0.2,
            ..ar.clone()
        };
        let a = train(&pools, &vocab, &model, &ar).unwrap();
        let d = train(&pools, &vocab, &model, &dar).unwrap();
        assert_eq!(a.log[0], LogRow { wall_ms: a.log[0].wall_ms, ..d.log[0].clone() });
    }

    #[test]
    fn zero_ratio_matches_plain_recipe() {
        let (split, vocab, model) = tiny();
        let ar = cfg(6);
        let pools = TrainPools::from_split(&split, &ar);
        let zero = TrainConfig {
            corruption_ratio: 0.0,
            denoise_loss_on_corrupted: false,
            ..ar.clone()
        };
        let a = train(&pools, &vocab, &model, &ar).unwrap();
        let z = train(&pools, &vocab, &model, &zero).unwrap();
        assert_eq!(a.checkpoint, z.checkpoint);
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let (split, vocab, model) = tiny();
        let c = TrainConfig {
            lr0: 1e30,
            ..cfg(50)
        };
        let pools = TrainPools::from_split(&split, &c);
        match train(&pools, &vocab, &model, &c) {
            Err(Error::Diverged { step, last_good, .. }) => {
                assert!(step > 0);
                assert_eq!(last_good.step, step);
            }
            Err(Error::NonFiniteGradient(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn vocab_size_mismatch_is_config_error() {
        let (split, vocab, mut model) = tiny();
        model.vocab_size = 3;
        let c = cfg(1);
        let pools = TrainPools::from_split(&split, &c);
        assert!(matches!(train(&pools, &vocab, &model, &c), Err(Error::Config(_))));
    }
}
