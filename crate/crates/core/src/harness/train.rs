//! Dataset loading, the epoch loop and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{Map, Value};

use crate::data::{read_jsonl, AnswerType, Manifest, QAPair, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{classification_report, corpus_scores, write_csv_rows, Averaging, MetricReport};
use crate::numeric::{Adam, Rng};
use crate::tokenizer::{decode, Vocab};
use crate::vision::{Image, VisualTokens, CLIP_FRAMES};

use super::config::{EvalSplit, RunConfig};
use super::model::{PreparedInput, VqaModel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// One question with its cached visual tokens and supervision.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sequence_id: u32,
    pub frame_id: u32,
    pub question: String,
    pub answer: String,
    pub input: PreparedInput,
    /// Class index (classification) or `[start] .. [end]` ids (sentence).
    pub label: usize,
    pub target: Vec<usize>,
    /// Normalised reference text for sentence metrics.
    pub reference: String,
}

/// A generated dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub split: SplitSpec,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::Config(format!(
                "dataset manifest {} not found (run datagen first)",
                manifest_path.display()
            )));
        }
        let manifest = Manifest::load(&manifest_path)?;
        let split_path = root.join(SPLIT_FILE);
        if !split_path.exists() {
            return Err(Error::Config(format!("split file {} not found", split_path.display())));
        }
        let split = SplitSpec::load(&split_path)?;
        Ok(DatasetDir {
            root: root.to_path_buf(),
            manifest,
            split,
        })
    }

    pub fn qa_pairs(&self, mode: AnswerType) -> Result<Vec<QAPair>> {
        let file = match mode {
            AnswerType::Classification => &self.manifest.qa_classification,
            AnswerType::Sentence => &self.manifest.qa_sentence,
        };
        read_jsonl(&self.root.join(file))
    }

    /// Frame ids of `(seq, frame)`'s clip: `f-2, f-1, f`, clamped at the
    /// sequence start by repeating the first frame.
    pub fn clip_frames(&self, sequence_id: u32, frame_id: u32) -> Result<Vec<u32>> {
        let seq = self
            .manifest
            .sequences
            .iter()
            .find(|s| s.sequence_id == sequence_id)
            .ok_or_else(|| Error::Config(format!("sequence {sequence_id} not in manifest")))?;
        let pos = seq
            .frames
            .iter()
            .position(|f| f.frame_id == frame_id)
            .ok_or_else(|| Error::Config(format!("frame {frame_id} of sequence {sequence_id} not in manifest")))?;
        Ok((0..CLIP_FRAMES)
            .rev()
            .map(|back| seq.frames[pos.saturating_sub(back)].frame_id)
            .collect())
    }

    pub fn load_image(&self, sequence_id: u32, frame_id: u32) -> Result<Image> {
        let path = self
            .manifest
            .image_path(&self.root, sequence_id, frame_id)
            .ok_or_else(|| Error::Config(format!("no image for sequence {sequence_id} frame {frame_id}")))?;
        Image::load(&path)
    }
}

pub fn load_vocab(config: &RunConfig) -> Result<Vocab> {
    let path = config.vocab_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "vocabulary {} not found (run tokenizer-train first)",
            path.display()
        )));
    }
    Vocab::load(&path)
}

/// Builds samples for the given sequences, computing each frame's visual
/// tokens once. `limit` caps the count (0 keeps all).
pub fn prepare_samples(model: &VqaModel, data: &DatasetDir, sequences: &[u32], limit: usize) -> Result<Vec<Sample>> {
    let cfg = &model.config;
    if data.manifest.dataset != cfg.dataset {
        return Err(Error::Config(format!(
            "dataset mismatch: data is {}, run configured for {}",
            data.manifest.dataset, cfg.dataset
        )));
    }
    let pairs = data.qa_pairs(cfg.mode)?;
    let mut cache: BTreeMap<(u32, u32), VisualTokens> = BTreeMap::new();
    let mut images: BTreeMap<(u32, u32), Image> = BTreeMap::new();
    let mut out = Vec::new();
    for qa in pairs.into_iter().filter(|q| sequences.contains(&q.sequence_id)) {
        if limit > 0 && out.len() >= limit {
            break;
        }
        let key = (qa.sequence_id, qa.frame_id);
        if !cache.contains_key(&key) {
            let ids = if cfg.temporal {
                data.clip_frames(qa.sequence_id, qa.frame_id)?
            } else {
                vec![qa.frame_id]
            };
            let mut frames = Vec::with_capacity(ids.len());
            for f in ids {
                let k = (qa.sequence_id, f);
                if !images.contains_key(&k) {
                    images.insert(k, data.load_image(qa.sequence_id, f)?);
                }
                frames.push(images[&k].clone());
            }
            cache.insert(key, model.visual_tokens(&frames)?);
        }
        out.push(make_sample(model, qa, cache[&key].clone())?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no {} question-answer pairs for sequences {sequences:?}", cfg.mode)));
    }
    Ok(out)
}

/// A sample from in-memory pieces (used by `ask` and tests).
pub fn make_sample(model: &VqaModel, qa: QAPair, visual: VisualTokens) -> Result<Sample> {
    let text = model.encode_question(&qa.question)?;
    let (label, target, reference) = match model.config.mode {
        AnswerType::Classification => {
            let label = model
                .labels
                .index_of(&qa.answer)
                .ok_or_else(|| Error::Config(format!("answer `{}` is outside the label universe", qa.answer)))?;
            (label, Vec::new(), String::new())
        }
        AnswerType::Sentence => {
            let target = model.encode_answer(&qa.answer)?;
            let reference = decode(&target, &model.vocab)?;
            (0, target, reference)
        }
    };
    Ok(Sample {
        sequence_id: qa.sequence_id,
        frame_id: qa.frame_id,
        question: qa.question,
        answer: qa.answer,
        input: PreparedInput { text, visual },
        label,
        target,
        reference,
    })
}

/// Per-sample metrics over `samples`, no gradients.
pub fn evaluate(model: &VqaModel, samples: &[Sample]) -> Result<MetricReport> {
    let mut report = MetricReport {
        config: config_json(&model.config),
        samples: samples.len(),
        classification: None,
        sentence: None,
    };
    match model.config.mode {
        AnswerType::Classification => {
            let preds = samples.iter().map(|s| model.predict_class(&s.input)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            report.classification = Some(classification_report(&preds, &labels, &model.labels.labels, Averaging::Macro)?);
        }
        AnswerType::Sentence => {
            let cands = samples.iter().map(|s| model.answer_sentence(&s.input)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&str> = samples.iter().map(|s| s.reference.as_str()).collect();
            let cands: Vec<&str> = cands.iter().map(String::as_str).collect();
            report.sentence = Some(corpus_scores(&cands, &refs)?);
        }
    }
    Ok(report)
}

pub fn config_json(config: &RunConfig) -> Map<String, Value> {
    config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k, Value::String(v)))
        .collect()
}

/// Score used for best-checkpoint selection.
pub fn selection_score(report: &MetricReport) -> f64 {
    match (&report.classification, &report.sentence) {
        (Some(c), _) => c.accuracy,
        (None, Some(s)) => s.bleu_4,
        _ => f64::NEG_INFINITY,
    }
}

/// Metric columns of one training-log row.
pub fn metric_columns(report: &MetricReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    if let Some(c) = &report.classification {
        out.push(("accuracy".into(), c.accuracy));
        out.push(("recall".into(), c.recall));
        out.push(("precision".into(), c.precision));
        out.push(("fscore".into(), c.fscore));
    }
    if let Some(s) = &report.sentence {
        out.push(("bleu_1".into(), s.bleu_1));
        out.push(("bleu_2".into(), s.bleu_2));
        out.push(("bleu_3".into(), s.bleu_3));
        out.push(("bleu_4".into(), s.bleu_4));
        out.push(("cider".into(), s.cider.unwrap_or(f64::NAN)));
        out.push(("meteor_exact".into(), s.meteor_exact));
    }
    out
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Vec<(String, f64)>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub best_report: Option<MetricReport>,
    pub steps: usize,
}

/// Mean loss of one sample, with dropout drawn from `rng` when given.
pub fn sample_loss(model: &VqaModel, s: &Sample, rng: Option<&mut Rng>) -> Result<crate::numeric::Tensor> {
    match model.config.mode {
        AnswerType::Classification => model.classification_loss(&s.input, s.label, rng),
        AnswerType::Sentence => model.sentence_loss(&s.input, &s.target, rng),
    }
}

/// One shuffled pass of mini-batch Adam. Returns the mean sample loss and
/// the number of optimizer steps.
pub fn train_epoch(model: &VqaModel, adam: &mut Adam, samples: &[Sample], epoch: usize) -> Result<(f64, usize)> {
    let cfg = &model.config;
    let root = Rng::new(cfg.seed).split(1_000 + epoch as u64);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    root.split(0).shuffle(&mut order);
    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(cfg.batch_size) {
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let mut drop_rng = root.split(1 + i as u64);
            let loss = sample_loss(model, &samples[i], Some(&mut drop_rng))?;
            total += loss.item();
            loss.scale(scale).backward()?;
        }
        adam.step()?;
        steps += 1;
    }
    Ok((total / samples.len() as f64, steps))
}

/// Hooks observed by [`fit`].
pub trait FitObserver {
    /// Called when a new best checkpoint is reached.
    fn on_best(&mut self, _model: &VqaModel, _epoch: usize) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl FitObserver for () {}

/// Trains for `config.epochs`, evaluating on `eval` after every epoch.
pub fn fit(model: &VqaModel, train: &[Sample], eval: &[Sample], observer: &mut dyn FitObserver) -> Result<TrainOutcome> {
    let cfg = &model.config;
    let mut adam = Adam::new(model.trainable(), cfg.lr);
    let started = Instant::now();
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        best_epoch: 0,
        best_score: f64::NEG_INFINITY,
        best_report: None,
        steps: 0,
    };
    for epoch in 1..=cfg.epochs {
        let (loss, steps) = train_epoch(model, &mut adam, train, epoch)?;
        outcome.steps += steps;
        if !loss.is_finite() {
            return Err(Error::Contract(format!("training diverged: loss {loss} at epoch {epoch}")));
        }
        let report = evaluate(model, eval)?;
        let score = selection_score(&report);
        if score > outcome.best_score {
            outcome.best_score = score;
            outcome.best_epoch = epoch;
            observer.on_best(model, epoch)?;
            outcome.best_report = Some(report.clone());
        }
        let record = EpochRecord {
            epoch,
            loss,
            metrics: metric_columns(&report),
            wall_seconds: if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
        };
        observer.on_epoch(&record)?;
        outcome.log.push(record);
    }
    Ok(outcome)
}

/// Writes the training log CSV: `epoch, loss, <metrics>, wall_seconds`.
pub fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let rows: Vec<Vec<(String, String)>> = log
        .iter()
        .map(|r| {
            let mut row = vec![("epoch".to_string(), r.epoch.to_string()), ("loss".to_string(), format!("{:.6}", r.loss))];
            row.extend(r.metrics.iter().map(|(k, v)| (k.clone(), format!("{v:.6}"))));
            row.push(("wall_seconds".into(), format!("{:.3}", r.wall_seconds)));
            row
        })
        .collect();
    write_csv_rows(path, &rows)
}

/// Sequences used for evaluation under `split`.
pub fn eval_sequences(config: &RunConfig, split: &SplitSpec) -> Vec<u32> {
    match config.eval_split {
        EvalSplit::Train => split.train.clone(),
        EvalSplit::Test => split.test.clone(),
    }
}
