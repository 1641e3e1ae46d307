//! Command implementations behind the CLI subcommands. Each writes its
//! artifacts and returns a summary for printing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::data::{
    default_split, generate_qa, synth_annotations, synth_scene, write_jsonl, AnswerType, DatasetKind, Manifest,
    ManifestFrame, ManifestSequence, QAPair,
};
use crate::encoder::{self, EncoderVariant, ParameterTable};
use crate::error::{Error, Result};
use crate::metrics::{write_csv_rows, MetricReport};
use crate::numeric::Parameters;
use crate::tokenizer::{train_vocab, Vocab, DEFAULT_VOCAB_SIZE};
use crate::vision::{Image, CLIP_FRAMES, PATCH_GRIDS};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::model::{count_model_parameters, PreparedInput, VqaModel};
use super::train::{
    eval_sequences, evaluate, fit, load_vocab, prepare_samples, write_log, DatasetDir,
    EpochRecord, FitObserver, CHECKPOINT_FILE, LOG_FILE, MANIFEST_FILE, SPLIT_FILE,
};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// datagen
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DatagenArgs {
    pub dataset: DatasetKind,
    pub sequences: u32,
    pub frames_per_sequence: u32,
    pub seed: u64,
    pub image_size: usize,
    /// Held-out sequences; `None` picks 3 of every 14 (at least one).
    pub test_sequences: Option<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct DatagenSummary {
    pub frames: usize,
    pub qa_classification: usize,
    pub qa_sentence: usize,
    pub train_sequences: Vec<u32>,
    pub test_sequences: Vec<u32>,
}

pub fn cmd_datagen(args: &DatagenArgs) -> Result<DatagenSummary> {
    if args.sequences < 2 || args.frames_per_sequence == 0 {
        return Err(Error::Config("datagen needs at least 2 sequences and 1 frame per sequence".into()));
    }
    let anns = synth_annotations(args.dataset, args.sequences, args.frames_per_sequence, args.seed);
    let mut cls: Vec<QAPair> = Vec::new();
    let mut sent: Vec<QAPair> = Vec::new();
    let mut sequences: Vec<ManifestSequence> = Vec::new();
    for ann in &anns {
        cls.extend(generate_qa(ann, AnswerType::Classification)?);
        sent.extend(generate_qa(ann, AnswerType::Sentence)?);
        let rel = format!("images/seq_{:02}/frame_{:04}.imgf", ann.sequence_id, ann.frame_id);
        let path = args.out.join(&rel);
        create_dir(path.parent().unwrap())?;
        synth_scene(ann, args.seed, args.image_size)?.save_imgf(&path)?;
        let frame = ManifestFrame {
            frame_id: ann.frame_id,
            image: rel,
            timestamp_seconds: ann.timestamp_seconds,
        };
        match sequences.last_mut() {
            Some(s) if s.sequence_id == ann.sequence_id => s.frames.push(frame),
            _ => sequences.push(ManifestSequence {
                sequence_id: ann.sequence_id,
                frames: vec![frame],
            }),
        }
    }
    let manifest = Manifest {
        dataset: args.dataset,
        seed: args.seed,
        image_size: args.image_size,
        annotations: "annotations.jsonl".into(),
        qa_classification: "qa_classification.jsonl".into(),
        qa_sentence: "qa_sentence.jsonl".into(),
        sequences,
    };
    write_jsonl(&args.out.join(&manifest.annotations), &anns)?;
    write_jsonl(&args.out.join(&manifest.qa_classification), &cls)?;
    write_jsonl(&args.out.join(&manifest.qa_sentence), &sent)?;
    manifest.save(&args.out.join(MANIFEST_FILE))?;
    let test_count = args
        .test_sequences
        .unwrap_or_else(|| ((args.sequences as usize * 3 + 7) / 14).max(1));
    let split = default_split(&manifest, test_count)?;
    split.save(&args.out.join(SPLIT_FILE))?;
    Ok(DatagenSummary {
        frames: anns.len(),
        qa_classification: cls.len(),
        qa_sentence: sent.len(),
        train_sequences: split.train,
        test_sequences: split.test,
    })
}

// ---------------------------------------------------------------------------
// tokenizer-train
// ---------------------------------------------------------------------------

/// Trains a vocabulary on every question and answer of both modes.
pub fn cmd_tokenizer_train(data_dir: &Path, out: &Path, target_size: usize, min_freq: usize) -> Result<Vocab> {
    let data = DatasetDir::open(data_dir)?;
    let mut corpus = Vec::new();
    for mode in [AnswerType::Classification, AnswerType::Sentence] {
        for qa in data.qa_pairs(mode)? {
            corpus.push(qa.question);
            corpus.push(qa.answer);
        }
    }
    let vocab = train_vocab(&corpus, target_size, min_freq)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    vocab.save(out)?;
    Ok(vocab)
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub records: Vec<EpochRecord>,
}

struct CheckpointWriter {
    path: PathBuf,
}

impl FitObserver for CheckpointWriter {
    fn on_best(&mut self, model: &VqaModel, _epoch: usize) -> Result<()> {
        model.to_checkpoint().save(&self.path)
    }
}

pub fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    let vocab = load_vocab(config)?;
    let data = DatasetDir::open(&config.data_dir)?;
    let model = VqaModel::new(config.clone(), vocab)?;
    let train = prepare_samples(&model, &data, &data.split.train, config.train_limit)?;
    let eval = prepare_samples(&model, &data, &eval_sequences(config, &data.split), config.eval_limit)?;
    create_dir(out_dir)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let mut writer = CheckpointWriter { path: checkpoint.clone() };
    let outcome = fit(&model, &train, &eval, &mut writer)?;
    let log = out_dir.join(LOG_FILE);
    write_log(&log, &outcome.log)?;
    if let Some(report) = &outcome.best_report {
        report.write_json(&out_dir.join("best_report.json"))?;
    }
    Ok(TrainSummary {
        checkpoint,
        log,
        train_samples: train.len(),
        eval_samples: eval.len(),
        best_epoch: outcome.best_epoch,
        best_score: outcome.best_score,
        steps: outcome.steps,
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss),
        records: outcome.log,
    })
}

/// Loads a checkpoint and applies run-time overrides. Overrides touching
/// the architecture must agree with the stored config.
pub fn load_model(checkpoint: &Path, overrides: &[(String, String)]) -> Result<VqaModel> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let stored = RunConfig::from_text(&ckpt.config)?;
    let mut wanted = stored.clone();
    for (k, v) in overrides {
        wanted.set(k, v)?;
    }
    let diff = stored.architecture_diff(&wanted);
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint config differs in: {}",
            diff.join(", ")
        )));
    }
    let vocab = load_vocab(&wanted)?;
    let mut model = VqaModel::from_checkpoint(&ckpt, vocab)?;
    model.config = wanted;
    Ok(model)
}

pub fn cmd_eval(checkpoint: &Path, overrides: &[(String, String)], out_dir: &Path) -> Result<MetricReport> {
    let model = load_model(checkpoint, overrides)?;
    let data = DatasetDir::open(&model.config.data_dir)?;
    let samples = prepare_samples(&model, &data, &eval_sequences(&model.config, &data.split), model.config.eval_limit)?;
    let report = evaluate(&model, &samples)?;
    create_dir(out_dir)?;
    report.write_json(&out_dir.join("report.json"))?;
    report.write_csv(&out_dir.join("report.csv"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub fields: Vec<(String, String)>,
    pub params: usize,
    pub params_closed_form: usize,
    pub final_loss: f64,
}

/// Sweeps every patch grid for both encoder variants (and, with
/// `temporal_sweep` in sentence mode, again with clip features).
pub fn cmd_ablate(base: &RunConfig, out_dir: &Path, temporal_sweep: bool) -> Result<Vec<AblationRow>> {
    let vocab = load_vocab(base)?;
    let data = DatasetDir::open(&base.data_dir)?;
    create_dir(out_dir)?;
    let temporal: Vec<bool> = if temporal_sweep && base.mode == AnswerType::Sentence {
        vec![false, true]
    } else {
        vec![base.temporal]
    };
    let mut rows = Vec::new();
    for &t in &temporal {
        for &n in PATCH_GRIDS.iter() {
            for variant in [EncoderVariant::Baseline, EncoderVariant::ResMlp] {
                let mut cfg = base.clone();
                cfg.patches = n;
                cfg.variant = variant;
                cfg.temporal = t;
                cfg.validate()?;
                let started = Instant::now();
                let model = VqaModel::new(cfg.clone(), vocab.clone())?;
                let train = prepare_samples(&model, &data, &data.split.train, cfg.train_limit)?;
                let eval = prepare_samples(&model, &data, &eval_sequences(&cfg, &data.split), cfg.eval_limit)?;
                let outcome = fit(&model, &train, &eval, &mut ())?;
                let last = outcome.log.last().ok_or_else(|| Error::Config("ablation needs epochs >= 1".into()))?;
                let params = model.num_parameters();
                let closed = count_model_parameters(&cfg, vocab.len()).total();
                let wall = if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
                let mut fields = vec![
                    ("dataset".to_string(), cfg.dataset.to_string()),
                    ("mode".into(), cfg.mode.to_string()),
                    ("variant".into(), variant.to_string()),
                    ("patches".into(), n.to_string()),
                    ("visual_tokens".into(), (n * n).to_string()),
                    ("temporal".into(), t.to_string()),
                    ("epochs".into(), cfg.epochs.to_string()),
                    ("train_samples".into(), train.len().to_string()),
                    ("eval_samples".into(), eval.len().to_string()),
                    ("params".into(), params.to_string()),
                    ("params_closed_form".into(), closed.to_string()),
                    ("final_loss".into(), format!("{:.6}", last.loss)),
                ];
                fields.extend(metric_columns_of(&last.metrics));
                fields.push(("wall_seconds".into(), format!("{wall:.3}")));
                rows.push(AblationRow {
                    fields,
                    params,
                    params_closed_form: closed,
                    final_loss: last.loss,
                });
            }
        }
    }
    let table: Vec<Vec<(String, String)>> = rows.iter().map(|r| r.fields.clone()).collect();
    write_csv_rows(&out_dir.join("ablation.csv"), &table)?;
    Ok(rows)
}

fn metric_columns_of(metrics: &[(String, f64)]) -> Vec<(String, String)> {
    metrics.iter().map(|(k, v)| (k.clone(), format!("{v:.6}"))).collect()
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

/// Totals reported for the compared models, in millions.
pub const REFERENCE_RESMLP_MILLIONS: f64 = 159.0;
pub const REFERENCE_BASELINE_MILLIONS: f64 = 184.2;
pub const REFERENCE_REDUCTION_PERCENT: f64 = 13.64;

#[derive(Clone, Debug, Serialize)]
pub struct VariantCount {
    pub variant: String,
    pub encoder_total: usize,
    pub model_total: usize,
    pub encoder_groups: Vec<(String, usize)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamsReading {
    pub cross_channel_hidden: usize,
    pub baseline: VariantCount,
    pub resmlp: VariantCount,
    /// resmlp / baseline over encoder totals.
    pub ratio: f64,
    /// `100 * (1 - ratio)`; positive means the ResMLP encoder is smaller.
    pub reduction_percent: f64,
    pub matches_reference_direction: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamsReport {
    pub config: serde_json::Map<String, serde_json::Value>,
    pub vocab_size: usize,
    pub vocab_source: String,
    pub baseline_ffn_per_layer: usize,
    pub readings: Vec<ParamsReading>,
    pub reference_resmlp_millions: f64,
    pub reference_baseline_millions: f64,
    pub reference_reduction_percent: f64,
    pub reference_reproducible: bool,
}

fn variant_count(config: &RunConfig, variant: EncoderVariant, cch: usize, vocab: usize) -> VariantCount {
    let mut cfg = config.clone();
    cfg.variant = variant;
    cfg.cross_channel_hidden = cch;
    let enc: ParameterTable = encoder::count_parameters(&cfg.encoder_config(vocab), None);
    VariantCount {
        variant: variant.to_string(),
        encoder_total: enc.total(),
        model_total: count_model_parameters(&cfg, vocab).total(),
        encoder_groups: enc.entries,
    }
}

/// Parameter counts for both variants under the configured cross-channel
/// width and the alternative width (2048 vs 1200).
pub fn cmd_params(config: &RunConfig) -> Result<ParamsReport> {
    let (vocab_size, vocab_source) = match load_vocab(config) {
        Ok(v) => (v.len(), config.vocab_path().display().to_string()),
        Err(_) => (DEFAULT_VOCAB_SIZE, "default".to_string()),
    };
    let mut widths = vec![config.cross_channel_hidden];
    for w in [2048, 1200] {
        if !widths.contains(&w) {
            widths.push(w);
        }
    }
    let readings = widths
        .into_iter()
        .map(|cch| {
            let baseline = variant_count(config, EncoderVariant::Baseline, cch, vocab_size);
            let resmlp = variant_count(config, EncoderVariant::ResMlp, cch, vocab_size);
            let ratio = resmlp.encoder_total as f64 / baseline.encoder_total as f64;
            ParamsReading {
                cross_channel_hidden: cch,
                matches_reference_direction: resmlp.encoder_total < baseline.encoder_total,
                reduction_percent: 100.0 * (1.0 - ratio),
                ratio,
                baseline,
                resmlp,
            }
        })
        .collect();
    Ok(ParamsReport {
        config: super::train::config_json(config),
        vocab_size,
        vocab_source,
        baseline_ffn_per_layer: encoder::baseline_ffn_params(config.d_model, config.ffn_hidden),
        readings,
        reference_resmlp_millions: REFERENCE_RESMLP_MILLIONS,
        reference_baseline_millions: REFERENCE_BASELINE_MILLIONS,
        reference_reduction_percent: REFERENCE_REDUCTION_PERCENT,
        reference_reproducible: false,
    })
}

// ---------------------------------------------------------------------------
// ask
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum AskAnswer {
    /// Top labels with probabilities, highest first.
    Labels(Vec<(String, f64)>),
    Sentence(String),
}

/// Answers one question about one frame (or a three-frame clip; a single
/// frame is repeated when the model expects a clip).
pub fn cmd_ask(model: &VqaModel, images: &[PathBuf], question: &str) -> Result<AskAnswer> {
    if images.is_empty() {
        return Err(Error::Config("ask needs an image".into()));
    }
    let frames = images.iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>()?;
    let frames = match (model.config.temporal, frames.len()) {
        (false, 1) => frames,
        (true, 1) => vec![frames[0].clone(); CLIP_FRAMES],
        (true, n) if n == CLIP_FRAMES => frames,
        (t, n) => {
            return Err(Error::Config(format!(
                "model expects {} frame(s), got {n}",
                if t { "1 or 3" } else { "1" }
            )))
        }
    };
    let input = PreparedInput {
        text: model.encode_question(question)?,
        visual: model.visual_tokens(&frames)?,
    };
    Ok(match model.config.mode {
        AnswerType::Classification => AskAnswer::Labels(model.rank_labels(&input)?.into_iter().take(3).collect()),
        AnswerType::Sentence => AskAnswer::Sentence(model.answer_sentence(&input)?),
    })
}
