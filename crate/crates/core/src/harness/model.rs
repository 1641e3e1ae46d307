//! The full question-answering model and its per-sample forward paths.

use crate::data::{AnswerType, LabelUniverse};
use crate::decoder::{self, Decoder};
use crate::encoder::{self, ClassifierHead, Encoder, EncoderOutput, ParameterTable};
use crate::error::{Error, Result};
use crate::numeric::{join, no_grad, NamedParams, Parameters, Rng, Tensor};
use crate::tokenizer::{decode, encode, encode_target, normalize, wordpiece, EncodedText, Vocab};
use crate::vision::{adaptive_avg_pool, to_visual_tokens, ConvStack, Image, VisionConfig, VisualTokens};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;

/// Answer head: a label classifier or a sentence decoder.
#[derive(Clone, Debug)]
pub enum AnswerHead {
    Classifier(ClassifierHead),
    Decoder(Decoder),
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub labels: LabelUniverse,
    /// Seeded and frozen: stored in checkpoints, never updated.
    pub cnn: ConvStack,
    pub encoder: Encoder,
    pub head: AnswerHead,
}

/// One question ready for the encoder.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub text: EncodedText,
    pub visual: VisualTokens,
}

impl VqaModel {
    pub fn new(config: RunConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let cnn = ConvStack::new(&mut root.split(1), &config.vision_config())?;
        let encoder = Encoder::new(&mut root.split(2), config.encoder_config(vocab.len()))?;
        let labels = LabelUniverse::for_dataset(config.dataset);
        let mut head_rng = root.split(3);
        let head = match config.mode {
            AnswerType::Classification => AnswerHead::Classifier(ClassifierHead::new(&mut head_rng, config.d_model, labels.len())),
            AnswerType::Sentence => AnswerHead::Decoder(Decoder::new(&mut head_rng, config.decoder_config(), vocab.len())?),
        };
        Ok(VqaModel {
            config,
            vocab,
            labels,
            cnn,
            encoder,
            head,
        })
    }

    /// Rebuilds a model from a checkpoint. `vocab` must be the one it was
    /// trained with; a size mismatch surfaces as a tensor shape error.
    pub fn from_checkpoint(ckpt: &Checkpoint, vocab: Vocab) -> Result<Self> {
        let config = RunConfig::from_text(&ckpt.config)?;
        let model = VqaModel::new(config, vocab)?;
        ckpt.restore_into(&model.named_parameters())?;
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.config.to_text(), &self.named_parameters())
    }

    /// Everything the optimizer updates (the CNN is excluded).
    pub fn trainable(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.encoder.collect_params("encoder", &mut out);
        self.collect_head(&mut out);
        out.into_iter().map(|(_, t)| t).collect()
    }

    fn collect_head(&self, out: &mut NamedParams) {
        match &self.head {
            AnswerHead::Classifier(h) => h.collect_params("classifier", out),
            AnswerHead::Decoder(d) => d.collect_params("decoder", out),
        }
    }

    /// Pooled visual tokens for one sample's frames (one frame, or a clip).
    pub fn visual_tokens(&self, frames: &[Image]) -> Result<VisualTokens> {
        let pooled = no_grad(|| -> Result<Tensor> {
            let map = self.cnn.extract(frames)?;
            Ok(adaptive_avg_pool(&map, self.config.patches)?.detach())
        })?;
        to_visual_tokens(&pooled, self.config.raster_positions)
    }

    /// Encodes `question`, failing when it does not fit next to the visual tokens.
    pub fn encode_question(&self, question: &str) -> Result<EncodedText> {
        let n = self.config.max_seq_len;
        self.encoder.config.check_budget(piece_count(question, &self.vocab), self.config.visual_tokens())?;
        encode(question, &self.vocab, n)
    }

    /// `[start] answer [end]` ids, failing when the answer is too long.
    pub fn encode_answer(&self, answer: &str) -> Result<Vec<usize>> {
        let cap = self.config.max_answer_len;
        let needed = piece_count(answer, &self.vocab) + 2;
        if needed > cap {
            return Err(Error::Config(format!(
                "answer `{answer}` needs {needed} decoder tokens > max_answer_len {cap}"
            )));
        }
        Ok(encode_target(answer, &self.vocab, cap)?.real_ids().to_vec())
    }

    pub fn encode_inputs(&self, input: &PreparedInput, rng: Option<&mut Rng>) -> Result<EncoderOutput> {
        self.encoder.forward(&input.text, &input.visual, rng)
    }

    /// Class logits `[1 x K]`.
    pub fn class_logits(&self, input: &PreparedInput, rng: Option<&mut Rng>) -> Result<Tensor> {
        let AnswerHead::Classifier(head) = &self.head else {
            return Err(Error::Config("model was trained for sentence answers".into()));
        };
        let out = self.encode_inputs(input, rng)?;
        encoder::classify(&out.pooled, head)
    }

    pub fn classification_loss(&self, input: &PreparedInput, label: usize, rng: Option<&mut Rng>) -> Result<Tensor> {
        self.class_logits(input, rng)?.cross_entropy(&[label], None)
    }

    pub fn sentence_loss(&self, input: &PreparedInput, target: &[usize], mut rng: Option<&mut Rng>) -> Result<Tensor> {
        let AnswerHead::Decoder(dec) = &self.head else {
            return Err(Error::Config("model was trained for classification".into()));
        };
        let out = self.encode_inputs(input, rng.as_deref_mut())?;
        dec.loss(&self.encoder.embeddings.token, &out.states, &out.mask, target, rng)
    }

    /// Class probabilities, highest first (ties by lower index).
    pub fn rank_labels(&self, input: &PreparedInput) -> Result<Vec<(String, f64)>> {
        let logits = no_grad(|| self.class_logits(input, None))?;
        let probs = logits.softmax(1)?.to_vec();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        Ok(order
            .into_iter()
            .map(|i| (self.labels.label(i).unwrap_or("?").to_string(), probs[i]))
            .collect())
    }

    pub fn predict_class(&self, input: &PreparedInput) -> Result<usize> {
        let ranked = self.rank_labels(input)?;
        Ok(self.labels.index_of(&ranked[0].0).unwrap_or(0))
    }

    /// Beam-search answer sentence.
    pub fn answer_sentence(&self, input: &PreparedInput) -> Result<String> {
        let AnswerHead::Decoder(dec) = &self.head else {
            return Err(Error::Config("model was trained for classification".into()));
        };
        let out = no_grad(|| self.encode_inputs(input, None))?;
        let ids = dec.beam_search(&self.encoder.embeddings.token, &out.states, &out.mask, &self.config.generation_config())?;
        decode(&ids, &self.vocab)
    }

    /// Measured counts grouped by submodule, vision first.
    pub fn parameter_table(&self) -> ParameterTable {
        let mut t = ParameterTable::default();
        t.push("vision", self.cnn.num_parameters());
        let head = match &self.head {
            AnswerHead::Classifier(h) => Some(h),
            AnswerHead::Decoder(_) => None,
        };
        t.extend(encoder::measure_parameters(&self.encoder, head));
        if let AnswerHead::Decoder(d) = &self.head {
            t.push("decoder", d.num_parameters());
        }
        t
    }
}

impl Parameters for VqaModel {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.cnn.collect_params(&join(prefix, "cnn"), out);
        self.encoder.collect_params(&join(prefix, "encoder"), out);
        let mut head = Vec::new();
        self.collect_head(&mut head);
        out.extend(head.into_iter().map(|(n, t)| (join(prefix, &n), t)));
    }
}

fn piece_count(text: &str, vocab: &Vocab) -> usize {
    normalize(text).iter().map(|w| wordpiece(w, vocab).len()).sum()
}

/// Closed-form count of the convolutional extractor.
pub fn vision_parameter_count(config: &VisionConfig) -> usize {
    let mut in_channels = 3;
    let mut total = 0;
    for (i, &w) in config.widths.iter().enumerate() {
        let t = if i == 0 { config.frames } else { 1 };
        total += encoder::linear_params(t * 9 * in_channels, w) + encoder::norm_params(w);
        in_channels = w;
    }
    total
}

/// Closed-form table for the whole model described by `config`.
pub fn count_model_parameters(config: &RunConfig, vocab_size: usize) -> ParameterTable {
    let mut t = ParameterTable::default();
    t.push("vision", vision_parameter_count(&config.vision_config()));
    let classes = match config.mode {
        AnswerType::Classification => Some(LabelUniverse::for_dataset(config.dataset).len()),
        AnswerType::Sentence => None,
    };
    t.extend(encoder::count_parameters(&config.encoder_config(vocab_size), classes));
    if config.mode == AnswerType::Sentence {
        t.push("decoder", decoder::count_parameters(&config.decoder_config(), vocab_size));
    }
    t
}
