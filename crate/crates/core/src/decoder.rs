//! Transformer answer decoder and beam search.
//!
//! Each layer runs causal self-attention, cross-attention over the encoder
//! states (pad keys masked) and a GeLU feed-forward block, every sub-block
//! post-norm with a residual. Input embeddings and the output projection
//! share the encoder's token table; the decoder owns its position table and
//! an output bias.

use std::cmp::Ordering;

use crate::encoder::{key_mask_bias, AttentionBlock, BaselineTail};
use crate::error::{Error, Result};
use crate::numeric::{embedding_table, join, log_softmax_row, no_grad, NamedParams, Parameters, Rng, Tensor};
use crate::tokenizer::{END, PAD, START};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub max_answer_len: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 6,
            d_model: 300,
            num_heads: 6,
            ffn_hidden: 2048,
            max_answer_len: 20,
            dropout: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "decoder d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_answer_len == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("zero-sized decoder dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// `-inf` above the diagonal.
pub fn causal_bias(t: usize) -> Tensor {
    let data = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j <= i { 0.0 } else { f64::NEG_INFINITY }))
        .collect();
    Tensor::new(&[t, t], data).unwrap()
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: AttentionBlock,
    pub cross_attention: AttentionBlock,
    pub ffn: BaselineTail,
}

impl DecoderLayer {
    pub fn new(rng: &mut Rng, config: &DecoderConfig) -> Self {
        DecoderLayer {
            self_attention: AttentionBlock::new(rng, config.d_model, config.num_heads),
            cross_attention: AttentionBlock::new(rng, config.d_model, config.num_heads),
            ffn: BaselineTail::new(rng, config.d_model, config.ffn_hidden),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        states: &Tensor,
        memory_bias: &Tensor,
        dropout: f64,
        mut rng: Option<&mut Rng>,
    ) -> Result<Tensor> {
        let t = x.shape()[0];
        let sa = self.self_attention.attend(x, x, &causal_bias(t))?.dropout(dropout, rng.as_deref_mut())?;
        let x = self.self_attention.norm.forward(&x.add(&sa)?)?;
        let ca = self
            .cross_attention
            .attend(&x, states, memory_bias)?
            .dropout(dropout, rng.as_deref_mut())?;
        let x = self.cross_attention.norm.forward(&x.add(&ca)?)?;
        self.ffn.forward(&x, dropout, rng)
    }
}

impl Parameters for DecoderLayer {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.self_attention.collect_params(&join(prefix, "self_attention"), out);
        self.cross_attention.collect_params(&join(prefix, "cross_attention"), out);
        self.ffn.collect_params(&join(prefix, "ffn"), out);
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub position: Tensor,
    pub output_bias: Tensor,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(rng: &mut Rng, config: DecoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let position = embedding_table(rng, config.max_answer_len, config.d_model);
        let output_bias = Tensor::param(&[vocab_size], vec![0.0; vocab_size])?;
        let layers = (0..config.num_layers).map(|_| DecoderLayer::new(rng, &config)).collect();
        Ok(Decoder {
            config,
            position,
            output_bias,
            layers,
        })
    }

    /// Logits `[T x vocab]` for the target prefix `target_ids`; row `t`
    /// predicts token `t + 1`.
    pub fn decode_train(
        &self,
        token_table: &Tensor,
        states: &Tensor,
        mask: &[f64],
        target_ids: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<Tensor> {
        if target_ids.first() != Some(&START) {
            return Err(Error::Contract("decoder target must begin with [start]".into()));
        }
        let t = target_ids.len();
        if t > self.config.max_answer_len {
            return Err(Error::Contract(format!(
                "target length {t} exceeds max_answer_len {}",
                self.config.max_answer_len
            )));
        }
        if mask.len() != states.shape()[0] {
            return Err(Error::shape("decoder memory mask", states.shape(), &[mask.len()]));
        }
        let positions: Vec<usize> = (0..t).collect();
        let mut x = token_table
            .embedding(target_ids)?
            .add(&self.position.embedding(&positions)?)?
            .dropout(self.config.dropout, rng.as_deref_mut())?;
        let memory_bias = key_mask_bias(t, mask);
        for layer in &self.layers {
            x = layer.forward(&x, states, &memory_bias, self.config.dropout, rng.as_deref_mut())?;
        }
        x.matmul_t(token_table)?.add_bias(&self.output_bias)
    }

    /// Teacher-forced loss: targets are `target_ids` shifted left, pads ignored.
    pub fn loss(
        &self,
        token_table: &Tensor,
        states: &Tensor,
        mask: &[f64],
        target_ids: &[usize],
        rng: Option<&mut Rng>,
    ) -> Result<Tensor> {
        let logits = self.decode_train(token_table, states, mask, target_ids, rng)?;
        cross_entropy_shifted(&logits, target_ids)
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn next_log_probs(&self, token_table: &Tensor, states: &Tensor, mask: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        no_grad(|| {
            let logits = self.decode_train(token_table, states, mask, prefix, None)?;
            let v = logits.shape()[1];
            let data = logits.data();
            let last = &data[(prefix.len() - 1) * v..];
            Ok(log_softmax_row(last))
        })
    }

    pub fn beam_search(&self, token_table: &Tensor, states: &Tensor, mask: &[f64], gen: &GenerationConfig) -> Result<Vec<usize>> {
        let mut step = |prefix: &[usize]| self.next_log_probs(token_table, states, mask, prefix);
        let best = beam_search_with(&mut step, gen)?;
        Ok(best.answer_ids())
    }

    pub fn greedy(&self, token_table: &Tensor, states: &Tensor, mask: &[f64], max_answer_len: usize) -> Result<Vec<usize>> {
        let mut step = |prefix: &[usize]| self.next_log_probs(token_table, states, mask, prefix);
        Ok(greedy_with(&mut step, max_answer_len)?.answer_ids())
    }
}

impl Parameters for Decoder {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "position"), self.position.clone()));
        out.push((join(prefix, "output_bias"), self.output_bias.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("layer{i}")), out);
        }
    }
}

/// Cross-entropy of `logits[t]` against `target_ids[t + 1]`, last row and
/// pads ignored.
pub fn cross_entropy_shifted(logits: &Tensor, target_ids: &[usize]) -> Result<Tensor> {
    let mut shifted: Vec<usize> = target_ids[1..].to_vec();
    shifted.push(PAD);
    logits.cross_entropy(&shifted, Some(PAD))
}

/// Closed-form decoder count (token table excluded: it is shared).
pub fn count_parameters(config: &DecoderConfig, vocab_size: usize) -> usize {
    use crate::encoder::{attention_params, baseline_ffn_params, norm_params};
    let d = config.d_model;
    config.max_answer_len * d
        + vocab_size
        + config.num_layers * (2 * attention_params(d) + baseline_ffn_params(d, config.ffn_hidden) + norm_params(d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub beam_width: usize,
    pub max_answer_len: usize,
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beam_width: 3,
            max_answer_len: 20,
            length_penalty: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn start() -> Self {
        BeamHypothesis {
            tokens: vec![START],
            log_prob: 0.0,
            finished: false,
        }
    }

    fn extend(&self, token: usize, log_p: f64) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        BeamHypothesis {
            tokens,
            log_prob: self.log_prob + log_p,
            finished: token == END,
        }
    }

    /// `log_prob / generated_len^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return self.log_prob;
        }
        let len = (self.tokens.len() - 1).max(1) as f64;
        self.log_prob / len.powf(alpha)
    }

    /// Tokens with `[start]` and `[end]` removed.
    pub fn answer_ids(&self) -> Vec<usize> {
        self.tokens.iter().copied().filter(|&t| t != START && t != END).collect()
    }
}

/// Higher score first; ties go to the lexicographically smaller sequence.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .partial_cmp(&a.score(alpha))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Beam search over an arbitrary next-token distribution. `step` maps a
/// prefix (starting with `[start]`) to log-probabilities over the vocabulary.
/// Hypotheses never exceed `max_answer_len` tokens including `[start]`.
pub fn beam_search_with(
    step: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
    gen: &GenerationConfig,
) -> Result<BeamHypothesis> {
    if gen.beam_width == 0 {
        return Err(Error::Config("beam_width must be at least 1".into()));
    }
    let k = gen.beam_width;
    let alpha = gen.length_penalty;
    let mut beams = vec![BeamHypothesis::start()];
    while beams.iter().any(|b| !b.finished && b.tokens.len() < gen.max_answer_len) {
        let mut candidates = Vec::new();
        for beam in &beams {
            if beam.finished || beam.tokens.len() >= gen.max_answer_len {
                candidates.push(beam.clone());
                continue;
            }
            let log_probs = step(&beam.tokens)?;
            for tok in top_k(&log_probs, k) {
                candidates.push(beam.extend(tok, log_probs[tok]));
            }
        }
        candidates.sort_by(|a, b| rank(a, b, alpha));
        candidates.truncate(k);
        beams = candidates;
    }
    let pool: Vec<&BeamHypothesis> = if beams.iter().any(|b| b.finished) {
        beams.iter().filter(|b| b.finished).collect()
    } else {
        beams.iter().collect()
    };
    Ok(pool.into_iter().min_by(|a, b| rank(a, b, alpha)).unwrap().clone())
}

/// Argmax decoding (ties to the lower token id).
pub fn greedy_with(
    step: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
    max_answer_len: usize,
) -> Result<BeamHypothesis> {
    let mut hyp = BeamHypothesis::start();
    while !hyp.finished && hyp.tokens.len() < max_answer_len {
        let log_probs = step(&hyp.tokens)?;
        let tok = top_k(&log_probs, 1)[0];
        hyp = hyp.extend(tok, log_probs[tok]);
    }
    Ok(hyp)
}
