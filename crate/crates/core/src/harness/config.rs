//! Run configuration: flat `key = value` text, full-size defaults per
//! dataset/answer mode, and a small test profile.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AnswerType, DatasetKind};
use crate::decoder::{DecoderConfig, GenerationConfig};
use crate::encoder::{EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::vision::{VisionConfig, CLIP_FRAMES, FEATURE_CHANNELS, PATCH_GRIDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Full,
    Test,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "test" => Ok(Profile::Test),
            _ => Err(Error::Config(format!("unknown profile `{s}` (full|test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train|test)"))),
        }
    }
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
        }
    }
}

/// Every recognised configuration key, in echo order.
pub const KEYS: &[&str] = &[
    "profile",
    "dataset",
    "mode",
    "variant",
    "patches",
    "temporal",
    "batch_size",
    "epochs",
    "lr",
    "seed",
    "beam_width",
    "length_penalty",
    "data_dir",
    "vocab",
    "d_model",
    "num_layers",
    "num_heads",
    "ffn_hidden",
    "cross_channel_hidden",
    "max_seq_len",
    "decoder_layers",
    "max_answer_len",
    "dropout",
    "cnn_widths",
    "raster_positions",
    "train_limit",
    "eval_split",
    "eval_limit",
    "deterministic",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub dataset: DatasetKind,
    pub mode: AnswerType,
    pub variant: EncoderVariant,
    /// Pooled grid side `n`; the encoder sees `n^2` visual tokens.
    pub patches: usize,
    pub temporal: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub beam_width: usize,
    pub length_penalty: f64,
    pub data_dir: PathBuf,
    /// Defaults to `<data_dir>/vocab.txt`.
    pub vocab: Option<PathBuf>,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub cross_channel_hidden: usize,
    pub max_seq_len: usize,
    pub decoder_layers: usize,
    pub max_answer_len: usize,
    pub dropout: f64,
    pub cnn_widths: Vec<usize>,
    pub raster_positions: bool,
    /// Cap on training pairs; 0 keeps all.
    pub train_limit: usize,
    pub eval_split: EvalSplit,
    /// Cap on evaluation pairs; 0 keeps all.
    pub eval_limit: usize,
    /// Zeroes wall-clock columns so logs are byte-stable.
    pub deterministic: bool,
}

/// Batch size, epochs and learning rate used for each dataset/mode pair.
pub fn full_schedule(dataset: DatasetKind, mode: AnswerType) -> (usize, usize, f64) {
    match (dataset, mode) {
        (DatasetKind::Endovis, AnswerType::Classification) => (64, 80, 1e-5),
        (DatasetKind::Cholec, AnswerType::Classification) => (64, 80, 5e-6),
        (DatasetKind::Endovis, AnswerType::Sentence) => (50, 100, 5e-5),
        (DatasetKind::Cholec, AnswerType::Sentence) => (50, 51, 1e-6),
    }
}

impl RunConfig {
    pub fn new(dataset: DatasetKind, mode: AnswerType, profile: Profile) -> Self {
        let (batch_size, epochs, lr) = full_schedule(dataset, mode);
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        let mut cfg = RunConfig {
            profile,
            dataset,
            mode,
            variant: EncoderVariant::ResMlp,
            patches: 5,
            temporal: false,
            batch_size,
            epochs,
            lr,
            seed: 0,
            beam_width: GenerationConfig::default().beam_width,
            length_penalty: 0.0,
            data_dir: PathBuf::from("data"),
            vocab: None,
            d_model: enc.d_model,
            num_layers: enc.num_layers,
            num_heads: enc.num_heads,
            ffn_hidden: enc.ffn_hidden,
            cross_channel_hidden: enc.cross_channel_hidden,
            max_seq_len: enc.max_seq_len,
            decoder_layers: dec.num_layers,
            max_answer_len: dec.max_answer_len,
            dropout: enc.dropout,
            cnn_widths: VisionConfig::default().widths,
            raster_positions: false,
            train_limit: 0,
            eval_split: EvalSplit::Test,
            eval_limit: 0,
            deterministic: false,
        };
        if profile == Profile::Test {
            cfg.patches = 2;
            cfg.batch_size = 10;
            cfg.epochs = 2;
            cfg.lr = 1e-3;
            cfg.d_model = 32;
            cfg.num_layers = 2;
            cfg.num_heads = 2;
            cfg.ffn_hidden = 64;
            cfg.cross_channel_hidden = 64;
            cfg.max_seq_len = 48;
            cfg.decoder_layers = 1;
            cfg.max_answer_len = 16;
            cfg.dropout = 0.0;
            cfg.cnn_widths = vec![8, 16, 32, FEATURE_CHANNELS];
        }
        cfg
    }

    /// Builds from ordered pairs. `dataset`, `mode` and `profile` select the
    /// defaults; every pair is then applied in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let dataset = last("dataset").map(str::parse).transpose()?.unwrap_or(DatasetKind::Endovis);
        let mode = last("mode").map(str::parse).transpose()?.unwrap_or(AnswerType::Classification);
        let profile = last("profile").map(str::parse).transpose()?.unwrap_or(Profile::Full);
        let mut cfg = RunConfig::new(dataset, mode, profile);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim() {
                "true" | "on" | "1" | "yes" => Ok(true),
                "false" | "off" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
            }
        }
        let v = value.trim();
        match key {
            "profile" => self.profile = v.parse()?,
            "dataset" => self.dataset = v.parse()?,
            "mode" => self.mode = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "patches" => self.patches = num(key, v)?,
            "temporal" => self.temporal = flag(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "beam_width" => self.beam_width = num(key, v)?,
            "length_penalty" => self.length_penalty = num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "vocab" => self.vocab = (!v.is_empty()).then(|| PathBuf::from(v)),
            "d_model" => self.d_model = num(key, v)?,
            "num_layers" => self.num_layers = num(key, v)?,
            "num_heads" => self.num_heads = num(key, v)?,
            "ffn_hidden" => self.ffn_hidden = num(key, v)?,
            "cross_channel_hidden" => self.cross_channel_hidden = num(key, v)?,
            "max_seq_len" => self.max_seq_len = num(key, v)?,
            "decoder_layers" => self.decoder_layers = num(key, v)?,
            "max_answer_len" => self.max_answer_len = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "cnn_widths" => {
                self.cnn_widths = v.split(',').map(|w| num(key, w)).collect::<Result<_>>()?;
            }
            "raster_positions" => self.raster_positions = flag(key, v)?,
            "train_limit" => self.train_limit = num(key, v)?,
            "eval_split" => self.eval_split = v.parse()?,
            "eval_limit" => self.eval_limit = num(key, v)?,
            "deterministic" => self.deterministic = flag(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "profile" => match self.profile {
                Profile::Full => "full".into(),
                Profile::Test => "test".into(),
            },
            "dataset" => self.dataset.to_string(),
            "mode" => self.mode.to_string(),
            "variant" => self.variant.to_string(),
            "patches" => self.patches.to_string(),
            "temporal" => self.temporal.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => format!("{:e}", self.lr),
            "seed" => self.seed.to_string(),
            "beam_width" => self.beam_width.to_string(),
            "length_penalty" => self.length_penalty.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "vocab" => self.vocab.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "d_model" => self.d_model.to_string(),
            "num_layers" => self.num_layers.to_string(),
            "num_heads" => self.num_heads.to_string(),
            "ffn_hidden" => self.ffn_hidden.to_string(),
            "cross_channel_hidden" => self.cross_channel_hidden.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "decoder_layers" => self.decoder_layers.to_string(),
            "max_answer_len" => self.max_answer_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "cnn_widths" => self.cnn_widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            "raster_positions" => self.raster_positions.to_string(),
            "train_limit" => self.train_limit.to_string(),
            "eval_split" => self.eval_split.as_str().into(),
            "eval_limit" => self.eval_limit.to_string(),
            "deterministic" => self.deterministic.to_string(),
            _ => return None,
        })
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|k| (k.to_string(), self.get(k).unwrap())).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !PATCH_GRIDS.contains(&self.patches) {
            return Err(Error::Config(format!("patches must be one of {PATCH_GRIDS:?}, got {}", self.patches)));
        }
        if self.batch_size == 0 || self.beam_width == 0 {
            return Err(Error::Config("batch_size and beam_width must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.encoder_config(1).validate()?;
        self.decoder_config().validate()?;
        self.vision_config().validate()?;
        if self.patches * self.patches + 3 > self.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len {} leaves no room for a question next to {} visual tokens",
                self.max_seq_len,
                self.patches * self.patches
            )));
        }
        Ok(())
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.data_dir.join("vocab.txt"))
    }

    pub fn visual_tokens(&self) -> usize {
        self.patches * self.patches
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            ffn_hidden: self.ffn_hidden,
            cross_channel_hidden: self.cross_channel_hidden,
            max_seq_len: self.max_seq_len,
            visual_dim: FEATURE_CHANNELS,
            variant: self.variant,
            dropout: self.dropout,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            num_layers: self.decoder_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            ffn_hidden: self.ffn_hidden,
            max_answer_len: self.max_answer_len,
            dropout: self.dropout,
        }
    }

    pub fn vision_config(&self) -> VisionConfig {
        VisionConfig {
            widths: self.cnn_widths.clone(),
            frames: if self.temporal { CLIP_FRAMES } else { 1 },
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            beam_width: self.beam_width,
            max_answer_len: self.max_answer_len,
            length_penalty: self.length_penalty,
        }
    }

    /// Keys whose values differ (architecture-relevant keys only).
    pub fn architecture_diff(&self, other: &RunConfig) -> Vec<String> {
        const ARCH: &[&str] = &[
            "dataset",
            "mode",
            "variant",
            "patches",
            "temporal",
            "d_model",
            "num_layers",
            "num_heads",
            "ffn_hidden",
            "cross_channel_hidden",
            "max_seq_len",
            "decoder_layers",
            "max_answer_len",
            "cnn_widths",
            "raster_positions",
        ];
        ARCH.iter()
            .filter(|k| self.get(k) != other.get(k))
            .map(|k| format!("{k} ({} vs {})", self.get(k).unwrap(), other.get(k).unwrap()))
            .collect()
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)));
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_defaults() {
        let c = RunConfig::new(DatasetKind::Endovis, AnswerType::Classification, Profile::Full);
        assert_eq!((c.batch_size, c.epochs, c.lr), (64, 80, 1e-5));
        assert_eq!((c.d_model, c.num_layers, c.ffn_hidden, c.max_seq_len), (300, 6, 2048, 64));
        let s = RunConfig::new(DatasetKind::Cholec, AnswerType::Sentence, Profile::Full);
        assert_eq!((s.batch_size, s.lr), (50, 1e-6));
        assert_eq!(full_schedule(DatasetKind::Cholec, AnswerType::Classification).2, 5e-6);
        assert_eq!(full_schedule(DatasetKind::Endovis, AnswerType::Sentence).2, 5e-5);
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let text = "# run\nprofile = test\ndataset = cholec\nmode = sentence\nlr = 0.002\nvariant = baseline\n";
        let c = RunConfig::from_text(text).unwrap();
        assert_eq!(c.dataset, DatasetKind::Cholec);
        assert_eq!(c.lr, 0.002);
        assert_eq!(c.d_model, 32);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn bad_keys_and_values() {
        assert!(parse_pairs("nope = 1").unwrap_err().to_string().contains("unknown key"));
        assert!(parse_pairs("lr 3").is_err());
        assert!(RunConfig::from_text("patches = 6").is_err());
        assert!(RunConfig::from_text("temporal = maybe").is_err());
        assert!(RunConfig::from_text("d_model = 301").is_err());
    }

    #[test]
    fn architecture_diff_lists_fields() {
        let a = RunConfig::new(DatasetKind::Endovis, AnswerType::Classification, Profile::Test);
        let mut b = a.clone();
        b.variant = EncoderVariant::Baseline;
        b.lr = 0.5;
        let d = a.architecture_diff(&b);
        assert_eq!(d.len(), 1);
        assert!(d[0].starts_with("variant"));
    }
}
